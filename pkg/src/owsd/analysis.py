"""Confidentiality measurements over cloud outputs and the key itself.

Everything here is a pure function of its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import OWSDError
from .scrambler import ScramblingKey, relu_activations


class DistributionError(OWSDError, ValueError):
    """A vector that should be a probability distribution is not one."""


def _check_distribution(v: np.ndarray, atol: float = 1e-6) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] < 1 or not np.isfinite(v).all():
        raise DistributionError("probability vectors must be non-empty and finite")
    if (v < -1e-12).any():
        raise DistributionError("probability vectors must be non-negative")
    if not np.allclose(v.sum(axis=-1), 1.0, atol=atol):
        raise DistributionError("probability vectors must sum to 1")
    return np.clip(v, 0.0, None)


def entropy(v: np.ndarray) -> float | np.ndarray:
    """Shannon entropy in bits; a batch of rows gives one value per row.

    ``0 log 0`` is taken as 0, so one-hot vectors have entropy exactly 0.
    """
    v = _check_distribution(v)
    terms = np.zeros_like(v)
    nz = v > 0
    terms[nz] = v[nz] * np.log2(v[nz])
    h = np.maximum(-terms.sum(axis=-1), 0.0)
    return float(h) if h.ndim == 0 else h


def topk_indices(v: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries per row, ties to the lower index."""
    return np.argsort(-np.atleast_2d(v), axis=1, kind="stable")[:, :k]


def intersection_and_reduction(plain: np.ndarray, scrambled: np.ndarray, k: int = 1) -> dict:
    """Overlap of top-k label sets and the confidence drop on plaintext's top-k.

    Args:
        plain: (N, L) cloud outputs for the original images.
        scrambled: (N, L) cloud outputs for the scrambled counterparts.
        k: size of the label sets compared.

    Returns:
        ``{"k", "intersection_rate", "mean_confidence_reduction", "pairs"}``.
        The per-pair reduction is ``(c_plain - c_scrambled) / c_plain`` over
        plaintext's top-k labels, capped at 1 and left unbounded below.
    """
    plain = np.atleast_2d(_check_distribution(plain))
    scrambled = np.atleast_2d(_check_distribution(scrambled))
    if plain.shape != scrambled.shape:
        raise ValueError(f"vector sets differ in shape: {plain.shape} vs {scrambled.shape}")
    n, n_labels = plain.shape
    if not 1 <= k <= n_labels:
        raise ValueError(f"k must lie in [1, {n_labels}], got {k}")
    tp, ts = topk_indices(plain, k), topk_indices(scrambled, k)
    overlap = np.array([len(np.intersect1d(a, b)) for a, b in zip(tp, ts)]) / k
    rows = np.arange(n)[:, None]
    c_plain = plain[rows, tp].sum(axis=1)
    c_scr = scrambled[rows, tp].sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        reduction = np.where(c_plain > 0, (c_plain - c_scr) / c_plain, 0.0)
    reduction = np.minimum(reduction, 1.0)
    return {
        "k": k,
        "intersection_rate": float(overlap.mean()),
        "mean_confidence_reduction": float(reduction.mean()),
        "pairs": int(n),
    }


@dataclass
class PCAResult:
    points: np.ndarray  # (N, 2)
    components: np.ndarray  # (2, d), unit rows (or zero rows for null directions)
    explained_variance: np.ndarray  # (2,)
    mean: np.ndarray
    groups: np.ndarray | None = None

    def project(self, x: np.ndarray) -> np.ndarray:
        return (np.atleast_2d(x) - self.mean) @ self.components.T

    def reconstruct(self, points: np.ndarray) -> np.ndarray:
        return points @ self.components + self.mean


def _power_iteration(c: np.ndarray, rng: np.random.Generator, max_iter: int, tol: float):
    v = rng.normal(size=c.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = c @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0, v
        w /= norm
        lam = float(w @ c @ w)
        if np.linalg.norm(w - v) < tol:
            v = w
            break
        v = w
    return lam, v


def principal_components(
    x: np.ndarray, n_components: int = 2, max_iter: int = 10_000, tol: float = 1e-12, seed: int = 0
):
    """Top eigenpairs of the sample covariance by power iteration and deflation.

    Each component's sign makes its largest-magnitude loading positive.
    Directions with (numerically) zero variance come back as zero vectors.
    """
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / max(1, len(x) - 1)
    scale = max(np.trace(cov), np.finfo(float).tiny)
    rng = np.random.default_rng(seed)
    comps, lams = [], []
    for _ in range(n_components):
        lam, v = _power_iteration(cov, rng, max_iter, tol)
        if lam <= 1e-12 * scale:
            comps.append(np.zeros(x.shape[1]))
            lams.append(0.0)
            continue
        v = v * np.sign(v[np.argmax(np.abs(v))])
        comps.append(v)
        lams.append(lam)
        cov = cov - lam * np.outer(v, v)
    return np.array(comps), np.array(lams), mean


def pca_2d(vectors: np.ndarray, groups=None, seed: int = 0) -> PCAResult:
    """Project onto the top two principal components of the centred data."""
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or len(x) < 3 or x.shape[1] < 2:
        raise ValueError("pca_2d needs at least 3 vectors of dimension at least 2")
    comps, lams, mean = principal_components(x, 2, seed=seed)
    points = (x - mean) @ comps.T
    return PCAResult(points, comps, lams, mean, None if groups is None else np.asarray(groups))


def separation_report(plain: np.ndarray, scrambled: np.ndarray, labels: np.ndarray, seed: int = 0) -> dict:
    """Joint 2-D projection of plaintext and scrambled vectors for two or more
    labels; reports how well each set separates by label in the plane."""
    from sklearn.linear_model import LogisticRegression
    from sklearn.metrics import silhouette_score

    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        raise ValueError("separation needs at least two labels")
    both = np.concatenate([plain, scrambled])
    result = pca_2d(both, np.concatenate([np.zeros(len(plain)), np.ones(len(scrambled))]), seed=seed)
    pts_plain, pts_scr = result.points[: len(plain)], result.points[len(plain) :]

    def linear_acc(p):
        clf = LogisticRegression().fit(p, labels)
        return float(clf.score(p, labels))

    def silhouette(p):
        if np.allclose(p, p[0]):
            return 0.0
        return float(silhouette_score(p, labels))

    return {
        "pca": result,
        "linear_accuracy_plain": linear_acc(pts_plain),
        "linear_accuracy_scrambled": linear_acc(pts_scr),
        "silhouette_plain": silhouette(pts_plain),
        "silhouette_scrambled": silhouette(pts_scr),
    }


def dead_relu_fraction(key: ScramblingKey, embeddings: np.ndarray) -> float:
    """Share of the key's ReLU outputs that are exactly zero, pooled over
    every sample and every ReLU unit."""
    acts = relu_activations(key, np.atleast_2d(embeddings))
    if not acts:
        raise ValueError("the key has no ReLU layers")
    zeros = sum(int(np.count_nonzero(a == 0.0)) for a in acts)
    total = sum(a.size for a in acts)
    return zeros / total


PAPER_DEAD_RELU_FRACTION = 0.59
