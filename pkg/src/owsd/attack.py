"""Reconstruction attack: an adversary holding original/scrambled pairs trains
an autoencoder to invert the key.

The same autoencoder is trained twice per repetition: once mapping originals
to themselves (the achievable floor) and once mapping scrambled images back to
originals. A key resists the attack when the second error stays well above the
first at the same pair budget.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DatasetError
from .nn import Network, specs as S, train_classifier

log = logging.getLogger(__name__)


@dataclass
class AttackConfig:
    downsample: int = 2  # 32 x 32 -> 16 x 16, a quarter of the pixels
    width: int = 16
    residual_blocks: int = 0
    epochs: int = 15
    batch_size: int = 32
    learning_rate: float = 2e-3
    decay_rate: float = 0.95
    test_fraction: float = 0.1
    repetitions: int = 2
    seed: int = 0


@dataclass
class AttackReport:
    pair_count: int
    mse_original: float
    mse_scrambled: float
    std_original: float
    std_scrambled: float
    mean_predictor_mse: float
    per_repetition: list[dict] = field(default_factory=list)
    grid_paths: list[str] = field(default_factory=list)

    @property
    def ratio(self) -> float:
        return self.mse_scrambled / self.mse_original if self.mse_original > 0 else float("inf")

    def to_dict(self) -> dict:
        return {**asdict(self), "ratio": self.ratio}


def downsample(images: np.ndarray, factor: int) -> np.ndarray:
    """Average-pool ``factor x factor`` blocks."""
    if factor == 1:
        return np.asarray(images, dtype=np.float64)
    n, h, w, c = images.shape
    if h % factor or w % factor:
        raise ValueError(f"{h}x{w} images do not divide by {factor}")
    return images.reshape(n, h // factor, factor, w // factor, factor, c).mean(axis=(2, 4))


def autoencoder_arch(width: int = 16, residual_blocks: int = 0, channels: int = 3) -> list[S.LayerSpec]:
    """Three stride-2 conv blocks down, three stride-2 deconv blocks up."""
    down = []
    for mult in (1, 2, 4):
        down += [S.conv2d(width * mult, 4, stride=2, padding=1, init="he"), S.relu()]
    mid = [S.residual(init="he") for _ in range(residual_blocks)]
    up = []
    for mult in (2, 1):
        up += [S.deconv2d(width * mult, 4, stride=2, padding=1, init="he"), S.relu()]
    up += [S.deconv2d(channels, 4, stride=2, padding=1, init="he")]
    return down + mid + up


def _split(n: int, test_fraction: float, rng: np.random.Generator):
    order = rng.permutation(n)
    n_test = max(1, int(round(test_fraction * n)))
    return order[n_test:], order[:n_test]


def _fit(x_tr, y_tr, x_te, y_te, config: AttackConfig, seed: int):
    net = Network(autoencoder_arch(config.width, config.residual_blocks, y_tr.shape[-1]), x_tr.shape[1:], seed=seed)
    train_classifier(
        net,
        x_tr,
        y_tr,
        epochs=config.epochs,
        batch_size=config.batch_size,
        learning_rate=config.learning_rate,
        decay_rate=config.decay_rate,
        seed=seed,
        loss="mse",
    )
    recon = net.predict(x_te)
    return float(np.mean((recon - y_te) ** 2)), recon


def save_grid(path, rows: list[np.ndarray], titles: list[str]) -> str:
    """Write image rows (each ``n x H x W x C``) as one PNG or SVG grid."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    n = len(rows[0])
    fig, axes = plt.subplots(len(rows), n, figsize=(1.2 * n, 1.3 * len(rows)), squeeze=False)
    for r, (imgs, title) in enumerate(zip(rows, titles)):
        for c in range(n):
            ax = axes[r][c]
            ax.imshow(np.clip(imgs[c], 0, 1), interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
        axes[r][0].set_ylabel(title, fontsize=7)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return str(path)


def run_attack(
    scrambled: np.ndarray,
    originals: np.ndarray,
    pair_count: int | None = None,
    config: AttackConfig | None = None,
    out_dir=None,
) -> AttackReport:
    """Train both autoencoder conditions on the first ``pair_count`` pairs.

    Args:
        scrambled: (N, H, W, C) scrambled images, pixel values in [0, 1].
        originals: (N, H, W, C) matching plaintext images.
        pair_count: pairs used; all of them by default.
        config: architecture and training schedule shared by both conditions.
        out_dir: if given, a reconstruction grid per repetition is written here.
    """
    config = config or AttackConfig()
    scrambled = np.asarray(scrambled, dtype=np.float64)
    originals = np.asarray(originals, dtype=np.float64)
    if scrambled.shape != originals.shape:
        raise ValueError(f"pair arrays differ in shape: {scrambled.shape} vs {originals.shape}")
    available = len(originals)
    pair_count = available if pair_count is None else pair_count
    if pair_count > available or pair_count < 10:
        raise DatasetError(f"attack needs between 10 and {available} pairs, asked for {pair_count}")
    xs = downsample(scrambled[:pair_count], config.downsample)
    xo = downsample(originals[:pair_count], config.downsample)
    rng = np.random.default_rng(config.seed)
    reps, grids = [], []
    for rep in range(config.repetitions):
        tr, te = _split(pair_count, config.test_fraction, rng)
        seed = config.seed * 1000 + rep
        mse_o, rec_o = _fit(xo[tr], xo[tr], xo[te], xo[te], config, seed)
        mse_s, rec_s = _fit(xs[tr], xo[tr], xs[te], xo[te], config, seed)
        baseline = float(np.mean((xo[te] - xo[tr].mean(axis=0)) ** 2))
        reps.append({"mse_original": mse_o, "mse_scrambled": mse_s, "mean_predictor_mse": baseline})
        log.info("attack repetition %d: original %.5f scrambled %.5f", rep, mse_o, mse_s)
        if out_dir is not None:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            k = min(8, len(te))
            grids.append(
                save_grid(
                    Path(out_dir) / f"attack_grid_rep{rep}.png",
                    [xo[te][:k], xs[te][:k], rec_o[:k], rec_s[:k]],
                    ["original", "scrambled", "from original", "from scrambled"],
                )
            )
    mo = np.array([r["mse_original"] for r in reps])
    ms = np.array([r["mse_scrambled"] for r in reps])
    return AttackReport(
        pair_count=pair_count,
        mse_original=float(mo.mean()),
        mse_scrambled=float(ms.mean()),
        std_original=float(mo.std()),
        std_scrambled=float(ms.std()),
        mean_predictor_mse=float(np.mean([r["mean_predictor_mse"] for r in reps])),
        per_repetition=reps,
        grid_paths=grids,
    )
