"""Internal Inference Network: embedding plus cloud vectors to confidential labels."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DatasetError, ShapeError
from .nn import Network, one_hot, specs as S, train_classifier
from .nn import io as nnio
from .nn.specs import canonical_json

MAGIC = b"OWSI"


@dataclass
class IINConfig:
    learning_rate: float = 1e-4
    decay_rate: float = 0.95
    max_epochs: int = 40
    patience: int = 5
    dropout: float = 0.5
    hidden_width: int = 256
    batch_size: int = 64
    validation_fraction: float = 0.1
    seed: int = 0
    metrics_path: str | None = None

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be at least 1")


def iin_arch(input_dim: int, n_labels: int, hidden_width: int = 256, dropout: float = 0.5) -> dict:
    layers = [
        S.dense(hidden_width),
        S.batchnorm(),
        S.relu(),
        S.dropout(dropout),
        S.dense(n_labels),
        S.softmax(),
    ]
    return S.arch_to_dict((input_dim,), layers)


@dataclass
class IINModel:
    net: Network
    label_names: list[str]
    embedding_dim: int
    vector_dims: list[int]
    meta: dict = field(default_factory=dict)

    @property
    def input_dim(self) -> int:
        return self.embedding_dim + sum(self.vector_dims)

    @property
    def n_labels(self) -> int:
        return len(self.label_names)

    def to_bytes(self) -> bytes:
        header = canonical_json(
            {
                "arch": self.net.arch(),
                "label_names": self.label_names,
                "embedding_dim": self.embedding_dim,
                "vector_dims": self.vector_dims,
                "meta": nnio.stable_meta(self.meta),
            }
        )
        return nnio.container_to_bytes(MAGIC, int(self.meta.get("seed", 0)), "iin", header, self.net.state_arrays())

    @classmethod
    def from_bytes(cls, data: bytes) -> "IINModel":
        _, _, header, tensors = nnio.container_from_bytes(data, MAGIC)
        h = json.loads(header)
        net = Network.from_arch(h["arch"])
        net.load_state_arrays(tensors)
        return cls(net, h["label_names"], h["embedding_dim"], h["vector_dims"], h.get("meta", {}))

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "IINModel":
        return cls.from_bytes(Path(path).read_bytes())


def assemble_inputs(embeddings: np.ndarray, vectors: Sequence[np.ndarray]) -> np.ndarray:
    """Concatenate embeddings with each ensemble member's cloud vectors, in order."""
    embeddings = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    parts = [embeddings]
    for i, v in enumerate(vectors):
        v = np.atleast_2d(np.asarray(v, dtype=np.float64))
        if len(v) != len(embeddings):
            raise ShapeError(f"cloud vector set {i} has {len(v)} rows, embeddings have {len(embeddings)}")
        parts.append(v)
    return np.concatenate(parts, axis=1)


def validation_split(labels: np.ndarray, fraction: float, rng: np.random.Generator):
    """Stratified: classes are interleaved before the validation head is cut."""
    per_class = [rng.permutation(np.flatnonzero(labels == c)) for c in np.unique(labels)]
    interleaved = [idx[i] for i in range(max(len(p) for p in per_class)) for idx in per_class if i < len(idx)]
    n_val = max(1, int(round(fraction * len(labels))))
    order = np.array(interleaved)
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def train_iin(
    embeddings: np.ndarray,
    vectors: Sequence[np.ndarray],
    labels: np.ndarray,
    config: IINConfig | None = None,
    label_names: Sequence[str] | None = None,
    binding: dict | None = None,
) -> IINModel:
    """Fit the IIN on ``(embedding ++ vectors[0] ++ vectors[1] ..., label)`` rows.

    ``binding`` records which key/encoders/cloud produced the vectors; the
    pipeline uses it to detect a stale model after key rotation.
    """
    config = config or IINConfig()
    labels = np.asarray(labels, dtype=np.int64)
    x = assemble_inputs(embeddings, vectors)
    if len(labels) != len(x):
        raise ShapeError(f"{len(x)} inputs but {len(labels)} labels")
    n_labels = len(label_names) if label_names is not None else int(labels.max()) + 1
    if len(np.unique(labels)) < 2:
        raise DatasetError("IIN training needs at least two distinct labels")
    if labels.min() < 0 or labels.max() >= n_labels:
        raise DatasetError("labels fall outside the label set")
    names = list(label_names) if label_names is not None else [str(i) for i in range(n_labels)]
    rng = np.random.default_rng(config.seed)
    tr, va = validation_split(labels, config.validation_fraction, rng)
    arch = iin_arch(x.shape[1], n_labels, config.hidden_width, config.dropout)
    net = Network.from_arch(arch, seed=config.seed)
    y = one_hot(labels, n_labels)
    result = train_classifier(
        net,
        x[tr],
        y[tr],
        epochs=config.max_epochs,
        batch_size=config.batch_size,
        learning_rate=config.learning_rate,
        decay_rate=config.decay_rate,
        seed=config.seed,
        validation=(x[va], y[va]),
        patience=config.patience,
    )
    if config.metrics_path:
        Path(config.metrics_path).write_text(json.dumps({"config": asdict(config), **result}, indent=2))
    meta = {
        "seed": config.seed,
        "epochs_run": result["epochs_run"],
        "best_epoch": result["best_epoch"],
        "best_val_loss": result["best_val_loss"],
        "val_losses": [h["val_loss"] for h in result["history"]],
        "wall_clock_s": result["wall_clock_s"],
        "n_train": int(len(tr)),
        "n_val": int(len(va)),
        **(binding or {}),
    }
    dims = [np.atleast_2d(v).shape[1] for v in vectors]
    return IINModel(net, names, np.atleast_2d(embeddings).shape[1], dims, meta)


def iin_predict(model: IINModel, embedding: np.ndarray, vectors: Sequence[np.ndarray]) -> np.ndarray:
    """Label distribution(s); accepts a single row or a batch."""
    single = np.asarray(embedding).ndim == 1
    x = assemble_inputs(embedding, vectors)
    if x.shape[1] != model.input_dim:
        raise ShapeError(f"IIN expects {model.input_dim} input features, got {x.shape[1]}")
    out = model.net.predict(x)
    return out[0] if single else out


def topk_accuracy(predictions: np.ndarray, truths: np.ndarray, k: int) -> float:
    """Fraction of rows whose true label ranks in the top ``k``.

    Ranking is by probability, with ties going to the lower label index.
    """
    predictions = np.atleast_2d(np.asarray(predictions, dtype=np.float64))
    truths = np.asarray(truths, dtype=np.int64)
    n_labels = predictions.shape[1]
    if not 1 <= k <= n_labels:
        raise ValueError(f"k must lie in [1, {n_labels}], got {k}")
    p_true = predictions[np.arange(len(truths)), truths][:, None]
    idx = np.arange(n_labels)[None, :]
    ahead = (predictions > p_true) | ((predictions == p_true) & (idx < truths[:, None]))
    return float(np.mean(ahead.sum(axis=1) < k))
