"""A stand-in cloud classifier that returns full probability vectors."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datasets import LabeledDataset
from .errors import DatasetError, ShapeError
from .nn import Network, one_hot, specs as S, train_classifier
from .nn import io as nnio
from .nn.specs import canonical_json

log = logging.getLogger(__name__)

MAGIC = b"OWSC"


def default_cloud_arch(n_labels: int) -> list[S.LayerSpec]:
    # fan-in init: without batchnorm, 0.02-std weights train far too slowly
    return [
        S.conv2d(16, 3, padding=1, init="he"),
        S.relu(),
        S.maxpool(2),
        S.conv2d(32, 3, padding=1, init="he"),
        S.relu(),
        S.maxpool(2),
        S.flatten(),
        S.dense(128, init="he"),
        S.relu(),
        S.dense(n_labels, init="he"),
        S.softmax(),
    ]


@dataclass(frozen=True)
class ClassificationVector:
    probs: np.ndarray
    model_id: str

    def __len__(self):
        return len(self.probs)


@dataclass
class CloudConfig:
    epochs: int = 12
    batch_size: int = 64
    learning_rate: float = 2e-3
    decay_rate: float = 0.95
    holdout_fraction: float = 0.1
    accuracy_floor: float = 0.7
    seed: int = 0
    model_id: str = "cloud-cnn"


@dataclass
class CloudModel:
    net: Network
    label_names: list[str]
    model_id: str = "cloud-cnn"
    meta: dict = field(default_factory=dict)

    @property
    def input_shape(self) -> tuple[int, ...]:
        return self.net.input_shape

    @property
    def n_labels(self) -> int:
        return len(self.label_names)

    def classify_batch(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        if images.shape[1:] != self.input_shape:
            raise ShapeError(f"cloud expects images of shape {self.input_shape}, got {images.shape[1:]}")
        return self.net.predict(images)

    def classify(self, image: np.ndarray) -> ClassificationVector:
        image = np.asarray(image, dtype=np.float64)
        if image.shape != self.input_shape:
            raise ShapeError(f"cloud expects an image of shape {self.input_shape}, got {image.shape}")
        return ClassificationVector(self.net.forward(image[None])[0], self.model_id)

    def to_bytes(self) -> bytes:
        header = canonical_json({"arch": self.net.arch(), "label_names": self.label_names, "meta": nnio.stable_meta(self.meta)})
        return nnio.container_to_bytes(MAGIC, 0, self.model_id, header, self.net.state_arrays())

    @classmethod
    def from_bytes(cls, data: bytes) -> "CloudModel":
        _, ident, header, tensors = nnio.container_from_bytes(data, MAGIC)
        h = json.loads(header)
        net = Network.from_arch(h["arch"])
        net.load_state_arrays(tensors)
        return cls(net, h["label_names"], ident, h.get("meta", {}))

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "CloudModel":
        return cls.from_bytes(Path(path).read_bytes())


def holdout_split(n_labels: int, labels: np.ndarray, fraction: float, seed: int):
    """Stratified (train_idx, holdout_idx)."""
    rng = np.random.default_rng(seed)
    train, hold = [], []
    for c in range(n_labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        k = max(1, int(round(fraction * len(idx))))
        hold.append(idx[:k])
        train.append(idx[k:])
    return np.concatenate(train), np.concatenate(hold)


def train_cloud(dataset: LabeledDataset, config: CloudConfig | None = None) -> CloudModel:
    """Train the toy cloud CNN over ``dataset``'s labels.

    Falling short of ``config.accuracy_floor`` on the held-out part is
    logged and recorded in ``meta`` but does not raise.
    """
    config = config or CloudConfig()
    counts = np.bincount(dataset.labels, minlength=dataset.n_classes)
    if counts.min() < 10:
        raise DatasetError(f"cloud training needs at least 10 images per class (min is {counts.min()})")
    net = Network(default_cloud_arch(dataset.n_classes), dataset.image_shape, seed=config.seed)
    tr, ho = holdout_split(dataset.n_classes, dataset.labels, config.holdout_fraction, config.seed)
    y = one_hot(dataset.labels, dataset.n_classes)
    result = train_classifier(
        net,
        dataset.images[tr],
        y[tr],
        epochs=config.epochs,
        batch_size=config.batch_size,
        learning_rate=config.learning_rate,
        decay_rate=config.decay_rate,
        seed=config.seed,
        validation=(dataset.images[ho], y[ho]),
    )
    acc = float(np.mean(net.predict(dataset.images[ho]).argmax(1) == dataset.labels[ho]))
    meta = {
        "holdout_top1": acc,
        "accuracy_floor": config.accuracy_floor,
        "floor_met": acc >= config.accuracy_floor,
        "epochs_run": result["epochs_run"],
        "best_epoch": result["best_epoch"],
        "wall_clock_s": result["wall_clock_s"],
    }
    if not meta["floor_met"]:
        log.warning("cloud holdout top-1 %.3f is below the floor %.2f", acc, config.accuracy_floor)
    return CloudModel(net, list(dataset.label_names), config.model_id, meta)
