"""Convolutional feature extractor producing the plaintext embedding."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cloud import holdout_split
from .datasets import LabeledDataset
from .errors import DatasetError, ShapeError
from .nn import Network, one_hot, specs as S, train_classifier
from .nn import io as nnio
from .nn.specs import canonical_json

MAGIC = b"OWSE"
PAPER_EMBEDDING_DIM = 2048


def default_trunk(embedding_dim: int = 64, width: int = 16) -> list[S.LayerSpec]:
    return [
        S.conv2d(width, 3, padding=1, init="he"),
        S.relu(),
        S.maxpool(2),
        S.conv2d(2 * width, 3, padding=1, init="he"),
        S.relu(),
        S.maxpool(2),
        S.conv2d(4 * width, 3, padding=1, init="he"),
        S.relu(),
        S.maxpool(2),
        S.flatten(),
        S.dense(embedding_dim, init="he"),
        S.batchnorm(),
        S.relu(),
    ]


@dataclass
class EncoderConfig:
    embedding_dim: int = 64
    width: int = 16
    epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 2e-3
    decay_rate: float = 0.95
    head_dropout: float = 0.3
    holdout_fraction: float = 0.1
    seed: int = 0
    encoder_id: str = "encoder-0"


@dataclass
class EncoderModel:
    net: Network
    encoder_id: str
    trained_on: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def input_shape(self) -> tuple[int, ...]:
        return self.net.input_shape

    @property
    def embedding_dim(self) -> int:
        return self.net.output_shape[0]

    def encode_batch(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        if images.shape[1:] != self.input_shape:
            raise ShapeError(f"encoder expects images of shape {self.input_shape}, got {images.shape[1:]}")
        return self.net.predict(images)

    def to_bytes(self) -> bytes:
        header = canonical_json({"arch": self.net.arch(), "trained_on": self.trained_on, "meta": nnio.stable_meta(self.meta)})
        return nnio.container_to_bytes(MAGIC, 0, self.encoder_id, header, self.net.state_arrays())

    @classmethod
    def from_bytes(cls, data: bytes) -> "EncoderModel":
        _, ident, header, tensors = nnio.container_from_bytes(data, MAGIC)
        h = json.loads(header)
        net = Network.from_arch(h["arch"])
        net.load_state_arrays(tensors)
        return cls(net, ident, h.get("trained_on", ""), h.get("meta", {}))

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "EncoderModel":
        return cls.from_bytes(Path(path).read_bytes())


def encode(model: EncoderModel, image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.shape != model.input_shape:
        raise ShapeError(f"encoder expects an image of shape {model.input_shape}, got {image.shape}")
    return model.net.forward(image[None])[0]


def train_encoder(dataset: LabeledDataset, config: EncoderConfig | None = None, tag: str = "") -> EncoderModel:
    """Train trunk + temporary softmax head, then keep only the trunk."""
    config = config or EncoderConfig()
    counts = np.bincount(dataset.labels, minlength=dataset.n_classes)
    if counts.min() < 10:
        raise DatasetError(f"encoder training needs at least 10 images per class (min is {counts.min()})")
    trunk = default_trunk(config.embedding_dim, config.width)
    head = [S.dropout(config.head_dropout), S.dense(dataset.n_classes, init="he"), S.softmax()]
    full = Network(trunk + head, dataset.image_shape, seed=config.seed)
    tr, ho = holdout_split(dataset.n_classes, dataset.labels, config.holdout_fraction, config.seed + 1)
    y = one_hot(dataset.labels, dataset.n_classes)
    result = train_classifier(
        full,
        dataset.images[tr],
        y[tr],
        epochs=config.epochs,
        batch_size=config.batch_size,
        learning_rate=config.learning_rate,
        decay_rate=config.decay_rate,
        seed=config.seed,
        validation=(dataset.images[ho], y[ho]),
    )
    head_acc = float(np.mean(full.predict(dataset.images[ho]).argmax(1) == dataset.labels[ho]))
    net = Network(trunk, dataset.image_shape, seed=config.seed)
    net.load_state_arrays(full.state_arrays()[: len(net.state_arrays())])
    meta = {"head_holdout_top1": head_acc, "epochs_run": result["epochs_run"], "wall_clock_s": result["wall_clock_s"]}
    return EncoderModel(net, config.encoder_id, tag, meta)


def random_encoder(
    image_shape=(32, 32, 3), embedding_dim: int = 64, seed: int = 0, encoder_id: str = "random-encoder"
) -> EncoderModel:
    """Untrained trunk with variance-preserving weights (sensitivity studies)."""
    return EncoderModel(Network(default_trunk(embedding_dim), image_shape, seed=seed), encoder_id, "random")


def paper_shape_encoder(image_shape=(32, 32, 3), seed: int = 0) -> EncoderModel:
    """Untrained encoder whose embedding has the 2048 entries used at paper scale."""
    return EncoderModel(Network(default_trunk(PAPER_EMBEDDING_DIM), image_shape, seed=seed), "paper-shape", "random")
