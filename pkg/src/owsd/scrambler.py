"""The scrambling key: a frozen, randomly initialized deconvolutional generator.

The key's weights are a pure function of ``(seed, arch)``. Scrambling runs
the generator in inference mode and maps its final ``tanh`` into ``[0, 1]``.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidArchitectureError, ShapeError
from .nn import Network, specs as S
from .nn import io as nnio
from .nn.specs import arch_from_dict, arch_to_dict, canonical_json

MAGIC = b"OWSK"


def _he(spec: S.LayerSpec) -> S.LayerSpec:
    return S.LayerSpec(spec.kind, {**spec.options, "init": "he"})


def generator_arch(
    embedding_dim: int = 64,
    seed_volume: tuple[int, int, int] = (4, 4, 128),
    filters: tuple[int, ...] = (64, 32),
    channels: int = 3,
    output_init_std: float = 0.02,
) -> dict:
    """Dense projection to a seed volume, then stride-2 deconvolutions, each
    doubling the spatial size, with ReLU between blocks and tanh at the end.

    Hidden layers use fan-in scaled weights so the signal survives without
    batchnorm; the output layer keeps the small N(0, 0.02) draw, which keeps
    the tanh out of saturation.
    """
    h, w, f = seed_volume
    layers = [_he(S.dense(h * w * f)), S.reshape(h, w, f), S.relu()]
    for nf in filters:
        layers += [_he(S.deconv2d(nf, 4, stride=2, padding=1)), S.relu()]
    layers += [S.deconv2d(channels, 4, stride=2, padding=1, init_std=output_init_std), S.tanh()]
    return arch_to_dict((embedding_dim,), layers)


def toy_arch() -> dict:
    """64-entry embedding -> 32 x 32 x 3 image."""
    return generator_arch(64, (4, 4, 128), (64, 32), 3)


def paper_shape_arch() -> dict:
    """2048-entry embedding -> 256 x 256 x 3 image (shape parity only)."""
    return generator_arch(2048, (4, 4, 64), (32, 32, 16, 16, 8), 3)


@dataclass(frozen=True)
class ScrambledImage:
    pixels: np.ndarray  # H x W x C in [0, 1]
    key_id: str


@dataclass
class ScramblingKey:
    key_id: str
    seed: int
    arch: dict
    net: Network = field(repr=False)
    created_at: float = field(default_factory=time.time)

    @property
    def embedding_dim(self) -> int:
        return self.net.input_shape[0]

    @property
    def image_shape(self) -> tuple[int, ...]:
        return self.net.output_shape

    def weights(self) -> list[np.ndarray]:
        return self.net.state_arrays()

    def fingerprint(self) -> str:
        return self.net.fingerprint()

    def to_bytes(self) -> bytes:
        return nnio.container_to_bytes(MAGIC, self.seed, self.key_id, canonical_json(self.arch), self.weights())

    @classmethod
    def from_bytes(cls, data: bytes) -> "ScramblingKey":
        seed, key_id, header, tensors = nnio.container_from_bytes(data, MAGIC)
        arch = json.loads(header)
        key = _build(key_id, seed, arch)
        stored = [np.asarray(t) for t in tensors]
        if len(stored) != len(key.weights()) or any(
            a.shape != b.shape for a, b in zip(stored, key.weights())
        ):
            raise FormatError("key weights do not match the stored architecture")
        key.net.load_state_arrays(stored)
        return key

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ScramblingKey":
        return cls.from_bytes(Path(path).read_bytes())


def _build(key_id: str, seed: int, arch: dict) -> ScramblingKey:
    input_shape, specs = arch_from_dict(arch)
    if any(s.kind in ("dropout", "batchnorm") for s in specs):
        raise InvalidArchitectureError("a scrambling key must be a static function (no dropout/batchnorm)")
    net = Network(specs, input_shape, seed=seed)
    if len(input_shape) != 1 or len(net.output_shape) != 3:
        raise InvalidArchitectureError(
            f"generator must map a flat embedding to H x W x C, got {input_shape} -> {net.output_shape}"
        )
    if specs[-1].kind != "tanh":
        raise InvalidArchitectureError("generator must end in tanh")
    return ScramblingKey(key_id, seed, arch, net)


def key_id_for(seed: int, arch: dict) -> str:
    digest = hashlib.sha256(canonical_json(arch).encode()).hexdigest()[:12]
    return f"key-{seed}-{digest}"


def generate_key(seed: int, arch: dict | None = None) -> ScramblingKey:
    """Deterministic: the same ``(seed, arch)`` always yields identical weights."""
    if not 0 <= seed < 2**64:
        raise ValueError("seed must be an unsigned 64-bit integer")
    arch = arch or toy_arch()
    return _build(key_id_for(seed, arch), seed, arch)


def _check_embeddings(key: ScramblingKey, embeddings: np.ndarray) -> np.ndarray:
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if embeddings.ndim != 2 or embeddings.shape[1] != key.embedding_dim:
        raise ShapeError(f"key {key.key_id} expects embeddings of length {key.embedding_dim}, got {embeddings.shape}")
    return embeddings


def scramble_pixels(key: ScramblingKey, embeddings: np.ndarray) -> np.ndarray:
    """Batch form: ``(N, E)`` embeddings -> ``(N, H, W, C)`` pixels in [0, 1]."""
    out = key.net.predict(_check_embeddings(key, embeddings))
    return np.clip((out + 1.0) / 2.0, 0.0, 1.0)


def scramble(key: ScramblingKey, embedding: np.ndarray) -> ScrambledImage:
    return ScrambledImage(scramble_pixels(key, np.asarray(embedding)[None])[0], key.key_id)


def scramble_batch(key: ScramblingKey, embeddings: np.ndarray) -> list[ScrambledImage]:
    return [ScrambledImage(p, key.key_id) for p in scramble_pixels(key, embeddings)]


def relu_activations(key: ScramblingKey, embeddings: np.ndarray) -> list[np.ndarray]:
    """Outputs of every ReLU in the generator for a batch of embeddings."""
    x = _check_embeddings(key, embeddings)
    outs = []
    for layer in key.net.layers:
        x = layer.forward(x, False, key.net.rng)
        if layer.kind == "relu":
            outs.append(x)
    return outs
