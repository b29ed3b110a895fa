"""Synthetic shape images, IDX ingestion, and deterministic splits."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DatasetError, FormatError

SHAPES = ("disk", "square", "triangle", "cross", "ring")
# base RGB of each colour family
COLORS = {
    "red": (0.85, 0.2, 0.15),
    "green": (0.2, 0.75, 0.25),
    "blue": (0.2, 0.3, 0.9),
    "yellow": (0.9, 0.85, 0.2),
    "magenta": (0.8, 0.2, 0.8),
    "cyan": (0.2, 0.8, 0.85),
}
SPLIT_NAMES = ("cloud_train", "encoder_train", "iin_train", "eval", "attack")


@dataclass
class LabeledDataset:
    images: np.ndarray  # (N, H, W, C) in [0, 1]
    labels: np.ndarray  # (N,) int
    label_names: list[str]
    splits: dict[str, np.ndarray] = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise DatasetError("image and label counts differ")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, ...]:
        return tuple(self.images.shape[1:])

    @property
    def n_classes(self) -> int:
        return len(self.label_names)

    def take(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.images[idx], self.labels[idx], list(self.label_names), seed=self.seed)

    def split(self, name: str) -> "LabeledDataset":
        if name not in self.splits:
            raise DatasetError(f"dataset has no split {name!r} (have {sorted(self.splits)})")
        return self.take(self.splits[name])

    def restrict(self, classes, relabel: bool = True) -> "LabeledDataset":
        """Keep only ``classes``; with ``relabel`` labels become 0..k-1 in the given order."""
        classes = list(classes)
        mask = np.isin(self.labels, classes)
        sub = self.take(np.flatnonzero(mask))
        if relabel:
            remap = {c: i for i, c in enumerate(classes)}
            sub.labels = np.array([remap[int(l)] for l in sub.labels], dtype=np.int64)
            sub.label_names = [self.label_names[c] for c in classes]
        return sub

    def per_class(self, count: int, seed: int = 0) -> "LabeledDataset":
        """First ``count`` images of each class after a seeded shuffle."""
        rng = np.random.default_rng(seed)
        picks = []
        for c in range(self.n_classes):
            idx = np.flatnonzero(self.labels == c)
            if len(idx) < count:
                raise DatasetError(f"class {c} has {len(idx)} images, need {count}")
            picks.append(rng.permutation(idx)[:count])
        return self.take(np.sort(np.concatenate(picks)))

    def image_hashes(self) -> list[str]:
        return [hashlib.sha1(np.ascontiguousarray(im).tobytes()).hexdigest() for im in self.images]

    def assign_splits(self, counts: dict[str, int], seed: int = 0) -> "LabeledDataset":
        """Stratified split: ``counts[name]`` images of every class go to ``name``."""
        rng = np.random.default_rng(seed)
        out = {name: [] for name in counts}
        for c in np.unique(self.labels):
            idx = rng.permutation(np.flatnonzero(self.labels == c))
            need = sum(counts.values())
            if len(idx) < need:
                raise DatasetError(f"class {c} has {len(idx)} images, splits need {need}")
            start = 0
            for name, n in counts.items():
                out[name].append(idx[start : start + n])
                start += n
        self.splits = {name: np.sort(np.concatenate(parts)) for name, parts in out.items()}
        return self

    def save(self, path) -> None:
        np.savez_compressed(
            path,
            images=self.images,
            labels=self.labels,
            label_names=np.array(self.label_names),
            seed=np.int64(self.seed),
            **{f"split_{k}": v for k, v in self.splits.items()},
        )

    @classmethod
    def load(cls, path) -> "LabeledDataset":
        with np.load(path, allow_pickle=False) as z:
            splits = {k[len("split_") :]: z[k] for k in z.files if k.startswith("split_")}
            return cls(z["images"], z["labels"], [str(s) for s in z["label_names"]], splits, int(z["seed"]))


def class_name(k: int) -> str:
    shape = SHAPES[k % len(SHAPES)]
    color = list(COLORS)[k // len(SHAPES)]
    return f"{color}_{shape}"


def _shape_mask(kind: str, yy, xx, cy, cx, r, angle):
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(angle), np.sin(angle)
    u, v = c * dx + s * dy, -s * dx + c * dy
    if kind == "disk":
        return dx**2 + dy**2 <= r**2
    if kind == "square":
        return (np.abs(u) <= 0.9 * r) & (np.abs(v) <= 0.9 * r)
    if kind == "triangle":
        # upward triangle in the rotated frame
        return (v <= 0.7 * r) & (v >= -r + 1.7 * np.abs(u))
    if kind == "cross":
        arm = 0.3 * r
        return ((np.abs(u) <= arm) & (np.abs(v) <= r)) | ((np.abs(v) <= arm) & (np.abs(u) <= r))
    if kind == "ring":
        d2 = dx**2 + dy**2
        return (d2 <= r**2) & (d2 >= (0.55 * r) ** 2)
    raise ValueError(kind)


def render_shape(k: int, size: int, rng: np.random.Generator, noise: float = 0.05) -> np.ndarray:
    """One image of class ``k``: a jittered coloured shape on a noisy background."""
    kind = SHAPES[k % len(SHAPES)]
    base = np.array(list(COLORS.values())[k // len(SHAPES)])
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.empty((size, size, 3))
    # muted background: grey level plus a faint tint
    img[:] = rng.uniform(0.1, 0.45) + rng.normal(scale=0.05, size=3)
    g = rng.normal(scale=0.05, size=3)
    img += (xx / size - 0.5)[..., None] * g
    # distractor blob of a random colour
    by, bx = rng.uniform(0, size, size=2)
    blob = (yy - by) ** 2 + (xx - bx) ** 2 <= rng.uniform(1.0, 2.0) ** 2
    img[blob] = rng.uniform(0, 1, size=3)
    r = rng.uniform(0.26, 0.4) * size
    cy, cx = rng.uniform(r, size - r, size=2)
    mask = _shape_mask(kind, yy, xx, cy, cx, r, rng.uniform(-0.25, 0.25))
    color = np.clip(base + rng.normal(scale=0.1, size=3), 0, 1) * rng.uniform(0.7, 1.1)
    img[mask] = color
    img += rng.normal(scale=noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_synthetic(
    n_classes: int = 10, per_class: int = 200, image_size: int = 32, seed: int = 0, noise: float = 0.05
) -> LabeledDataset:
    """Procedurally rendered shapes; class ``k`` = shape ``k % 5`` in colour family ``k // 5``.

    Each image uses its own RNG derived from ``(seed, class, index)``, so the
    output does not depend on generation order.
    """
    if not 2 <= n_classes <= len(SHAPES) * len(COLORS):
        raise DatasetError(f"n_classes must be in [2, {len(SHAPES) * len(COLORS)}]")
    if per_class < 20:
        raise DatasetError("per_class must be at least 20")
    if image_size < 8:
        raise DatasetError("image_size must be at least 8")
    images = np.empty((n_classes * per_class, image_size, image_size, 3))
    labels = np.repeat(np.arange(n_classes), per_class)
    for i, k in enumerate(labels):
        rng = np.random.default_rng([seed, int(k), i % per_class])
        images[i] = render_shape(int(k), image_size, rng, noise)
    return LabeledDataset(images, labels, [class_name(k) for k in range(n_classes)], seed=seed)


# -- IDX ---------------------------------------------------------------------

_IDX_DTYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def read_idx(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 4 or data[0] != 0 or data[1] != 0 or data[2] not in _IDX_DTYPES:
        raise FormatError(f"{path}: not an IDX file (magic mismatch)")
    dtype = np.dtype(_IDX_DTYPES[data[2]])
    ndim = data[3]
    header = 4 + 4 * ndim
    if len(data) < header:
        raise FormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    need = int(np.prod(dims)) * dtype.itemsize
    if len(data) - header < need:
        raise FormatError(f"{path}: truncated IDX payload ({len(data) - header} of {need} bytes)")
    return np.frombuffer(data[header : header + need], dtype=dtype).reshape(dims)


def write_idx(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    code = {np.dtype(v).newbyteorder("="): k for k, v in _IDX_DTYPES.items()}[arr.dtype.newbyteorder("=")]
    with open(path, "wb") as fh:
        fh.write(bytes([0, 0, code, arr.ndim]))
        fh.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        fh.write(arr.astype(_IDX_DTYPES[code]).tobytes())


def ingest_idx(images_path, labels_path, channels: int = 3) -> LabeledDataset:
    """Load an IDX image/label pair (e.g. MNIST) as a dataset in [0, 1]."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.dtype != np.uint8:
        raise FormatError("IDX images must be unsigned bytes")
    if images.ndim == 3:
        images = images[..., None]
    if images.ndim != 4:
        raise FormatError(f"IDX images must be N x H x W [x C], got {images.shape}")
    if labels.ndim != 1 or len(labels) != len(images):
        raise DatasetError(f"{len(images)} images but {len(labels)} labels")
    if images.shape[-1] == 1 and channels > 1:
        images = np.repeat(images, channels, axis=-1)
    elif images.shape[-1] != channels:
        raise DatasetError(f"cannot map {images.shape[-1]} channels to {channels}")
    labels = labels.astype(np.int64)
    n_classes = int(labels.max()) + 1 if len(labels) else 0
    return LabeledDataset(images.astype(np.float64) / 255.0, labels, [str(i) for i in range(n_classes)])
