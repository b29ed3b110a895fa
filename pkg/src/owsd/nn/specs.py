"""Declarative layer descriptions.

A network architecture is an input shape plus a list of ``LayerSpec``
values. Specs serialize to canonical JSON so that an architecture can be
stored next to its weights and rebuilt bit-for-bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any

from ..errors import InvalidArchitectureError

KINDS = (
    "dense",
    "conv2d",
    "deconv2d",
    "batchnorm",
    "dropout",
    "relu",
    "tanh",
    "softmax",
    "reshape",
    "maxpool",
    "residual",
)

# option name -> whether it must be a positive int
_POSITIVE_INT = {"units", "filters", "kernel", "stride", "size"}


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    options: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidArchitectureError(f"unknown layer kind {self.kind!r}")
        for name in _POSITIVE_INT & set(self.options):
            value = self.options[name]
            if not isinstance(value, int) or value < 1:
                raise InvalidArchitectureError(
                    f"{self.kind}: option {name!r} must be a positive integer, got {value!r}"
                )
        pad = self.options.get("padding", 0)
        if not isinstance(pad, int) or pad < 0:
            raise InvalidArchitectureError(f"{self.kind}: padding must be a non-negative integer")
        if self.kind == "dropout":
            rate = self.options.get("rate")
            if not isinstance(rate, (int, float)) or not 0.0 <= rate < 1.0:
                raise InvalidArchitectureError(f"dropout rate must lie in [0, 1), got {rate!r}")
        required = {
            "dense": ("units",),
            "conv2d": ("filters", "kernel"),
            "deconv2d": ("filters", "kernel"),
            "dropout": ("rate",),
            "reshape": ("shape",),
        }.get(self.kind, ())
        missing = [name for name in required if name not in self.options]
        if missing:
            raise InvalidArchitectureError(f"{self.kind}: missing option(s) {missing}")

    def get(self, name: str, default: Any = None) -> Any:
        return self.options.get(name, default)

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, **self.options}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "LayerSpec":
        d = dict(d)
        kind = d.pop("kind")
        if "shape" in d:
            d["shape"] = list(d["shape"])
        return cls(kind, d)


def dense(units: int, **opts) -> LayerSpec:
    return LayerSpec("dense", {"units": units, **opts})


def conv2d(filters: int, kernel: int, stride: int = 1, padding: int = 0, **opts) -> LayerSpec:
    return LayerSpec(
        "conv2d", {"filters": filters, "kernel": kernel, "stride": stride, "padding": padding, **opts}
    )


def deconv2d(filters: int, kernel: int, stride: int = 1, padding: int = 0, **opts) -> LayerSpec:
    return LayerSpec(
        "deconv2d", {"filters": filters, "kernel": kernel, "stride": stride, "padding": padding, **opts}
    )


def residual(**opts) -> LayerSpec:
    """``x + conv3x3(relu(conv3x3(x)))`` with the channel count preserved."""
    return LayerSpec("residual", dict(opts))


def batchnorm(momentum: float = 0.9, eps: float = 1e-5) -> LayerSpec:
    return LayerSpec("batchnorm", {"momentum": momentum, "eps": eps})


def dropout(rate: float) -> LayerSpec:
    return LayerSpec("dropout", {"rate": rate})


def relu() -> LayerSpec:
    return LayerSpec("relu")


def tanh() -> LayerSpec:
    return LayerSpec("tanh")


def softmax() -> LayerSpec:
    return LayerSpec("softmax")


def reshape(*shape: int) -> LayerSpec:
    return LayerSpec("reshape", {"shape": list(shape)})


def flatten() -> LayerSpec:
    return reshape(-1)


def maxpool(size: int = 2) -> LayerSpec:
    return LayerSpec("maxpool", {"size": size})


def canonical_json(obj: Any) -> str:
    """Stable JSON encoding (sorted keys, no whitespace)."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def arch_to_dict(input_shape, specs) -> dict[str, Any]:
    return {"input_shape": list(input_shape), "layers": [s.to_dict() for s in specs]}


def arch_from_dict(d: dict[str, Any]):
    return tuple(d["input_shape"]), [LayerSpec.from_dict(s) for s in d["layers"]]
