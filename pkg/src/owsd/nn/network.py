"""Sequential networks built from ``LayerSpec`` chains."""

from __future__ import annotations

import hashlib
from typing import Iterable, Sequence

import numpy as np

from ..errors import InvalidArchitectureError, MissingForwardError, NonFiniteError, ShapeError
from .layers import Layer, Parameter, make_layer
from .specs import LayerSpec, arch_from_dict, arch_to_dict, canonical_json

LOSS_KINDS = ("cross_entropy", "mse")


def cross_entropy(probs: np.ndarray, target: np.ndarray) -> float:
    """Mean over samples of ``-sum(target * log(probs))``; ``0 log 0 = 0``."""
    safe = np.log(np.maximum(probs, np.finfo(np.float64).tiny))
    return float(-np.where(target > 0, target * safe, 0.0).sum() / probs.shape[0])


def half_mse(pred: np.ndarray, target: np.ndarray) -> float:
    """``0.5 * mean((pred - target)^2)`` over all elements."""
    return float(0.5 * np.mean((pred - target) ** 2))


class Network:
    """A stack of layers executed in order.

    Args:
        specs: layer descriptions, first to last.
        input_shape: per-sample input shape (no batch axis).
        seed: seeds weight initialization and, separately, the dropout stream.
    """

    def __init__(self, specs: Sequence[LayerSpec], input_shape: Iterable[int], seed: int = 0):
        self.specs = list(specs)
        self.input_shape = tuple(int(d) for d in input_shape)
        init_seq, drop_seq = np.random.SeedSequence(seed).spawn(2)
        init_rng = np.random.default_rng(init_seq)
        self.rng = np.random.default_rng(drop_seq)
        self.layers: list[Layer] = []
        shape = self.input_shape
        for idx, spec in enumerate(self.specs):
            layer = make_layer(spec)
            try:
                shape = layer.build(shape, init_rng)
            except InvalidArchitectureError as exc:
                raise InvalidArchitectureError(f"layer {idx} ({spec.kind}): {exc}") from None
            self.layers.append(layer)
        self.output_shape = shape
        self._output: np.ndarray | None = None

    @classmethod
    def from_arch(cls, arch: dict, seed: int = 0) -> "Network":
        input_shape, specs = arch_from_dict(arch)
        return cls(specs, input_shape, seed=seed)

    def arch(self) -> dict:
        return arch_to_dict(self.input_shape, self.specs)

    # -- parameters ------------------------------------------------------

    def parameters(self) -> list[Parameter]:
        return [layer.params[k] for layer in self.layers for k in sorted(layer.params)]

    def state_arrays(self) -> list[np.ndarray]:
        """Parameters and running statistics in a fixed, serializable order."""
        out = []
        for layer in self.layers:
            out.extend(layer.params[k].value for k in sorted(layer.params))
            out.extend(layer.buffers[k] for k in sorted(layer.buffers))
        return out

    def load_state_arrays(self, arrays: Sequence[np.ndarray]) -> None:
        arrays = list(arrays)
        expected = len(self.state_arrays())
        if len(arrays) != expected:
            raise ShapeError(f"expected {expected} state arrays, got {len(arrays)}")
        it = iter(arrays)
        for idx, layer in enumerate(self.layers):
            for k in sorted(layer.params):
                arr = np.asarray(next(it), dtype=np.float64)
                if arr.shape != layer.params[k].shape:
                    raise ShapeError(
                        f"layer {idx} ({layer.kind}) param {k}: expected {layer.params[k].shape}, got {arr.shape}"
                    )
                layer.params[k].value = arr.copy()
            for k in sorted(layer.buffers):
                arr = np.asarray(next(it), dtype=np.float64)
                if arr.shape != layer.buffers[k].shape:
                    raise ShapeError(f"layer {idx} ({layer.kind}) buffer {k}: shape mismatch")
                layer.buffers[k] = arr.copy()

    def fingerprint(self) -> str:
        """SHA-256 over the architecture and every state array."""
        h = hashlib.sha256(canonical_json(self.arch()).encode())
        for arr in self.state_arrays():
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()

    # -- execution ---------------------------------------------------------

    def forward(
        self, x: np.ndarray, training: bool = False, rng: np.random.Generator | None = None
    ) -> np.ndarray:
        """Run the stack on a batch ``x`` of shape ``(N, *input_shape)``.

        In inference mode nothing on the network is mutated, so concurrent
        calls on shared weights are safe.
        """
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != self.input_shape:
            raise ShapeError(
                f"input: expected per-sample shape {self.input_shape}, got {x.shape[1:]}"
            )
        rng = self.rng if rng is None else rng
        for idx, layer in enumerate(self.layers):
            x = layer.forward(x, training, rng)
            if not np.isfinite(x).all():
                raise NonFiniteError(f"layer {idx} ({layer.kind}) produced non-finite values")
        if training:
            self._output = x
        return x

    def predict(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if len(x) <= batch_size:
            return self.forward(x)
        return np.concatenate([self.forward(x[i : i + batch_size]) for i in range(0, len(x), batch_size)])

    def backward(self, loss_kind: str, target: np.ndarray) -> float:
        """Compute the loss of the last training forward pass and fill every
        parameter's ``grad``. Returns the scalar loss."""
        if self._output is None:
            raise MissingForwardError("backward called before a training-mode forward pass")
        out = self._output
        target = np.asarray(target, dtype=np.float64)
        if target.shape != out.shape:
            raise ShapeError(f"target shape {target.shape} does not match output {out.shape}")
        layers = self.layers
        if loss_kind == "cross_entropy":
            if not layers or layers[-1].kind != "softmax":
                raise InvalidArchitectureError("cross_entropy requires a final softmax layer")
            loss = cross_entropy(out, target)
            # softmax + CE fused: dL/dlogits = (p - y) / N
            grad = (out - target) / out.shape[0]
            layers = layers[:-1]
        elif loss_kind == "mse":
            loss = half_mse(out, target)
            grad = (out - target) / out.size
        else:
            raise ValueError(f"unknown loss kind {loss_kind!r}; expected one of {LOSS_KINDS}")
        for idx in range(len(layers) - 1, -1, -1):
            grad = layers[idx].backward(grad)
        for p in self.parameters():
            if p.grad is None or not np.isfinite(p.grad).all():
                raise NonFiniteError("non-finite or missing gradient after backward")
        self._output = None
        for layer in self.layers:
            layer._cache = None
        return loss

    def backward_from(self, grad_output: np.ndarray) -> np.ndarray:
        """Backpropagate an arbitrary output gradient; returns dL/dinput."""
        if self._output is None:
            raise MissingForwardError("backward called before a training-mode forward pass")
        grad = np.asarray(grad_output, dtype=np.float64)
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        self._output = None
        return grad

    def __repr__(self):
        kinds = ", ".join(s.kind for s in self.specs)
        return f"Network({self.input_shape} -> {self.output_shape}: {kinds})"
