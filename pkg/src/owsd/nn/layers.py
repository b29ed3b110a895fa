"""Differentiable layers with hand-written backward passes.

Every layer works on a batch: the leading axis is the sample axis and the
remaining axes are the per-sample shape (images are ``H x W x C``).
"""

from __future__ import annotations

import numpy as np

from ..errors import InvalidArchitectureError, MissingForwardError
from . import functional as F
from .specs import LayerSpec

DEFAULT_INIT_STD = 0.02


class Parameter:
    """A trainable array with an optional gradient slot."""

    def __init__(self, value: np.ndarray):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Parameter(shape={self.value.shape})"


def _init_weight(spec: LayerSpec, shape, fan_in: int, rng: np.random.Generator) -> np.ndarray:
    init = spec.get("init", "normal")
    if init == "normal":
        std = spec.get("init_std", DEFAULT_INIT_STD)
    elif init == "he":
        std = np.sqrt(2.0 / fan_in)
    else:
        raise InvalidArchitectureError(f"unknown init {init!r}")
    return rng.normal(0.0, std, size=shape)


class Layer:
    kind = ""

    def __init__(self, spec: LayerSpec):
        self.spec = spec
        self.params: dict[str, Parameter] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.in_shape: tuple[int, ...] = ()
        self.out_shape: tuple[int, ...] = ()
        self._cache = None

    def build(self, in_shape: tuple[int, ...], rng: np.random.Generator) -> tuple[int, ...]:
        self.in_shape = tuple(in_shape)
        self.out_shape = self._build(self.in_shape, rng)
        return self.out_shape

    def _build(self, in_shape, rng):
        return in_shape

    def forward(self, x: np.ndarray, training: bool, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _cached(self):
        if self._cache is None:
            raise MissingForwardError(f"{self.kind}: backward called before a training forward pass")
        return self._cache


class Dense(Layer):
    kind = "dense"

    def _build(self, in_shape, rng):
        if len(in_shape) != 1:
            raise InvalidArchitectureError(f"dense expects a flat input, got {in_shape}")
        units = self.spec.get("units")
        self.params["w"] = Parameter(_init_weight(self.spec, (in_shape[0], units), in_shape[0], rng))
        self.params["b"] = Parameter(np.zeros(units))
        return (units,)

    def forward(self, x, training, rng):
        if training:
            self._cache = x
        return x @ self.params["w"].value + self.params["b"].value

    def backward(self, dy):
        x = self._cached()
        self.params["w"].grad = x.T @ dy
        self.params["b"].grad = dy.sum(axis=0)
        return dy @ self.params["w"].value.T


class Conv2D(Layer):
    kind = "conv2d"

    def _build(self, in_shape, rng):
        if len(in_shape) != 3:
            raise InvalidArchitectureError(f"conv2d expects H x W x C input, got {in_shape}")
        h, w, c = in_shape
        k, s, p = self.spec.get("kernel"), self.spec.get("stride", 1), self.spec.get("padding", 0)
        f = self.spec.get("filters")
        ho, wo = F.conv_output_size(h, k, s, p), F.conv_output_size(w, k, s, p)
        if ho < 1 or wo < 1:
            raise InvalidArchitectureError(f"conv2d kernel {k} does not fit input {h}x{w}")
        self.params["w"] = Parameter(_init_weight(self.spec, (k, k, c, f), k * k * c, rng))
        self.params["b"] = Parameter(np.zeros(f))
        return (ho, wo, f)

    def forward(self, x, training, rng):
        if training:
            self._cache = x
        s, p = self.spec.get("stride", 1), self.spec.get("padding", 0)
        return F.conv2d(x, self.params["w"].value, s, p) + self.params["b"].value

    def backward(self, dy):
        x = self._cached()
        s, p = self.spec.get("stride", 1), self.spec.get("padding", 0)
        w = self.params["w"].value
        self.params["w"].grad = F.conv2d_weight_grad(x, dy, w.shape[:2], s, p)
        self.params["b"].grad = dy.sum(axis=(0, 1, 2))
        return F.conv2d_transpose(dy, w, x.shape[1:3], s, p)


class Deconv2D(Layer):
    """Transposed convolution.

    The kernel is stored as ``(k, k, filters, c_in)``: the conv it is the
    transpose of maps ``filters`` channels to ``c_in`` channels.
    """

    kind = "deconv2d"

    def _build(self, in_shape, rng):
        if len(in_shape) != 3:
            raise InvalidArchitectureError(f"deconv2d expects H x W x C input, got {in_shape}")
        h, w, c = in_shape
        k, s, p = self.spec.get("kernel"), self.spec.get("stride", 1), self.spec.get("padding", 0)
        f = self.spec.get("filters")
        ho, wo = F.deconv_output_size(h, k, s, p), F.deconv_output_size(w, k, s, p)
        if ho < 1 or wo < 1:
            raise InvalidArchitectureError(f"deconv2d produces empty output from {h}x{w}")
        # each output pixel sees about (k/s)^2 input positions
        fan_in = max(1, (k // s) ** 2) * c
        self.params["w"] = Parameter(_init_weight(self.spec, (k, k, f, c), fan_in, rng))
        self.params["b"] = Parameter(np.zeros(f))
        return (ho, wo, f)

    def forward(self, x, training, rng):
        if training:
            self._cache = x
        s, p = self.spec.get("stride", 1), self.spec.get("padding", 0)
        w = self.params["w"].value
        return F.conv2d_transpose(x, w, self.out_shape[:2], s, p) + self.params["b"].value

    def backward(self, dy):
        x = self._cached()
        s, p = self.spec.get("stride", 1), self.spec.get("padding", 0)
        w = self.params["w"].value
        # roles swap: dy plays the conv input, x the conv output gradient
        self.params["w"].grad = F.conv2d_weight_grad(dy, x, w.shape[:2], s, p)
        self.params["b"].grad = dy.sum(axis=(0, 1, 2))
        return F.conv2d(dy, w, s, p)


class BatchNorm(Layer):
    """Normalizes over every axis but the last (channels / features)."""

    kind = "batchnorm"

    def _build(self, in_shape, rng):
        c = in_shape[-1]
        self.params["gamma"] = Parameter(np.ones(c))
        self.params["beta"] = Parameter(np.zeros(c))
        self.buffers["running_mean"] = np.zeros(c)
        self.buffers["running_var"] = np.ones(c)
        return in_shape

    def forward(self, x, training, rng):
        eps = self.spec.get("eps", 1e-5)
        gamma, beta = self.params["gamma"].value, self.params["beta"].value
        if not training:
            inv = 1.0 / np.sqrt(self.buffers["running_var"] + eps)
            return (x - self.buffers["running_mean"]) * inv * gamma + beta
        axes = tuple(range(x.ndim - 1))
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x - mean) * inv
        m = self.spec.get("momentum", 0.9)
        self.buffers["running_mean"] = m * self.buffers["running_mean"] + (1 - m) * mean
        self.buffers["running_var"] = m * self.buffers["running_var"] + (1 - m) * var
        self._cache = (xhat, inv)
        return xhat * gamma + beta

    def backward(self, dy):
        xhat, inv = self._cached()
        axes = tuple(range(dy.ndim - 1))
        count = dy.size // dy.shape[-1]
        self.params["gamma"].grad = (dy * xhat).sum(axis=axes)
        self.params["beta"].grad = dy.sum(axis=axes)
        dxhat = dy * self.params["gamma"].value
        return (inv / count) * (
            count * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes)
        )


class Dropout(Layer):
    kind = "dropout"

    def forward(self, x, training, rng):
        rate = self.spec.get("rate")
        if not training:
            return x
        if rate == 0:
            self._cache = np.ones(1)
            return x
        mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
        self._cache = mask
        return x * mask

    def backward(self, dy):
        return dy * self._cached()


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, training, rng):
        if training:
            self._cache = x > 0
        return np.maximum(x, 0.0)

    def backward(self, dy):
        return dy * self._cached()


class Tanh(Layer):
    kind = "tanh"

    def forward(self, x, training, rng):
        y = np.tanh(x)
        if training:
            self._cache = y
        return y

    def backward(self, dy):
        y = self._cached()
        return dy * (1.0 - y * y)


class Softmax(Layer):
    kind = "softmax"

    def forward(self, x, training, rng):
        p = F.softmax(x)
        if training:
            self._cache = p
        return p

    def backward(self, dy):
        p = self._cached()
        return p * (dy - (dy * p).sum(axis=-1, keepdims=True))


class Reshape(Layer):
    kind = "reshape"

    def _build(self, in_shape, rng):
        target = list(self.spec.get("shape"))
        size = int(np.prod(in_shape))
        if target.count(-1) > 1:
            raise InvalidArchitectureError("reshape allows at most one -1")
        if -1 in target:
            known = int(np.prod([d for d in target if d != -1]))
            if known == 0 or size % known:
                raise InvalidArchitectureError(f"cannot reshape {in_shape} to {target}")
            target[target.index(-1)] = size // known
        if any(d < 1 for d in target) or int(np.prod(target)) != size:
            raise InvalidArchitectureError(f"cannot reshape {in_shape} to {target}")
        return tuple(target)

    def forward(self, x, training, rng):
        if training:
            self._cache = True
        return x.reshape((x.shape[0],) + self.out_shape)

    def backward(self, dy):
        self._cached()
        return dy.reshape((dy.shape[0],) + self.in_shape)


class MaxPool(Layer):
    kind = "maxpool"

    def _build(self, in_shape, rng):
        if len(in_shape) != 3:
            raise InvalidArchitectureError(f"maxpool expects H x W x C input, got {in_shape}")
        k = self.spec.get("size", 2)
        h, w, c = in_shape
        if h % k or w % k:
            raise InvalidArchitectureError(f"maxpool size {k} does not divide {h}x{w}")
        return (h // k, w // k, c)

    def forward(self, x, training, rng):
        k = self.spec.get("size", 2)
        n, h, w, c = x.shape
        win = x.reshape(n, h // k, k, w // k, k, c).transpose(0, 1, 3, 5, 2, 4)
        win = win.reshape(n, h // k, w // k, c, k * k)
        if training:
            self._cache = win.argmax(axis=-1)
        return win.max(axis=-1)

    def backward(self, dy):
        idx = self._cached()
        k = self.spec.get("size", 2)
        n, ho, wo, c = dy.shape
        grad = np.zeros((n, ho, wo, c, k * k))
        np.put_along_axis(grad, idx[..., None], dy[..., None], axis=-1)
        grad = grad.reshape(n, ho, wo, c, k, k).transpose(0, 1, 4, 2, 5, 3)
        return grad.reshape(n, ho * k, wo * k, c)


class Residual(Layer):
    """Two same-padded 3x3 convolutions with a ReLU between, plus a skip."""

    kind = "residual"

    def _build(self, in_shape, rng):
        if len(in_shape) != 3:
            raise InvalidArchitectureError(f"residual expects H x W x C input, got {in_shape}")
        c = in_shape[2]
        for name in ("a", "b"):
            self.params["w" + name] = Parameter(_init_weight(self.spec, (3, 3, c, c), 9 * c, rng))
            self.params["b" + name] = Parameter(np.zeros(c))
        return in_shape

    def forward(self, x, training, rng):
        h = F.conv2d(x, self.params["wa"].value, 1, 1) + self.params["ba"].value
        r = np.maximum(h, 0.0)
        out = x + F.conv2d(r, self.params["wb"].value, 1, 1) + self.params["bb"].value
        if training:
            self._cache = (x, h, r)
        return out

    def backward(self, dy):
        x, h, r = self._cached()
        wa, wb = self.params["wa"].value, self.params["wb"].value
        self.params["wb"].grad = F.conv2d_weight_grad(r, dy, (3, 3), 1, 1)
        self.params["bb"].grad = dy.sum(axis=(0, 1, 2))
        dh = F.conv2d_transpose(dy, wb, r.shape[1:3], 1, 1) * (h > 0)
        self.params["wa"].grad = F.conv2d_weight_grad(x, dh, (3, 3), 1, 1)
        self.params["ba"].grad = dh.sum(axis=(0, 1, 2))
        return dy + F.conv2d_transpose(dh, wa, x.shape[1:3], 1, 1)


LAYER_TYPES = {
    cls.kind: cls
    for cls in (Dense, Conv2D, Deconv2D, BatchNorm, Dropout, ReLU, Tanh, Softmax, Reshape, MaxPool, Residual)
}


def make_layer(spec: LayerSpec) -> Layer:
    return LAYER_TYPES[spec.kind](spec)
