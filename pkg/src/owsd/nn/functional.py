"""Array-level convolution kernels (NHWC layout, float64).

Weights have shape ``(kh, kw, c_in, c_out)``. ``conv2d`` gathers patches;
``conv2d_transpose`` scatters them with the same index pattern, which makes
the two exact adjoints of one another for a shared kernel, stride and
padding.
"""

from __future__ import annotations

import numpy as np


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def deconv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size - 1) * stride + kernel - 2 * padding


def _window(i: int, n_out: int, stride: int) -> slice:
    return slice(i, i + stride * (n_out - 1) + 1, stride)


def conv2d(x: np.ndarray, w: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    n, h, wd, _ = x.shape
    kh, kw, _, c_out = w.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(wd, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ValueError(f"kernel {kh}x{kw} does not fit input {h}x{wd} with padding {padding}")
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x
    out = np.zeros((n, ho, wo, c_out))
    for i in range(kh):
        rows = _window(i, ho, stride)
        for j in range(kw):
            out += xp[:, rows, _window(j, wo, stride), :] @ w[i, j]
    return out


def conv2d_transpose(
    y: np.ndarray, w: np.ndarray, out_hw: tuple[int, int], stride: int = 1, padding: int = 0
) -> np.ndarray:
    """Adjoint of :func:`conv2d`: maps ``c_out`` channels back to ``c_in``.

    ``out_hw`` is the spatial size of the conv input being reconstructed;
    it disambiguates sizes when ``stride > 1``.
    """
    n, ho, wo, _ = y.shape
    kh, kw, c_in, _ = w.shape
    h, wd = out_hw
    xp = np.zeros((n, h + 2 * padding, wd + 2 * padding, c_in))
    for i in range(kh):
        rows = _window(i, ho, stride)
        for j in range(kw):
            xp[:, rows, _window(j, wo, stride), :] += y @ w[i, j].T
    if padding:
        return xp[:, padding : padding + h, padding : padding + wd, :]
    return xp


def conv2d_weight_grad(
    x: np.ndarray, dy: np.ndarray, kernel_shape: tuple[int, int], stride: int = 1, padding: int = 0
) -> np.ndarray:
    """Gradient of ``sum(conv2d(x, w) * dy)`` with respect to ``w``."""
    _, ho, wo, c_out = dy.shape
    kh, kw = kernel_shape
    c_in = x.shape[-1]
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x
    dw = np.empty((kh, kw, c_in, c_out))
    flat_dy = dy.reshape(-1, c_out)
    for i in range(kh):
        rows = _window(i, ho, stride)
        for j in range(kw):
            patch = xp[:, rows, _window(j, wo, stride), :].reshape(-1, c_in)
            dw[i, j] = patch.T @ flat_dy
    return dw


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)
