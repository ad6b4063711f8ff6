"""Separable raster filtering with exact adjoints.

Every operator in this module is linear in its array argument. The *_adjoint
functions implement the exact transpose of the corresponding forward map,
which the analytic loss gradients depend on; tests verify <Ax, y> == <x, A^T y>
to float64 precision. Boundary handling is mirror ("reflect") padding without
edge duplication throughout.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import InvalidInputError

# 5-tap binomial kernel, the base of every pyramid here.
BINOMIAL5 = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian taps truncated at radius ceil(3*sigma)."""
    if not (sigma > 0):
        raise InvalidInputError(f"sigma must be positive, got {sigma}")
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _reflect_sources(n: int, pad: int) -> np.ndarray:
    """Source index in [0, n) for each position of a reflect-padded axis."""
    if pad > n - 1:
        raise InvalidInputError(f"reflect pad {pad} needs axis length > {pad}, got {n}")
    idx = np.arange(-pad, n + pad)
    idx = np.abs(idx)                      # left mirror
    idx = np.where(idx >= n, 2 * (n - 1) - idx, idx)  # right mirror
    return idx


def conv1d_reflect(arr: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    """Correlate one axis with a symmetric kernel under reflect padding."""
    arr = np.asarray(arr, dtype=np.float64)
    taps = kernel.shape[0]
    pad = taps // 2
    moved = np.moveaxis(arr, axis, 0)
    src = _reflect_sources(moved.shape[0], pad)
    padded = moved[src]
    out = np.zeros_like(moved)
    for k in range(taps):
        out += kernel[k] * padded[k : k + moved.shape[0]]
    return np.moveaxis(out, 0, axis)


def conv1d_reflect_adjoint(grad: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    """Exact transpose of conv1d_reflect for the same kernel and axis."""
    grad = np.asarray(grad, dtype=np.float64)
    taps = kernel.shape[0]
    pad = taps // 2
    moved = np.moveaxis(grad, axis, 0)
    n = moved.shape[0]
    buf = np.zeros((n + 2 * pad,) + moved.shape[1:], dtype=np.float64)
    for k in range(taps):
        buf[k : k + n] += kernel[k] * moved
    out = np.zeros_like(moved)
    src = _reflect_sources(n, pad)
    np.add.at(out, src, buf)
    return np.moveaxis(out, 0, axis)


def blur2(arr: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Separable 2-D blur (rows then columns)."""
    return conv1d_reflect(conv1d_reflect(arr, kernel, 0), kernel, 1)


def blur2_adjoint(grad: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    return conv1d_reflect_adjoint(conv1d_reflect_adjoint(grad, kernel, 1), kernel, 0)


def downsample2(arr: np.ndarray) -> np.ndarray:
    """Keep every second sample starting at index 0, both axes."""
    return np.asarray(arr, dtype=np.float64)[::2, ::2]


def downsample2_adjoint(grad: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    out = np.zeros(shape, dtype=np.float64)
    out[::2, ::2] = grad
    return out


def grad_x(arr: np.ndarray) -> np.ndarray:
    """Centered horizontal difference, reflect boundary (edge columns become 0)."""
    a = np.asarray(arr, dtype=np.float64)
    src = _reflect_sources(a.shape[1], 1)
    p = a[:, src]
    return 0.5 * (p[:, 2:] - p[:, :-2])


def grad_x_adjoint(grad: np.ndarray) -> np.ndarray:
    g = np.asarray(grad, dtype=np.float64)
    n = g.shape[1]
    buf = np.zeros((g.shape[0], n + 2), dtype=np.float64)
    buf[:, 2:] += 0.5 * g
    buf[:, :-2] -= 0.5 * g
    out = np.zeros_like(g)
    src = _reflect_sources(n, 1)
    np.add.at(out.T, src, buf.T)
    return out


def grad_y(arr: np.ndarray) -> np.ndarray:
    """Centered vertical difference, reflect boundary."""
    return grad_x(np.asarray(arr, dtype=np.float64).T).T


def grad_y_adjoint(grad: np.ndarray) -> np.ndarray:
    return grad_x_adjoint(np.asarray(grad, dtype=np.float64).T).T
