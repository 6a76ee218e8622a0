"""Differentiable building blocks with hand-written backward passes.

Every ``*_fwd`` has a matching ``*_bwd`` that recomputes what it needs from
the forward inputs. Convolutions use zero padding and no dilation or groups.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ShapeError
from .tensor import Rng, rand_normal


@dataclass
class Conv2dParams:
    weight: np.ndarray  # [C_out, C_in, k, k]
    bias: np.ndarray  # [C_out]
    stride: int = 1
    padding: int = 0

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[-1]

    def zeros_like(self) -> "Conv2dParams":
        return replace(self, weight=np.zeros_like(self.weight), bias=np.zeros_like(self.bias))


@dataclass
class LinearParams:
    weight: np.ndarray  # [out, in]
    bias: np.ndarray  # [out]

    def zeros_like(self) -> "LinearParams":
        return LinearParams(np.zeros_like(self.weight), np.zeros_like(self.bias))


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _conv_geometry(x: np.ndarray, p: Conv2dParams):
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects a rank-4 input, got shape {x.shape}")
    c_out, c_in, k, k2 = p.weight.shape
    if k != k2:
        raise ShapeError("only square kernels are supported")
    if x.shape[1] != c_in:
        raise ShapeError(f"input has {x.shape[1]} channels, weight expects {c_in}")
    if p.bias.shape != (c_out,):
        raise ShapeError(f"bias shape {p.bias.shape} does not match {c_out} outputs")
    if p.stride < 1 or p.padding < 0:
        raise ShapeError("stride must be >= 1 and padding >= 0")
    ho = conv_output_size(x.shape[2], k, p.stride, p.padding)
    wo = conv_output_size(x.shape[3], k, p.stride, p.padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"input {x.shape[2:]} too small for kernel {k}")
    return ho, wo


def _im2col(x: np.ndarray, p: Conv2dParams, ho: int, wo: int) -> np.ndarray:
    """Columns ``[k * k * C, N * Ho * Wo]``, tap-major, over the zero-padded input."""
    n, c = x.shape[:2]
    k, s, pad = p.kernel_size, p.stride, p.padding
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    xt = xp.transpose(1, 0, 2, 3)
    cols = np.empty((k, k, c, n, ho, wo), dtype=x.dtype)
    for u in range(k):
        for v in range(k):
            cols[u, v] = xt[:, :, u:u + s * (ho - 1) + 1:s, v:v + s * (wo - 1) + 1:s]
    return cols.reshape(k * k * c, n * ho * wo)


def _weight_matrix(p: Conv2dParams) -> np.ndarray:
    """Weights as ``[C_out, k * k * C]`` matching the im2col row order."""
    return p.weight.transpose(0, 2, 3, 1).reshape(p.weight.shape[0], -1)


def conv2d_fwd(x: np.ndarray, p: Conv2dParams, cache=None) -> np.ndarray:
    """Cross-correlation with zero padding.

    A dict passed as ``cache`` keeps the im2col columns for ``conv2d_bwd``.
    """
    ho, wo = _conv_geometry(x, p)
    cols = _im2col(x, p, ho, wo)
    if cache is not None:
        cache["cols"] = cols
    out = _weight_matrix(p) @ cols + p.bias[:, None]
    return np.ascontiguousarray(out.reshape(-1, x.shape[0], ho, wo).transpose(1, 0, 2, 3))


def flush_subnormals(a: np.ndarray) -> np.ndarray:
    """Copy of ``a`` with subnormal entries set to zero.

    Tiny gradients from saturated units underflow to subnormals, and BLAS runs
    several times slower on them. Their contribution is below the smallest
    normal number, so dropping them is harmless.
    """
    return np.where(np.abs(a) < np.finfo(a.dtype).tiny, a.dtype.type(0), a)


def conv2d_bwd(x: np.ndarray, p: Conv2dParams, grad_out: np.ndarray, cache=None):
    """Return ``(grad_x, grad_params)`` where ``grad_params`` mirrors ``p``."""
    ho, wo = _conv_geometry(x, p)
    n, c = x.shape[:2]
    c_out, k = p.weight.shape[0], p.kernel_size
    if grad_out.shape != (n, c_out, ho, wo):
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward output {(n, c_out, ho, wo)}")
    s, pad = p.stride, p.padding
    cols = cache["cols"] if cache else _im2col(x, p, ho, wo)

    g2 = flush_subnormals(grad_out).transpose(1, 0, 2, 3).reshape(c_out, -1)
    grad_w = (g2 @ cols.T).reshape(c_out, k, k, c).transpose(0, 3, 1, 2)
    grad_b = g2.sum(axis=1)
    grad_cols = (_weight_matrix(p).T @ g2).reshape(k, k, c, n, ho, wo)

    hp, wp = x.shape[2] + 2 * pad, x.shape[3] + 2 * pad
    gxp = np.zeros((c, n, hp, wp), dtype=x.dtype)
    for u in range(k):
        for v in range(k):
            gxp[:, :, u:u + s * (ho - 1) + 1:s, v:v + s * (wo - 1) + 1:s] += grad_cols[u, v]
    grad_x = gxp[:, :, pad:pad + x.shape[2], pad:pad + x.shape[3]].transpose(1, 0, 2, 3)
    return np.ascontiguousarray(grad_x), replace(p, weight=np.ascontiguousarray(grad_w), bias=grad_b)


def linear_fwd(x: np.ndarray, p: LinearParams) -> np.ndarray:
    if x.ndim != 2 or x.shape[1] != p.weight.shape[1]:
        raise ShapeError(f"linear expects [N, {p.weight.shape[1]}], got {x.shape}")
    return x @ p.weight.T + p.bias


def linear_bwd(x: np.ndarray, p: LinearParams, grad_out: np.ndarray):
    if grad_out.shape != (x.shape[0], p.weight.shape[0]):
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match linear output")
    return grad_out @ p.weight, LinearParams(grad_out.T @ x, grad_out.sum(axis=0))


def sigmoid(x: np.ndarray) -> np.ndarray:
    # exp only ever sees nonpositive arguments
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(np.result_type(x, np.float32))


def activation(kind: str, x: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.maximum(x, 0)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def activation_bwd(kind: str, x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return grad_out * (x > 0)
    if kind == "sigmoid":
        s = sigmoid(x)
        return grad_out * s * (1 - s)
    raise ValueError(f"unknown activation {kind!r}")


def gap_fwd(x: np.ndarray) -> np.ndarray:
    """Global average pooling ``[N, C, H, W] -> [N, C]``."""
    return x.mean(axis=(2, 3), dtype=np.float64).astype(x.dtype)


def gap_bwd(x_shape, grad_out: np.ndarray) -> np.ndarray:
    n, c, h, w = x_shape
    return np.broadcast_to(grad_out[:, :, None, None] / (h * w), x_shape).copy()


def bilinear_corners(py: np.ndarray, px: np.ndarray, height: int, width: int):
    """Corner indices and weights for zero-padded bilinear sampling.

    The cell is chosen as ``[ceil(p) - 1, ceil(p)]`` along each axis, so an
    exact lattice coordinate sits at the right edge of its cell with weight 1.
    Values are unaffected by this choice; coordinate derivatives at lattice
    points come from the left cell.

    Returns ``(y0, x0, ly, lx, valid)`` where ``valid`` has a trailing axis of 4
    for the corners (y0,x0), (y0,x1), (y1,x0), (y1,x1).
    """
    y0 = np.ceil(py) - 1
    x0 = np.ceil(px) - 1
    ly = py - y0
    lx = px - x0
    y0 = y0.astype(np.int64)
    x0 = x0.astype(np.int64)
    vy0 = (y0 >= 0) & (y0 < height)
    vy1 = (y0 + 1 >= 0) & (y0 + 1 < height)
    vx0 = (x0 >= 0) & (x0 < width)
    vx1 = (x0 + 1 >= 0) & (x0 + 1 < width)
    valid = np.stack([vy0 & vx0, vy0 & vx1, vy1 & vx0, vy1 & vx1], axis=-1)
    return y0, x0, ly, lx, valid


def bilinear_sample(x: np.ndarray, px: float, py: float, n: int, c: int) -> float:
    """Sample channel ``c`` of batch item ``n`` at fractional (py, px)."""
    height, width = x.shape[2], x.shape[3]
    y0, x0, ly, lx, valid = bilinear_corners(np.float64(py), np.float64(px), height, width)
    y0, x0 = int(y0), int(x0)
    corners = [(y0, x0, (1 - ly) * (1 - lx)), (y0, x0 + 1, (1 - ly) * lx),
               (y0 + 1, x0, ly * (1 - lx)), (y0 + 1, x0 + 1, ly * lx)]
    total = 0.0
    for ok, (yy, xx, wgt) in zip(valid, corners):
        if ok:
            total += wgt * float(x[n, c, yy, xx])
    return total


def _upsample_matrix(size: int, factor: int, dtype) -> np.ndarray:
    out = np.zeros((size * factor, size), dtype=np.float64)
    for i in range(size * factor):
        src = max((i + 0.5) / factor - 0.5, 0.0)
        lo = min(int(math.floor(src)), size - 1)
        hi = min(lo + 1, size - 1)
        frac = src - lo
        out[i, lo] += 1.0 - frac
        out[i, hi] += frac
    return out.astype(dtype)


def upsample_bilinear(x: np.ndarray, factor: int) -> np.ndarray:
    """Bilinear upsampling, half-pixel centers, edge-clamped source coordinates."""
    if factor < 1:
        raise ValueError("upsample factor must be >= 1")
    if factor == 1:
        return x.copy()
    ah = _upsample_matrix(x.shape[2], factor, x.dtype)
    aw = _upsample_matrix(x.shape[3], factor, x.dtype)
    return np.ascontiguousarray(ah @ x @ aw.T)


def upsample_bilinear_bwd(x_shape, factor: int, grad_out: np.ndarray) -> np.ndarray:
    if factor == 1:
        return grad_out.copy()
    ah = _upsample_matrix(x_shape[2], factor, grad_out.dtype)
    aw = _upsample_matrix(x_shape[3], factor, grad_out.dtype)
    return np.ascontiguousarray(ah.T @ grad_out @ aw)


def kaiming_init(rng: Rng, dims, fan_in: int, dtype=np.float64) -> np.ndarray:
    """He-normal samples with std ``sqrt(2 / fan_in)``."""
    if fan_in < 1:
        raise ValueError("fan_in must be >= 1")
    return rand_normal(rng, dims, 0.0, math.sqrt(2.0 / fan_in), dtype)


def init_conv(rng: Rng, c_in: int, c_out: int, k: int, stride=1, padding=None,
              dtype=np.float64) -> Conv2dParams:
    if padding is None:
        padding = k // 2
    w = kaiming_init(rng, (c_out, c_in, k, k), c_in * k * k, dtype)
    return Conv2dParams(w, np.zeros(c_out, dtype=dtype), stride, padding)


def init_linear(rng: Rng, d_in: int, d_out: int, dtype=np.float64) -> LinearParams:
    w = kaiming_init(rng, (d_out, d_in), d_in, dtype)
    return LinearParams(w, np.zeros(d_out, dtype=dtype))
