"""Deformable-attentive enhancement block and language-conditioned convolution.

The block maps a feature map ``x`` to

    u      = upsample(x, factor)
    x_dcf  = deform_conv(u)            learned per-tap offsets, bilinear taps
    x_se   = s * x_dcf                 s = sigmoid(fc2(relu(fc1(gap(x_dcf)))))
    out    = x_se + shortcut_conv(u)

Offsets follow deformable convolution v1 (no modulation mask). The offset
branch emits ``2 * k * k`` channels; channel ``2 t`` is the row shift and
``2 t + 1`` the column shift of tap ``t = u * k + v``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import sparse

from .errors import ShapeError
from .layers import (
    Conv2dParams,
    LinearParams,
    bilinear_corners,
    conv2d_bwd,
    flush_subnormals,
    conv2d_fwd,
    conv_output_size,
    init_conv,
    init_linear,
    linear_bwd,
    linear_fwd,
    sigmoid,
    upsample_bilinear,
    upsample_bilinear_bwd,
)
from .tensor import Rng


@dataclass
class DeformConvParams:
    main: Conv2dParams
    offset_branch: Conv2dParams

    def __post_init__(self):
        k = self.main.kernel_size
        if self.offset_branch.weight.shape[0] != 2 * k * k:
            raise ShapeError(
                f"offset branch must emit {2 * k * k} channels, "
                f"got {self.offset_branch.weight.shape[0]}"
            )
        geom = (self.offset_branch.kernel_size, self.offset_branch.stride, self.offset_branch.padding)
        if geom != (k, self.main.stride, self.main.padding):
            raise ShapeError("offset branch geometry must match the main convolution")


@dataclass
class SeParams:
    fc1: LinearParams  # [C/r, C]
    fc2: LinearParams  # [C, C/r]

    @property
    def channels(self) -> int:
        return self.fc1.weight.shape[1]


@dataclass
class ResidualParams:
    shortcut: Conv2dParams  # 1x1, C_in -> C_out
    factor: int = 1


@dataclass
class EnhanceParams:
    deform: DeformConvParams
    se: SeParams
    residual: ResidualParams
    # switches used by the ablation variants; disabled parts keep their params
    deformable: bool = True
    use_se: bool = True
    use_residual: bool = True

    @property
    def factor(self) -> int:
        return self.residual.factor


@dataclass
class DynConvParams:
    kernel_gen: LinearParams  # [C_out * C_in + C_out, D]
    c_in: int
    c_out: int


# ---------------------------------------------------------------------------
# deformable convolution


def _sample_positions(offsets, k, stride, padding):
    """Absolute tap coordinates ``[N, Ho, Wo, kk]`` for each output position."""
    n, _, ho, wo = offsets.shape
    taps = np.arange(k * k)
    base_y = (np.arange(ho) * stride - padding)[:, None, None] + (taps // k)[None, None, :]
    base_x = (np.arange(wo) * stride - padding)[None, :, None] + (taps % k)[None, None, :]
    py = base_y[None] + offsets[:, 0::2].transpose(0, 2, 3, 1)
    px = base_x[None] + offsets[:, 1::2].transpose(0, 2, 3, 1)
    return py, px


class _Sampler:
    """Sparse bilinear sampling operator.

    ``matrix`` maps channels-last pixels ``[N * H * W, C]`` to tap samples
    ``[N * Ho * Wo * kk, C]``; each row holds the four corner weights, with
    out-of-range corners weighted zero.
    """

    def __init__(self, py, px, n, h, w, dtype):
        rows = py.size
        y0, x0, ly, lx, valid = bilinear_corners(py.reshape(-1), px.reshape(-1), h, w)
        base = np.repeat(np.arange(n) * (h * w), rows // n)
        ya = base + np.clip(y0, 0, h - 1) * w
        yb = base + np.clip(y0 + 1, 0, h - 1) * w
        xa = np.clip(x0, 0, w - 1)
        xb = np.clip(x0 + 1, 0, w - 1)
        index_type = np.int32 if n * h * w < 2**31 else np.int64
        self.indices = np.empty((rows, 4), dtype=index_type)
        for j, (yy, xx) in enumerate(((ya, xa), (ya, xb), (yb, xa), (yb, xb))):
            self.indices[:, j] = yy + xx
        self.ly, self.lx, self.valid = ly, lx, valid
        data = self._weights(((1 - ly) * (1 - lx), (1 - ly) * lx, ly * (1 - lx), ly * lx), dtype)
        indptr = np.arange(0, 4 * rows + 1, 4, dtype=index_type)
        self.matrix = sparse.csr_matrix((data.ravel(), self.indices.ravel(), indptr), shape=(rows, n * h * w))

    def _weights(self, columns, dtype):
        out = np.empty((self.ly.size, 4), dtype=dtype)
        for j, col in enumerate(columns):
            out[:, j] = col
        out *= self.valid
        return out

    def coordinate_grads(self, x2, grad_samples):
        """Gradients of ``sum(grad_samples * matrix @ x2)`` w.r.t. row and column coordinates."""
        dots = np.empty((self.ly.size, 4), dtype=np.result_type(x2, grad_samples))
        for j in range(4):
            dots[:, j] = np.einsum("rc,rc->r", grad_samples, np.take(x2, self.indices[:, j], axis=0))
        dots *= self.valid
        ly, lx = self.ly, self.lx
        g_y = (1 - lx) * (dots[:, 2] - dots[:, 0]) + lx * (dots[:, 3] - dots[:, 1])
        g_x = (1 - ly) * (dots[:, 1] - dots[:, 0]) + ly * (dots[:, 3] - dots[:, 2])
        return g_y, g_x


def _channels_last(x):
    n, c, h, w = x.shape
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1)).reshape(n * h * w, c)


def _tap_weight(main: Conv2dParams):
    """Main weights as ``[C_out, kk * C]`` matching the tap-major column layout."""
    c_out = main.weight.shape[0]
    return main.weight.transpose(0, 2, 3, 1).reshape(c_out, -1)


def _check_deform(x, p: DeformConvParams):
    if x.ndim != 4 or x.shape[1] != p.main.weight.shape[1]:
        raise ShapeError(f"input shape {x.shape} does not match deformable conv weights")


def _deform_columns(x, offsets, main):
    k = main.kernel_size
    n, c, h, w = x.shape
    ho, wo = offsets.shape[2:]
    if offsets.shape != (n, 2 * k * k, ho, wo):
        raise ShapeError(f"offsets shape {offsets.shape} does not match kernel size {k}")
    py, px = _sample_positions(offsets, k, main.stride, main.padding)
    sampler = _Sampler(py, px, n, h, w, x.dtype)
    x2 = _channels_last(x)
    cols = (sampler.matrix @ x2).reshape(n * ho * wo, k * k * c)
    return cols, sampler, x2


def deform_apply(x: np.ndarray, offsets: np.ndarray, main: Conv2dParams, cache=None) -> np.ndarray:
    """Main convolution evaluated at offset taps, offsets given explicitly."""
    cols, sampler, x2 = _deform_columns(x, offsets, main)
    if cache is not None:
        cache.update(cols=cols, sampler=sampler, x2=x2)
    n = x.shape[0]
    ho, wo = offsets.shape[2:]
    y = cols @ _tap_weight(main).T + main.bias
    return np.ascontiguousarray(y.reshape(n, ho, wo, -1).transpose(0, 3, 1, 2))


def deform_apply_bwd(x: np.ndarray, offsets: np.ndarray, main: Conv2dParams, grad_y: np.ndarray,
                     cache=None):
    """Return ``(grad_x, grad_offsets, grad_main)`` for ``deform_apply``."""
    k = main.kernel_size
    n, c, h, w = x.shape
    ho, wo = offsets.shape[2:]
    c_out = main.weight.shape[0]
    if grad_y.shape != (n, c_out, ho, wo):
        raise ShapeError(f"grad_y shape {grad_y.shape} != forward output {(n, c_out, ho, wo)}")
    if cache:
        cols, sampler, x2 = cache["cols"], cache["sampler"], cache["x2"]
    else:
        cols, sampler, x2 = _deform_columns(x, offsets, main)

    gy = flush_subnormals(grad_y).transpose(0, 2, 3, 1).reshape(n * ho * wo, c_out)
    wmat = _tap_weight(main)
    grad_wmat = gy.T @ cols
    grad_w = grad_wmat.reshape(c_out, k, k, c).transpose(0, 3, 1, 2)
    grad_b = gy.sum(axis=0)
    grad_cols = (gy @ wmat).reshape(-1, c)  # [N * Ho * Wo * kk, C]

    grad_x2 = sampler.matrix.T @ grad_cols
    grad_x = np.ascontiguousarray(grad_x2.reshape(n, h, w, c).transpose(0, 3, 1, 2))

    g_py, g_px = sampler.coordinate_grads(x2, grad_cols)
    g_py = g_py.reshape(n, ho, wo, k * k)
    g_px = g_px.reshape(n, ho, wo, k * k)
    grad_off = np.empty_like(offsets)
    grad_off[:, 0::2] = g_py.transpose(0, 3, 1, 2)
    grad_off[:, 1::2] = g_px.transpose(0, 3, 1, 2)

    grad_main = replace(main, weight=np.ascontiguousarray(grad_w), bias=grad_b)
    return grad_x, grad_off, grad_main


def deform_conv_fwd(x: np.ndarray, p: DeformConvParams, cache=None):
    """Return ``(y, offsets)``; offsets are the raw offset-branch output.

    A dict passed as ``cache`` is filled with what ``deform_conv_bwd`` needs.
    """
    _check_deform(x, p)
    branch_cache = None if cache is None else cache.setdefault("branch", {})
    offsets = conv2d_fwd(x, p.offset_branch, branch_cache)
    if cache is not None:
        cache["offsets"] = offsets
    return deform_apply(x, offsets, p.main, cache), offsets


def deform_conv_bwd(x: np.ndarray, p: DeformConvParams, grad_y: np.ndarray, cache=None):
    """Return ``(grad_x, grad_params)`` with ``grad_params`` a DeformConvParams."""
    _check_deform(x, p)
    offsets = cache["offsets"] if cache else conv2d_fwd(x, p.offset_branch)
    grad_x, grad_off, grad_main = deform_apply_bwd(x, offsets, p.main, grad_y, cache)
    gx_off, grad_branch = conv2d_bwd(x, p.offset_branch, grad_off, cache.get("branch") if cache else None)
    return grad_x + gx_off, DeformConvParams(grad_main, grad_branch)


# ---------------------------------------------------------------------------
# squeeze-and-excitation


def _se_gate(x, p: SeParams):
    if x.ndim != 4 or x.shape[1] != p.channels:
        raise ShapeError(f"SE expects {p.channels} channels, got shape {x.shape}")
    z = x.mean(axis=(2, 3), dtype=np.float64).astype(x.dtype)
    h_pre = linear_fwd(z, p.fc1)
    h = np.maximum(h_pre, 0)
    a = linear_fwd(h, p.fc2)
    return z, h_pre, h, a, sigmoid(a)


def se_fwd(x_dcf: np.ndarray, p: SeParams):
    """Return ``(x_sc, s)`` with ``s`` the per-channel gate ``[N, C]``."""
    *_, s = _se_gate(x_dcf, p)
    return x_dcf * s[:, :, None, None], s


def se_bwd(x_dcf: np.ndarray, p: SeParams, grad_out: np.ndarray):
    z, h_pre, h, a, s = _se_gate(x_dcf, p)
    g_s = (grad_out * x_dcf).sum(axis=(2, 3))
    g_a = g_s * s * (1 - s)
    g_h, g_fc2 = linear_bwd(h, p.fc2, g_a)
    g_z, g_fc1 = linear_bwd(z, p.fc1, g_h * (h_pre > 0))
    hw = x_dcf.shape[2] * x_dcf.shape[3]
    grad_x = grad_out * s[:, :, None, None] + (g_z / hw)[:, :, None, None]
    return grad_x, SeParams(g_fc1, g_fc2)


# ---------------------------------------------------------------------------
# residual shortcut


def residual_fuse(x: np.ndarray, x_se: np.ndarray, p: ResidualParams, cache=None) -> np.ndarray:
    up = upsample_bilinear(x, p.factor)
    if cache is not None:
        cache["up"] = up
    x_res = conv2d_fwd(up, p.shortcut, cache)
    if x_res.shape != x_se.shape:
        raise ShapeError(f"shortcut output {x_res.shape} does not match main path {x_se.shape}")
    return x_se + x_res


def residual_bwd(x: np.ndarray, p: ResidualParams, grad_out: np.ndarray, cache=None):
    """Gradients of ``residual_fuse``: ``(grad_x, grad_x_se, grad_params)``."""
    up = cache["up"] if cache else upsample_bilinear(x, p.factor)
    g_up, g_short = conv2d_bwd(up, p.shortcut, grad_out, cache)
    grad_x = upsample_bilinear_bwd(x.shape, p.factor, g_up)
    return grad_x, grad_out, ResidualParams(g_short, p.factor)


# ---------------------------------------------------------------------------
# full block


def enhance_block_fwd(x: np.ndarray, p: EnhanceParams, cache=None) -> np.ndarray:
    """Upsample, deformable conv, SE gate, residual shortcut.

    Pass a dict as ``cache`` to keep intermediates for ``enhance_block_bwd``.
    """
    cache = {} if cache is None else cache
    u = upsample_bilinear(x, p.factor)
    if p.deformable:
        cache["deform"] = {}
        x_dcf, _ = deform_conv_fwd(u, p.deform, cache["deform"])
    else:
        cache["main"] = {}
        x_dcf = conv2d_fwd(u, p.deform.main, cache["main"])
    cache.update(u=u, x_dcf=x_dcf)
    x_se = se_fwd(x_dcf, p.se)[0] if p.use_se else x_dcf
    if p.use_residual:
        cache["residual"] = {}
        return residual_fuse(x, x_se, p.residual, cache["residual"])
    return x_se


def enhance_block_bwd(x: np.ndarray, p: EnhanceParams, grad_out: np.ndarray, cache=None):
    """Return ``(grad_x, grad_params)``; disabled parts get zero gradients."""
    if not cache:
        cache = {}
        enhance_block_fwd(x, p, cache)
    u, x_dcf = cache["u"], cache["x_dcf"]
    grad_x = np.zeros_like(x)

    if p.use_residual:
        gx_res, g_se, g_res = residual_bwd(x, p.residual, grad_out, cache.get("residual"))
        grad_x += gx_res
    else:
        g_se, g_res = grad_out, ResidualParams(p.residual.shortcut.zeros_like(), p.factor)

    if p.use_se:
        g_dcf, g_separams = se_bwd(x_dcf, p.se, g_se)
    else:
        g_dcf = g_se
        g_separams = SeParams(p.se.fc1.zeros_like(), p.se.fc2.zeros_like())

    if p.deformable:
        g_u, g_deform = deform_conv_bwd(u, p.deform, g_dcf, cache["deform"])
    else:
        g_u, g_main = conv2d_bwd(u, p.deform.main, g_dcf, cache.get("main"))
        g_deform = DeformConvParams(g_main, p.deform.offset_branch.zeros_like())

    grad_x += upsample_bilinear_bwd(x.shape, p.factor, g_u)
    grads = replace(p, deform=g_deform, se=g_separams, residual=g_res)
    return grad_x, grads


# ---------------------------------------------------------------------------
# language-conditioned dynamic 1x1 convolution


def _dyn_kernels(text_emb, p: DynConvParams):
    gen = linear_fwd(text_emb, p.kernel_gen)
    n = text_emb.shape[0]
    split = p.c_out * p.c_in
    return gen[:, :split].reshape(n, p.c_out, p.c_in), gen[:, split:]


def _check_dyn(x, text_emb, p: DynConvParams):
    if x.ndim != 4 or x.shape[1] != p.c_in:
        raise ShapeError(f"dynamic conv expects {p.c_in} channels, got shape {x.shape}")
    if text_emb.ndim != 2 or text_emb.shape[0] != x.shape[0]:
        raise ShapeError(f"need one embedding row per batch item, got {text_emb.shape}")


def dyn_conv_apply(x_fused: np.ndarray, text_emb: np.ndarray, p: DynConvParams) -> np.ndarray:
    _check_dyn(x_fused, text_emb, p)
    kern, bias = _dyn_kernels(text_emb, p)
    n, c, h, w = x_fused.shape
    y = np.matmul(kern, x_fused.reshape(n, c, h * w)) + bias[:, :, None]
    return y.reshape(n, p.c_out, h, w)


def dyn_conv_bwd(x_fused: np.ndarray, text_emb: np.ndarray, p: DynConvParams, grad_out: np.ndarray):
    """Return ``(grad_x, grad_emb, grad_params)``."""
    _check_dyn(x_fused, text_emb, p)
    kern, _ = _dyn_kernels(text_emb, p)
    n, c, h, w = x_fused.shape
    gy = grad_out.reshape(n, p.c_out, h * w)
    xf = x_fused.reshape(n, c, h * w)
    g_kern = np.matmul(gy, xf.transpose(0, 2, 1))
    g_bias = gy.sum(axis=2)
    grad_x = np.matmul(kern.transpose(0, 2, 1), gy).reshape(x_fused.shape)
    g_gen = np.concatenate([g_kern.reshape(n, -1), g_bias], axis=1)
    grad_emb, g_kg = linear_bwd(text_emb, p.kernel_gen, g_gen)
    return grad_x, grad_emb, DynConvParams(g_kg, p.c_in, p.c_out)


# ---------------------------------------------------------------------------
# initialisation


def init_deform(rng: Rng, c_in: int, c_out: int, k: int = 3, dtype=np.float64) -> DeformConvParams:
    """Kaiming main weights; offset branch starts at zero (plain convolution)."""
    main = init_conv(rng, c_in, c_out, k, dtype=dtype)
    branch = Conv2dParams(
        np.zeros((2 * k * k, c_in, k, k), dtype=dtype),
        np.zeros(2 * k * k, dtype=dtype),
        main.stride,
        main.padding,
    )
    return DeformConvParams(main, branch)


def se_hidden(channels: int, reduction: int) -> int:
    return max(1, -(-channels // reduction))


def init_se(rng: Rng, channels: int, reduction: int = 16, dtype=np.float64) -> SeParams:
    hidden = se_hidden(channels, reduction)
    return SeParams(init_linear(rng, channels, hidden, dtype), init_linear(rng, hidden, channels, dtype))


def init_enhance(rng: Rng, c_in: int, c_out: int, k: int = 3, reduction: int = 16,
                 factor: int = 1, dtype=np.float64) -> EnhanceParams:
    deform = init_deform(rng, c_in, c_out, k, dtype)
    se = init_se(rng, c_out, reduction, dtype)
    shortcut = init_conv(rng, c_in, c_out, 1, dtype=dtype)
    return EnhanceParams(deform, se, ResidualParams(shortcut, factor))


def init_dynconv(rng: Rng, emb_dim: int, c_in: int, c_out: int, weight_scale: float = 1.0,
                 dtype=np.float64) -> DynConvParams:
    """Kernel generator whose bias emits the identity kernel (when square)."""
    gen = init_linear(rng, emb_dim, c_out * c_in + c_out, dtype)
    gen.weight *= weight_scale
    if c_in == c_out:
        gen.bias[: c_out * c_in] = np.eye(c_out, dtype=dtype).ravel()
    return DynConvParams(gen, c_in, c_out)


def deform_output_size(size: int, p: DeformConvParams) -> int:
    return conv_output_size(size, p.main.kernel_size, p.main.stride, p.main.padding)
