"""Central finite-difference oracle and the per-module gradient check suites.

The oracle only ever evaluates forward functions. Each suite builds seeded
float64 instances, scalarises the forward output with a fixed random
projection and compares the analytic backward against ``fd_gradient``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import enhance as E
from . import layers as L
from . import losses
from .errors import NumericError, ShapeError
from .tensor import Rng

H_STEP = 1e-5
ABS_FLOOR = 1e-8
TOL_SMOOTH = 1e-6
TOL_DEFORM = 1e-5
TOL_LOSS = 1e-8
N_INSTANCES = 5


@dataclass
class GradReport:
    max_rel_err: float
    max_abs_err: float
    worst_index: int
    n_checked: int
    passed: bool = True

    def merge(self, other: "GradReport") -> "GradReport":
        worst = self if self.max_rel_err >= other.max_rel_err else other
        return GradReport(
            max(self.max_rel_err, other.max_rel_err),
            max(self.max_abs_err, other.max_abs_err),
            worst.worst_index,
            self.n_checked + other.n_checked,
            self.passed and other.passed,
        )


def fd_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = H_STEP) -> np.ndarray:
    """Central differences ``(f(x + h e_i) - f(x - h e_i)) / 2h`` for every element."""
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value probing element {i}", index=i)
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def check(analytic, numeric, rel_tol: float, abs_tol: float = ABS_FLOOR,
          floor: float = ABS_FLOOR) -> GradReport:
    """Element-wise comparison; an element passes if within ``rel_tol`` or ``abs_tol``.

    Elements whose absolute error is within ``abs_tol`` are excused from the
    relative test and do not count toward ``max_rel_err``, so a report passes
    exactly when ``max_rel_err <= rel_tol``.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.shape != n.shape:
        raise ShapeError(f"analytic shape {a.shape} != numeric shape {n.shape}")
    abs_err = np.abs(a - n).reshape(-1)
    rel_err = abs_err / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor).reshape(-1)
    rel_err = np.where(abs_err <= abs_tol, 0.0, rel_err)
    ok = rel_err <= rel_tol
    worst = int(np.argmax(rel_err)) if rel_err.size else 0
    return GradReport(
        float(rel_err.max(initial=0.0)),
        float(abs_err.max(initial=0.0)),
        worst,
        max(int(a.size), 1),
        bool(ok.all()),
    )


# ---------------------------------------------------------------------------
# suites


def _probe(rng: Rng, shape):
    return rng.gen.standard_normal(shape)


def _compare(f, x, analytic, tol) -> GradReport:
    return check(analytic, fd_gradient(f, x), tol)


def _with_array(obj, path, value):
    """Copy of a nested dataclass with the array at ``path`` replaced."""
    head, *rest = path
    if not rest:
        return replace(obj, **{head: value})
    return replace(obj, **{head: _with_array(getattr(obj, head), rest, value)})


def _get(obj, path):
    for name in path:
        obj = getattr(obj, name)
    return obj


def _param_reports(forward, params, grads, paths, tol):
    """Compare gradients for each parameter array named in ``paths``."""
    report = None
    for path in paths:
        base = _get(params, path)
        r = _compare(lambda a: forward(_with_array(params, path, a)), base, _get(grads, path), tol)
        report = r if report is None else report.merge(r)
    return report


def _check_conv2d(rng: Rng) -> GradReport:
    stride = int(rng.gen.integers(1, 3))
    x = _probe(rng, (2, 3, 6, 5))
    p = L.Conv2dParams(_probe(rng, (4, 3, 3, 3)), _probe(rng, (4,)), stride, 1)
    r = _probe(rng, L.conv2d_fwd(x, p).shape)
    gx, gp = L.conv2d_bwd(x, p, r)
    report = _compare(lambda a: np.sum(r * L.conv2d_fwd(a, p)), x, gx, TOL_SMOOTH)
    fwd = lambda q: np.sum(r * L.conv2d_fwd(x, q))
    return report.merge(_param_reports(fwd, p, gp, [("weight",), ("bias",)], TOL_SMOOTH))


def _off_lattice_offsets(rng: Rng, shape):
    """Offsets whose fractional parts sit in [0.1, 0.4] or [0.6, 0.9]."""
    whole = rng.gen.integers(-1, 2, size=shape)
    frac = rng.gen.uniform(0.1, 0.4, size=shape) * rng.gen.choice([-1.0, 1.0], size=shape)
    return whole + frac


def _check_bilinear_path(rng: Rng) -> GradReport:
    k = 3
    x = _probe(rng, (1, 2, 5, 5))
    main = L.Conv2dParams(_probe(rng, (3, 2, k, k)), _probe(rng, (3,)), 1, 1)
    off = _off_lattice_offsets(rng, (1, 2 * k * k, 5, 5))
    r = _probe(rng, (1, 3, 5, 5))
    gx, goff, gmain = E.deform_apply_bwd(x, off, main, r)
    report = _compare(lambda a: np.sum(r * E.deform_apply(a, off, main)), x, gx, TOL_DEFORM)
    report = report.merge(_compare(lambda a: np.sum(r * E.deform_apply(x, a, main)), off, goff, TOL_DEFORM))
    fwd = lambda q: np.sum(r * E.deform_apply(x, off, q))
    return report.merge(_param_reports(fwd, main, gmain, [("weight",), ("bias",)], TOL_DEFORM))


def random_deform_params(rng: Rng, c_in, c_out, k=3, offset_scale=0.01):
    """Deformable conv params whose offsets stay well clear of the lattice.

    The offset-branch bias carries the fractional shift; its weights are
    small enough that input-dependent variation stays within about 0.05.
    """
    main = L.Conv2dParams(_probe(rng, (c_out, c_in, k, k)), _probe(rng, (c_out,)), 1, k // 2)
    bias = _off_lattice_offsets(rng, (2 * k * k,))
    branch = L.Conv2dParams(offset_scale * _probe(rng, (2 * k * k, c_in, k, k)), bias, 1, k // 2)
    return E.DeformConvParams(main, branch)


def _check_deform(rng: Rng) -> GradReport:
    x = rng.gen.uniform(-1, 1, size=(1, 2, 5, 5))
    p = random_deform_params(rng, 2, 3)
    r = _probe(rng, (1, 3, 5, 5))
    gx, gp = E.deform_conv_bwd(x, p, r)
    report = _compare(lambda a: np.sum(r * E.deform_conv_fwd(a, p)[0]), x, gx, TOL_DEFORM)
    fwd = lambda q: np.sum(r * E.deform_conv_fwd(x, q)[0])
    paths = [("main", "weight"), ("main", "bias"), ("offset_branch", "weight"), ("offset_branch", "bias")]
    return report.merge(_param_reports(fwd, p, gp, paths, TOL_DEFORM))


def _random_se(rng: Rng, c, hidden):
    fc1 = L.LinearParams(_probe(rng, (hidden, c)), _probe(rng, (hidden,)))
    fc2 = L.LinearParams(_probe(rng, (c, hidden)), _probe(rng, (c,)))
    return E.SeParams(fc1, fc2)


def _check_se(rng: Rng) -> GradReport:
    x = _probe(rng, (2, 4, 3, 3))
    p = _random_se(rng, 4, 2)
    r = _probe(rng, x.shape)
    gx, gp = E.se_bwd(x, p, r)
    report = _compare(lambda a: np.sum(r * E.se_fwd(a, p)[0]), x, gx, TOL_SMOOTH)
    fwd = lambda q: np.sum(r * E.se_fwd(x, q)[0])
    paths = [("fc1", "weight"), ("fc1", "bias"), ("fc2", "weight"), ("fc2", "bias")]
    return report.merge(_param_reports(fwd, p, gp, paths, TOL_SMOOTH))


def _check_residual(rng: Rng) -> GradReport:
    factor = int(rng.gen.integers(1, 3))
    x = _probe(rng, (1, 3, 3, 4))
    short = L.Conv2dParams(_probe(rng, (2, 3, 1, 1)), _probe(rng, (2,)), 1, 0)
    p = E.ResidualParams(short, factor)
    x_se = _probe(rng, (1, 2, 3 * factor, 4 * factor))
    r = _probe(rng, x_se.shape)
    gx, gse, gp = E.residual_bwd(x, p, r)
    report = _compare(lambda a: np.sum(r * E.residual_fuse(a, x_se, p)), x, gx, TOL_SMOOTH)
    report = report.merge(_compare(lambda a: np.sum(r * E.residual_fuse(x, a, p)), x_se, gse, TOL_SMOOTH))
    fwd = lambda q: np.sum(r * E.residual_fuse(x, x_se, q))
    return report.merge(_param_reports(fwd, p, gp, [("shortcut", "weight"), ("shortcut", "bias")], TOL_SMOOTH))


def _check_enhance(rng: Rng) -> GradReport:
    c = 4
    x = rng.gen.uniform(-1, 1, size=(1, c, 6, 6))
    p = E.EnhanceParams(
        random_deform_params(rng, c, c),
        _random_se(rng, c, 2),
        E.ResidualParams(L.Conv2dParams(_probe(rng, (c, c, 1, 1)), _probe(rng, (c,)), 1, 0), 1),
    )
    r = _probe(rng, (1, c, 6, 6))
    gx, gp = E.enhance_block_bwd(x, p, r)
    report = _compare(lambda a: np.sum(r * E.enhance_block_fwd(a, p)), x, gx, TOL_DEFORM)
    fwd = lambda q: np.sum(r * E.enhance_block_fwd(x, q))
    paths = [
        ("deform", "main", "weight"), ("deform", "offset_branch", "weight"),
        ("deform", "offset_branch", "bias"), ("se", "fc1", "weight"), ("se", "fc2", "bias"),
        ("residual", "shortcut", "weight"),
    ]
    return report.merge(_param_reports(fwd, p, gp, paths, TOL_DEFORM))


def _check_dynconv(rng: Rng) -> GradReport:
    n, c_in, c_out, d = 2, 3, 2, 4
    x = _probe(rng, (n, c_in, 3, 3))
    emb = _probe(rng, (n, d))
    rows = c_out * c_in + c_out
    p = E.DynConvParams(L.LinearParams(_probe(rng, (rows, d)), _probe(rng, (rows,))), c_in, c_out)
    r = _probe(rng, (n, c_out, 3, 3))
    gx, gemb, gp = E.dyn_conv_bwd(x, emb, p, r)
    report = _compare(lambda a: np.sum(r * E.dyn_conv_apply(a, emb, p)), x, gx, TOL_SMOOTH)
    report = report.merge(_compare(lambda a: np.sum(r * E.dyn_conv_apply(x, a, p)), emb, gemb, TOL_SMOOTH))
    fwd = lambda q: np.sum(r * E.dyn_conv_apply(x, emb, q))
    return report.merge(_param_reports(fwd, p, gp, [("kernel_gen", "weight"), ("kernel_gen", "bias")], TOL_SMOOTH))


def _loss_instance(rng: Rng, shape=(1, 1, 8, 8)):
    p = rng.gen.uniform(0.1, 0.9, size=shape)
    y = (rng.gen.uniform(size=shape) < 0.3).astype(np.float64)
    return p, y


def _check_bce(rng: Rng) -> GradReport:
    p, y = _loss_instance(rng)
    _, g = losses.bce(p, y)
    return _compare(lambda a: losses.bce(a, y)[0], p, g, TOL_LOSS)


def _check_focal(rng: Rng) -> GradReport:
    p, y = _loss_instance(rng)
    alpha = float(rng.gen.uniform(0.1, 0.9))
    gamma = float(rng.gen.uniform(0.5, 3.0))
    _, g = losses.focal(p, y, alpha, gamma)
    return _compare(lambda a: losses.focal(a, y, alpha, gamma)[0], p, g, TOL_LOSS)


def _check_dice(rng: Rng) -> GradReport:
    p, y = _loss_instance(rng, (2, 1, 4, 4))
    report = None
    for mode in losses.ADAPTIVE_MODES:
        w = losses.adaptive_weights(p, y, mode, 2.0)
        _, g = losses.adaptive_dice(p, y, mode, 2.0, 1.0)
        r = _compare(lambda a: losses.adaptive_dice(a, y, eps=1.0, weights=w)[0], p, g, TOL_LOSS)
        report = r if report is None else report.merge(r)
    return report


def raf_frozen_value(p, y, cfg: losses.RafConfig, weights):
    """RAF total with the Dice weights held at ``weights``."""
    b, _ = losses.bce(p, y, cfg.clamp, cfg.normalize)
    f, _ = losses.focal(p, y, cfg.alpha, cfg.gamma, cfg.clamp, cfg.normalize)
    d, _ = losses.adaptive_dice(p, y, eps=cfg.eps, normalize=cfg.normalize, weights=weights)
    return cfg.lambda_bce * b + cfg.lambda_focal * f + cfg.lambda_dice * d


def _check_raf(rng: Rng) -> GradReport:
    p, y = _loss_instance(rng, (1, 1, 4, 4))
    mode = losses.ADAPTIVE_MODES[int(rng.gen.integers(0, 2))]
    cfg = losses.RafConfig(adaptive_mode=mode)
    out = losses.raf(p, y, cfg)
    w = losses.adaptive_weights(p, y, cfg.adaptive_mode, cfg.gamma)
    return _compare(lambda a: raf_frozen_value(a, y, cfg, w), p, out.grad_p, TOL_LOSS)


SUITES = {
    "conv2d": _check_conv2d,
    "bilinear": _check_bilinear_path,
    "deform": _check_deform,
    "se": _check_se,
    "residual": _check_residual,
    "enhance": _check_enhance,
    "dynconv": _check_dynconv,
    "bce": _check_bce,
    "focal": _check_focal,
    "dice": _check_dice,
    "raf": _check_raf,
}


def run_suite(name: str, seed: int, instances: int = N_INSTANCES) -> GradReport:
    """Run ``instances`` seeded random checks of one module and merge them."""
    try:
        fn = SUITES[name]
    except KeyError:
        raise ValueError(f"unknown gradcheck module {name!r}; choose from {sorted(SUITES)}") from None
    root = Rng(seed)
    report = None
    for i in range(instances):
        r = fn(root.spawn(i))
        report = r if report is None else report.merge(r)
    return report


def format_report(name: str, report: GradReport) -> str:
    return f"module={name} max_rel_err={report.max_rel_err:.3e} pass={str(report.passed).lower()}"
