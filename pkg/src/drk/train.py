"""Training protocol: Adam, milestone decay, global-norm clipping, RAF loss.

The toy defaults keep the reference schedule shape (x0.1 decay at two
milestones) on a 30-epoch run with a larger base rate, since 1e-4 does not
converge in that budget on the toy data. ``full_scale()`` returns the full
50-epoch, batch-64, lr 1e-4 configuration with milestones 15 and 30.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import losses, metrics
from . import model as M
from .errors import TrainingError, ValidationError
from .losses import RafConfig
from .tensor import Rng

log = logging.getLogger(__name__)

HISTORY_HEADER = ("epoch", "lr", "loss_total", "loss_bce", "loss_focal", "loss_dice", "val_miou")


@dataclass
class OptimState:
    base_lr: float = 1e-4
    milestones: tuple[int, ...] = (15, 30)
    decay: float = 0.1
    clip_max_norm: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def lr_at(epoch: int, state: OptimState) -> float:
    if epoch < 0:
        raise ValueError("epoch must be nonnegative")
    passed = sum(1 for m in state.milestones if m <= epoch)
    return state.base_lr * state.decay**passed


def global_norm(grads: dict[str, np.ndarray]) -> float:
    total = 0.0
    for name in sorted(grads):
        g = grads[name].astype(np.float64)
        total += float(np.dot(g.ravel(), g.ravel()))
    return math.sqrt(total)


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    """Rescale all gradients jointly so the global L2 norm is at most ``max_norm``.

    ``max_norm == 0`` disables clipping.
    """
    if max_norm < 0:
        raise ValueError("max_norm must be nonnegative")
    if max_norm == 0:
        return grads
    norm = global_norm(grads)
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return {k: (g * scale).astype(g.dtype) for k, g in grads.items()}


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: OptimState, lr: float | None = None) -> None:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    for name in sorted(grads):
        if not np.all(np.isfinite(grads[name])):
            raise TrainingError(f"non-finite gradient for parameter {name}")
    lr = state.base_lr if lr is None else lr
    state.step += 1
    t = state.step
    c1 = 1 - state.beta1**t
    c2 = 1 - state.beta2**t
    for name in sorted(grads):
        g = grads[name]
        p = params[name]
        if g.shape != p.shape:
            raise TrainingError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p -= update.astype(p.dtype)


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    seed: int = 0
    base_lr: float = 3e-3
    milestones: tuple[int, ...] = (10, 20)
    decay: float = 0.1
    clip_max_norm: float = 0.0
    loss: str = "raf"  # or "bce"
    raf: RafConfig = RafConfig(normalize="mean")
    eval_every_epoch: bool = True
    val_fraction: float = 0.2
    model: M.ModelConfig = M.ModelConfig()
    dtype: str = "float32"

    def validate(self):
        if self.epochs < 1:
            raise ValidationError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be at least 1")
        if self.base_lr <= 0:
            raise ValidationError("base_lr must be positive")
        if self.loss not in ("raf", "bce"):
            raise ValidationError("loss must be 'raf' or 'bce'")
        if not 0 < self.val_fraction < 1:
            raise ValidationError("val_fraction must lie in (0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ValidationError("dtype must be float32 or float64")


def full_scale() -> TrainConfig:
    return TrainConfig(epochs=50, batch_size=64, base_lr=1e-4, milestones=(15, 30))


def _parse_value(text: str, template):
    if isinstance(template, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValidationError(f"expected a boolean, got {text!r}")
    if isinstance(template, int):
        return int(text)
    if isinstance(template, float):
        return float(text)
    if isinstance(template, tuple):
        return tuple(int(t) for t in text.replace(",", " ").split())
    return text


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Parse ``key = value`` lines with ``#`` comments into a TrainConfig.

    Keys name TrainConfig, RafConfig or ModelConfig fields directly; unknown
    keys are rejected.
    """
    cfg = base or TrainConfig()
    top, raf, mdl = {}, {}, {}
    top_names = {f.name for f in fields(TrainConfig)} - {"raf", "model"}
    raf_names = {f.name for f in fields(RafConfig)}
    mdl_names = {f.name for f in fields(M.ModelConfig)}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"config line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            if key in top_names:
                top[key] = _parse_value(value, getattr(cfg, key))
            elif key in raf_names:
                raf[key] = _parse_value(value, getattr(cfg.raf, key))
            elif key in mdl_names:
                mdl[key] = _parse_value(value, getattr(cfg.model, key))
            else:
                raise ValidationError(f"config line {lineno}: unknown key {key!r}")
        except ValueError as exc:
            if isinstance(exc, ValidationError):
                raise
            raise ValidationError(f"config line {lineno}: bad value for {key}: {value!r}") from None
    cfg = replace(cfg, raf=replace(cfg.raf, **raf), model=replace(cfg.model, **mdl), **top)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# training


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss_total: float
    loss_bce: float
    loss_focal: float
    loss_dice: float
    val_miou: float


def history_csv(history: list[EpochRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(HISTORY_HEADER)
    for r in history:
        writer.writerow([r.epoch] + [repr(float(getattr(r, k))) for k in HISTORY_HEADER[1:]])
    return buf.getvalue()


def split(samples, val_fraction=0.2):
    """Deterministic split: the last ``val_fraction`` of samples is held out."""
    n_val = max(1, int(round(len(samples) * val_fraction)))
    if n_val >= len(samples):
        return list(samples), list(samples)
    return list(samples[:-n_val]), list(samples[-n_val:])


def stack(samples):
    images = np.stack([s.image for s in samples])
    attrs = np.stack([s.attr for s in samples])
    masks = np.stack([s.mask for s in samples])[:, None].astype(np.float64)
    return images, attrs, masks


def loss_and_grad(prob, masks, cfg: TrainConfig) -> losses.LossOutput:
    if cfg.loss == "bce":
        value, grad = losses.bce(prob, masks, cfg.raf.clamp, cfg.raf.normalize)
        return losses.LossOutput(value, value, 0.0, 0.0, grad)
    return losses.raf(prob, masks, cfg.raf)


def evaluate_model(model: M.MicroModel, samples, threshold=0.5) -> metrics.EvalReport:
    images, attrs, _ = stack(samples)
    prob = M.predict(model, images, attrs)
    ious = [metrics.iou(metrics.binarize(prob[i, 0], threshold), s.mask) for i, s in enumerate(samples)]
    return metrics.summarize(ious, [s.sample_id for s in samples])


def train(samples, cfg: TrainConfig = TrainConfig(), out_dir=None, progress=None):
    """Train a MicroModel; return ``(model, history)``.

    When ``out_dir`` is given, ``history.csv`` and ``model.dckp`` are
    rewritten after every completed epoch, so a divergent run leaves the
    last good checkpoint behind.
    """
    cfg.validate()
    if not samples:
        raise ValidationError("cannot train on an empty dataset")
    train_set, val_set = split(samples, cfg.val_fraction)
    dtype = np.dtype(cfg.dtype)
    model = M.init_model(cfg.model, cfg.seed, dtype)
    state = OptimState(cfg.base_lr, cfg.milestones, cfg.decay, cfg.clip_max_norm)
    params = model.named_arrays()
    images, attrs, masks = stack(train_set)
    order_rng = Rng(cfg.seed).spawn(1)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    history: list[EpochRecord] = []

    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, state)
        order = order_rng.gen.permutation(len(train_set))
        sums = np.zeros(4)
        batches = 0
        for start in range(0, len(order), cfg.batch_size):
            idx = np.sort(order[start:start + cfg.batch_size])
            prob, cache = M.forward(model, images[idx], attrs[idx])
            out_loss = loss_and_grad(prob, masks[idx], cfg)
            if not np.isfinite(out_loss.total):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            grads = M.named_arrays(M.backward(model, cache, out_loss.grad_p))
            grads = clip_grads(grads, state.clip_max_norm)
            adam_step(params, grads, state, lr)
            sums += (out_loss.total, out_loss.bce, out_loss.focal, out_loss.dice)
            batches += 1
        means = sums / batches
        val_miou = float("nan")
        if cfg.eval_every_epoch or epoch == cfg.epochs - 1:
            val_miou = evaluate_model(model, val_set).miou
        record = EpochRecord(epoch, lr, *map(float, means), val_miou)
        history.append(record)
        if progress is not None:
            progress(record)
        log.info("epoch %d lr %.1e loss %.5f val_miou %.4f", epoch, lr, means[0], val_miou)
        if out is not None:
            M.save_checkpoint(out / "model.dckp", model)
            (out / "history.csv").write_text(history_csv(history))
    return model, history


# ---------------------------------------------------------------------------
# ablation

VARIANTS = (
    ("baseline", dict(loss="bce", deformable=False, use_se=False, use_residual=False)),
    ("+RAF loss", dict(loss="raf", deformable=False, use_se=False, use_residual=False)),
    ("+deformable+residual", dict(loss="raf", deformable=True, use_se=False, use_residual=True)),
    ("+SE (full)", dict(loss="raf", deformable=True, use_se=True, use_residual=True)),
)
TABLE_COLUMNS = ("variant", "IoU", "P@50", "P@60", "P@70", "P@80", "P@90")


def variant_config(cfg: TrainConfig, switches: dict) -> TrainConfig:
    switches = dict(switches)
    loss = switches.pop("loss")
    return replace(cfg, loss=loss, model=replace(cfg.model, **switches))


@dataclass
class AblationRow:
    variant: str
    miou: float
    prec_at: dict[int, float]
    per_seed_miou: list[float]


def ablate(samples, cfg: TrainConfig = TrainConfig(), seeds=(0, 1, 2), progress=None) -> list[AblationRow]:
    """Train the four variants under identical seeds and schedule; average over seeds."""
    _, val_set = split(samples, cfg.val_fraction)
    rows = []
    for name, switches in VARIANTS:
        reports = []
        for seed in seeds:
            vcfg = replace(variant_config(cfg, switches), seed=seed)
            model, _ = train(samples, replace(vcfg, eval_every_epoch=False))
            report = evaluate_model(model, val_set)
            reports.append(report)
            if progress is not None:
                progress(name, seed, report)
        prec = {k: float(np.mean([r.prec_at[k] for r in reports])) for k in metrics.THRESHOLDS}
        mious = [r.miou for r in reports]
        rows.append(AblationRow(name, float(np.mean(mious)), prec, mious))
    return rows


def ablation_csv(rows: list[AblationRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TABLE_COLUMNS)
    for r in rows:
        writer.writerow([r.variant, f"{100 * r.miou:.2f}"] + [f"{100 * r.prec_at[k]:.2f}" for k in metrics.THRESHOLDS])
    return buf.getvalue()
