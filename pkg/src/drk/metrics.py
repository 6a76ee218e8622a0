"""Mask IoU, mean IoU and precision at IoU thresholds."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ShapeError, ValidationError

THRESHOLDS = (50, 60, 70, 80, 90)


@dataclass
class MaskPair:
    pred: np.ndarray
    gt: np.ndarray
    sample_id: str = ""


@dataclass
class EvalReport:
    per_sample_iou: list[float]
    miou: float
    prec_at: dict[int, float]
    sample_ids: list[str] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["sample_id", "iou"])
        ids = self.sample_ids or [str(i) for i in range(len(self.per_sample_iou))]
        for sid, v in zip(ids, self.per_sample_iou):
            writer.writerow([sid, repr(float(v))])
        writer.writerow(["miou", repr(float(self.miou))])
        for k in THRESHOLDS:
            writer.writerow([f"prec@{k}", repr(float(self.prec_at[k]))])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv())


def _binary(mask, name):
    m = np.asarray(mask)
    if not np.all((m == 0) | (m == 1)):
        raise ValidationError(f"{name} mask must contain only 0 and 1")
    return m.astype(bool)


def iou(pred, gt) -> float:
    """Intersection over union; two empty masks agree perfectly (1.0)."""
    p = _binary(pred, "pred")
    g = _binary(gt, "gt")
    if p.shape != g.shape:
        raise ShapeError(f"mask shapes differ: {p.shape} vs {g.shape}")
    union = int(np.count_nonzero(p | g))
    if union == 0:
        return 1.0
    return int(np.count_nonzero(p & g)) / union


def binarize(prob, threshold: float = 0.5) -> np.ndarray:
    """1 where ``prob > threshold`` (strict), else 0."""
    return (np.asarray(prob) > threshold).astype(np.uint8)


def summarize(ious, sample_ids=None) -> EvalReport:
    ious = [float(v) for v in ious]
    if not ious:
        raise ValidationError("cannot evaluate an empty list of samples")
    arr = np.array(ious)
    prec = {k: float(np.count_nonzero(arr > k / 100)) / len(ious) for k in THRESHOLDS}
    return EvalReport(ious, float(arr.mean()), prec, list(sample_ids or []))


def evaluate(pairs) -> EvalReport:
    pairs = list(pairs)
    if not pairs:
        raise ValidationError("cannot evaluate an empty list of mask pairs")
    return summarize([iou(mp.pred, mp.gt) for mp in pairs], [mp.sample_id for mp in pairs])
