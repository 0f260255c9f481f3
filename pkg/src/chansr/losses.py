"""Masked training losses and native-unit evaluation metrics.

Every loss and metric only looks at valid (non-building) pixels. Losses are
means over the valid pixels of the whole batch.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .characteristics import BUILDING_THRESHOLD, REGRESSION_TARGETS, TARGETS


class EmptyMaskError(ValueError):
    pass


def _mask_count(mask: np.ndarray) -> float:
    count = float(np.count_nonzero(mask))
    if count == 0:
        raise EmptyMaskError("mask selects no valid pixels")
    return count


def l1_loss(pred: Tensor, gt: np.ndarray, mask: np.ndarray) -> Tensor:
    mask = np.asarray(mask, dtype=bool)
    n = _mask_count(mask)
    diff = ad.absolute(pred - ad.Tensor(np.where(mask, gt, 0.0)))
    return ad.mul_scalar(ad.sum_all(ad.mul_const(diff, mask)), 1.0 / n)


def mse_loss(pred: Tensor, gt: np.ndarray, mask: np.ndarray) -> Tensor:
    mask = np.asarray(mask, dtype=bool)
    n = _mask_count(mask)
    diff = ad.mul_const(pred - ad.Tensor(np.where(mask, gt, 0.0)), mask)
    return ad.mul_scalar(ad.sum_all(ad.square(diff)), 1.0 / n)


def stde(pred: Tensor, gt: np.ndarray, mask: np.ndarray) -> Tensor:
    """Root of the masked mean squared error; no mean subtraction, so it equals RMSE."""
    return ad.sqrt(mse_loss(pred, gt, mask))


def ce_loss(logits: Tensor, labels: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean -log p(true class) over valid pixels; ``logits`` is [N,2,H,W], labels [N,H,W]."""
    mask = np.asarray(mask, dtype=bool)
    n = _mask_count(mask)
    labels = np.where(mask, labels, 0.0) > 0.5
    onehot = np.stack([~labels & mask, labels & mask], axis=1).astype(np.float64)
    logp = ad.log_softmax(logits, axis=1)
    return ad.mul_scalar(ad.sum_all(ad.mul_const(logp, onehot)), -1.0 / n)


@dataclass(frozen=True)
class LossWeights:
    regression: dict = field(default_factory=lambda: {t: 1.0 for t in REGRESSION_TARGETS})
    ce_weight: float = 1.0
    stde_weight: float = 0.1

    def __post_init__(self):
        values = list(self.regression.values()) + [self.ce_weight, self.stde_weight]
        if any(v < 0 for v in values):
            raise ValueError("loss weights must be non-negative")
        if not any(v > 0 for v in values):
            raise ValueError("at least one loss weight must be positive")


def composite_loss(pred: dict[str, Tensor], gt: dict[str, np.ndarray], weights: LossWeights | None = None) -> Tensor:
    """Sum_k w_k * l1_k + w_ce * ce_LOS + lambda * Sum_k stde_k.

    ``gt`` maps each target to its normalized HR map [N,H,W]; building pixels
    carry the normalized sentinel and are masked out.
    """
    weights = weights or LossWeights()
    total = None

    def acc(term):
        nonlocal total
        total = term if total is None else total + term

    for t in REGRESSION_TARGETS:
        w = weights.regression.get(t, 0.0)
        if w == 0 and weights.stde_weight == 0:
            continue
        g = gt[t]
        mask = g > BUILDING_THRESHOLD
        p = ad.reshape(pred[t], g.shape)
        if w:
            acc(ad.mul_scalar(l1_loss(p, g, mask), w))
        if weights.stde_weight:
            acc(ad.mul_scalar(stde(p, g, mask), weights.stde_weight))
    if weights.ce_weight:
        g = gt["LOS"]
        acc(ad.mul_scalar(ce_loss(pred["LOS"], g, g > BUILDING_THRESHOLD), weights.ce_weight))
    if total is None:
        raise ValueError("all loss weights are zero")
    return total


def target_loss(pred: dict[str, Tensor], gt: dict[str, np.ndarray], target: str,
                weights: LossWeights | None = None) -> Tensor:
    """Single-target objective: l1 + lambda * stde for regression, cross-entropy for LOS."""
    weights = weights or LossWeights()
    g = gt[target]
    mask = g > BUILDING_THRESHOLD
    if target == "LOS":
        return ce_loss(pred["LOS"], g, mask)
    p = ad.reshape(pred[target], g.shape)
    loss = l1_loss(p, g, mask)
    if weights.stde_weight:
        loss = loss + ad.mul_scalar(stde(p, g, mask), weights.stde_weight)
    return loss


# -------------------------------------------------------------------- metrics

def regression_metrics(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray) -> dict[str, float]:
    mask = np.asarray(mask, dtype=bool)
    _mask_count(mask)
    e = (np.asarray(pred, dtype=np.float64) - np.asarray(gt, dtype=np.float64))[mask]
    mse = float(np.mean(e * e))
    rmse = float(np.sqrt(mse))
    return {"AME": float(abs(np.mean(e))), "MAE": float(np.mean(np.abs(e))), "RMSE": rmse, "STDE": rmse}


def accuracy(pred_labels: np.ndarray, gt_labels: np.ndarray, mask: np.ndarray) -> float:
    mask = np.asarray(mask, dtype=bool)
    n = _mask_count(mask)
    hit = (np.asarray(pred_labels) > 0.5) == (np.asarray(gt_labels) > 0.5)
    return float(np.count_nonzero(hit & mask)) / n


def metrics(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray, kind: str) -> dict[str, float]:
    if kind == "LOS":
        return {"accuracy": accuracy(pred, gt, mask)}
    return regression_metrics(pred, gt, mask)


REPORT_COLUMNS = ("target", "AME", "MAE", "RMSE", "STDE", "accuracy", "scale")


@dataclass
class EvalReport:
    scale: int
    rows: dict[str, dict[str, float]]  # target -> metric -> value
    sample_count: int = 0
    valid_fraction: float = 0.0

    @property
    def los_accuracy(self) -> float:
        return self.rows["LOS"]["accuracy"]

    def mae(self, target: str) -> float:
        return self.rows[target]["MAE"]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for t in TARGETS:
            r = self.rows[t]
            if t == "LOS":
                writer.writerow([t, "", "", "", "", f"{r['accuracy']:.9g}", self.scale])
            else:
                writer.writerow([t] + [f"{r[m]:.9g}" for m in ("AME", "MAE", "RMSE", "STDE")] + ["", self.scale])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "EvalReport":
        rows = {}
        scale = 0
        for rec in csv.DictReader(io.StringIO(text)):
            scale = int(rec["scale"])
            if rec["target"] == "LOS":
                rows["LOS"] = {"accuracy": float(rec["accuracy"])}
            else:
                rows[rec["target"]] = {m: float(rec[m]) for m in ("AME", "MAE", "RMSE", "STDE")}
        return cls(scale, rows)
