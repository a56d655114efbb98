"""Overlap, score-agreement and loss metrics, plus the patient-wise fold planner."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .volio import MaskVolume, check_same_dims

BCE_EPS = 1e-7


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class RegressionFit:
    slope: float
    intercept: float
    r: float
    r_squared: float
    n: int


@dataclass(frozen=True)
class FoldPlan:
    folds: Tuple[Tuple[Tuple, Tuple], ...]

    @property
    def test_sizes(self) -> List[int]:
        return [len(test) for _, test in self.folds]


def _confusion_arrays(pred: np.ndarray, truth: np.ndarray) -> ConfusionCounts:
    tp = int(np.count_nonzero(pred & truth))
    fp = int(np.count_nonzero(pred)) - tp
    fn = int(np.count_nonzero(truth)) - tp
    return ConfusionCounts(tp, fp, fn, pred.size - tp - fp - fn)


def confusion(pred: MaskVolume, truth: MaskVolume) -> ConfusionCounts:
    check_same_dims(pred, truth, "prediction and truth masks")
    return _confusion_arrays(pred.bits, truth.bits)


def iou(c: ConfusionCounts) -> float:
    """tp / (tp + fp + fn); 1.0 when both masks are empty."""
    denom = c.tp + c.fp + c.fn
    return 1.0 if denom == 0 else c.tp / denom


def dice(c: ConfusionCounts) -> float:
    """2tp / (2tp + fp + fn); 1.0 when both masks are empty."""
    denom = 2 * c.tp + c.fp + c.fn
    return 1.0 if denom == 0 else 2 * c.tp / denom


def per_slice_dice(pred: MaskVolume, truth: MaskVolume) -> np.ndarray:
    check_same_dims(pred, truth, "prediction and truth masks")
    p = pred.bits.reshape(pred.nz, -1)
    t = truth.bits.reshape(truth.nz, -1)
    inter = np.count_nonzero(p & t, axis=1)
    denom = np.count_nonzero(p, axis=1) + np.count_nonzero(t, axis=1)
    out = np.ones(pred.nz)
    nz = denom > 0
    out[nz] = 2.0 * inter[nz] / denom[nz]
    return out


def per_slice_dice_mean(pred: MaskVolume, truth: MaskVolume) -> float:
    """Dice per transverse slice, then averaged; slices empty in both count as 1.0."""
    return float(per_slice_dice(pred, truth).mean())


def ape(y_true: float, y_pred: float) -> float:
    if y_true == 0:
        raise ZeroDivisionError("APE undefined for y_true == 0")
    return abs(y_true - y_pred) / abs(y_true) * 100.0


def _paired(a, b) -> Tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim != 1 or a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    return a, b


def mape(y_true: Sequence[float], y_pred: Sequence[float]) -> float:
    t, p = _paired(y_true, y_pred)
    if t.size == 0:
        raise ValueError("MAPE needs at least one sample")
    if np.any(t == 0):
        raise ZeroDivisionError("MAPE undefined when y_true has a zero")
    return float(np.mean(np.abs(t - p) / np.abs(t)) * 100.0)


def r_squared(y_true: Sequence[float], y_pred: Sequence[float]) -> float:
    """1 - RSS/TSS of predictions against the truth."""
    t, p = _paired(y_true, y_pred)
    if t.size < 2:
        raise ValueError("R^2 needs at least two samples")
    tss = float(np.sum((t - t.mean()) ** 2))
    if tss == 0:
        raise ValueError("R^2 undefined for constant y_true")
    rss = float(np.sum((t - p) ** 2))
    return 1.0 - rss / tss


def bce(y: Sequence[float], y_prob: Sequence[float], eps: float = BCE_EPS) -> float:
    """Mean binary cross entropy with natural log; probabilities clamped to [eps, 1-eps]."""
    t, p = _paired(y, y_prob)
    p = np.clip(p, eps, 1.0 - eps)
    return float(-np.mean(t * np.log(p) + (1.0 - t) * np.log(1.0 - p)))


def jaccard_loss(truth_prob: Sequence[float], pred_prob: Sequence[float]) -> float:
    """1 - soft IoU, with soft IoU = sum(t*p) / (sum t + sum p - sum(t*p))."""
    t, p = _paired(truth_prob, pred_prob)
    inter = float(np.sum(t * p))
    union = float(np.sum(t) + np.sum(p)) - inter
    if union == 0:
        return 0.0
    return 1.0 - inter / union


def bce_jaccard_loss(truth_prob, pred_prob, eps: float = BCE_EPS) -> float:
    """Combined training loss: BCE + Jaccard loss."""
    return bce(truth_prob, pred_prob, eps) + jaccard_loss(truth_prob, pred_prob)


def regression_fit(x: Sequence[float], y: Sequence[float]) -> RegressionFit:
    """Ordinary least squares y = slope*x + intercept with Pearson r.

    r is defined as 0 when y is constant.
    """
    xa, ya = _paired(x, y)
    n = xa.size
    if n < 2:
        raise ValueError("regression needs at least two points")
    dx = xa - xa.mean()
    dy = ya - ya.mean()
    sxx = float(dx @ dx)
    if sxx == 0:
        raise ValueError("regression undefined for constant x")
    syy = float(dy @ dy)
    sxy = float(dx @ dy)
    slope = sxy / sxx
    intercept = float(ya.mean() - slope * xa.mean())
    r = 0.0 if syy == 0 else max(-1.0, min(1.0, sxy / math.sqrt(sxx * syy)))
    return RegressionFit(slope, intercept, r, r * r, n)


def kfold_split(ids: Sequence, k: int, seed: int = 0) -> FoldPlan:
    """Seeded shuffle, then contiguous test chunks; the larger chunks come first.

    With 11 ids and k=4 the test sets have sizes 3, 3, 3, 2.
    """
    ids = list(ids)
    if k < 2:
        raise ValueError("k must be >= 2")
    if k > len(ids):
        raise ValueError(f"k={k} exceeds the number of ids ({len(ids)})")
    if len(set(ids)) != len(ids):
        raise ValueError("ids must be unique")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    base, extra = divmod(len(ids), k)
    folds = []
    start = 0
    for f in range(k):
        size = base + (1 if f < extra else 0)
        test = tuple(shuffled[start:start + size])
        start += size
        test_set = set(test)
        train = tuple(i for i in ids if i not in test_set)
        folds.append((train, test))
    return FoldPlan(tuple(folds))
