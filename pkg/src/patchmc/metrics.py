"""Segmentation evaluation: confusion counts, overlap scores, Hausdorff
distance in millimeters, and ROC sweeps over the vote threshold f."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import directed_hausdorff

from .errors import EmptyMask, GeometryMismatch
from .fusion import VoteState, finalize
from .volume import MaskVolume


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class Scores:
    precision: float
    recall: float
    dsc: float
    jaccard: float
    degenerate: bool = False  # some denominator was 0 and the score defaulted to 0


@dataclass(frozen=True)
class RocCurve:
    points: tuple[tuple[int, float, float], ...]  # (f, tpr, fpr), f ascending


def confusion(pred: MaskVolume, gt: MaskVolume) -> Confusion:
    if pred.geometry != gt.geometry:
        raise GeometryMismatch("prediction and ground truth grids differ")
    p = pred.data.astype(bool)
    g = gt.data.astype(bool)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(np.count_nonzero(~p & ~g))
    return Confusion(tp=tp, fp=fp, fn=fn, tn=tn)


def _ratio(num: int, den: int) -> tuple[float, bool]:
    if den == 0:
        return 0.0, True
    return num / den, False


def scores(c: Confusion) -> Scores:
    """precision tp/(tp+fp), recall tp/(tp+fn), dsc 2tp/((tp+fp)+(tp+fn)),
    jaccard tp/((tp+fp)+(tp+fn)-tp); any 0/0 counts as 0 and is flagged."""
    precision, d1 = _ratio(c.tp, c.tp + c.fp)
    recall, d2 = _ratio(c.tp, c.tp + c.fn)
    dsc, d3 = _ratio(2 * c.tp, (c.tp + c.fp) + (c.tp + c.fn))
    jaccard, d4 = _ratio(c.tp, (c.tp + c.fp) + (c.tp + c.fn) - c.tp)
    return Scores(precision, recall, dsc, jaccard, degenerate=d1 or d2 or d3 or d4)


def hausdorff_mm(a: MaskVolume, b: MaskVolume) -> float:
    """Exact symmetric Hausdorff distance between foreground voxel centers,
    Euclidean in physical millimeters."""
    if a.geometry != b.geometry:
        raise GeometryMismatch("masks live on different grids")
    pa = np.argwhere(a.data > 0).astype(np.float64)
    pb = np.argwhere(b.data > 0).astype(np.float64)
    if len(pa) == 0 or len(pb) == 0:
        raise EmptyMask("hausdorff_mm needs both masks non-empty")
    spacing = np.asarray(a.geometry.spacing)
    pa *= spacing
    pb *= spacing
    d_ab = directed_hausdorff(pa, pb)[0]
    d_ba = directed_hausdorff(pb, pa)[0]
    return float(max(d_ab, d_ba))


def roc_sweep(state: VoteState, gt: MaskVolume, f_range) -> RocCurve:
    """One (tpr, fpr) point per vote threshold f; fpr over the whole grid."""
    if gt.geometry != state.geometry:
        raise GeometryMismatch("ground truth grid differs from vote-state grid")
    points = []
    for f in sorted(int(f) for f in f_range):
        _, mask = finalize(state, f)
        c = confusion(mask, gt)
        tpr, _ = _ratio(c.tp, c.tp + c.fn)
        fpr, _ = _ratio(c.fp, c.fp + c.tn)
        points.append((f, tpr, fpr))
    return RocCurve(points=tuple(points))
