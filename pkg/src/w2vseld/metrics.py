"""Segment-based SELD metrics on 100 ms segments.

SED: error rate and F1 from per-segment TP/FP/FN counts, optionally
location-aware (a true positive also needs an angular error below a threshold).
DOA: mean angular error over optimally matched pairs, and frame recall (share of
segments whose predicted event count equals the reference count). Composite:

    SED_score  = (ER + (1 - F1)) / 2
    DOA_score  = (DOA_error / 180 + (1 - FR)) / 2
    SELD_score = (SED_score + DOA_score) / 2
"""

from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .annotation import SeldAnnotation

REPORT_FIELDS = ("er", "f1", "doa_error_deg", "frame_recall", "sed_score", "doa_score", "seld_score")


def angular_distance(a, b) -> float:
    """Angle between two directions in degrees."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("angular distance undefined for a zero vector")
    # atan2 form stays accurate near 0 and 180 degrees where arccos does not
    return float(np.degrees(np.arctan2(np.linalg.norm(np.cross(a, b)), np.dot(a, b))))


def _distance_matrix(ref, pred):
    cross = np.linalg.norm(np.cross(ref[:, None, :], pred[None, :, :]), axis=-1)
    return np.degrees(np.arctan2(cross, ref @ pred.T))


def match_doas(ref, pred):
    """Minimum-total-angle assignment between two sets of directions.

    Returns the matched distances (``min(len(ref), len(pred))`` of them).
    Exhaustive for up to three events a side, Hungarian otherwise.
    """
    ref = np.asarray(ref, dtype=np.float64).reshape(-1, 3)
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    if len(ref) == 0 or len(pred) == 0:
        return np.zeros(0)
    dist = _distance_matrix(ref, pred)
    if max(dist.shape) <= 3:
        transpose = dist.shape[0] > dist.shape[1]
        d = dist.T if transpose else dist
        best = None
        for cols in itertools.permutations(range(d.shape[1]), d.shape[0]):
            picked = d[np.arange(d.shape[0]), cols]
            if best is None or picked.sum() < best.sum():
                best = picked
        return best
    rows, cols = linear_sum_assignment(dist)
    return dist[rows, cols]


@dataclass
class SegmentCounts:
    """Totals accumulated over segments (and clips, via ``+``)."""

    tp: int = 0
    fp: int = 0
    fn: int = 0
    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0
    n_ref: int = 0
    n_pred: int = 0
    num_segments: int = 0
    count_matches: int = 0
    doa_pairs: int = 0
    doa_error_sum: float = 0.0

    def __add__(self, other):
        return SegmentCounts(**{k: getattr(self, k) + getattr(other, k) for k in asdict(self)})

    @property
    def error_rate(self):
        if self.n_ref == 0:
            return self.insertions / max(1, self.n_pred) if self.insertions > 0 else 0.0
        return (self.substitutions + self.deletions + self.insertions) / self.n_ref

    @property
    def f1(self):
        denom = 2 * self.tp + self.fp + self.fn
        return 1.0 if denom == 0 else 2 * self.tp / denom

    @property
    def doa_error(self):
        return self.doa_error_sum / self.doa_pairs if self.doa_pairs else 0.0

    @property
    def frame_recall(self):
        return self.count_matches / self.num_segments if self.num_segments else 1.0

    @property
    def degenerate(self):
        flags = []
        if self.n_ref == 0:
            flags.append("no_reference_events")
        if self.doa_pairs == 0:
            flags.append("no_doa_matches")
        return flags


def count_segments(ref: SeldAnnotation, pred: SeldAnnotation, location_aware=False, threshold_deg=20.0,
                   num_frames=None) -> SegmentCounts:
    if ref.num_classes != pred.num_classes:
        raise ValueError(f"class count mismatch: {ref.num_classes} vs {pred.num_classes}")
    F = num_frames if num_frames is not None else max(ref.frame_count, pred.frame_count)
    ref_act, ref_doa = ref.to_dense(F)
    pred_act, pred_doa = pred.to_dense(F)
    both = ref_act & pred_act
    if location_aware and both.any():
        dot = np.einsum("fnk,fnk->fn", ref_doa, pred_doa)
        cross = np.linalg.norm(np.cross(ref_doa, pred_doa), axis=-1)
        close = np.degrees(np.arctan2(cross, dot)) < threshold_deg
        both &= close
    tp = both.sum(axis=1)
    n_r = ref_act.sum(axis=1)
    n_p = pred_act.sum(axis=1)
    fp = n_p - tp
    fn = n_r - tp
    counts = SegmentCounts(
        tp=int(tp.sum()), fp=int(fp.sum()), fn=int(fn.sum()),
        substitutions=int(np.minimum(fn, fp).sum()),
        deletions=int(np.maximum(0, fn - fp).sum()),
        insertions=int(np.maximum(0, fp - fn).sum()),
        n_ref=int(n_r.sum()), n_pred=int(n_p.sum()),
        num_segments=F, count_matches=int((n_r == n_p).sum()),
    )
    for f in np.flatnonzero((n_r > 0) & (n_p > 0)):
        d = match_doas(ref_doa[f][ref_act[f]], pred_doa[f][pred_act[f]])
        counts.doa_pairs += len(d)
        counts.doa_error_sum += float(d.sum())
    return counts


def sed_metrics(ref, pred, location_aware=False, threshold_deg=20.0):
    """``(error_rate, f1)``."""
    c = count_segments(ref, pred, location_aware, threshold_deg)
    return c.error_rate, c.f1


def doa_metrics(ref, pred):
    """``(doa_error_deg, frame_recall)``."""
    c = count_segments(ref, pred)
    return c.doa_error, c.frame_recall


def seld_score(er, f1, doa_error_deg, frame_recall):
    """``(sed_score, doa_score, seld_score)``."""
    sed = (er + (1.0 - f1)) / 2.0
    doa = (doa_error_deg / 180.0 + (1.0 - frame_recall)) / 2.0
    return sed, doa, (sed + doa) / 2.0


@dataclass
class MetricsReport:
    er: float
    f1: float
    doa_error_deg: float
    frame_recall: float
    sed_score: float
    doa_score: float
    seld_score: float
    counts: dict = field(default_factory=dict)
    degenerate: list = field(default_factory=list)

    @classmethod
    def from_counts(cls, counts: SegmentCounts, doa_counts: SegmentCounts | None = None):
        """``doa_counts`` supplies the DOA side when the SED counts were location-aware."""
        d = doa_counts or counts
        er, f1, de, fr = counts.error_rate, counts.f1, d.doa_error, d.frame_recall
        return cls(er, f1, de, fr, *seld_score(er, f1, de, fr), counts=asdict(counts),
                   degenerate=sorted(set(counts.degenerate) | set(d.degenerate)))

    def to_dict(self):
        return asdict(self)


def evaluate_pairs(pairs, location_aware=False, threshold_deg=20.0) -> MetricsReport:
    """Report over ``(reference, prediction)`` annotation pairs with counts summed."""
    sed, doa = SegmentCounts(), SegmentCounts()
    for ref, pred in pairs:
        sed += count_segments(ref, pred, location_aware, threshold_deg)
        if location_aware:
            doa += count_segments(ref, pred)
    return MetricsReport.from_counts(sed, doa if location_aware else None)
