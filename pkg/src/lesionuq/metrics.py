"""Lesion-level detection counts under the overlap rules used for MS lesions.

A ground-truth lesion is detected when the union of all candidate voxels,
grown by its 18-neighbourhood, covers at least 3 of its voxels or more
than half of them.  A candidate of 3+ voxels whose grown footprint touches
no ground-truth voxel is a false positive; smaller stray candidates are
ignored.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .lesions import BINS, MIN_LESION_SIZE, LesionSet, dilate_mask

DETECT_MIN_OVERLAP = 3


def _zero_bins():
    return {b: {"tp": 0, "fp": 0, "fn": 0} for b in BINS}


@dataclass
class MatchResult:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    per_bin: dict = field(default_factory=_zero_bins)
    gt_assignments: dict = field(default_factory=dict)         # gt id -> detected | missed
    candidate_assignments: dict = field(default_factory=dict)  # cand id -> matched | false_positive | ignored

    def __add__(self, other: "MatchResult") -> "MatchResult":
        """Pool counts over scans; per-lesion assignments are dropped."""
        per_bin = {b: {k: self.per_bin[b][k] + other.per_bin[b][k] for k in ("tp", "fp", "fn")}
                   for b in BINS}
        return MatchResult(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, per_bin)

    def counts(self, bin: str = "all") -> tuple[int, int, int]:
        if bin == "all":
            return self.tp, self.fp, self.fn
        c = self.per_bin[bin]
        return c["tp"], c["fp"], c["fn"]

    def to_json(self) -> dict:
        return {
            "tp": self.tp, "fp": self.fp, "fn": self.fn,
            "per_bin": self.per_bin,
            "gt_assignments": {str(k): v for k, v in self.gt_assignments.items()},
            "candidate_assignments": {str(k): v for k, v in self.candidate_assignments.items()},
        }


@dataclass(frozen=True)
class DetectionRates:
    """TPR and FDR; NaN marks an undefined ratio (zero denominator)."""

    tpr: float
    fdr: float


def rates(tp: int, fp: int, fn: int) -> DetectionRates:
    tpr = tp / (tp + fn) if tp + fn else math.nan
    fdr = 1.0 - tp / (tp + fp) if tp + fp else math.nan
    return DetectionRates(tpr, fdr)


def detection_rates(m: MatchResult, bin: str = "all") -> DetectionRates:
    return rates(*m.counts(bin))


def is_detected(overlap: int, gt_size: int) -> bool:
    return overlap >= DETECT_MIN_OVERLAP or 2 * overlap > gt_size


def match_lesions(candidates: LesionSet, gt: LesionSet, dims=None) -> MatchResult:
    """Match candidate lesions against pruned ground truth.

    Several candidates may jointly detect one ground-truth lesion, and one
    candidate may help detect several.
    """
    dims = tuple(dims) if dims is not None else tuple(gt.dims)
    if tuple(candidates.dims) != dims or tuple(gt.dims) != dims:
        raise ValueError(
            f"dims mismatch: candidates {tuple(candidates.dims)}, gt {tuple(gt.dims)}, expected {dims}")

    result = MatchResult()
    grown_candidates = dilate_mask(candidates.mask())
    for g in gt:
        if g.size < MIN_LESION_SIZE:
            raise ValueError(f"gt lesion {g.id} has {g.size} voxels; prune ground truth first")
        overlap = int(grown_candidates[tuple(g.voxels.T)].sum())
        if is_detected(overlap, g.size):
            result.gt_assignments[g.id] = "detected"
            result.tp += 1
            result.per_bin[g.bin]["tp"] += 1
        else:
            result.gt_assignments[g.id] = "missed"
            result.fn += 1
            result.per_bin[g.bin]["fn"] += 1

    # A candidate's grown footprint meets a GT voxel iff the candidate meets the grown GT.
    grown_gt = dilate_mask(gt.mask())
    for c in candidates:
        if grown_gt[tuple(c.voxels.T)].any():
            result.candidate_assignments[c.id] = "matched"
        elif c.size >= MIN_LESION_SIZE:
            result.candidate_assignments[c.id] = "false_positive"
            result.fp += 1
            result.per_bin[c.bin]["fp"] += 1
        else:
            result.candidate_assignments[c.id] = "ignored"
    return result


def sum_results(results) -> MatchResult:
    total = MatchResult()
    for r in results:
        total = total + r
    return total


def voxel_counts(pred: np.ndarray, gt: np.ndarray, evaluable: np.ndarray | None = None):
    """Voxel-level (tp, fp, fn, tn), restricted to ``evaluable`` voxels."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    ev = np.ones_like(pred) if evaluable is None else np.asarray(evaluable, dtype=bool)
    tp = int(np.count_nonzero(pred & gt & ev))
    fp = int(np.count_nonzero(pred & ~gt & ev))
    fn = int(np.count_nonzero(~pred & gt & ev))
    tn = int(np.count_nonzero(ev)) - tp - fp - fn
    return tp, fp, fn, tn
