"""Lesion-level uncertainty, uncertainty filtering and ROC sweeps.

A lesion's raw uncertainty is the sum of the logs of its voxel
uncertainties.  Raw values are min-max rescaled to [0, 1] over a cohort:
every candidate lesion of every scan at every sigmoid threshold of the
sweep, so one ``eta`` means the same thing along a whole curve.  A
candidate survives filtering at ``eta`` when its scaled value is strictly
below ``eta``.  Voxel-level filtering works the same way
on voxel maps rescaled over all scans.  ``eta = inf`` means no filtering.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .lesions import (
    BINS, MIN_LESION_SIZE, LesionSet, binarize, connected_components_18, prune_ground_truth,
)
from .metrics import MatchResult, match_lesions, rates, sum_results, voxel_counts
from .volume import Kind, LabelMask, VoxelGrid

LOG_FLOOR = 1e-12
BASELINE_ETA = math.inf
LEVELS = ("voxel", "lesion")
CSV_COLUMNS = ("measure", "level", "bin", "eta", "theta", "tp", "fp", "fn", "tpr", "fdr", "retention")


def check_eta(eta: float) -> float:
    eta = float(eta)
    if eta != BASELINE_ETA and not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must lie in [0, 1] (or be inf for no filtering), got {eta}")
    return eta


def lesion_uncertainty(lesion, umap: VoxelGrid) -> float:
    """Sum over the lesion's voxels of ``ln(max(U, 1e-12))``."""
    u = umap.values[tuple(lesion.voxels.T)].astype(np.float64)
    return float(np.sum(np.log(np.maximum(u, LOG_FLOOR))))


def lesion_uncertainties(lesions: LesionSet, umap: VoxelGrid) -> np.ndarray:
    if tuple(lesions.dims) != umap.dims:
        raise ValueError(f"lesion dims {tuple(lesions.dims)} != map dims {umap.dims}")
    return np.array([lesion_uncertainty(les, umap) for les in lesions], dtype=np.float64)


def rescale_cohort(raws) -> np.ndarray:
    """Min-max rescale to [0, 1]; a zero range maps everything to 0."""
    raws = np.asarray(raws, dtype=np.float64)
    if raws.size == 0:
        raise ValueError("cannot rescale an empty cohort")
    lo, hi = raws.min(), raws.max()
    if hi == lo:
        return np.zeros_like(raws)
    return np.clip((raws - lo) / (hi - lo), 0.0, 1.0)


def _rescale_with(values: np.ndarray, value_range) -> np.ndarray:
    lo, hi = value_range
    if hi <= lo:
        return np.zeros(values.shape, dtype=np.float64)
    return np.clip((values.astype(np.float64) - lo) / (hi - lo), 0.0, 1.0)


@dataclass(frozen=True)
class VoxelFilter:
    evaluable: LabelMask   # voxels whose scaled uncertainty is below eta
    predicted: LabelMask   # evaluable voxels with prob >= theta


def filter_voxels(prob: VoxelGrid, umap: VoxelGrid, theta: float, eta: float,
                  value_range=None) -> VoxelFilter:
    """Dual-threshold voxel filter.

    ``value_range`` is the cohort ``(min, max)`` used to rescale ``umap``;
    it defaults to the range of ``umap`` itself.
    """
    if prob.dims != umap.dims:
        raise ValueError(f"prob dims {prob.dims} != map dims {umap.dims}")
    eta = check_eta(eta)
    if value_range is None:
        value_range = (float(umap.values.min()), float(umap.values.max()))
    scaled = _rescale_with(umap.values, value_range)
    evaluable = scaled < eta
    predicted = binarize(prob, theta).bits & evaluable
    return VoxelFilter(LabelMask(evaluable), LabelMask(predicted))


def retained_candidates(candidates: LesionSet, scaled, eta: float) -> LesionSet:
    """Candidates with scaled uncertainty below eta; ids are kept from the source set."""
    eta = check_eta(eta)
    scaled = np.asarray(scaled, dtype=np.float64)
    if len(scaled) != len(candidates):
        raise ValueError(f"{len(scaled)} uncertainties for {len(candidates)} candidates")
    keep = [les for les, s in zip(candidates, scaled) if s < eta]
    return LesionSet(keep, candidates.dims)


def filter_lesions(candidates: LesionSet, scaled, gt: LesionSet, eta: float) -> MatchResult:
    """Match only the candidates that pass the uncertainty filter.

    Ground-truth lesions are never filtered, so removing a candidate can
    turn a detection into a miss.
    """
    return match_lesions(retained_candidates(candidates, scaled, eta), gt)


@dataclass(eq=False)
class Scan:
    """Per-scan inputs to a sweep: ground truth, mean prediction, uncertainty maps."""

    gt: LabelMask
    mean: VoxelGrid
    maps: dict = field(default_factory=dict)
    name: str = ""
    _gt_lesions: LesionSet | None = field(default=None, repr=False)
    _candidates: dict = field(default_factory=dict, repr=False)
    _raw: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.mean.kind is not Kind.PROBABILITY:
            raise ValueError("scan mean prediction must be a probability grid")
        if self.gt.dims != self.mean.dims:
            raise ValueError(f"gt dims {self.gt.dims} != prediction dims {self.mean.dims}")
        for name, grid in self.maps.items():
            if grid.dims != self.mean.dims:
                raise ValueError(f"map {name!r} dims {grid.dims} != prediction dims {self.mean.dims}")

    @property
    def gt_lesions(self) -> LesionSet:
        if self._gt_lesions is None:
            self._gt_lesions = prune_ground_truth(connected_components_18(self.gt))
        return self._gt_lesions

    def candidates(self, theta: float) -> LesionSet:
        theta = float(theta)
        if theta not in self._candidates:
            self._candidates[theta] = connected_components_18(binarize(self.mean, theta))
        return self._candidates[theta]

    def umap(self, measure: str) -> VoxelGrid:
        try:
            return self.maps[measure]
        except KeyError:
            raise KeyError(f"scan {self.name or '?'} has no {measure!r} map") from None

    def raw_lesion_uncertainty(self, measure: str, theta: float) -> np.ndarray:
        key = (measure, float(theta))
        if key not in self._raw:
            self._raw[key] = lesion_uncertainties(self.candidates(theta), self.umap(measure))
        return self._raw[key]


def cohort_lesion_uncertainty(scans, measure: str, thetas) -> dict[float, list[np.ndarray]]:
    """Scaled candidate uncertainties, keyed by theta then listed per scan.

    All candidates of all scans at all thetas form one rescaling cohort.
    """
    thetas = [float(t) for t in thetas]
    raws = [s.raw_lesion_uncertainty(measure, t) for t in thetas for s in scans]
    sizes = [len(r) for r in raws]
    if sum(sizes) == 0:
        scaled = np.empty(0)
    else:
        scaled = rescale_cohort(np.concatenate(raws))
    parts = np.split(scaled, np.cumsum(sizes)[:-1])
    n = len(scans)
    return {t: parts[k * n:(k + 1) * n] for k, t in enumerate(thetas)}


def cohort_voxel_range(scans, measure: str) -> tuple[float, float]:
    maps = [s.umap(measure).values for s in scans]
    return float(min(m.min() for m in maps)), float(max(m.max() for m in maps))


def eta_for_retention(scaled, target: float) -> float:
    """Threshold keeping about ``target`` of the values (those strictly below it)."""
    v = np.sort(np.asarray(scaled, dtype=np.float64).ravel())
    k = int(round(target * v.size))
    if k >= v.size:
        return BASELINE_ETA
    return float(v[k])


def lesion_eta_for_retention(scans, measure: str, thetas, target: float) -> float:
    """Eta keeping about ``target`` of the candidate lesions (3+ voxels), pooled over thetas."""
    cohort = cohort_lesion_uncertainty(scans, measure, thetas)
    kept = [sc[s.candidates(t).sizes >= MIN_LESION_SIZE]
            for t in cohort for s, sc in zip(scans, cohort[t])]
    return eta_for_retention(np.concatenate(kept) if kept else np.empty(0), target)


@dataclass(frozen=True)
class RocRow:
    measure: str
    level: str
    bin: str
    eta: float
    theta: float
    tp: int
    fp: int
    fn: int
    tpr: float
    fdr: float
    retention: float


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


@dataclass
class RocTable:
    rows: list[RocRow] = field(default_factory=list)

    def __len__(self):
        return len(self.rows)

    def select(self, **criteria) -> list[RocRow]:
        return [r for r in self.rows if all(getattr(r, k) == v for k, v in criteria.items())]

    def baseline(self, **criteria) -> list[RocRow]:
        return self.select(eta=BASELINE_ETA, **criteria)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow([_fmt(getattr(r, c)) for c in CSV_COLUMNS])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "RocTable":
        reader = csv.DictReader(io.StringIO(text))
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ValueError(f"unexpected CSV header {reader.fieldnames}")
        rows = []
        for d in reader:
            rows.append(RocRow(
                d["measure"], d["level"], d["bin"], float(d["eta"]), float(d["theta"]),
                int(d["tp"]), int(d["fp"]), int(d["fn"]),
                float(d["tpr"]), float(d["fdr"]), float(d["retention"])))
        return cls(rows)

    def to_json(self) -> str:
        def clean(v):
            if isinstance(v, float) and math.isinf(v):
                return "inf"
            if isinstance(v, float) and math.isnan(v):
                return None
            return v
        rows = [{k: clean(v) for k, v in asdict(r).items()} for r in self.rows]
        return json.dumps({"columns": list(CSV_COLUMNS), "rows": rows}, indent=1) + "\n"


def _retention(kept: int, total: int) -> float:
    return kept / total if total else 1.0


def _lesion_rows(scans, measure, etas, thetas, bins):
    rows = []
    cohort = cohort_lesion_uncertainty(scans, measure, thetas)
    for theta in thetas:
        cands = [s.candidates(theta) for s in scans]
        scaled = cohort[theta]
        for eta in etas:
            kept = [retained_candidates(c, sc, eta) for c, sc in zip(cands, scaled)]
            total = sum_results(match_lesions(k, s.gt_lesions) for k, s in zip(kept, scans))
            for b in bins:
                def n_in(sets):
                    return sum(1 for ls in sets for les in ls
                               if les.bin == b or (b == "all" and les.size >= MIN_LESION_SIZE))
                tp, fp, fn = total.counts(b)
                r = rates(tp, fp, fn)
                rows.append(RocRow(measure, "lesion", b, eta, theta, tp, fp, fn,
                                   r.tpr, r.fdr, _retention(n_in(kept), n_in(cands))))
    return rows


def _voxel_rows(scans, measure, etas, thetas):
    rows = []
    vrange = cohort_voxel_range(scans, measure)
    for theta in thetas:
        for eta in etas:
            tp = fp = fn = kept = total = 0
            for s in scans:
                f = filter_voxels(s.mean, s.umap(measure), theta, eta, vrange)
                a, b, c, _ = voxel_counts(f.predicted.bits, s.gt.bits, f.evaluable.bits)
                tp, fp, fn = tp + a, fp + b, fn + c
                kept += int(np.count_nonzero(f.predicted.bits))
                total += int(np.count_nonzero(binarize(s.mean, theta).bits))
            r = rates(tp, fp, fn)
            rows.append(RocRow(measure, "voxel", "all", eta, theta, tp, fp, fn,
                               r.tpr, r.fdr, _retention(kept, total)))
    return rows


def roc_sweep(scans, measure: str, level: str, etas, thetas, bins=("all", *BINS)) -> RocTable:
    """Counts and rates for every (eta, theta) pair, pooled over scans.

    Baseline rows (``eta = inf``) are always included first.  Voxel-level
    rows only carry the ``all`` bin; retention there is the fraction of
    above-threshold voxels that survive filtering.
    """
    scans = list(scans)
    if not scans:
        raise ValueError("roc_sweep needs at least one scan")
    if level not in LEVELS:
        raise ValueError(f"level must be one of {LEVELS}, got {level!r}")
    thetas = [float(t) for t in thetas]
    etas = [check_eta(e) for e in etas]
    if not thetas or not etas:
        raise ValueError("threshold lists must be non-empty")
    for b in bins:
        if b != "all" and b not in BINS:
            raise ValueError(f"unknown bin {b!r}")
    eta_list = [BASELINE_ETA] + sorted({e for e in etas if e != BASELINE_ETA}, reverse=True)
    if level == "lesion":
        rows = _lesion_rows(scans, measure, eta_list, thetas, list(bins))
    else:
        rows = _voxel_rows(scans, measure, eta_list, thetas)
    return RocTable(rows)


def curve(table: RocTable, measure: str, level: str, eta: float, bin: str = "all"):
    """(fdr, tpr) arrays of one curve, in theta order."""
    rows = sorted(table.select(measure=measure, level=level, eta=eta, bin=bin), key=lambda r: r.theta)
    return (np.array([r.fdr for r in rows], dtype=np.float64),
            np.array([r.tpr for r in rows], dtype=np.float64))


def _as_function(fdr, tpr):
    """Best TPR reachable at or below each FDR, as a non-decreasing function.

    Operating points are not monotone in theta once bins or filters thin out
    the counts, so the curve is the upper envelope of the points.
    """
    ok = ~(np.isnan(fdr) | np.isnan(tpr))
    fdr, tpr = fdr[ok], tpr[ok]
    if fdr.size == 0:
        return fdr, tpr
    order = np.lexsort((-tpr, fdr))
    fdr, tpr = fdr[order], np.maximum.accumulate(tpr[order])
    first = np.concatenate([[True], np.diff(fdr) > 0])
    return fdr[first], tpr[first]


def _step_at(x, fdr, tpr):
    return tpr[np.searchsorted(fdr, x, side="right") - 1]


@dataclass(frozen=True)
class CurveComparison:
    grid: np.ndarray       # shared FDR values compared
    base_tpr: np.ndarray
    other_tpr: np.ndarray

    @property
    def margin(self) -> np.ndarray:
        return self.other_tpr - self.base_tpr

    def dominance_fraction(self, tol: float = 0.0) -> float:
        if self.grid.size == 0:
            return math.nan
        return float(np.mean(self.margin >= -tol))

    def mean_improvement(self) -> float:
        return float(np.mean(self.margin)) if self.grid.size else math.nan


def compare_curves(base, other) -> CurveComparison:
    """Compare two (fdr, tpr) curves on their shared FDR range.

    The grid is every FDR value of either curve that falls inside the
    overlap of the two FDR ranges.  Each curve is read as a step function:
    the best TPR among its points with FDR at or below the grid value.
    """
    bf, bt = _as_function(*base)
    of, ot = _as_function(*other)
    if bf.size == 0 or of.size == 0:
        empty = np.empty(0)
        return CurveComparison(empty, empty, empty)
    lo, hi = max(bf[0], of[0]), min(bf[-1], of[-1])
    grid = np.unique(np.concatenate([bf, of]))
    grid = grid[(grid >= lo) & (grid <= hi)]
    return CurveComparison(grid, _step_at(grid, bf, bt), _step_at(grid, of, ot))
