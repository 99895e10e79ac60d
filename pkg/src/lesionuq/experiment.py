"""The uncertainty-filtering experiment on phantom scenes.

Build one :class:`Scan` per scene, pick the ``eta`` that keeps a target
share of candidate lesions, and compare the filtered curve with the
unfiltered one per size bin.
"""
from __future__ import annotations

from dataclasses import dataclass

from .aggregate import (
    BASELINE_ETA, CurveComparison, RocTable, Scan, compare_curves, curve,
    lesion_eta_for_retention, roc_sweep,
)
from .lesions import BINS
from .measures import MEASURES, compute_measure
from .phantom import PhantomConfig, PhantomScene, generate_series
from .volume import mean_prediction

DEFAULT_THETAS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
DEFAULT_RETENTION = 0.98


def scan_from_scene(scene: PhantomScene, measures=MEASURES, name: str = "") -> Scan:
    maps = {m: compute_measure(scene.stack, m) for m in measures}
    return Scan(scene.gt_mask, mean_prediction(scene.stack), maps, name)


@dataclass(frozen=True)
class FilteringResult:
    measure: str
    eta: float
    table: RocTable
    comparisons: dict   # bin (incl. "all") -> CurveComparison

    def improvement(self, bin: str) -> float:
        return self.comparisons[bin].mean_improvement()


def filtering_experiment(scans, measure: str, thetas=DEFAULT_THETAS,
                         retention: float = DEFAULT_RETENTION) -> FilteringResult:
    """Lesion-level sweep at the baseline and at the eta keeping ``retention``."""
    eta = lesion_eta_for_retention(scans, measure, thetas, retention)
    table = roc_sweep(scans, measure, "lesion", [eta], thetas)
    comparisons: dict[str, CurveComparison] = {}
    for b in ("all", *BINS):
        comparisons[b] = compare_curves(curve(table, measure, "lesion", BASELINE_ETA, b),
                                        curve(table, measure, "lesion", eta, b))
    return FilteringResult(measure, eta, table, comparisons)


def phantom_scans(count: int = 50, cfg: PhantomConfig | None = None, measures=MEASURES) -> list[Scan]:
    cfg = cfg or PhantomConfig()
    return [scan_from_scene(s, measures, f"scene_{i:03d}")
            for i, s in enumerate(generate_series(cfg, count))]
