"""Spatial and temporal accuracy of change maps, and threshold tuning."""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ._parallel import run_blocks
from .datacube import ChangeMap, DataCube, DimensionMismatchError, ForestMask, ReferenceChangeMap
from .detector import DetectorParams, cube_evidence, declare, low_coverage_mask
from .model import build_histograms, quantile_thresholds

logger = logging.getLogger(__name__)

DEFAULT_Q_GRID = (0.01, 0.02, 0.05, 0.10, 0.20)
DEFAULT_L_GRID = (2.0, 5.0, 10.0, 1e2, 1e3, 1e4)
BA_VARIANTS = ("standard", "paper")


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int
    excluded: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass
class AccuracyReport:
    confusion: ConfusionMatrix
    pa: float
    ua: float
    oa: float
    ba_paper: float
    ba_standard: float
    mean_lag_days: float = math.nan
    lag_rmse_days: float = math.nan
    n_lag_pixels: int = 0
    year_crosstab: dict[str, int] = field(default_factory=dict)

    def ba(self, variant: str = "standard") -> float:
        if variant not in BA_VARIANTS:
            raise ValueError(f"BA variant must be one of {BA_VARIANTS}")
        return self.ba_standard if variant == "standard" else self.ba_paper

    def to_json(self) -> dict:
        out = asdict(self)
        for key, value in out.items():
            if isinstance(value, float) and math.isnan(value):
                out[key] = None
        return out

    def to_row(self) -> dict:
        cm = self.confusion
        return {
            "tp": cm.tp,
            "fp": cm.fp,
            "tn": cm.tn,
            "fn": cm.fn,
            "excluded": cm.excluded,
            "PA": self.pa,
            "UA": self.ua,
            "OA": self.oa,
            "BA_standard": self.ba_standard,
            "BA_paper": self.ba_paper,
            "mean_lag_days": self.mean_lag_days,
            "lag_rmse_days": self.lag_rmse_days,
        }


def _check_dims(change_map, ref: ReferenceChangeMap) -> None:
    if (change_map.height, change_map.width) != (ref.height, ref.width):
        raise DimensionMismatchError(
            f"change map is {change_map.width}x{change_map.height}, "
            f"reference is {ref.width}x{ref.height}"
        )


def confusion(change_map: ChangeMap, ref: ReferenceChangeMap) -> ConfusionMatrix:
    """Binary change/no-change confusion counts; low-coverage pixels are excluded."""
    _check_dims(change_map, ref)
    keep = ~change_map.low_coverage
    det = change_map.changed[keep]
    truth = ref.changed[keep]
    return ConfusionMatrix(
        tp=int((det & truth).sum()),
        fp=int((det & ~truth).sum()),
        tn=int((~det & ~truth).sum()),
        fn=int((~det & truth).sum()),
        excluded=int((~keep).sum()),
    )


def _ratio(num: int, den: int, name: str) -> float:
    if den == 0:
        warnings.warn(f"{name} is undefined (zero denominator)", RuntimeWarning, stacklevel=3)
        return math.nan
    return num / den


def _mean2(a: float, b: float) -> float:
    return 0.5 * (a + b)


def metrics(cm: ConfusionMatrix) -> AccuracyReport:
    """PA, UA, OA and both balanced-accuracy variants.

    ``ba_paper`` averages precision and negative predictive value,
    ``ba_standard`` averages sensitivity and specificity.
    """
    pa = _ratio(cm.tp, cm.tp + cm.fn, "PA")
    ua = _ratio(cm.tp, cm.tp + cm.fp, "UA")
    oa = _ratio(cm.tp + cm.tn, cm.total, "OA")
    npv = _ratio(cm.tn, cm.tn + cm.fn, "NPV")
    tnr = _ratio(cm.tn, cm.tn + cm.fp, "TNR")
    return AccuracyReport(cm, pa, ua, oa, _mean2(ua, npv), _mean2(pa, tnr))


def lags_days(change_map: ChangeMap, ref: ReferenceChangeMap) -> np.ndarray:
    """Detected minus reference date, in days, for pixels changed in both maps."""
    _check_dims(change_map, ref)
    both = change_map.changed & ref.changed & ~change_map.low_coverage
    det_days = np.array([d.toordinal() for d in change_map.dates], dtype=np.int64)
    ref_days = np.array([d.toordinal() for d in ref.dates], dtype=np.int64)
    return det_days[change_map.change_index[both]] - ref_days[ref.change_index[both]]


def mean_lag(change_map: ChangeMap, ref: ReferenceChangeMap) -> tuple[float, float]:
    """(mean lag, lag RMSE) in days; NaN pair without co-detected pixels.

    Only date-resolved references give a day-level lag.
    """
    if not ref.date_resolved:
        return math.nan, math.nan
    lags = lags_days(change_map, ref)
    if lags.size == 0:
        return math.nan, math.nan
    lags = lags.astype(np.float64)
    return float(lags.mean()), float(np.sqrt(np.mean(lags**2)))


def year_crosstab(change_map: ChangeMap, ref: ReferenceChangeMap) -> dict[str, int]:
    """Counts keyed ``"<reference year>-><detected year>"`` over co-detected pixels."""
    both = change_map.changed & ref.changed & ~change_map.low_coverage
    table: dict[str, int] = {}
    for y, x in np.argwhere(both):
        key = (
            f"{ref.dates[ref.change_index[y, x]].year}->"
            f"{change_map.dates[change_map.change_index[y, x]].year}"
        )
        table[key] = table.get(key, 0) + 1
    return dict(sorted(table.items()))


def assess(change_map: ChangeMap, ref: ReferenceChangeMap) -> AccuracyReport:
    report = metrics(confusion(change_map, ref))
    report.mean_lag_days, report.lag_rmse_days = mean_lag(change_map, ref)
    report.n_lag_pixels = int(lags_days(change_map, ref).size)
    if not ref.date_resolved:
        report.year_crosstab = year_crosstab(change_map, ref)
    return report


def write_report(report: AccuracyReport, path: str | Path) -> tuple[Path, Path]:
    """Write ``report.json`` and a one-row ``report.csv`` next to it."""
    import csv

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(report.to_json(), f, indent=2)
        f.write("\n")
    csv_path = path.with_suffix(".csv")
    row = report.to_row()
    with open(csv_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(row))
        writer.writeheader()
        writer.writerow(row)
    return path, csv_path


# ---------------------------------------------------------------------------
# tuning


@dataclass
class TuningResult:
    q: float
    L: float
    report: AccuracyReport
    ba_variant: str
    grid: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "q": self.q,
            "L": self.L,
            "ba_variant": self.ba_variant,
            "report": self.report.to_json(),
            "grid": [
                {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in row.items()}
                for row in self.grid
            ],
        }


def _score(value: float) -> float:
    return -math.inf if math.isnan(value) else value


def select_best(rows: Sequence[dict], variant: str = "standard") -> dict:
    """Highest BA; ties go to the smaller q, then the smaller L."""
    key = "BA_standard" if variant == "standard" else "BA_paper"
    return min(rows, key=lambda r: (-_score(r[key]), r["q"], r["L"]))


def tune_thresholds(
    cube: DataCube,
    mask: ForestMask,
    ref: ReferenceChangeMap,
    q_grid: Sequence[float] = DEFAULT_Q_GRID,
    L_grid: Sequence[float] = DEFAULT_L_GRID,
    ba_variant: str = "standard",
    n_bins: int = 64,
    epsilon: float = 1e-6,
    mode: str = "coherent",
    require_forest_onset: bool = True,
    workers: int | None = 1,
) -> TuningResult:
    """Exhaustive search over (q, L) for the best balanced accuracy.

    The evidence stack does not depend on ``L``, so it is computed once per
    ``q`` and thresholded for every ``L``.
    """
    if ba_variant not in BA_VARIANTS:
        raise ValueError(f"ba_variant must be one of {BA_VARIANTS}")
    if not q_grid or not L_grid:
        raise ValueError("tuning grid must not be empty")
    if not ref.changed.any():
        raise ValueError("the reference map has no changes, so PA and BA are undefined; cannot tune")
    base = build_histograms(cube, mask, n_bins, q_grid[0], epsilon, workers)
    low = low_coverage_mask(cube.observed())

    def evaluate_q(q: float) -> list[dict]:
        model = quantile_thresholds(base, cube, mask, q)
        rows = []
        # L only enters through the declaration step
        evidence = cube_evidence(model, cube, DetectorParams(L=2.0, mode=mode, require_forest_onset=require_forest_onset))
        for L in L_grid:
            idx, final = declare(evidence, L, low)
            change_map = ChangeMap(idx, cube.dates, final, low)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                report = assess(change_map, ref)
            rows.append({"q": float(q), "L": float(L), **report.to_row()})
        return rows

    # parallel over q values; each evaluation is single-threaded inside
    per_q = run_blocks(lambda s: evaluate_q(q_grid[s.start]), [slice(i, i + 1) for i in range(len(q_grid))], workers)
    grid = [row for rows in per_q for row in rows]
    best = select_best(grid, ba_variant)
    model = quantile_thresholds(base, cube, mask, best["q"])
    evidence = cube_evidence(model, cube, DetectorParams(L=best["L"], mode=mode, require_forest_onset=require_forest_onset))
    idx, final = declare(evidence, best["L"], low)
    report = assess(ChangeMap(idx, cube.dates, final, low), ref)
    logger.info("tuned q=%g L=%g BA_%s=%.4f", best["q"], best["L"], ba_variant, report.ba(ba_variant))
    return TuningResult(best["q"], best["L"], report, ba_variant, grid)
