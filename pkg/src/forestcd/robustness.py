"""Label-noise sweeps: corrupt the forest ensemble and re-run the pipeline.

For a corruption fraction ``c`` the ensemble keeps its size ``N`` but
``ceil(c*N)`` members are swapped for pixels drawn from a pool of known
non-forest. One seeded permutation of the forest members and one of the pool
are drawn up front and every ``c`` takes prefixes of them, so the corrupted
set at a smaller ``c`` is contained in the one at a larger ``c``.
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from ._parallel import run_blocks
from .accuracy import AccuracyReport, assess
from .datacube import ChangeMap, DataCube, ForestMask, ReferenceChangeMap, write_change_map
from .detector import DetectorParams, detect_cube
from .model import fit_model

logger = logging.getLogger(__name__)

DEFAULT_FRACTIONS = tuple(round(0.02 * i, 2) for i in range(12))


def corrupted_count(c: float, n: int) -> int:
    """``ceil(c*n)`` with ``c`` read at its shortest decimal representation."""
    return math.ceil(Fraction(repr(float(c))) * n)


def parse_fractions(text: str) -> list[float]:
    """``"0:0.22:0.02"`` (inclusive range) or a comma list ``"0,0.1,0.2"``."""
    if ":" in text:
        start, stop, step = (Fraction(s) for s in text.split(":"))
        if step <= 0:
            raise ValueError("fraction step must be positive")
        n = int((stop - start) / step)
        return [float(start + i * step) for i in range(n + 1)]
    return [float(s) for s in text.split(",") if s.strip()]


@dataclass(frozen=True)
class CorruptionSpec:
    fractions: tuple[float, ...] = DEFAULT_FRACTIONS
    seed: int = 42

    def __post_init__(self):
        fr = tuple(float(c) for c in self.fractions)
        if not fr:
            raise ValueError("at least one corruption fraction is needed")
        if any(not 0.0 <= c < 1.0 for c in fr):
            raise ValueError("corruption fractions must lie in [0, 1)")
        if list(fr) != sorted(fr):
            raise ValueError("corruption fractions must be sorted ascending")
        object.__setattr__(self, "fractions", fr)


class CorruptionPlan:
    """Seeded orderings of ensemble members and pool pixels.

    Masks for every ``c`` are prefixes of the same two permutations.
    """

    def __init__(self, mask: ForestMask, pool: ForestMask, seed: int):
        if mask.flags.shape != pool.flags.shape:
            raise ValueError("mask and pool dimensions differ")
        if (mask.flags & pool.flags).any():
            raise ValueError("the non-forest pool overlaps the forest ensemble")
        self.shape = mask.flags.shape
        self.n = mask.size
        rng = np.random.default_rng(seed)
        self.members = rng.permutation(np.flatnonzero(mask.flags))
        self.pool = rng.permutation(np.flatnonzero(pool.flags))

    def mask(self, c: float) -> ForestMask:
        k = corrupted_count(c, self.n)
        if k > self.pool.size:
            raise ValueError(
                f"corruption c={c} needs {k} pool pixels but the pool holds {self.pool.size}"
            )
        flags = np.zeros(self.shape[0] * self.shape[1], dtype=bool)
        flags[self.members[: self.n - k]] = True
        flags[self.pool[:k]] = True
        return ForestMask(flags.reshape(self.shape))


def corrupt_mask(mask: ForestMask, pool: ForestMask, c: float, seed: int) -> ForestMask:
    """Ensemble of the same size with ``ceil(c*N)`` members taken from ``pool``."""
    return CorruptionPlan(mask, pool, seed).mask(c)


@dataclass
class SweepPoint:
    c: float
    n_corrupted: int
    report: AccuracyReport
    change_map: ChangeMap

    def row(self) -> dict:
        r = self.report
        return {
            "c": self.c,
            "n_corrupted": self.n_corrupted,
            "UA": r.ua,
            "PA": r.pa,
            "OA": r.oa,
            "BA_standard": r.ba_standard,
            "BA_paper": r.ba_paper,
            "mean_lag": r.mean_lag_days,
        }


@dataclass
class SweepResult:
    points: list[SweepPoint] = field(default_factory=list)

    @property
    def rows(self) -> list[dict]:
        return [p.row() for p in self.points]

    def column(self, name: str) -> np.ndarray:
        return np.array([row[name] for row in self.rows], dtype=np.float64)


def run_point(
    cube: DataCube,
    truth: ReferenceChangeMap,
    mask: ForestMask,
    n_bins: int,
    q: float,
    epsilon: float,
    params: DetectorParams,
) -> tuple[ChangeMap, AccuracyReport]:
    """Fit, detect and assess one ensemble."""
    model = fit_model(cube, mask, n_bins, q, epsilon)
    change_map, _ = detect_cube(model, cube, params)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        report = assess(change_map, truth)
    return change_map, report


def noise_sweep(
    cube: DataCube,
    truth: ReferenceChangeMap,
    mask: ForestMask,
    pool: ForestMask,
    spec: CorruptionSpec | None = None,
    n_bins: int = 64,
    q: float = 0.05,
    epsilon: float = 1e-6,
    params: DetectorParams | None = None,
    workers: int | None = 1,
) -> SweepResult:
    """Accuracy of the full pipeline for every corruption fraction."""
    spec = spec or CorruptionSpec()
    params = params or DetectorParams()
    plan = CorruptionPlan(mask, pool, spec.seed)
    needed = corrupted_count(spec.fractions[-1], plan.n)
    if needed > plan.pool.size:
        raise ValueError(
            f"c={spec.fractions[-1]} needs {needed} pool pixels, the pool holds {plan.pool.size}"
        )

    def work(s: slice) -> SweepPoint:
        c = spec.fractions[s.start]
        try:
            change_map, report = run_point(cube, truth, plan.mask(c), n_bins, q, epsilon, params)
        except Exception as exc:
            raise RuntimeError(f"sweep point c={c}: {exc}") from exc
        logger.info("sweep c=%.2f PA=%.3f UA=%.3f", c, report.pa, report.ua)
        return SweepPoint(c, corrupted_count(c, plan.n), report, change_map)

    blocks = [slice(i, i + 1) for i in range(len(spec.fractions))]
    return SweepResult(run_blocks(work, blocks, workers))


def write_sweep(result: SweepResult, directory: str | Path, figures: bool = True) -> dict[str, Path]:
    """Curve table, one change map per fraction, and the curve figure."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {"csv": directory / "sweep.csv"}
    rows = result.rows
    with open(paths["csv"], "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0]))
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    for point in result.points:
        write_change_map(point.change_map, directory / f"c_{point.c:.2f}", png=figures)
    if figures:
        from .plotting import plot_noise_curve, plot_sweep_panels

        paths["curve"] = plot_noise_curve(rows, directory / "sweep_accuracy.png")
        paths["panels"] = plot_sweep_panels(result.points, directory / "sweep_maps.png")
    return paths
