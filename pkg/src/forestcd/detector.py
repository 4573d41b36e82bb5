"""Cumulative non-forest evidence and first-change declaration.

In the default ``coherent`` mode a pixel's evidence resets to 1 whenever its
joint similarity reaches the forest threshold, and otherwise grows by the
factor ``threshold / similarity``. A change is declared at the first
timestep where the evidence reaches ``L``.

Evidence only starts to accrue once the pixel has looked like forest at
least once (``require_forest_onset``), since a forest-to-non-forest
transition cannot start from a pixel that was never forest-like. Setting it
to False lets evidence accrue from the first observation.

``paper-literal`` mode evaluates the recursion with the similarity ratio the
other way up (``similarity / threshold``) and resets after a below-threshold
step, kept for comparison and auditing.

Unobserved timesteps and timesteps without a valid threshold carry the
evidence over unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._parallel import row_blocks, run_blocks
from .datacube import NO_CHANGE, ChangeMap, DataCube, DimensionMismatchError
from .model import ForestModel

MODES = ("coherent", "paper-literal")
LOW_COVERAGE_FRACTION = 0.5


@dataclass(frozen=True)
class DetectorParams:
    L: float = 10.0
    mode: str = "coherent"
    require_forest_onset: bool = True

    def __post_init__(self):
        if not self.L > 1:
            raise ValueError(f"L must be greater than 1, got {self.L}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")


def lambda_step(
    prev: float | None,
    p: float,
    threshold: float,
    mode: str = "coherent",
    prev_below: bool = False,
) -> float:
    """One evidence update.

    ``prev`` is the previous evidence or None at the start of the series.
    ``prev_below`` (paper-literal mode only) says whether the previous
    observed step was below its threshold. Returns the carried value when
    ``p`` or ``threshold`` is NaN.
    """
    if math.isnan(p) or math.isnan(threshold):
        return 1.0 if prev is None else prev
    if mode == "coherent":
        if p >= threshold:
            return 1.0
        base = 1.0 if prev is None else max(prev, 1.0)
        return base * (threshold / p)
    if mode == "paper-literal":
        if prev is None:
            return p / threshold
        if prev_below:
            return 1.0
        return prev * (p / threshold)
    raise ValueError(f"unknown mode {mode!r}")


@dataclass
class EvidenceTrace:
    similarity: np.ndarray
    threshold: np.ndarray
    below: np.ndarray
    evidence: np.ndarray
    skipped: np.ndarray
    change_index: int | None = None
    low_coverage: bool = False
    dates: tuple = field(default=())

    @property
    def final_evidence(self) -> float:
        if self.change_index is None:
            return math.nan
        return float(self.evidence[self.change_index])


def _coverage_ok(n_observed: int, n_time: int) -> bool:
    return (n_time - n_observed) <= LOW_COVERAGE_FRACTION * n_time


def trace_from_similarity(
    similarity: np.ndarray, thresholds: np.ndarray, params: DetectorParams
) -> EvidenceTrace:
    """Scalar reference loop over one pixel's joint similarity series."""
    n = len(similarity)
    evidence = np.empty(n)
    below = np.zeros(n, dtype=bool)
    skipped = np.zeros(n, dtype=bool)
    prev: float | None = None
    prev_below = False
    armed = not params.require_forest_onset or params.mode == "paper-literal"
    change = None
    for t in range(n):
        p = float(similarity[t])
        thr = float(thresholds[t])
        if math.isnan(p) or math.isnan(thr):
            skipped[t] = True
            evidence[t] = 1.0 if prev is None else prev
            continue
        below[t] = p < thr
        if params.mode == "coherent" and not armed:
            if below[t]:
                value = 1.0
            else:
                armed = True
                value = lambda_step(prev, p, thr, params.mode)
        else:
            value = lambda_step(prev, p, thr, params.mode, prev_below)
        evidence[t] = value
        prev = value
        prev_below = bool(below[t])
        if change is None and value >= params.L:
            change = t
    n_obs = int((~np.isnan(similarity)).sum())
    low = not _coverage_ok(n_obs, n)
    return EvidenceTrace(
        np.asarray(similarity, dtype=np.float64),
        np.asarray(thresholds, dtype=np.float64),
        below,
        evidence,
        skipped,
        None if low else change,
        low,
    )


def detect_pixel(model: ForestModel, series: np.ndarray, params: DetectorParams | None = None) -> EvidenceTrace:
    """Full evidence trace of one pixel.

    ``series`` has shape (n_time, n_variables).
    """
    params = params or DetectorParams()
    series = np.asarray(series)
    if series.shape != (model.n_time, model.n_variables):
        raise DimensionMismatchError(
            f"series shape {series.shape} does not match the model ({model.n_time}, {model.n_variables})"
        )
    similarity = np.array([model.joint_similarity(series[t], t) for t in range(model.n_time)])
    trace = trace_from_similarity(similarity, model.thresholds, params)
    trace.dates = model.dates
    return trace


def evidence_series(
    similarity: np.ndarray, thresholds: np.ndarray, params: DetectorParams
) -> np.ndarray:
    """Vectorized evidence for a (n_time, ...) similarity array.

    Performs per pixel exactly the floating-point operations of
    :func:`trace_from_similarity`, so results are bit-identical.
    """
    n_time = similarity.shape[0]
    shape = similarity.shape[1:]
    evidence = np.empty(similarity.shape)
    prev = np.ones(shape)
    started = np.zeros(shape, dtype=bool)
    prev_below = np.zeros(shape, dtype=bool)
    armed = np.full(shape, not params.require_forest_onset or params.mode == "paper-literal")
    for t in range(n_time):
        p = similarity[t]
        thr = thresholds[t]
        if math.isnan(thr):
            evidence[t] = prev
            continue
        obs = ~np.isnan(p)
        below = p < thr
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            if params.mode == "coherent":
                grown = np.maximum(prev, 1.0) * (thr / p)
                value = np.where(below, grown, 1.0)
                armed_now = armed | (obs & ~below)
                value = np.where(armed_now, value, 1.0)
                armed = armed_now
            else:
                ratio = p / thr
                value = np.where(started, np.where(prev_below, 1.0, prev * ratio), ratio)
        value = np.where(obs, value, prev)
        evidence[t] = value
        prev = value
        started = started | obs
        prev_below = np.where(obs, below, prev_below)
    return evidence


def first_crossing(evidence: np.ndarray, L: float) -> np.ndarray:
    """Index of the first timestep with evidence >= L, -1 if none."""
    hit = evidence >= L
    idx = np.argmax(hit, axis=0).astype(np.int32)
    idx[~hit.any(axis=0)] = NO_CHANGE
    return idx


def low_coverage_mask(observed: np.ndarray) -> np.ndarray:
    n_time = observed.shape[0]
    return (n_time - observed.sum(axis=0)) > LOW_COVERAGE_FRACTION * n_time


def declare(evidence: np.ndarray, L: float, low_coverage: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Change index and final evidence from an evidence stack."""
    idx = first_crossing(evidence, L)
    idx[low_coverage] = NO_CHANGE
    final = np.full(idx.shape, np.nan)
    hit = idx >= 0
    if hit.any():
        final[hit] = np.take_along_axis(evidence, np.maximum(idx, 0)[None], axis=0)[0][hit]
    return idx, final


def _check_consistent(model: ForestModel, cube: DataCube) -> None:
    if model.thresholds is None:
        raise ValueError("model has no thresholds")
    if (model.n_time, model.n_variables) != cube.shape[:2]:
        raise DimensionMismatchError(
            f"model has {model.n_time} timesteps x {model.n_variables} variables, "
            f"cube has {cube.n_time} x {cube.n_variables}"
        )
    if model.dates and tuple(model.dates) != cube.dates:
        raise DimensionMismatchError("model and cube dates differ", field="dates")


def cube_evidence(
    model: ForestModel,
    cube: DataCube,
    params: DetectorParams,
    workers: int | None = 1,
    block: int = 16,
) -> np.ndarray:
    """Evidence stack (n_time, height, width) for every pixel."""
    _check_consistent(model, cube)
    out = np.empty((cube.n_time, cube.height, cube.width))

    def work(rows: slice) -> None:
        sim = model.joint_similarity_array(cube.values[:, :, rows])
        out[:, rows] = evidence_series(sim, model.thresholds, params)

    run_blocks(work, row_blocks(cube.height, block), workers)
    return out


def detect_cube(
    model: ForestModel,
    cube: DataCube,
    params: DetectorParams | None = None,
    workers: int | None = 1,
    traces: list[tuple[int, int]] | None = None,
    block: int = 16,
) -> tuple[ChangeMap, dict[tuple[int, int], EvidenceTrace]]:
    """Detect the first change of every pixel.

    Returns the change map and, for each requested ``(x, y)`` in ``traces``,
    the pixel's full evidence trace.
    """
    params = params or DetectorParams()
    _check_consistent(model, cube)
    idx = np.empty((cube.height, cube.width), dtype=np.int32)
    final = np.empty((cube.height, cube.width))
    low = np.empty((cube.height, cube.width), dtype=bool)

    def work(rows: slice) -> None:
        values = cube.values[:, :, rows]
        sim = model.joint_similarity_array(values)
        evidence = evidence_series(sim, model.thresholds, params)
        low[rows] = low_coverage_mask(~np.isnan(values[:, 0]))
        idx[rows], final[rows] = declare(evidence, params.L, low[rows])

    run_blocks(work, row_blocks(cube.height, block), workers)
    change_map = ChangeMap(idx, cube.dates, final, low)
    out_traces = {}
    for x, y in traces or ():
        if not (0 <= x < cube.width and 0 <= y < cube.height):
            raise ValueError(f"trace pixel ({x}, {y}) is outside the cube")
        out_traces[(x, y)] = detect_pixel(model, cube.values[:, :, y, x], params)
    return change_map, out_traces
