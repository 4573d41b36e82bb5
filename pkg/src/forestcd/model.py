"""Histogram model of the reference forest class.

For every timestep and variable the masked (forest) values are binned into
a histogram whose edges are shared across all timesteps of that variable.
A pixel's similarity for one variable is the normalized bin mass at its
value, floored at ``epsilon``; the joint similarity is the product over
variables. Per timestep, the ``q`` quantile of the forest pixels' joint
similarities becomes the threshold below which a pixel looks non-forest.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from ._parallel import row_blocks, run_blocks
from .datacube import DataCube, DimensionMismatchError, ForestMask

DEFAULT_BINS = 64
DEFAULT_EPSILON = 1e-6
EDGE_MARGIN = 0.01


class ModelError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class HistogramSpec:
    """Bin edges per variable, shape (n_variables, n_bins + 1)."""

    edges: np.ndarray

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.float64)
        if edges.ndim != 2 or edges.shape[1] < 3:
            raise ModelError(f"edges must have shape (n_variables, B + 1) with B >= 2, got {edges.shape}")
        if not (np.diff(edges, axis=1) > 0).all():
            raise ModelError("bin edges must be strictly ascending")
        edges.setflags(write=False)
        object.__setattr__(self, "edges", edges)

    @property
    def n_bins(self) -> int:
        return self.edges.shape[1] - 1

    @property
    def n_variables(self) -> int:
        return self.edges.shape[0]

    def bin_index(self, values: np.ndarray, variable: int) -> np.ndarray:
        """Bin of each value; out-of-range values clamp to the edge bins.

        NaN maps to the last bin; callers mask NaN separately.
        """
        idx = np.searchsorted(self.edges[variable], values, side="right") - 1
        return np.clip(idx, 0, self.n_bins - 1)


def edges_from_range(lo: float, hi: float, n_bins: int) -> np.ndarray:
    """Edges over ``[lo, hi]`` widened by 1% of the range per side.

    A degenerate range (``lo == hi``) gets edges ``[v - 0.5, v + 0.5]``.
    """
    if n_bins < 2:
        raise ModelError(f"need at least 2 bins, got {n_bins}")
    span = hi - lo
    if span == 0.0:
        return np.linspace(lo - 0.5, hi + 0.5, n_bins + 1)
    return np.linspace(lo - EDGE_MARGIN * span, hi + EDGE_MARGIN * span, n_bins + 1)


def histogram_edges(values: np.ndarray, n_bins: int) -> np.ndarray:
    """Edges spanning the finite ``values`` (see :func:`edges_from_range`)."""
    values = np.asarray(values, dtype=np.float64)
    finite = values[~np.isnan(values)]
    if finite.size == 0:
        raise ModelError("no finite masked values to build histogram edges from")
    return edges_from_range(float(finite.min()), float(finite.max()), n_bins)


def quantile_rank(q: float, m: int) -> int:
    """Zero-based nearest-rank (lower) index ``ceil(q*m) - 1`` clamped to [0, m-1].

    ``q`` is taken at its shortest decimal representation so that e.g.
    ``0.05 * 100`` gives rank 4 rather than 5.
    """
    k = math.ceil(Fraction(repr(float(q))) * m) - 1
    return min(max(k, 0), m - 1)


@dataclass(frozen=True, eq=False)
class ForestModel:
    """Fitted forest histograms and per-timestep quantile thresholds.

    ``counts`` has shape (n_time, n_variables, n_bins). ``thresholds`` has
    one entry per timestep, NaN where the timestep had no forest data.
    """

    spec: HistogramSpec
    counts: np.ndarray
    q: float
    epsilon: float = DEFAULT_EPSILON
    thresholds: np.ndarray | None = None
    variables: tuple[str, ...] = ()
    dates: tuple = ()

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.ndim != 3 or counts.shape[1:] != (self.spec.n_variables, self.spec.n_bins):
            raise ModelError(f"counts shape {counts.shape} does not match the histogram spec")
        if (counts < 0).any():
            raise ModelError("histogram counts must be non-negative")
        if not 0.0 < self.q < 1.0:
            raise ModelError(f"q must lie in (0, 1), got {self.q}")
        if not 0.0 < self.epsilon < 1.0:
            raise ModelError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)
        totals = counts.sum(axis=2)
        with np.errstate(invalid="ignore", divide="ignore"):
            raw = counts / totals[:, :, None]
        raw[totals == 0] = 0.0
        probs = np.maximum(raw, self.epsilon)
        probs.setflags(write=False)
        object.__setattr__(self, "raw_probabilities", raw)
        object.__setattr__(self, "probabilities", probs)
        # a timestep is usable when every variable has forest samples
        object.__setattr__(self, "usable", (totals > 0).all(axis=1))
        if self.thresholds is not None:
            thr = np.asarray(self.thresholds, dtype=np.float64)
            if thr.shape != (counts.shape[0],):
                raise ModelError("one threshold per timestep expected")
            if (thr[~np.isnan(thr)] <= 0).any():
                raise ModelError("thresholds must be positive")
            thr.setflags(write=False)
            object.__setattr__(self, "thresholds", thr)

    @property
    def n_time(self) -> int:
        return self.counts.shape[0]

    @property
    def n_variables(self) -> int:
        return self.counts.shape[1]

    @property
    def n_bins(self) -> int:
        return self.counts.shape[2]

    @property
    def valid_thresholds(self) -> np.ndarray:
        if self.thresholds is None:
            raise ModelError("model has no thresholds yet; call quantile_thresholds")
        return ~np.isnan(self.thresholds)

    def similarity(self, value: float, t: int, variable: int) -> float:
        """Forest similarity of a single value (NaN in, NaN out)."""
        if math.isnan(value):
            return math.nan
        b = int(self.spec.bin_index(np.float64(value), variable))
        return float(self.probabilities[t, variable, b])

    def joint_similarity(self, values, t: int) -> float:
        """Product over variables of the floored per-variable similarities."""
        p = 1.0
        for i, value in enumerate(values):
            s = self.similarity(float(value), t, i)
            if math.isnan(s):
                return math.nan
            p *= s
        return p

    def joint_similarity_at(self, values: np.ndarray, t: int) -> np.ndarray:
        """Joint similarity at timestep ``t`` of ``values`` shaped (n_variables, ...)."""
        joint = None
        for v in range(self.n_variables):
            x = values[v].astype(np.float64)
            p = self.probabilities[t, v, self.spec.bin_index(x, v)]
            joint = p if joint is None else joint * p
        joint[np.isnan(values[0])] = np.nan
        return joint

    def joint_similarity_array(self, values: np.ndarray) -> np.ndarray:
        """Vectorized joint similarity.

        ``values`` has shape (n_time, n_variables, ...); the result has shape
        (n_time, ...) and is NaN where the pixel is unobserved. The product
        is taken variable by variable in order, like :meth:`joint_similarity`.
        """
        if values.shape[:2] != (self.n_time, self.n_variables):
            raise DimensionMismatchError("values do not match the model's (time, variable) axes")
        t_idx = np.arange(self.n_time).reshape((-1,) + (1,) * (values.ndim - 2))
        joint = None
        for v in range(self.n_variables):
            x = values[:, v].astype(np.float64)
            b = self.spec.bin_index(x, v)
            p = self.probabilities[t_idx, v, b]
            joint = p if joint is None else joint * p
        joint[np.isnan(values[:, 0])] = np.nan
        return joint

    def with_thresholds(self, thresholds: np.ndarray, q: float | None = None) -> "ForestModel":
        return ForestModel(
            self.spec,
            self.counts,
            self.q if q is None else q,
            self.epsilon,
            thresholds,
            self.variables,
            self.dates,
        )

    # -- serialization -----------------------------------------------------

    def to_json(self) -> dict:
        thr = None
        if self.thresholds is not None:
            thr = [None if math.isnan(v) else float(v) for v in self.thresholds]
        return {
            "version": 1,
            "variables": list(self.variables),
            "dates": [d.isoformat() for d in self.dates],
            "bins": self.n_bins,
            "q": self.q,
            "epsilon": self.epsilon,
            "edges": self.spec.edges.tolist(),
            "counts": self.counts.tolist(),
            "thresholds": thr,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ForestModel":
        import datetime as dt

        thr = obj.get("thresholds")
        if thr is not None:
            thr = np.array([np.nan if v is None else v for v in thr], dtype=np.float64)
        return cls(
            HistogramSpec(np.array(obj["edges"], dtype=np.float64)),
            np.array(obj["counts"], dtype=np.int64),
            float(obj["q"]),
            float(obj.get("epsilon", DEFAULT_EPSILON)),
            thr,
            tuple(obj.get("variables", ())),
            tuple(dt.date.fromisoformat(d) for d in obj.get("dates", ())),
        )

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            json.dump(self.to_json(), f)
            f.write("\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "ForestModel":
        with open(path) as f:
            return cls.from_json(json.load(f))


def _masked(cube: DataCube, mask: ForestMask, t: int) -> np.ndarray:
    """Masked pixel values at timestep ``t``, shape (n_variables, N).

    Fitting works one timestep at a time so that memory stays a small
    multiple of one time slice.
    """
    return cube.values[t][:, mask.flags]


def _check_mask(cube: DataCube, mask: ForestMask) -> None:
    mask.check_matches(cube)
    if mask.size == 0:
        raise ModelError("the forest mask is empty")


def masked_range(cube: DataCube, mask: ForestMask, variable: int) -> tuple[float, float]:
    """Min and max of the finite masked values of one variable."""
    lo, hi = math.inf, -math.inf
    for t in range(cube.n_time):
        x = _masked(cube, mask, t)[variable]
        x = x[~np.isnan(x)]
        if x.size:
            lo = min(lo, float(x.min()))
            hi = max(hi, float(x.max()))
    if lo > hi:
        raise ModelError("all masked values are NaN")
    return lo, hi


def build_histograms(
    cube: DataCube,
    mask: ForestMask,
    n_bins: int = DEFAULT_BINS,
    q: float = 0.05,
    epsilon: float = DEFAULT_EPSILON,
    workers: int | None = 1,
) -> ForestModel:
    """Fit the per-(timestep, variable) forest histograms (no thresholds yet)."""
    _check_mask(cube, mask)
    edges = np.stack(
        [edges_from_range(*masked_range(cube, mask, v), n_bins) for v in range(cube.n_variables)]
    )
    spec = HistogramSpec(edges)

    def count_block(tslice: slice) -> np.ndarray:
        out = np.zeros((tslice.stop - tslice.start, cube.n_variables, n_bins), dtype=np.int64)
        for i, t in enumerate(range(tslice.start, tslice.stop)):
            masked = _masked(cube, mask, t)
            for v in range(cube.n_variables):
                x = masked[v].astype(np.float64)
                x = x[~np.isnan(x)]
                out[i, v] = np.bincount(spec.bin_index(x, v), minlength=n_bins)
        return out

    parts = run_blocks(count_block, row_blocks(cube.n_time, 8), workers)
    counts = np.concatenate(parts, axis=0)
    return ForestModel(spec, counts, q, epsilon, None, cube.variables, cube.dates)


def forest_joint_similarities(model: ForestModel, cube: DataCube, mask: ForestMask) -> np.ndarray:
    """Joint similarity of every masked pixel, shape (n_time, N), NaN where unobserved."""
    _check_mask(cube, mask)
    return np.stack([model.joint_similarity_at(_masked(cube, mask, t), t) for t in range(cube.n_time)])


def threshold_at(joint: np.ndarray, q: float) -> float:
    """Nearest-rank (lower) ``q`` quantile of the finite entries, NaN if none."""
    p = joint[~np.isnan(joint)]
    if p.size == 0:
        return math.nan
    return float(np.sort(p)[quantile_rank(q, p.size)])


def thresholds_from_similarities(joint: np.ndarray, q: float, usable: np.ndarray) -> np.ndarray:
    """Per-timestep thresholds from a (n_time, N) similarity array."""
    return np.array(
        [threshold_at(joint[t], q) if usable[t] else math.nan for t in range(joint.shape[0])]
    )


def quantile_thresholds(model: ForestModel, cube: DataCube, mask: ForestMask, q: float | None = None) -> ForestModel:
    """Return ``model`` with the per-timestep ``q`` quantile thresholds set.

    Timesteps without forest data keep a NaN threshold and are skipped by
    the detector.
    """
    q = model.q if q is None else q
    if not 0.0 < q < 1.0:
        raise ModelError(f"q must lie in (0, 1), got {q}")
    _check_mask(cube, mask)
    thresholds = np.full(cube.n_time, np.nan)
    for t in range(cube.n_time):
        if model.usable[t]:
            thresholds[t] = threshold_at(model.joint_similarity_at(_masked(cube, mask, t), t), q)
    return model.with_thresholds(thresholds, q)


def fit_model(
    cube: DataCube,
    mask: ForestMask,
    n_bins: int = DEFAULT_BINS,
    q: float = 0.05,
    epsilon: float = DEFAULT_EPSILON,
    workers: int | None = 1,
) -> ForestModel:
    """Histograms plus thresholds in one call."""
    model = build_histograms(cube, mask, n_bins, q, epsilon, workers)
    return quantile_thresholds(model, cube, mask, q)
