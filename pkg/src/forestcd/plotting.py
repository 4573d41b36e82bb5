"""Report figures.

Figures are built on :class:`matplotlib.figure.Figure` with the Agg canvas
rather than pyplot, so they can be rendered from worker threads.

Change maps use a fixed colormap: white where no change was declared, and
``viridis`` over the change timestep (early = dark purple, late = yellow).
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence

import matplotlib
import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure
from matplotlib.image import imsave

CHANGE_CMAP = "viridis"
LAG_CMAP = "RdBu_r"
NO_CHANGE_RGBA = (1.0, 1.0, 1.0, 1.0)

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}
GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def _figure(width: float = 6.0, height: float | None = None) -> Figure:
    fig = Figure(figsize=(width, height or width * GOLDEN), dpi=120)
    FigureCanvasAgg(fig)
    return fig


def _save(fig: Figure, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with matplotlib.rc_context(STYLE):
        fig.savefig(path, bbox_inches="tight")
    return path


def change_map_rgba(change_index: np.ndarray, n_time: int) -> np.ndarray:
    """RGBA image of a change-index raster (white = no change)."""
    cmap = matplotlib.colormaps[CHANGE_CMAP]
    scale = max(n_time - 1, 1)
    rgba = cmap(np.clip(change_index, 0, None) / scale)
    rgba[change_index < 0] = NO_CHANGE_RGBA
    return rgba


def render_change_map(change_map, path: str | Path) -> Path:
    """One image pixel per map pixel, no axes."""
    path = Path(path)
    imsave(path, change_map_rgba(change_map.change_index, len(change_map.dates)))
    return path


def _date_colorbar(fig, ax, mappable, dates, n_ticks: int = 6):
    cbar = fig.colorbar(mappable, ax=ax, fraction=0.046, pad=0.04)
    ticks = np.linspace(0, len(dates) - 1, min(n_ticks, len(dates))).round().astype(int)
    cbar.set_ticks(ticks)
    cbar.set_ticklabels([dates[i].isoformat() for i in ticks])
    cbar.set_label("detected date of change")
    return cbar


def plot_change_map(change_map, path: str | Path, title: str | None = None) -> Path:
    """Change map with a date colorbar."""
    with matplotlib.rc_context(STYLE):
        fig = _figure(5.0, 4.2)
        ax = fig.add_subplot()
        data = np.ma.masked_less(change_map.change_index, 0)
        cmap = matplotlib.colormaps[CHANGE_CMAP].with_extremes(bad="white")
        im = ax.imshow(data, cmap=cmap, vmin=0, vmax=len(change_map.dates) - 1, interpolation="nearest")
        _date_colorbar(fig, ax, im, change_map.dates)
        ax.set_xticks([])
        ax.set_yticks([])
        if title:
            ax.set_title(title)
        return _save(fig, path)


def plot_lag_map(change_map, ref, path: str | Path) -> Path:
    """Detection delay in days for pixels changed in both maps."""
    both = change_map.changed & ref.changed & ~change_map.low_coverage
    lag = np.full(change_map.change_index.shape, np.nan)
    det_days = np.array([d.toordinal() for d in change_map.dates])
    ref_days = np.array([d.toordinal() for d in ref.dates])
    lag[both] = det_days[change_map.change_index[both]] - ref_days[ref.change_index[both]]
    with matplotlib.rc_context(STYLE):
        fig = _figure(5.0, 4.2)
        ax = fig.add_subplot()
        finite = lag[~np.isnan(lag)]
        vmax = max(float(np.abs(finite).max()), 1.0) if finite.size else 1.0
        cmap = matplotlib.colormaps[LAG_CMAP].with_extremes(bad="white")
        im = ax.imshow(np.ma.masked_invalid(lag), cmap=cmap, vmin=-vmax, vmax=vmax, interpolation="nearest")
        fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04).set_label("change detection delay (days)")
        ax.set_xticks([])
        ax.set_yticks([])
        return _save(fig, path)


def plot_trace(trace, path: str | Path, L: float, title: str | None = None) -> Path:
    """Similarity, threshold and evidence of one pixel over time.

    Periods where the evidence is at or above ``L`` are shaded red and the
    declared change is marked with a vertical line.
    """
    t = np.arange(len(trace.evidence))
    with matplotlib.rc_context(STYLE):
        fig = _figure(6.5, 3.6)
        ax = fig.add_subplot()
        ax.semilogy(t, trace.similarity, color="black", lw=1.0, label="joint similarity")
        ax.semilogy(t, trace.threshold, color="tab:blue", lw=1.0, ls=":", label="forest threshold")
        ax.set_xlabel("timestep")
        ax.set_ylabel("similarity")
        ax2 = ax.twinx()
        # long runs overflow to inf; cap the drawn curve so the log axis stays finite
        shown = np.minimum(trace.evidence, L * 1e12)
        ax2.semilogy(t, shown, color="tab:red", ls="--", lw=1.0, label="evidence")
        ax2.axhline(L, color="tab:red", lw=0.6, alpha=0.5)
        ax2.set_ylabel("evidence")
        above = trace.evidence >= L
        for start, stop in _runs(above):
            ax.axvspan(start - 0.5, stop - 0.5, color="tab:red", alpha=0.15, lw=0)
        if trace.change_index is not None:
            ax.axvline(trace.change_index, color="tab:red", lw=1.2)
        lines = ax.get_lines() + ax2.get_lines()[:1]
        ax.legend(lines, [ln.get_label() for ln in lines], loc="lower left", frameon=False)
        if title:
            ax.set_title(title)
        return _save(fig, path)


def _runs(flags: np.ndarray):
    start = None
    for i, f in enumerate(flags):
        if f and start is None:
            start = i
        elif not f and start is not None:
            yield start, i
            start = None
    if start is not None:
        yield start, len(flags)


def plot_noise_curve(rows: Sequence[dict], path: str | Path) -> Path:
    """UA, PA and OA against the corruption fraction."""
    c = np.array([r["c"] for r in rows]) * 100
    with matplotlib.rc_context(STYLE):
        fig = _figure(5.0)
        ax = fig.add_subplot()
        for key, marker in (("UA", "o"), ("PA", "s"), ("OA", "^")):
            ax.plot(c, [r[key] for r in rows], marker=marker, ms=3, lw=1.0, label=key)
        ax.set_xlabel("corrupted ensemble members (%)")
        ax.set_ylabel("accuracy")
        ax.set_ylim(0, 1.02)
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_sweep_panels(points, path: str | Path, ncols: int = 6) -> Path:
    """Small change map per corruption fraction."""
    n = len(points)
    nrows = max(1, math.ceil(n / ncols))
    with matplotlib.rc_context(STYLE):
        fig = _figure(1.6 * min(n, ncols), 1.8 * nrows)
        for i, point in enumerate(points):
            ax = fig.add_subplot(nrows, min(n, ncols), i + 1)
            cm = point.change_map
            ax.imshow(change_map_rgba(cm.change_index, len(cm.dates)), interpolation="nearest")
            ax.set_title(f"{point.c * 100:.0f}%")
            ax.set_xticks([])
            ax.set_yticks([])
        return _save(fig, path)


def plot_tuning(rows: Sequence[dict], path: str | Path, variant: str = "standard") -> Path:
    """Balanced accuracy over the (q, L) grid."""
    key = "BA_standard" if variant == "standard" else "BA_paper"
    qs = sorted({r["q"] for r in rows})
    Ls = sorted({r["L"] for r in rows})
    grid = np.full((len(qs), len(Ls)), np.nan)
    for r in rows:
        grid[qs.index(r["q"]), Ls.index(r["L"])] = r[key]
    with matplotlib.rc_context(STYLE):
        fig = _figure(5.0, 3.6)
        ax = fig.add_subplot()
        im = ax.imshow(grid, cmap="magma", vmin=np.nanmin(grid) if np.isfinite(grid).any() else 0, vmax=1)
        ax.set_xticks(range(len(Ls)), [f"{v:g}" for v in Ls])
        ax.set_yticks(range(len(qs)), [f"{v:g}" for v in qs])
        ax.set_xlabel("L")
        ax.set_ylabel("q")
        for i in range(len(qs)):
            for j in range(len(Ls)):
                if np.isfinite(grid[i, j]):
                    ax.text(j, i, f"{grid[i, j]:.3f}", ha="center", va="center", fontsize=6, color="tab:cyan")
        fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04).set_label(f"BA ({variant})")
        return _save(fig, path)


def plot_forest_histograms(model, path: str | Path, t: int = 0) -> Path:
    """Forest histograms of every variable at timestep ``t``."""
    with matplotlib.rc_context(STYLE):
        fig = _figure(3.0 * model.n_variables, 2.6)
        for v in range(model.n_variables):
            ax = fig.add_subplot(1, model.n_variables, v + 1)
            edges = model.spec.edges[v]
            ax.stairs(model.counts[t, v], edges, fill=True, alpha=0.6)
            name = model.variables[v] if model.variables else f"variable {v}"
            ax.set_xlabel(f"{name} (dB)")
            ax.set_ylabel("forest pixels")
        return _save(fig, path)
