"""Spatio-temporal non-local means for datacubes.

Each variable is filtered on its own. For an output sample at (t, y, x) the
search window spans ``2*search_t+1`` timesteps and ``2*search_xy+1`` pixels
in each spatial direction. Patches are spatial only: a candidate at
(t+dt, y+dy, x+dx) is compared with the reference through the Gaussian
weighted mean squared difference ``d2`` of the two ``(2r+1)x(2r+1)`` patches,
and gets the weight ``exp(-max(d2 - 2 sigma**2, 0) / h**2)``.

NaN samples never contribute, and positions outside the cube behave as NaN.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numba
import numpy as np

from ._parallel import row_blocks, run_blocks
from .datacube import DataCube

logger = logging.getLogger(__name__)

MAD_SCALE = 1.4826
H_FACTOR = 0.8
# Strength used when the noise estimate is exactly zero (constant data).
MIN_H = 1e-6


@dataclass(frozen=True)
class NlmParams:
    patch_radius: int = 1
    search_xy: int = 3
    search_t: int = 1
    h: float | None = None
    sigma: float | None = None

    def __post_init__(self):
        for name in ("patch_radius", "search_xy", "search_t"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 0:
                raise ValueError(f"{name} must be a non-negative integer, got {value!r}")
        if self.h is not None and not (self.h > 0 and math.isfinite(self.h)):
            raise ValueError(f"h must be positive, got {self.h!r}")
        if self.sigma is not None and not (self.sigma >= 0 and math.isfinite(self.sigma)):
            raise ValueError(f"sigma must be non-negative, got {self.sigma!r}")


def _mad_sigma(diffs: np.ndarray) -> float:
    diffs = diffs[~np.isnan(diffs)]
    if diffs.size == 0:
        raise ValueError("no finite horizontal differences to estimate noise from")
    mad = np.median(np.abs(diffs - np.median(diffs)))
    return float(MAD_SCALE * mad / math.sqrt(2.0))


def estimate_noise_sigma(cube: DataCube, variable: int) -> float:
    """Robust noise level of one variable from horizontal first differences.

    Returns ``1.4826 * MAD(diffs) / sqrt(2)``, pooled over all timesteps.
    """
    if cube.height < 2 or cube.width < 2:
        raise ValueError("noise estimation needs at least 2x2 pixels")
    data = cube.values[:, variable].astype(np.float64)
    if np.isnan(data).all():
        raise ValueError(f"variable {cube.variables[variable]!r} is entirely NaN")
    return _mad_sigma(np.diff(data, axis=-1))


def _gaussian_kernel(radius: int) -> np.ndarray:
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    scale = max(radius, 1)
    return np.exp(-(offsets**2) / (2.0 * scale**2))


@numba.njit(nogil=True, cache=True)
def _nlm_kernel(padded, t_start, t_stop, height, width, pr, sxy, st, g, two_sigma2, inv_h2, out):
    nt = t_stop - t_start
    eh = height + 2 * pr
    ew = width + 2 * pr
    acc = np.zeros((nt, height, width))
    wsum = np.zeros((nt, height, width))
    sq = np.empty((eh, ew))
    ok = np.empty((eh, ew))
    num_r = np.empty((height, ew))
    den_r = np.empty((height, ew))
    k = 2 * pr + 1
    for i in range(nt):
        tc = t_start + i + st
        for dt in range(-st, st + 1):
            for dy in range(-sxy, sxy + 1):
                for dx in range(-sxy, sxy + 1):
                    # squared differences over the output area grown by pr
                    for yy in range(eh):
                        for xx in range(ew):
                            d = padded[tc, sxy + yy, sxy + xx] - padded[
                                tc + dt, sxy + dy + yy, sxy + dx + xx
                            ]
                            if np.isnan(d):
                                sq[yy, xx] = 0.0
                                ok[yy, xx] = 0.0
                            else:
                                sq[yy, xx] = d * d
                                ok[yy, xx] = 1.0
                    # Gaussian patch sums, rows then columns
                    for y in range(height):
                        for xx in range(ew):
                            a = 0.0
                            b = 0.0
                            for j in range(k):
                                a += g[j] * sq[y + j, xx]
                                b += g[j] * ok[y + j, xx]
                            num_r[y, xx] = a
                            den_r[y, xx] = b
                    for y in range(height):
                        for x in range(width):
                            c = padded[tc, sxy + pr + y, sxy + pr + x]
                            cand = padded[tc + dt, sxy + pr + dy + y, sxy + pr + dx + x]
                            if np.isnan(c) or np.isnan(cand):
                                continue
                            num = 0.0
                            den = 0.0
                            for j in range(k):
                                num += g[j] * num_r[y, x + j]
                                den += g[j] * den_r[y, x + j]
                            excess = num / den - two_sigma2
                            if excess > 0.0:
                                w = np.exp(-excess * inv_h2)
                            else:
                                w = 1.0
                            acc[i, y, x] += w * cand
                            wsum[i, y, x] += w
        for y in range(height):
            for x in range(width):
                if np.isnan(padded[tc, sxy + pr + y, sxy + pr + x]):
                    out[i, y, x] = np.nan
                else:
                    out[i, y, x] = acc[i, y, x] / wsum[i, y, x]


def _filter_block(padded, tslice, shape, params, sigma, h):
    """Filter timesteps ``tslice`` of one variable.

    ``padded`` is the variable's (t, y, x) array padded with NaN by
    ``search_t`` in time and ``search_xy + patch_radius`` in space.
    """
    _, height, width = shape
    g = _gaussian_kernel(params.patch_radius)
    out = np.empty((tslice.stop - tslice.start, height, width))
    _nlm_kernel(
        padded,
        tslice.start,
        tslice.stop,
        height,
        width,
        params.patch_radius,
        params.search_xy,
        params.search_t,
        g,
        2.0 * sigma * sigma,
        1.0 / (h * h),
        out,
    )
    return out


def denoise_variable(
    data: np.ndarray,
    params: NlmParams,
    sigma: float,
    h: float,
    workers: int | None = 1,
    block: int = 8,
) -> np.ndarray:
    """Filter a single (t, y, x) array; returns float64."""
    data = np.asarray(data, dtype=np.float64)
    n_time, height, width = data.shape
    pad_s = params.search_xy + params.patch_radius
    padded = np.pad(
        data,
        ((params.search_t, params.search_t), (pad_s, pad_s), (pad_s, pad_s)),
        constant_values=np.nan,
    )
    blocks = row_blocks(n_time, block)
    parts = run_blocks(
        lambda b: _filter_block(padded, b, data.shape, params, sigma, h), blocks, workers
    )
    return np.concatenate(parts, axis=0)


def resolve_strength(cube: DataCube, variable: int, params: NlmParams) -> tuple[float, float]:
    """Return the (sigma, h) pair used for one variable."""
    sigma = params.sigma
    if sigma is None:
        sigma = estimate_noise_sigma(cube, variable)
    h = params.h
    if h is None:
        est = sigma if params.sigma is None else estimate_noise_sigma(cube, variable)
        h = max(H_FACTOR * est, MIN_H)
    return sigma, h


def denoise_cube(
    cube: DataCube, params: NlmParams | None = None, workers: int | None = 1
) -> DataCube:
    """Non-local means filter every variable of ``cube`` independently."""
    params = params or NlmParams()
    out = np.empty(cube.shape, dtype=np.float32)
    for v, name in enumerate(cube.variables):
        sigma, h = resolve_strength(cube, v, params)
        logger.info("nlm %s: sigma=%.4g h=%.4g", name, sigma, h)
        out[:, v] = denoise_variable(cube.values[:, v], params, sigma, h, workers=workers)
    return cube.with_values(out)
