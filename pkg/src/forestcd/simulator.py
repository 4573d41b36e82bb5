"""Seeded synthetic scenes with known forest, non-forest and clearing truth.

A pixel's value for variable ``v`` at timestep ``t`` is

    class mean[v] + pixel offset[v] + seasonal term[v](t) + noise

with all terms in dB. The pixel offset is drawn once per pixel with the
class ``std``; the noise is drawn per observation with ``noise_std``.
Clearing patches blend linearly from the forest to the non-forest signature
over ``transition`` timesteps, starting at their change index. Lookalike
patches are non-forest that shows the forest signature for their first
``lookalike_steps`` timesteps.

Each image row draws from its own child of the scene seed, so rows can be
generated in any order with identical results.

Scene spec JSON::

    {
      "width": 128, "height": 128, "n_time": 60,
      "variables": ["VV", "VH"],
      "start_date": "2017-01-01", "cadence_days": 12,
      "noise_std": [1.0, 1.0],
      "transition": 3,
      "seed": 42,
      "classes": {
        "forest":    {"mean": [-7.0, -12.5], "std": [0.5, 0.5],
                      "seasonal_amplitude": [0.3, 0.3], "seasonal_phase": 0.0},
        "nonforest": {"mean": [-10.5, -18.0], "std": [0.5, 0.5],
                      "seasonal_amplitude": [1.0, 1.0], "seasonal_phase": 1.0}
      },
      "patches": [
        {"kind": "nonforest", "shape": "rect", "x0": 0, "y0": 96, "x1": 128, "y1": 128},
        {"kind": "deforest", "shape": "disc", "cx": 20, "cy": 20, "radius": 8,
         "change_index": 6},
        {"kind": "deforest", "shape": "rect", "x0": 40, "y0": 10, "x1": 60, "y1": 26,
         "change_index": 30, "change_index_end": 40},
        {"kind": "lookalike", "shape": "rect", "x0": 90, "y0": 60, "x1": 110, "y1": 80,
         "lookalike_steps": 10}
      ]
    }

Rectangles are half-open (``x0 <= x < x1``). Pixels outside every patch
belong to the ``background`` class (default ``forest``). ``change_index_end``
makes the change index sweep linearly across the patch from west to east.
"""

from __future__ import annotations

import datetime as dt
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .datacube import (
    NO_CHANGE,
    DataCube,
    ForestMask,
    ReferenceChangeMap,
    write_cube,
    write_mask,
    write_reference,
)

KINDS = ("forest", "nonforest", "deforest", "lookalike")
SHAPES = ("rect", "disc")
# class codes in the label raster
FOREST, NONFOREST, DEFOREST, LOOKALIKE = range(4)
_CODES = {"forest": FOREST, "nonforest": NONFOREST, "deforest": DEFOREST, "lookalike": LOOKALIKE}
DAYS_PER_YEAR = 365.25


class SceneError(ValueError):
    pass


@dataclass
class ClassSignature:
    mean: list[float]
    std: list[float]
    seasonal_amplitude: list[float] | None = None
    seasonal_phase: float = 0.0


@dataclass
class Patch:
    kind: str
    shape: str = "rect"
    x0: int = 0
    y0: int = 0
    x1: int = 0
    y1: int = 0
    cx: float = 0.0
    cy: float = 0.0
    radius: float = 0.0
    change_index: int | None = None
    change_index_end: int | None = None
    lookalike_steps: int = 10

    def footprint(self, height: int, width: int) -> np.ndarray:
        yy, xx = np.mgrid[0:height, 0:width]
        if self.shape == "rect":
            return (xx >= self.x0) & (xx < self.x1) & (yy >= self.y0) & (yy < self.y1)
        return (xx - self.cx) ** 2 + (yy - self.cy) ** 2 <= self.radius**2


@dataclass
class SceneSpec:
    width: int = 128
    height: int = 128
    n_time: int = 60
    variables: list[str] = field(default_factory=lambda: ["VV", "VH"])
    start_date: str = "2017-01-01"
    cadence_days: int = 12
    noise_std: list[float] = field(default_factory=lambda: [1.0, 1.0])
    transition: int = 3
    seed: int = 42
    background: str = "forest"
    classes: dict[str, ClassSignature] = field(default_factory=dict)
    patches: list[Patch] = field(default_factory=list)

    def __post_init__(self):
        self.classes = {
            name: sig if isinstance(sig, ClassSignature) else ClassSignature(**sig)
            for name, sig in self.classes.items()
        }
        self.patches = [p if isinstance(p, Patch) else Patch(**p) for p in self.patches]
        if isinstance(self.noise_std, (int, float)):
            self.noise_std = [float(self.noise_std)] * len(self.variables)

    @classmethod
    def from_json(cls, obj: dict) -> "SceneSpec":
        return cls(**obj)

    @classmethod
    def load(cls, path: str | Path) -> "SceneSpec":
        with open(path) as f:
            return cls.from_json(json.load(f))

    def to_json(self) -> dict:
        return asdict(self)

    @property
    def dates(self) -> list[dt.date]:
        start = dt.date.fromisoformat(self.start_date)
        return [start + dt.timedelta(days=self.cadence_days * i) for i in range(self.n_time)]

    def validate(self) -> None:
        n_vars = len(self.variables)
        if n_vars == 0 or min(self.width, self.height, self.n_time) <= 0:
            raise SceneError("scene dimensions must be positive")
        if self.cadence_days <= 0:
            raise SceneError("cadence_days must be positive")
        if self.transition < 1:
            raise SceneError("transition must be at least one timestep")
        if self.background not in ("forest", "nonforest"):
            raise SceneError("background must be forest or nonforest")
        if len(self.noise_std) != n_vars or min(self.noise_std) < 0:
            raise SceneError("noise_std needs one non-negative value per variable")
        for name in ("forest", "nonforest"):
            sig = self.classes.get(name)
            if sig is None:
                raise SceneError(f"class {name!r} is not defined")
            if len(sig.mean) != n_vars or len(sig.std) != n_vars:
                raise SceneError(f"class {name!r} needs one mean and std per variable")
            if min(sig.std) <= 0:
                raise SceneError(f"class {name!r} stds must be positive")
            amp = sig.seasonal_amplitude
            if amp is not None and len(amp) != n_vars:
                raise SceneError(f"class {name!r} needs one seasonal amplitude per variable")
        for i, p in enumerate(self.patches):
            if p.kind not in KINDS:
                raise SceneError(f"patch {i}: unknown kind {p.kind!r}")
            if p.shape not in SHAPES:
                raise SceneError(f"patch {i}: unknown shape {p.shape!r}")
            if p.kind == "deforest":
                ends = [p.change_index] + ([p.change_index_end] if p.change_index_end is not None else [])
                for c in ends:
                    if c is None or not 1 <= c <= self.n_time - 1:
                        raise SceneError(
                            f"patch {i}: change index {c!r} outside [1, {self.n_time - 1}]"
                        )
            if p.kind == "lookalike" and not 1 <= p.lookalike_steps <= self.n_time - 1:
                raise SceneError(f"patch {i}: lookalike_steps outside [1, {self.n_time - 1}]")


@dataclass
class Scene:
    cube: DataCube
    forest: ForestMask
    reference: ReferenceChangeMap
    pool: ForestMask
    labels: np.ndarray
    spec: SceneSpec


def _rasterize(spec: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    """Class codes and per-pixel change (or lookalike switch) index."""
    h, w = spec.height, spec.width
    labels = np.full((h, w), _CODES[spec.background], dtype=np.int8)
    onset = np.full((h, w), NO_CHANGE, dtype=np.int32)
    taken = np.zeros((h, w), dtype=bool)
    for i, p in enumerate(spec.patches):
        fp = p.footprint(h, w)
        if (fp & taken).any():
            raise SceneError(f"patch {i} overlaps an earlier patch")
        taken |= fp
        labels[fp] = _CODES[p.kind]
        if p.kind == "deforest":
            if p.change_index_end is None:
                onset[fp] = p.change_index
            else:
                cols = np.nonzero(fp.any(axis=0))[0]
                lo, hi = cols.min(), cols.max()
                frac = (np.arange(w) - lo) / max(hi - lo, 1)
                sweep = np.rint(p.change_index + frac * (p.change_index_end - p.change_index))
                onset[fp] = np.broadcast_to(sweep.astype(np.int32), (h, w))[fp]
        elif p.kind == "lookalike":
            onset[fp] = p.lookalike_steps
    return labels, onset


def _signature(sig: ClassSignature, days: np.ndarray, n_vars: int) -> np.ndarray:
    """Mean series (n_time, n_vars) of a class including seasonality."""
    amp = np.zeros(n_vars) if sig.seasonal_amplitude is None else np.asarray(sig.seasonal_amplitude)
    season = np.sin(2 * math.pi * days / DAYS_PER_YEAR + sig.seasonal_phase)
    return np.asarray(sig.mean)[None, :] + season[:, None] * amp[None, :]


def transition_weight(n_time: int, onset: int, transition: int) -> np.ndarray:
    """Non-forest share over time for a clearing starting at ``onset``."""
    t = np.arange(n_time)
    if onset < 0:
        return np.zeros(n_time)
    return np.clip((t - onset + 1) / transition, 0.0, 1.0)


def generate_scene(spec: SceneSpec) -> Scene:
    """Build the cube and its truth rasters; deterministic for a given spec."""
    spec.validate()
    labels, onset = _rasterize(spec)
    n_vars = len(spec.variables)
    dates = spec.dates
    days = np.array([(d - dates[0]).days for d in dates], dtype=np.float64)
    forest_sig = _signature(spec.classes["forest"], days, n_vars)
    nonforest_sig = _signature(spec.classes["nonforest"], days, n_vars)
    forest_std = np.asarray(spec.classes["forest"].std)
    nonforest_std = np.asarray(spec.classes["nonforest"].std)
    noise_std = np.asarray(spec.noise_std, dtype=np.float64)

    weight_cache: dict[tuple[int, int], np.ndarray] = {}

    def share(code: int, start: int) -> np.ndarray:
        key = (code, start)
        if key not in weight_cache:
            if code == FOREST:
                weight_cache[key] = np.zeros(spec.n_time)
            elif code == NONFOREST:
                weight_cache[key] = np.ones(spec.n_time)
            elif code == DEFOREST:
                weight_cache[key] = transition_weight(spec.n_time, start, spec.transition)
            else:
                weight_cache[key] = transition_weight(spec.n_time, start, spec.transition)
        return weight_cache[key]

    values = np.empty((spec.n_time, n_vars, spec.height, spec.width), dtype=np.float32)
    row_seeds = np.random.SeedSequence(spec.seed).spawn(spec.height)
    for y in range(spec.height):
        rng = np.random.default_rng(row_seeds[y])
        offsets = rng.standard_normal((n_vars, spec.width))
        noise = rng.standard_normal((spec.n_time, n_vars, spec.width))
        # a: (n_time, width) non-forest share per pixel
        a = np.stack([share(int(labels[y, x]), int(onset[y, x])) for x in range(spec.width)], axis=1)
        mean = (1 - a)[:, None, :] * forest_sig[:, :, None] + a[:, None, :] * nonforest_sig[:, :, None]
        std = (1 - a)[:, None, :] * forest_std[None, :, None] + a[:, None, :] * nonforest_std[None, :, None]
        row = mean + std * offsets[None] + noise_std[None, :, None] * noise
        values[:, :, y, :] = row.astype(np.float32)

    cube = DataCube(values, spec.variables, dates)
    change_index = np.where(labels == DEFOREST, onset, NO_CHANGE).astype(np.int32)
    return Scene(
        cube=cube,
        forest=ForestMask(labels == FOREST),
        reference=ReferenceChangeMap(change_index, dates, "synthetic-truth"),
        pool=ForestMask((labels == NONFOREST) | (labels == LOOKALIKE)),
        labels=labels,
        spec=spec,
    )


def write_scene(scene: Scene, directory: str | Path) -> dict[str, Path]:
    """Write cube, truth mask, reference map, non-forest pool and the spec."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_cube(scene.cube, directory)
    paths = {
        "cube": directory / "cube.json",
        "mask": write_mask(scene.forest, directory / "mask.json"),
        "ref": write_reference(scene.reference, directory),
        "pool": write_mask(scene.pool, directory / "pool.json"),
        "spec": directory / "scene.json",
    }
    with open(paths["spec"], "w") as f:
        json.dump(scene.spec.to_json(), f, indent=2)
        f.write("\n")
    return paths


ACCEPTANCE_CLASSES = {
    "forest": {
        "mean": [-7.0, -12.5],
        "std": [0.5, 0.5],
        "seasonal_amplitude": [0.3, 0.3],
        "seasonal_phase": 0.0,
    },
    "nonforest": {
        "mean": [-10.5, -18.0],
        "std": [0.5, 0.5],
        "seasonal_amplitude": [1.0, 1.0],
        "seasonal_phase": 1.0,
    },
}

ACCEPTANCE_PATCHES = [
    {"kind": "nonforest", "shape": "rect", "x0": 0, "y0": 96, "x1": 128, "y1": 128},
    {"kind": "deforest", "shape": "disc", "cx": 16.0, "cy": 16.0, "radius": 9.0, "change_index": 6},
    {"kind": "deforest", "shape": "rect", "x0": 40, "y0": 8, "x1": 60, "y1": 24, "change_index": 14},
    {"kind": "deforest", "shape": "disc", "cx": 96.0, "cy": 20.0, "radius": 10.0, "change_index": 22},
    {
        "kind": "deforest",
        "shape": "rect",
        "x0": 10,
        "y0": 50,
        "x1": 40,
        "y1": 66,
        "change_index": 28,
        "change_index_end": 38,
    },
    {"kind": "deforest", "shape": "rect", "x0": 60, "y0": 56, "x1": 78, "y1": 74, "change_index": 40},
    {"kind": "deforest", "shape": "disc", "cx": 108.0, "cy": 66.0, "radius": 8.0, "change_index": 46},
]

LOOKALIKE_PATCH = {
    "kind": "lookalike",
    "shape": "rect",
    "x0": 84,
    "y0": 36,
    "x1": 104,
    "y1": 52,
    "lookalike_steps": 10,
}


def acceptance_scene_spec(seed: int = 42, lookalike: bool = False) -> SceneSpec:
    """The documented 128x128x60x2 scene with six clearing patches."""
    patches = [dict(p) for p in ACCEPTANCE_PATCHES]
    if lookalike:
        patches.append(dict(LOOKALIKE_PATCH))
    return SceneSpec(
        width=128,
        height=128,
        n_time=60,
        variables=["VV", "VH"],
        start_date="2017-01-01",
        cadence_days=12,
        noise_std=[1.0, 1.0],
        transition=3,
        seed=seed,
        classes={k: ClassSignature(**v) for k, v in ACCEPTANCE_CLASSES.items()},
        patches=[Patch(**p) for p in patches],
    )
