"""Datacube, mask and change-map containers with their on-disk formats.

Every raster is stored as a small JSON manifest next to a raw little-endian
payload, so the files can be read without any geospatial library:

- ``cube.json`` + ``cube.bin``: float32, index order (t, v, y, x)
- ``mask.json`` + ``mask.bin``: one byte per pixel, 0 or 1, row-major
- ``changes.json`` + ``changes.bin``: int32, -1 for "no change", plus
  ``changes.csv`` and ``changes.png``
- ``ref.json`` + ``ref.bin``: reference change map, same layout as the
  change map with its own date list and a provenance tag

NaN is the only nodata value. At a given timestep a pixel is either
observed in every variable or in none of them.
"""

from __future__ import annotations

import csv
import datetime as dt
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

FORMAT_VERSION = 1
NO_CHANGE = -1

_CUBE_DTYPE = np.dtype("<f4")
_INDEX_DTYPE = np.dtype("<i4")

PROVENANCES = ("visual", "annual-product", "synthetic-truth")


class FormatError(ValueError):
    """A file or in-memory value violates the datacube formats.

    ``field`` names the offending manifest key or attribute.
    """

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class MissingFileError(FormatError, FileNotFoundError):
    pass


class DimensionMismatchError(FormatError):
    pass


class DateOrderError(FormatError):
    pass


class MixedNaNError(FormatError):
    pass


class MaskValueError(FormatError):
    pass


def parse_date(value: str | dt.date) -> dt.date:
    if isinstance(value, dt.date):
        return value
    try:
        return dt.date.fromisoformat(value)
    except (TypeError, ValueError) as exc:
        raise FormatError(f"not an ISO-8601 date: {value!r}", field="dates") from exc


def _check_dates(dates: Sequence[dt.date]) -> None:
    for i in range(1, len(dates)):
        if dates[i] <= dates[i - 1]:
            raise DateOrderError(
                f"dates must be strictly increasing: {dates[i - 1]} then {dates[i]} at index {i}",
                field="dates",
            )


@dataclass(frozen=True, eq=False)
class DataCube:
    """Pixel time series of one or more variables.

    Parameters
    ----------
    values : ndarray
        float32 array with shape (n_time, n_variables, height, width).
    variables : sequence of str
        Variable names, e.g. ``("VV", "VH")``.
    dates : sequence of date
        One acquisition date per timestep, strictly increasing.
    """

    values: np.ndarray
    variables: tuple[str, ...]
    dates: tuple[dt.date, ...]

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 4:
            raise DimensionMismatchError(
                f"values must be 4-D (t, v, y, x), got shape {values.shape}", field="values"
            )
        values = np.ascontiguousarray(values, dtype=np.float32)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "variables", tuple(str(v) for v in self.variables))
        object.__setattr__(self, "dates", tuple(parse_date(d) for d in self.dates))

        n_time, n_vars = values.shape[:2]
        if len(self.variables) == 0:
            raise DimensionMismatchError("a cube needs at least one variable", field="variables")
        if len(self.variables) != n_vars:
            raise DimensionMismatchError(
                f"{len(self.variables)} variable names for {n_vars} variables in values",
                field="variables",
            )
        if len(set(self.variables)) != n_vars:
            raise FormatError("variable names must be unique", field="variables")
        if len(self.dates) != n_time:
            raise DimensionMismatchError(
                f"{len(self.dates)} dates for {n_time} timesteps", field="dates"
            )
        if values.shape[2] == 0 or values.shape[3] == 0 or n_time == 0:
            raise DimensionMismatchError(f"empty cube of shape {values.shape}", field="values")
        _check_dates(self.dates)

        nan = np.isnan(values)
        mixed = nan.any(axis=1) & ~nan.all(axis=1)
        if mixed.any():
            t, y, x = (int(i) for i in np.argwhere(mixed)[0])
            raise MixedNaNError(
                f"pixel (x={x}, y={y}) is NaN in some but not all variables at t={t}",
                field="values",
            )

    @property
    def n_time(self) -> int:
        return self.values.shape[0]

    @property
    def n_variables(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[2]

    @property
    def width(self) -> int:
        return self.values.shape[3]

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.values.shape

    def observed(self) -> np.ndarray:
        """Boolean (t, y, x) array, True where the pixel has data."""
        return ~np.isnan(self.values[:, 0])

    def with_values(self, values: np.ndarray) -> "DataCube":
        return DataCube(values, self.variables, self.dates)


@dataclass(frozen=True, eq=False)
class ForestMask:
    """Reference forest ensemble as a boolean raster (True = member)."""

    flags: np.ndarray

    def __post_init__(self):
        flags = np.asarray(self.flags)
        if flags.ndim != 2:
            raise DimensionMismatchError(f"mask must be 2-D, got shape {flags.shape}", field="flags")
        if flags.dtype != bool:
            if not np.isin(flags, (0, 1)).all():
                raise MaskValueError("mask values must be 0 or 1", field="data")
            flags = flags.astype(bool)
        flags = np.ascontiguousarray(flags)
        flags.setflags(write=False)
        object.__setattr__(self, "flags", flags)

    @property
    def height(self) -> int:
        return self.flags.shape[0]

    @property
    def width(self) -> int:
        return self.flags.shape[1]

    @property
    def size(self) -> int:
        """Ensemble size N."""
        return int(self.flags.sum())

    def check_matches(self, cube: DataCube) -> None:
        if self.flags.shape != (cube.height, cube.width):
            raise DimensionMismatchError(
                f"mask is {self.width}x{self.height} but cube is {cube.width}x{cube.height}",
                field="width/height",
            )


@dataclass(frozen=True, eq=False)
class ChangeMap:
    """First declared change per pixel.

    ``change_index`` holds the timestep of the first change or -1.
    ``final_evidence`` holds the accumulated evidence at the declaration
    (NaN where nothing was declared). ``low_coverage`` marks pixels with too
    few observations to be assessed.
    """

    change_index: np.ndarray
    dates: tuple[dt.date, ...]
    final_evidence: np.ndarray | None = None
    low_coverage: np.ndarray | None = None

    def __post_init__(self):
        idx = np.asarray(self.change_index)
        if idx.ndim != 2:
            raise DimensionMismatchError(
                f"change_index must be 2-D, got shape {idx.shape}", field="change_index"
            )
        if not np.issubdtype(idx.dtype, np.integer):
            raise FormatError("change_index must be integer", field="change_index")
        idx = np.ascontiguousarray(idx, dtype=np.int32)
        dates = tuple(parse_date(d) for d in self.dates)
        _check_dates(dates)
        if ((idx < NO_CHANGE) | (idx >= len(dates))).any():
            raise FormatError(
                f"change_index must lie in {{-1}} or [0, {len(dates)})", field="change_index"
            )
        if self.final_evidence is None:
            evidence = np.full(idx.shape, np.nan)
        else:
            evidence = np.asarray(self.final_evidence, dtype=np.float64)
            if evidence.shape != idx.shape:
                raise DimensionMismatchError("final_evidence shape differs", field="final_evidence")
        if self.low_coverage is None:
            low = np.zeros(idx.shape, dtype=bool)
        else:
            low = np.asarray(self.low_coverage, dtype=bool)
            if low.shape != idx.shape:
                raise DimensionMismatchError("low_coverage shape differs", field="low_coverage")
        for arr in (idx, evidence, low):
            arr.setflags(write=False)
        object.__setattr__(self, "change_index", idx)
        object.__setattr__(self, "dates", dates)
        object.__setattr__(self, "final_evidence", evidence)
        object.__setattr__(self, "low_coverage", low)

    @property
    def height(self) -> int:
        return self.change_index.shape[0]

    @property
    def width(self) -> int:
        return self.change_index.shape[1]

    @property
    def changed(self) -> np.ndarray:
        return self.change_index >= 0

    def change_date(self, y: int, x: int) -> dt.date | None:
        i = int(self.change_index[y, x])
        return self.dates[i] if i >= 0 else None


@dataclass(frozen=True, eq=False)
class ReferenceChangeMap:
    """Reference (ground truth) change dates, in the change-map layout.

    ``provenance`` is one of ``visual``, ``annual-product`` or
    ``synthetic-truth``. Annual products carry year-only information; their
    dates are conventionally January 1st of the change year.
    """

    change_index: np.ndarray
    dates: tuple[dt.date, ...]
    provenance: str = "synthetic-truth"

    def __post_init__(self):
        idx = np.ascontiguousarray(np.asarray(self.change_index), dtype=np.int32)
        if idx.ndim != 2:
            raise DimensionMismatchError("change_index must be 2-D", field="change_index")
        dates = tuple(parse_date(d) for d in self.dates)
        _check_dates(dates)
        if ((idx < NO_CHANGE) | (idx >= len(dates))).any():
            raise FormatError("change_index out of range", field="change_index")
        if self.provenance not in PROVENANCES:
            raise FormatError(
                f"provenance must be one of {PROVENANCES}, got {self.provenance!r}",
                field="provenance",
            )
        idx.setflags(write=False)
        object.__setattr__(self, "change_index", idx)
        object.__setattr__(self, "dates", dates)

    @property
    def height(self) -> int:
        return self.change_index.shape[0]

    @property
    def width(self) -> int:
        return self.change_index.shape[1]

    @property
    def changed(self) -> np.ndarray:
        return self.change_index >= 0

    @property
    def date_resolved(self) -> bool:
        return self.provenance != "annual-product"


@dataclass(frozen=True)
class CubeManifest:
    width: int
    height: int
    n_time: int
    variables: list[str]
    dates: list[str]
    data: str = "cube.bin"
    version: int = FORMAT_VERSION
    dtype: str = "f32le"
    layout: str = "t,v,y,x"

    def to_json(self) -> dict:
        return {
            "version": self.version,
            "dtype": self.dtype,
            "layout": self.layout,
            "width": self.width,
            "height": self.height,
            "n_time": self.n_time,
            "variables": list(self.variables),
            "dates": list(self.dates),
            "data": self.data,
        }

    @property
    def n_values(self) -> int:
        return self.n_time * len(self.variables) * self.height * self.width


# ---------------------------------------------------------------------------
# helpers


def _load_manifest(path: Path, required: Sequence[str]) -> dict:
    if not path.is_file():
        raise MissingFileError(f"manifest not found: {path}", field="manifest")
    try:
        with open(path) as f:
            manifest = json.load(f)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path} is not valid JSON: {exc}", field="manifest") from exc
    if not isinstance(manifest, dict):
        raise FormatError(f"{path} must hold a JSON object", field="manifest")
    for key in required:
        if key not in manifest:
            raise FormatError(f"{path} lacks required key {key!r}", field=key)
    version = manifest.get("version", FORMAT_VERSION)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version!r}", field="version")
    return manifest


def _positive_int(manifest: dict, key: str) -> int:
    value = manifest[key]
    if not isinstance(value, int) or isinstance(value, bool) or value <= 0:
        raise DimensionMismatchError(f"{key} must be a positive integer, got {value!r}", field=key)
    return value


def _read_payload(manifest_path: Path, manifest: dict, dtype: np.dtype, count: int) -> np.ndarray:
    payload = manifest_path.parent / manifest["data"]
    if not payload.is_file():
        raise MissingFileError(f"payload not found: {payload}", field="data")
    expected = count * dtype.itemsize
    actual = payload.stat().st_size
    if actual != expected:
        raise DimensionMismatchError(
            f"{payload.name} holds {actual} bytes but the manifest dims need {expected}",
            field="data",
        )
    return np.fromfile(payload, dtype=dtype, count=count)


def _write_json(path: Path, obj: dict) -> None:
    with open(path, "w") as f:
        json.dump(obj, f, indent=2)
        f.write("\n")


# ---------------------------------------------------------------------------
# cube


def write_cube(cube: DataCube, directory: str | Path, name: str = "cube") -> CubeManifest:
    """Write ``<name>.json`` and ``<name>.bin`` into ``directory``."""
    if not isinstance(cube, DataCube):
        raise TypeError("write_cube expects a DataCube")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = CubeManifest(
        width=cube.width,
        height=cube.height,
        n_time=cube.n_time,
        variables=list(cube.variables),
        dates=[d.isoformat() for d in cube.dates],
        data=f"{name}.bin",
    )
    cube.values.astype(_CUBE_DTYPE, copy=False).tofile(directory / manifest.data)
    _write_json(directory / f"{name}.json", manifest.to_json())
    return manifest


def read_cube(manifest_path: str | Path) -> DataCube:
    manifest_path = Path(manifest_path)
    m = _load_manifest(
        manifest_path, ("width", "height", "n_time", "variables", "dates", "data")
    )
    if m.get("dtype", "f32le") != "f32le":
        raise FormatError(f"unsupported dtype {m['dtype']!r}", field="dtype")
    if m.get("layout", "t,v,y,x") != "t,v,y,x":
        raise FormatError(f"unsupported layout {m['layout']!r}", field="layout")
    width = _positive_int(m, "width")
    height = _positive_int(m, "height")
    n_time = _positive_int(m, "n_time")
    variables = m["variables"]
    if not isinstance(variables, list) or not variables:
        raise DimensionMismatchError("variables must be a non-empty list", field="variables")
    dates = [parse_date(d) for d in m["dates"]]
    if len(dates) != n_time:
        raise DimensionMismatchError(
            f"manifest lists {len(dates)} dates for n_time={n_time}", field="dates"
        )
    _check_dates(dates)
    count = n_time * len(variables) * height * width
    flat = _read_payload(manifest_path, m, _CUBE_DTYPE, count)
    values = flat.reshape(n_time, len(variables), height, width).astype(np.float32)
    return DataCube(values, variables, dates)


# ---------------------------------------------------------------------------
# mask


def write_mask(mask: ForestMask, path: str | Path) -> Path:
    """Write a mask; ``path`` is the manifest (``.json``) path."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = path.with_suffix(".bin").name
    mask.flags.astype(np.uint8).tofile(path.parent / data)
    _write_json(
        path, {"version": FORMAT_VERSION, "width": mask.width, "height": mask.height, "data": data}
    )
    return path


def read_mask(path: str | Path) -> ForestMask:
    path = Path(path)
    m = _load_manifest(path, ("width", "height", "data"))
    width = _positive_int(m, "width")
    height = _positive_int(m, "height")
    raw = _read_payload(path, m, np.dtype(np.uint8), width * height)
    bad = raw > 1
    if bad.any():
        first = int(np.flatnonzero(bad)[0])
        raise MaskValueError(
            f"mask byte {int(raw[first])} at offset {first}; only 0 and 1 are allowed",
            field="data",
        )
    return ForestMask(raw.reshape(height, width).astype(bool))


# ---------------------------------------------------------------------------
# change maps


def _index_manifest(width, height, dates, data, extra=None) -> dict:
    out = {
        "version": FORMAT_VERSION,
        "dtype": "i32le",
        "width": width,
        "height": height,
        "dates": [d.isoformat() for d in dates],
        "data": data,
    }
    out.update(extra or {})
    return out


def _format_float(value: float) -> str:
    return "" if math.isnan(value) else repr(float(value))


def write_change_map(
    change_map: ChangeMap, directory: str | Path, name: str = "changes", png: bool = True
) -> dict[str, Path]:
    """Write the int32 raster, manifest, per-pixel CSV and a PNG rendering.

    The CSV lists every changed pixel and every low-coverage pixel, in
    row-major order. Evidence values are written with ``repr`` so they read
    back exactly.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {
        "data": directory / f"{name}.bin",
        "manifest": directory / f"{name}.json",
        "csv": directory / f"{name}.csv",
    }
    change_map.change_index.astype(_INDEX_DTYPE).tofile(paths["data"])
    extra = {
        "csv": paths["csv"].name,
        "n_changed": int(change_map.changed.sum()),
        "n_low_coverage": int(change_map.low_coverage.sum()),
    }
    if png:
        paths["png"] = directory / f"{name}.png"
        extra["png"] = paths["png"].name
    _write_json(
        paths["manifest"],
        _index_manifest(
            change_map.width, change_map.height, change_map.dates, paths["data"].name, extra
        ),
    )
    with open(paths["csv"], "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(
            ["x", "y", "change_index", "change_date", "final_evidence", "low_coverage"]
        )
        rows = np.argwhere(change_map.changed | change_map.low_coverage)
        for y, x in rows:
            i = int(change_map.change_index[y, x])
            writer.writerow(
                [
                    int(x),
                    int(y),
                    i,
                    change_map.dates[i].isoformat() if i >= 0 else "",
                    _format_float(change_map.final_evidence[y, x]),
                    int(change_map.low_coverage[y, x]),
                ]
            )
    if png:
        from .plotting import render_change_map

        render_change_map(change_map, paths["png"])
    return paths


def read_change_map(manifest_path: str | Path) -> ChangeMap:
    manifest_path = Path(manifest_path)
    m = _load_manifest(manifest_path, ("width", "height", "dates", "data"))
    width = _positive_int(m, "width")
    height = _positive_int(m, "height")
    dates = [parse_date(d) for d in m["dates"]]
    idx = _read_payload(manifest_path, m, _INDEX_DTYPE, width * height).reshape(height, width)
    evidence = np.full((height, width), np.nan)
    low = np.zeros((height, width), dtype=bool)
    csv_path = manifest_path.parent / m.get("csv", manifest_path.with_suffix(".csv").name)
    if csv_path.is_file():
        with open(csv_path, newline="") as f:
            for row in csv.DictReader(f):
                y, x = int(row["y"]), int(row["x"])
                if row["final_evidence"]:
                    evidence[y, x] = float(row["final_evidence"])
                low[y, x] = row.get("low_coverage", "0") == "1"
    return ChangeMap(idx.astype(np.int32), dates, evidence, low)


def write_reference(ref: ReferenceChangeMap, directory: str | Path, name: str = "ref") -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    data = f"{name}.bin"
    ref.change_index.astype(_INDEX_DTYPE).tofile(directory / data)
    path = directory / f"{name}.json"
    _write_json(
        path,
        _index_manifest(ref.width, ref.height, ref.dates, data, {"provenance": ref.provenance}),
    )
    return path


def read_reference(manifest_path: str | Path) -> ReferenceChangeMap:
    manifest_path = Path(manifest_path)
    m = _load_manifest(manifest_path, ("width", "height", "dates", "data"))
    width = _positive_int(m, "width")
    height = _positive_int(m, "height")
    idx = _read_payload(manifest_path, m, _INDEX_DTYPE, width * height).reshape(height, width)
    return ReferenceChangeMap(idx, m["dates"], m.get("provenance", "synthetic-truth"))
