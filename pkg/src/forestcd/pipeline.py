"""End-to-end runs: denoise, fit, detect, assess, with a provenance record."""

from __future__ import annotations

import hashlib
import json
import logging
import platform
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .accuracy import assess, write_report
from .datacube import read_cube, read_mask, read_reference, write_change_map, write_cube
from .detector import DetectorParams, detect_cube
from .model import fit_model
from .nlm import NlmParams, denoise_cube

logger = logging.getLogger(__name__)


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` and ``field`` locate the problem."""

    def __init__(self, stage: str, message: str, field: str | None = None):
        where = f"[{stage}]" + (f" {field}:" if field else "")
        super().__init__(f"{where} {message}")
        self.stage = stage
        self.field = field


@dataclass
class RunConfig:
    cube: str | None = None
    mask: str | None = None
    ref: str | None = None
    out: str | None = None
    bins: int = 64
    q: float = 0.05
    epsilon: float = 1e-6
    L: float = 10.0
    mode: str = "coherent"
    onset_gate: bool = True
    denoise: bool = True
    patch_radius: int = 1
    search_xy: int = 3
    search_t: int = 1
    h: float | None = None
    sigma: float | None = None
    seed: int = 42
    workers: int = 1
    trace: list[list[int]] = field(default_factory=list)
    figures: bool = True

    @classmethod
    def from_dict(cls, values: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise StageError("config", f"unknown keys {unknown}", field=unknown[0])
        return cls(**values)

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> None:
        for name in ("cube", "mask", "out"):
            if getattr(self, name) is None:
                raise StageError("config", "is required", field=name)
        for name in ("cube", "mask", "ref"):
            value = getattr(self, name)
            if value is not None and not Path(value).is_file():
                raise StageError("config", f"file not found: {value}", field=name)
        if self.bins < 2:
            raise StageError("config", "must be at least 2", field="bins")
        if not 0 < self.q < 1:
            raise StageError("config", "must lie in (0, 1)", field="q")
        if not 0 < self.epsilon < 1:
            raise StageError("config", "must lie in (0, 1)", field="epsilon")
        try:
            self.detector_params()
        except ValueError as exc:
            raise StageError("config", str(exc), field="L" if "L " in str(exc) else "mode") from exc
        try:
            self.nlm_params()
        except ValueError as exc:
            raise StageError("config", str(exc), field="nlm") from exc

    def detector_params(self) -> DetectorParams:
        return DetectorParams(L=self.L, mode=self.mode, require_forest_onset=self.onset_gate)

    def nlm_params(self) -> NlmParams:
        return NlmParams(self.patch_radius, self.search_xy, self.search_t, self.h, self.sigma)

    def hash(self) -> str:
        """Digest of every setting that affects outputs.

        Input files enter by content digest rather than path; the output
        directory and the worker count are left out.
        """
        relevant = self.to_dict()
        for name in ("workers", "out"):
            relevant.pop(name)
        for name in ("cube", "mask", "ref"):
            if relevant[name] is not None:
                relevant[name] = input_digest(relevant[name])
        blob = json.dumps(relevant, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def input_digest(manifest: str | Path) -> str:
    """Digest of a manifest together with the payload it points to."""
    manifest = Path(manifest)
    h = hashlib.sha256(file_digest(manifest).encode())
    with open(manifest) as f:
        data = json.load(f).get("data")
    if data and (manifest.parent / data).is_file():
        h.update(file_digest(manifest.parent / data).encode())
    return h.hexdigest()


def versions() -> dict:
    import matplotlib
    import numba

    return {
        "forestcd": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "numba": numba.__version__,
        "matplotlib": matplotlib.__version__,
    }


def write_provenance(directory: Path, config: RunConfig, outputs: dict[str, Path], stages: list[str]) -> Path:
    record = {
        "config": config.to_dict(),
        "config_hash": config.hash(),
        "seed": config.seed,
        "inputs": {
            name: input_digest(getattr(config, name))
            for name in ("cube", "mask", "ref")
            if getattr(config, name) is not None
        },
        "stages": stages,
        "versions": versions(),
        "outputs": {
            name: {"path": str(Path(p).relative_to(directory)), "sha256": file_digest(p)}
            for name, p in sorted(outputs.items())
        },
    }
    path = directory / "provenance.json"
    with open(path, "w") as f:
        json.dump(record, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def _stage(name: str):
    """Re-raise any failure inside the block as a StageError for ``name``."""

    class _Ctx:
        def __enter__(self):
            logger.info("stage start", extra={"stage": name})

        def __exit__(self, exc_type, exc, tb):
            if exc is None:
                logger.info("stage done", extra={"stage": name})
                return False
            if isinstance(exc, StageError):
                return False
            raise StageError(name, str(exc), getattr(exc, "field", None)) from exc

    return _Ctx()


def run_pipeline(config: RunConfig) -> dict[str, Path]:
    """Denoise (optional), fit, detect and (with a reference) assess.

    Returns the written artifact paths, including ``provenance``.
    """
    config.validate()
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs: dict[str, Path] = {}
    stages: list[str] = []

    with _stage("load"):
        cube = read_cube(config.cube)
        mask = read_mask(config.mask)
        mask.check_matches(cube)
        ref = read_reference(config.ref) if config.ref else None

    if config.denoise:
        with _stage("denoise"):
            cube = denoise_cube(cube, config.nlm_params(), workers=config.workers)
            write_cube(cube, out / "denoised")
            outputs["denoised_cube"] = out / "denoised" / "cube.json"
            outputs["denoised_data"] = out / "denoised" / "cube.bin"
        stages.append("denoise")

    with _stage("fit"):
        model = fit_model(cube, mask, config.bins, config.q, config.epsilon, workers=config.workers)
        outputs["model"] = model.save(out / "model.json")
    stages.append("fit")

    with _stage("detect"):
        traces = [tuple(p) for p in config.trace]
        change_map, pixel_traces = detect_cube(
            model, cube, config.detector_params(), workers=config.workers, traces=traces
        )
        paths = write_change_map(change_map, out, png=config.figures)
        outputs.update({f"changes_{k}": v for k, v in paths.items()})
        for (x, y), trace in pixel_traces.items():
            outputs[f"trace_{x}_{y}"] = write_trace(trace, out / f"trace_{x}_{y}.csv", config.L, config.figures)
    stages.append("detect")

    if ref is not None:
        with _stage("assess"):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                report = assess(change_map, ref)
            outputs["report"], outputs["report_csv"] = write_report(report, out / "report.json")
            if config.figures:
                from .plotting import plot_lag_map

                outputs["lag_png"] = plot_lag_map(change_map, ref, out / "lag.png")
        stages.append("assess")

    outputs["provenance"] = write_provenance(out, config, outputs, stages)
    return outputs


def write_trace(trace, path: Path, L: float, figure: bool = True) -> Path:
    """Per-timestep CSV of one pixel's evidence trace (plus a PNG)."""
    import csv

    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["t", "date", "p_t", "threshold", "lambda", "below"])
        for t in range(len(trace.evidence)):
            date = trace.dates[t].isoformat() if trace.dates else ""
            writer.writerow(
                [t, date, repr(float(trace.similarity[t])), repr(float(trace.threshold[t])),
                 repr(float(trace.evidence[t])), int(trace.below[t])]
            )
    if figure:
        from .plotting import plot_trace

        plot_trace(trace, path.with_suffix(".png"), L)
    return path
