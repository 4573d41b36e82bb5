"""Forest change detection on radar datacubes.

A histogram model of a reference forest ensemble scores every pixel's
similarity to forest at each timestep; sustained dissimilarity accumulates
into evidence, and the first time it crosses a threshold the pixel is
declared changed.
"""

__version__ = "0.1.0"

from .accuracy import AccuracyReport, ConfusionMatrix, assess, confusion, mean_lag, metrics, tune_thresholds
from .datacube import (
    ChangeMap,
    DataCube,
    ForestMask,
    ReferenceChangeMap,
    read_change_map,
    read_cube,
    read_mask,
    read_reference,
    write_change_map,
    write_cube,
    write_mask,
    write_reference,
)
from .detector import DetectorParams, detect_cube, detect_pixel, lambda_step
from .model import ForestModel, build_histograms, fit_model, quantile_thresholds
from .nlm import NlmParams, denoise_cube, estimate_noise_sigma
from .robustness import CorruptionSpec, corrupt_mask, noise_sweep
from .simulator import SceneSpec, acceptance_scene_spec, generate_scene

__all__ = [
    "AccuracyReport",
    "ChangeMap",
    "ConfusionMatrix",
    "CorruptionSpec",
    "DataCube",
    "DetectorParams",
    "ForestMask",
    "ForestModel",
    "NlmParams",
    "ReferenceChangeMap",
    "SceneSpec",
    "acceptance_scene_spec",
    "assess",
    "build_histograms",
    "confusion",
    "corrupt_mask",
    "denoise_cube",
    "detect_cube",
    "detect_pixel",
    "estimate_noise_sigma",
    "fit_model",
    "generate_scene",
    "lambda_step",
    "mean_lag",
    "metrics",
    "noise_sweep",
    "quantile_thresholds",
    "read_change_map",
    "read_cube",
    "read_mask",
    "read_reference",
    "tune_thresholds",
    "write_change_map",
    "write_cube",
    "write_mask",
    "write_reference",
]
