"""Command line interface: ``forestcd <subcommand> ...``.

Every subcommand accepts ``--config FILE`` (a JSON object whose keys are the
long option names with dashes replaced by underscores); explicit flags
override values from the file. Logs go to stderr as one JSON object per
line; data only ever goes to files.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
import warnings
from pathlib import Path

from . import __version__
from .datacube import FormatError

logger = logging.getLogger("forestcd")

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2

_RESERVED = set(vars(logging.LogRecord("", 0, "", 0, "", None, None)))


class JsonFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        entry = {
            "ts": round(record.created, 3),
            "level": record.levelname.lower(),
            "logger": record.name,
            "msg": record.getMessage(),
        }
        for key, value in vars(record).items():
            if key not in _RESERVED and key not in entry and not key.startswith("_"):
                entry[key] = value
        if record.exc_info:
            entry["exc"] = self.formatException(record.exc_info)
        return json.dumps(entry, default=str)


def setup_logging(verbose: bool = False) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonFormatter())
    root = logging.getLogger("forestcd")
    root.handlers[:] = [handler]
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    root.propagate = False
    logging.captureWarnings(True)
    pywarn = logging.getLogger("py.warnings")
    pywarn.handlers[:] = [handler]
    pywarn.propagate = False


class UsageError(Exception):
    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


# ---------------------------------------------------------------------------
# option helpers


def _pixel(text: str) -> list[int]:
    try:
        x, y = (int(v) for v in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected x,y, got {text!r}") from exc
    return [x, y]


def _float_list(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


# option names accepted by each subcommand, filled in by build_parser
OPTIONS: dict[str, set[str]] = {}


def _opt(parser, *names, **kwargs):
    """Add an option whose absence leaves no attribute (so config values survive)."""
    kwargs.setdefault("default", argparse.SUPPRESS)
    action = parser.add_argument(*names, **kwargs)
    OPTIONS.setdefault(parser.prog.split()[-1], set()).add(action.dest)


def _common(parser):
    _opt(parser, "--config", help="JSON file with option values; flags override it")
    _opt(parser, "--workers", type=int, help="worker threads, 0 = all cores (default 1)")
    _opt(parser, "--no-figures", dest="figures", action="store_false", help="skip PNG figures")


def _model_opts(parser):
    _opt(parser, "--bins", type=int, help="histogram bins per variable (default 64)")
    _opt(parser, "--q", type=float, help="forest quantile level (default 0.05)")
    _opt(parser, "--epsilon", type=float, help="probability floor (default 1e-6)")


def _detector_opts(parser):
    _opt(parser, "--L", type=float, help="evidence threshold, > 1 (default 10)")
    _opt(parser, "--mode", choices=("coherent", "paper-literal"), help="evidence recursion (default coherent)")
    _opt(
        parser,
        "--no-onset-gate",
        dest="onset_gate",
        action="store_false",
        help="let evidence accrue before the pixel has looked like forest",
    )


def _nlm_opts(parser):
    _opt(parser, "--patch-radius", type=int, help="spatial patch radius (default 1)")
    _opt(parser, "--search-xy", type=int, help="spatial search radius (default 3)")
    _opt(parser, "--search-t", type=int, help="temporal search radius (default 1)")
    _opt(parser, "--h", type=float, help="filter strength in data units (default 0.8 x noise sigma)")
    _opt(parser, "--sigma", type=float, help="noise sigma (default: estimated)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="forestcd", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"forestcd {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic scene with truth")
    _common(p)
    _opt(p, "--spec", help="scene spec JSON (default: the acceptance scene)")
    _opt(p, "--lookalike", action="store_true", help="add the forest-lookalike patch to the acceptance scene")
    _opt(p, "--seed", type=int, help="override the scene seed")
    _opt(p, "--out", help="output directory")

    p = sub.add_parser("denoise", help="non-local means filter a cube")
    _common(p)
    _opt(p, "--in", dest="cube", help="input cube.json")
    _opt(p, "--out", help="output directory")
    _nlm_opts(p)

    p = sub.add_parser("fit", help="fit the forest model")
    _common(p)
    _opt(p, "--cube", help="cube.json")
    _opt(p, "--mask", help="forest mask.json")
    _opt(p, "--out", help="model.json path")
    _model_opts(p)

    p = sub.add_parser("detect", help="detect changes with a fitted model")
    _common(p)
    _opt(p, "--cube", help="cube.json")
    _opt(p, "--model", help="model.json")
    _opt(p, "--out", help="output directory")
    _opt(p, "--trace", type=_pixel, nargs="+", help="pixels x,y to write evidence traces for")
    _detector_opts(p)

    p = sub.add_parser("assess", help="accuracy of a change map against a reference")
    _common(p)
    _opt(p, "--changes", help="changes.json")
    _opt(p, "--ref", help="reference ref.json")
    _opt(p, "--out", help="report.json path (report.csv is written next to it)")

    p = sub.add_parser("tune", help="grid search q and L for the best balanced accuracy")
    _common(p)
    _opt(p, "--cube", help="cube.json")
    _opt(p, "--mask", help="forest mask.json")
    _opt(p, "--ref", help="reference ref.json")
    _opt(p, "--ba", choices=("standard", "paper"), help="balanced accuracy variant (default standard)")
    _opt(p, "--q-grid", type=_float_list, help="comma-separated q values")
    _opt(p, "--L-grid", type=_float_list, help="comma-separated L values")
    _opt(p, "--out", help="tuned.json path")
    _model_opts(p)
    _detector_opts(p)

    p = sub.add_parser("sweep", help="accuracy against forest-ensemble corruption")
    _common(p)
    _opt(p, "--cube", help="cube.json")
    _opt(p, "--truth", help="reference change map ref.json")
    _opt(p, "--mask", help="true forest mask.json (the clean ensemble)")
    _opt(p, "--pool", help="mask.json of known non-forest pixels")
    _opt(p, "--fractions", help="start:stop:step or comma list (default 0:0.22:0.02)")
    _opt(p, "--seed", type=int, help="corruption seed (default 42)")
    _opt(p, "--out", help="output directory")
    _model_opts(p)
    _detector_opts(p)

    p = sub.add_parser("run", help="denoise, fit, detect and assess in one go")
    _common(p)
    _opt(p, "--cube", help="cube.json")
    _opt(p, "--mask", help="forest mask.json")
    _opt(p, "--ref", help="reference ref.json (optional)")
    _opt(p, "--out", help="output directory")
    _opt(p, "--no-denoise", dest="denoise", action="store_false", help="skip the NLM filter")
    _opt(p, "--trace", type=_pixel, nargs="+", help="pixels x,y to write evidence traces for")
    _opt(p, "--seed", type=int, help="recorded in the provenance record")
    _model_opts(p)
    _detector_opts(p)
    _nlm_opts(p)
    return parser


DEFAULTS = {
    "workers": 1,
    "figures": True,
    "bins": 64,
    "q": 0.05,
    "epsilon": 1e-6,
    "L": 10.0,
    "mode": "coherent",
    "onset_gate": True,
    "patch_radius": 1,
    "search_xy": 3,
    "search_t": 1,
    "h": None,
    "sigma": None,
    "trace": [],
    "ba": "standard",
    "fractions": "0:0.22:0.02",
}


def merged_options(args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit flags."""
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "verbose", "config")}
    from_file = {}
    config_path = getattr(args, "config", None)
    if config_path:
        path = Path(config_path)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}", field="config")
        with open(path) as f:
            from_file = json.load(f)
        if not isinstance(from_file, dict):
            raise UsageError("config file must hold a JSON object", field="config")
        from_file = {k.replace("-", "_"): v for k, v in from_file.items()}
        unknown = sorted(set(from_file) - OPTIONS.get(args.command, set()) - {"config"})
        if unknown:
            raise UsageError(f"unknown config keys {unknown} for {args.command}", field=unknown[0])
    return {**DEFAULTS, **from_file, **flags}


def _require(opts: dict, *names: str) -> None:
    for name in names:
        if opts.get(name) is None:
            raise UsageError(f"--{name.replace('_', '-')} is required", field=name)


def _existing(opts: dict, *names: str) -> None:
    for name in names:
        value = opts.get(name)
        if value is not None and not Path(value).is_file():
            raise UsageError(f"file not found: {value}", field=name)


def _detector_params(opts):
    from .detector import DetectorParams

    try:
        return DetectorParams(L=float(opts["L"]), mode=opts["mode"], require_forest_onset=bool(opts["onset_gate"]))
    except ValueError as exc:
        raise UsageError(str(exc), field="L") from exc


def _nlm_params(opts):
    from .nlm import NlmParams

    try:
        return NlmParams(opts["patch_radius"], opts["search_xy"], opts["search_t"], opts["h"], opts["sigma"])
    except ValueError as exc:
        raise UsageError(str(exc), field="nlm") from exc


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(opts: dict) -> None:
    from .simulator import SceneSpec, acceptance_scene_spec, generate_scene, write_scene

    _require(opts, "out")
    if opts.get("spec"):
        _existing(opts, "spec")
        spec = SceneSpec.load(opts["spec"])
    else:
        spec = acceptance_scene_spec(lookalike=bool(opts.get("lookalike", False)))
    if opts.get("seed") is not None:
        spec.seed = int(opts["seed"])
    scene = generate_scene(spec)
    paths = write_scene(scene, opts["out"])
    if opts["figures"]:
        from .datacube import ChangeMap
        from .plotting import plot_change_map

        truth = ChangeMap(scene.reference.change_index, scene.reference.dates)
        plot_change_map(truth, Path(opts["out"]) / "truth.png", title="reference change date")
    logger.info("scene written", extra={"out": str(opts["out"]), "files": sorted(p.name for p in paths.values())})


def cmd_denoise(opts: dict) -> None:
    from .datacube import read_cube, write_cube
    from .nlm import denoise_cube

    _require(opts, "cube", "out")
    _existing(opts, "cube")
    params = _nlm_params(opts)
    cube = read_cube(opts["cube"])
    write_cube(denoise_cube(cube, params, workers=opts["workers"]), opts["out"])


def cmd_fit(opts: dict) -> None:
    from .datacube import read_cube, read_mask
    from .model import fit_model

    _require(opts, "cube", "mask", "out")
    _existing(opts, "cube", "mask")
    cube = read_cube(opts["cube"])
    mask = read_mask(opts["mask"])
    model = fit_model(cube, mask, int(opts["bins"]), float(opts["q"]), float(opts["epsilon"]), workers=opts["workers"])
    path = model.save(opts["out"])
    if opts["figures"]:
        from .plotting import plot_forest_histograms

        plot_forest_histograms(model, Path(path).with_name(Path(path).stem + "_histograms.png"))


def cmd_detect(opts: dict) -> None:
    from .datacube import read_cube, write_change_map
    from .detector import detect_cube
    from .model import ForestModel
    from .pipeline import write_trace

    _require(opts, "cube", "model", "out")
    _existing(opts, "cube", "model")
    params = _detector_params(opts)
    cube = read_cube(opts["cube"])
    model = ForestModel.load(opts["model"])
    change_map, traces = detect_cube(
        model, cube, params, workers=opts["workers"], traces=[tuple(p) for p in opts["trace"]]
    )
    out = Path(opts["out"])
    write_change_map(change_map, out, png=opts["figures"])
    for (x, y), trace in traces.items():
        write_trace(trace, out / f"trace_{x}_{y}.csv", params.L, opts["figures"])
    logger.info("changes written", extra={"n_changed": int(change_map.changed.sum())})


def cmd_assess(opts: dict) -> None:
    from .accuracy import assess, write_report
    from .datacube import read_change_map, read_reference

    _require(opts, "changes", "ref", "out")
    _existing(opts, "changes", "ref")
    change_map = read_change_map(opts["changes"])
    ref = read_reference(opts["ref"])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        report = assess(change_map, ref)
    write_report(report, opts["out"])
    if opts["figures"]:
        from .plotting import plot_lag_map

        plot_lag_map(change_map, ref, Path(opts["out"]).with_name("lag.png"))
    logger.info("assessed", extra={k: v for k, v in report.to_row().items() if k in ("PA", "UA", "BA_standard")})


def cmd_tune(opts: dict) -> None:
    from .accuracy import DEFAULT_L_GRID, DEFAULT_Q_GRID, tune_thresholds
    from .datacube import read_cube, read_mask, read_reference

    _require(opts, "cube", "mask", "ref", "out")
    _existing(opts, "cube", "mask", "ref")
    cube = read_cube(opts["cube"])
    mask = read_mask(opts["mask"])
    ref = read_reference(opts["ref"])
    result = tune_thresholds(
        cube,
        mask,
        ref,
        q_grid=opts.get("q_grid") or DEFAULT_Q_GRID,
        L_grid=opts.get("L_grid") or DEFAULT_L_GRID,
        ba_variant=opts["ba"],
        n_bins=int(opts["bins"]),
        epsilon=float(opts["epsilon"]),
        mode=opts["mode"],
        require_forest_onset=bool(opts["onset_gate"]),
        workers=opts["workers"],
    )
    out = Path(opts["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as f:
        json.dump(result.to_json(), f, indent=2)
        f.write("\n")
    with open(out.with_suffix(".csv"), "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(result.grid[0]))
        writer.writeheader()
        writer.writerows(result.grid)
    if opts["figures"]:
        from .plotting import plot_tuning

        plot_tuning(result.grid, out.with_suffix(".png"), opts["ba"])


def cmd_sweep(opts: dict) -> None:
    from .datacube import read_cube, read_mask, read_reference
    from .robustness import CorruptionSpec, noise_sweep, parse_fractions, write_sweep

    _require(opts, "cube", "truth", "mask", "pool", "out")
    _existing(opts, "cube", "truth", "mask", "pool")
    try:
        spec = CorruptionSpec(tuple(parse_fractions(str(opts["fractions"]))), int(opts.get("seed", 42)))
    except ValueError as exc:
        raise UsageError(str(exc), field="fractions") from exc
    result = noise_sweep(
        read_cube(opts["cube"]),
        read_reference(opts["truth"]),
        read_mask(opts["mask"]),
        read_mask(opts["pool"]),
        spec,
        n_bins=int(opts["bins"]),
        q=float(opts["q"]),
        epsilon=float(opts["epsilon"]),
        params=_detector_params(opts),
        workers=opts["workers"],
    )
    write_sweep(result, opts["out"], figures=opts["figures"])


def cmd_run(opts: dict) -> None:
    from .pipeline import RunConfig, run_pipeline

    keys = {f for f in RunConfig.__dataclass_fields__}
    config = RunConfig.from_dict({k: v for k, v in opts.items() if k in keys})
    outputs = run_pipeline(config)
    logger.info("run complete", extra={"provenance": str(outputs["provenance"])})


COMMANDS = {
    "simulate": cmd_simulate,
    "denoise": cmd_denoise,
    "fit": cmd_fit,
    "detect": cmd_detect,
    "assess": cmd_assess,
    "tune": cmd_tune,
    "sweep": cmd_sweep,
    "run": cmd_run,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.verbose)
    from .pipeline import StageError

    start = time.perf_counter()
    try:
        opts = merged_options(args)
        COMMANDS[args.command](opts)
    except UsageError as exc:
        logger.error(str(exc), extra={"stage": args.command, "field": exc.field})
        return EXIT_USAGE
    except StageError as exc:
        logger.error(str(exc), extra={"stage": exc.stage, "field": exc.field})
        return EXIT_FAILED
    except (FormatError, ValueError, OSError, RuntimeError) as exc:
        logger.error(str(exc), extra={"stage": args.command, "field": getattr(exc, "field", None)})
        return EXIT_FAILED
    logger.info("done", extra={"stage": args.command, "seconds": round(time.perf_counter() - start, 3)})
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
