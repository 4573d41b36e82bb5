"""Acceptance criteria 1-9.

Each test prints one ``CRITERION n: PASS|FAIL`` line; the lines are also
collected into a summary section at the end of the pytest run.
"""

import contextlib
import filecmp
import json
import math
import os
import re
import subprocess
import sys
import time
import tracemalloc
from pathlib import Path

import numpy as np
import pytest
from conftest import make_dates
from oracles import exact_metrics, naive_confusion, naive_counts, naive_joint, naive_quantile, naive_trace

from forestcd.accuracy import assess, confusion, metrics, tune_thresholds
from forestcd.datacube import (
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
from forestcd.detector import DetectorParams, cube_evidence, detect_cube
from forestcd.model import fit_model
from forestcd.nlm import denoise_cube
from forestcd.pipeline import RunConfig, run_pipeline
from forestcd.robustness import CorruptionSpec, noise_sweep
from forestcd.simulator import LOOKALIKE, acceptance_scene_spec, generate_scene, write_scene

RESULTS: list[str] = []

# Pinned on the first validated run of the seeded acceptance scene.
TUNED_Q = 0.01
TUNED_L = 1e4
TUNED_CONFUSION = (1891, 35, 14458, 0)  # tp, fp, tn, fn
TUNED_MEAN_LAG_DAYS = 8.319407720782655

# The corruption sweep runs at the largest default-grid q, with L tuned at
# that q. Smaller q lets a few corrupted members drag the threshold down
# well before c = 0.10 (see README).
SWEEP_Q = 0.2


@contextlib.contextmanager
def criterion(number: int, title: str):
    details: dict = {}
    try:
        yield details
    except BaseException as exc:
        line = f"CRITERION {number}: FAIL - {title} ({_fmt(details)}) {type(exc).__name__}: {exc}".rstrip()
        RESULTS.append(line.splitlines()[0])
        print(line)
        raise
    line = f"CRITERION {number}: PASS - {title} ({_fmt(details)})"
    RESULTS.append(line)
    print(line)


def _fmt(details: dict) -> str:
    return ", ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in details.items())


@pytest.fixture(scope="module")
def acceptance_scene():
    return generate_scene(acceptance_scene_spec())


@pytest.fixture(scope="module")
def acceptance_denoised(acceptance_scene):
    return denoise_cube(acceptance_scene.cube)


# ---------------------------------------------------------------------------


def _random_case(rng):
    n_time = int(rng.integers(2, 11))
    n_vars = int(rng.integers(1, 3))
    height = int(rng.integers(1, 9))
    width = int(rng.integers(1, 9))
    values = rng.normal(-10, 3, size=(n_time, n_vars, height, width))
    if rng.random() < 0.3:
        # coarse values force ties and shared bins
        values = np.round(values)
    values = values.astype(np.float32)
    gaps = rng.random((n_time, height, width)) < rng.uniform(0, 0.3)
    t, y, x = gaps.nonzero()
    values[t, :, y, x] = np.nan
    cube = DataCube(values, [f"v{i}" for i in range(n_vars)], make_dates(n_time))
    flags = rng.random((height, width)) < rng.uniform(0.3, 1.0)
    flags[int(rng.integers(height)), int(rng.integers(width))] = True
    if np.isnan(values[:, 0][:, flags]).all():
        values[0, :, flags.nonzero()[0][0], flags.nonzero()[1][0]] = -10.0
        cube = cube.with_values(values)
    mask = ForestMask(flags)
    n_bins = int(rng.choice([2, 3, 8, 16, 64]))
    q = float(rng.choice([0.01, 0.02, 0.05, 0.1, 0.2, 0.5]))
    L = float(rng.choice([1.5, 2.0, 5.0, 10.0, 100.0]))
    mode = str(rng.choice(["coherent", "paper-literal"]))
    gate = bool(rng.random() < 0.7)
    return cube, mask, n_bins, q, DetectorParams(L, mode, gate)


def _close(a: float, b: float) -> bool:
    if math.isnan(a) or math.isnan(b):
        return math.isnan(a) and math.isnan(b)
    return math.isclose(a, b, rel_tol=1e-9, abs_tol=0.0)


def test_criterion_1_oracle_equivalence():
    with criterion(1, "oracle equivalence on 100 random cubes") as d:
        rng = np.random.default_rng(2024)
        start = time.perf_counter()
        checks = 0
        for case in range(100):
            cube, mask, n_bins, q, params = _random_case(rng)
            model = fit_model(cube, mask, n_bins, q)
            edges = [model.spec.edges[v].tolist() for v in range(cube.n_variables)]
            naive_thr = []
            naive_sim = np.empty((cube.n_time, cube.height, cube.width))
            for t in range(cube.n_time):
                counts = [naive_counts(cube.values[t, v][mask.flags], edges[v]) for v in range(cube.n_variables)]
                assert counts == model.counts[t].tolist(), f"case {case}: counts at t={t}"
                for y in range(cube.height):
                    for x in range(cube.width):
                        naive_sim[t, y, x] = naive_joint(cube.values[t, :, y, x], edges, counts, model.epsilon)
                naive_thr.append(naive_quantile(naive_sim[t][mask.flags].tolist(), q))
                checks += 1
            assert all(_close(a, b) for a, b in zip(model.thresholds, naive_thr)), f"case {case}: thresholds"
            sim = model.joint_similarity_array(cube.values)
            assert all(_close(a, b) for a, b in zip(sim.ravel(), naive_sim.ravel())), f"case {case}: similarity"

            evidence = cube_evidence(model, cube, params)
            change_map, _ = detect_cube(model, cube, params)
            ref_idx = np.where(rng.random((cube.height, cube.width)) < 0.3, rng.integers(0, cube.n_time, (cube.height, cube.width)), -1)
            for y in range(cube.height):
                for x in range(cube.width):
                    ev, declared = naive_trace(
                        naive_sim[:, y, x].tolist(), naive_thr, params.L, params.mode == "coherent",
                        params.require_forest_onset,
                    )
                    assert all(_close(a, b) for a, b in zip(evidence[:, y, x], ev)), f"case {case}: trace ({x},{y})"
                    assert change_map.change_index[y, x] == (-1 if declared is None else declared)

            ref = ReferenceChangeMap(ref_idx.astype(np.int32), cube.dates)
            cm = confusion(change_map, ref)
            tally = naive_confusion(change_map.change_index.tolist(), ref_idx.tolist(), change_map.low_coverage.tolist())
            assert (cm.tp, cm.fp, cm.tn, cm.fn, cm.excluded) == tally, f"case {case}: confusion"
            if min(cm.tp + cm.fn, cm.tp + cm.fp, cm.tn + cm.fn, cm.tn + cm.fp) > 0:
                exact = exact_metrics(cm.tp, cm.fp, cm.tn, cm.fn)
                row = metrics(cm).to_row()
                assert all(_close(row[k], float(v)) for k, v in exact.items()), f"case {case}: metrics"
        d["cases"] = 100
        d["timesteps"] = checks
        d["seconds"] = time.perf_counter() - start
        assert d["seconds"] < 30


def test_criterion_2_fixture_examples():
    with criterion(2, "hand-checkable fixture examples pass as unit tests") as d:
        tests_dir = Path(__file__).parent
        proc = subprocess.run(
            [sys.executable, "-m", "pytest", "-q", "-m", "trivial", "-p", "no:cacheprovider", str(tests_dir),
             "--ignore", str(Path(__file__))],
            capture_output=True,
            text=True,
            cwd=tests_dir.parent,
        )
        summary = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr
        passed = re.search(r"(\d+) passed", summary)
        d["passed"] = int(passed.group(1)) if passed else 0
        d["summary"] = summary.strip("= ")
        assert proc.returncode == 0, proc.stdout[-3000:]
        assert d["passed"] >= 40


@pytest.mark.slow
def test_criterion_3_seeded_scene_detection(acceptance_scene):
    with criterion(3, "tuned detection on the seeded acceptance scene") as d:
        start = time.perf_counter()
        scene = generate_scene(acceptance_scene_spec())
        assert np.array_equal(scene.cube.values, acceptance_scene.cube.values)
        denoised = denoise_cube(scene.cube, workers=1)
        result = tune_thresholds(denoised, scene.forest, scene.reference, workers=1)
        seconds = time.perf_counter() - start
        r = result.report
        d.update(q=result.q, L=result.L, PA=r.pa, UA=r.ua, BA_standard=r.ba_standard,
                 mean_lag_days=r.mean_lag_days, seconds=seconds)
        assert r.pa >= 0.90
        assert r.ua >= 0.80
        assert r.ba_standard >= 0.85
        assert r.mean_lag_days <= 48
        assert seconds < 60
        c = r.confusion
        assert (result.q, result.L) == (TUNED_Q, TUNED_L)
        assert (c.tp, c.fp, c.tn, c.fn) == TUNED_CONFUSION
        assert r.mean_lag_days == pytest.approx(TUNED_MEAN_LAG_DAYS, rel=1e-12)


@pytest.mark.slow
def test_criterion_4_noise_robustness(acceptance_scene, acceptance_denoised):
    with criterion(4, "accuracy against ensemble corruption") as d:
        scene = acceptance_scene
        tuned = tune_thresholds(acceptance_denoised, scene.forest, scene.reference, q_grid=(SWEEP_Q,))
        sweep = noise_sweep(
            acceptance_denoised, scene.reference, scene.forest, scene.pool, CorruptionSpec(seed=42),
            q=SWEEP_Q, params=DetectorParams(L=tuned.L),
        )
        c = sweep.column("c")
        pa = sweep.column("PA")
        ua = sweep.column("UA")
        i0 = int(np.flatnonzero(c == 0.0)[0])
        i10 = int(np.flatnonzero(np.isclose(c, 0.10))[0])
        d.update(q=SWEEP_Q, L=tuned.L, PA0=pa[i0], PA10=pa[i10], UA0=ua[i0], UA10=ua[i10], PAmin=float(pa.min()))
        assert len(c) == 12 and c[-1] == pytest.approx(0.22)
        assert pa[i10] >= pa[i0] - 0.05
        assert ua[i10] >= ua[i0] - 0.02
        for j in range(len(pa)):
            assert np.all(pa[j] <= pa[:j] + 0.02), f"PA rises at c={c[j]}"


@pytest.mark.slow
def test_criterion_5_lookalike_false_positives():
    with criterion(5, "lookalike false positives fall early in the series") as d:
        scene = generate_scene(acceptance_scene_spec(lookalike=True))
        cube = denoise_cube(scene.cube)
        model = fit_model(cube, scene.forest, q=TUNED_Q)
        change_map, _ = detect_cube(model, cube, DetectorParams(L=TUNED_L))
        patch = scene.labels == LOOKALIKE
        idx = change_map.change_index[patch]
        hits = idx[idx >= 0]
        quarter = scene.cube.n_time / 4
        early = float((hits < quarter).mean()) if hits.size else 0.0
        d.update(patch_pixels=int(patch.sum()), detections=int(hits.size), early_fraction=early)
        assert hits.size > 0
        assert early >= 0.80


def _tree(root: Path) -> list[Path]:
    return sorted(p.relative_to(root) for p in root.rglob("*") if p.is_file())


@pytest.mark.slow
def test_criterion_6_determinism(tmp_path, acceptance_scene):
    with criterion(6, "bit-identical outputs across worker counts and reruns") as d:
        n_max = max(4, os.cpu_count() or 1)
        scene_dir = tmp_path / "scene"
        write_scene(acceptance_scene, scene_dir)
        again = generate_scene(acceptance_scene_spec())
        assert np.array_equal(again.cube.values.view(np.uint32), acceptance_scene.cube.values.view(np.uint32))

        runs = {}
        for label, workers in (("w1", 1), ("w2", 2), (f"w{n_max}", n_max), ("w1-rerun", 1)):
            out = tmp_path / label
            run_pipeline(
                RunConfig(
                    cube=str(scene_dir / "cube.json"), mask=str(scene_dir / "mask.json"),
                    ref=str(scene_dir / "ref.json"), out=str(out), q=TUNED_Q, L=TUNED_L,
                    workers=workers, trace=[[16, 16]],
                )
            )
            runs[label] = out
        base = runs["w1"]
        files = [p for p in _tree(base) if p.name != "provenance.json"]
        for label, out in runs.items():
            assert _tree(out) == _tree(base)
            for rel in files:
                assert filecmp.cmp(base / rel, out / rel, shallow=False), f"{label}: {rel}"
            prov = json.loads((out / "provenance.json").read_text())
            ref_prov = json.loads((base / "provenance.json").read_text())
            assert prov["config_hash"] == ref_prov["config_hash"]
            assert prov["outputs"] == ref_prov["outputs"]

        denoised = read_cube(base / "denoised" / "cube.json")
        spec = CorruptionSpec((0.0, 0.1, 0.2), seed=42)
        sweeps = [
            noise_sweep(denoised, acceptance_scene.reference, acceptance_scene.forest, acceptance_scene.pool,
                        spec, q=SWEEP_Q, params=DetectorParams(L=TUNED_L), workers=w)
            for w in (1, 2, n_max)
        ]
        for s in sweeps[1:]:
            assert s.rows == sweeps[0].rows
        tunes = [
            tune_thresholds(denoised, acceptance_scene.forest, acceptance_scene.reference,
                            q_grid=(0.01, 0.2), L_grid=(10.0, 1e4), workers=w)
            for w in (1, n_max)
        ]
        assert tunes[0].grid == tunes[1].grid
        d.update(worker_counts=f"1,2,{n_max}", files_compared=len(files), sweep_points=3)


def test_criterion_7_round_trips(tmp_path):
    with criterion(7, "format round-trips on seeded random instances") as d:
        rng = np.random.default_rng(77)
        n = 50
        for i in range(n):
            shape = (int(rng.integers(1, 12)), int(rng.integers(1, 4)), int(rng.integers(1, 20)), int(rng.integers(1, 20)))
            values = rng.normal(-10, 5, size=shape).astype(np.float32)
            t, y, x = (rng.random((shape[0], shape[2], shape[3])) < 0.2).nonzero()
            values[t, :, y, x] = np.nan
            cube = DataCube(values, [f"v{k}" for k in range(shape[1])], make_dates(shape[0]))
            write_cube(cube, tmp_path / f"c{i}")
            back = read_cube(tmp_path / f"c{i}" / "cube.json")
            assert np.array_equal(back.values.view(np.uint32), cube.values.view(np.uint32))
            assert back.dates == cube.dates and back.variables == cube.variables

            mask = ForestMask(rng.random(shape[2:]) < 0.5)
            write_mask(mask, tmp_path / f"c{i}" / "mask.json")
            assert np.array_equal(read_mask(tmp_path / f"c{i}" / "mask.json").flags, mask.flags)

            idx = rng.integers(-1, shape[0], size=shape[2:]).astype(np.int32)
            evidence = np.where(idx >= 0, rng.lognormal(3, 2, size=shape[2:]), np.nan)
            low = (idx < 0) & (rng.random(shape[2:]) < 0.3)
            write_change_map(ChangeMap(idx, cube.dates, evidence, low), tmp_path / f"c{i}", png=False)
            cm = read_change_map(tmp_path / f"c{i}" / "changes.json")
            assert np.array_equal(cm.change_index, idx)
            assert np.array_equal(cm.final_evidence, evidence, equal_nan=True)
            assert np.array_equal(cm.low_coverage, low)
            assert cm.dates == cube.dates

            ref = ReferenceChangeMap(idx, cube.dates, "visual")
            write_reference(ref, tmp_path / f"c{i}")
            assert np.array_equal(read_reference(tmp_path / f"c{i}" / "ref.json").change_index, idx)
        d["instances"] = n


def test_criterion_8_nlm_sanity():
    with criterion(8, "NLM constant identity, variance reduction, NaN mask") as d:
        constant = DataCube(np.full((8, 2, 24, 24), -9.75, dtype=np.float32), ["VV", "VH"], make_dates(8))
        out = denoise_cube(constant)
        d["constant_max_abs_err"] = float(np.abs(out.values - constant.values).max())
        assert d["constant_max_abs_err"] <= 1e-6

        rng = np.random.default_rng(8)
        noisy = -9.75 + rng.standard_normal((12, 1, 64, 64))
        t, y, x = (rng.random((12, 64, 64)) < 0.05).nonzero()
        noisy[t, :, y, x] = np.nan
        cube = DataCube(noisy.astype(np.float32), ["VV"], make_dates(12))
        out = denoise_cube(cube)
        ratio = np.nanvar(out.values, axis=(2, 3)) / np.nanvar(cube.values, axis=(2, 3))
        d["worst_variance_ratio"] = float(ratio.max())
        assert np.all(ratio <= 0.5)
        assert np.array_equal(np.isnan(out.values), np.isnan(cube.values))


@pytest.mark.slow
def test_criterion_9_performance():
    with criterion(9, "detect 256x256x60x2 in under 10 s within 4x cube memory") as d:
        spec = acceptance_scene_spec()
        spec.width = spec.height = 256
        scene = generate_scene(spec)
        cube = scene.cube
        size = cube.values.nbytes
        params = DetectorParams(L=TUNED_L)
        # warm-up so one-time imports do not count
        small = DataCube(cube.values[:, :, :8, :8], cube.variables, cube.dates)
        detect_cube(fit_model(small, ForestMask(scene.forest.flags[:8, :8]), q=TUNED_Q), small, params)

        tracemalloc.start()
        try:
            model = fit_model(cube, scene.forest, q=TUNED_Q, workers=1)
            _, fit_peak = tracemalloc.get_traced_memory()
            tracemalloc.reset_peak()
            start = time.perf_counter()
            change_map, _ = detect_cube(model, cube, params, workers=1)
            seconds = time.perf_counter() - start
            _, detect_peak = tracemalloc.get_traced_memory()
        finally:
            tracemalloc.stop()
        d.update(
            detect_seconds=seconds,
            fit_peak_x=fit_peak / size,
            detect_peak_x=detect_peak / size,
            n_changed=int(change_map.changed.sum()),
        )
        assert seconds < 10
        assert fit_peak <= 4 * size
        assert detect_peak <= 4 * size
