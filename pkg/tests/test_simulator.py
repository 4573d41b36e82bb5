import json

import numpy as np
import pytest

from forestcd.datacube import read_cube, read_mask, read_reference
from forestcd.simulator import (
    DEFOREST,
    FOREST,
    LOOKALIKE,
    NONFOREST,
    ClassSignature,
    Patch,
    SceneError,
    SceneSpec,
    acceptance_scene_spec,
    generate_scene,
    transition_weight,
    write_scene,
)


def quiet_spec(**overrides):
    spec = SceneSpec(
        width=24,
        height=20,
        n_time=16,
        noise_std=[0.0, 0.0],
        transition=3,
        classes={
            "forest": ClassSignature([-7.0, -12.0], [1e-12, 1e-12]),
            "nonforest": ClassSignature([-11.0, -18.0], [1e-12, 1e-12]),
        },
        patches=[
            Patch("nonforest", x0=0, y0=15, x1=24, y1=20),
            Patch("deforest", x0=2, y0=2, x1=8, y1=8, change_index=5),
            Patch("deforest", shape="disc", cx=16, cy=8, radius=3, change_index=3, change_index_end=9),
        ],
    )
    for key, value in overrides.items():
        setattr(spec, key, value)
    return spec


class TestGenerate:
    @pytest.mark.trivial
    def test_noise_free_limit(self):
        scene = generate_scene(quiet_spec())
        v = scene.cube.values
        forest = scene.labels == FOREST
        np.testing.assert_allclose(v[:, 0][:, forest], -7.0, atol=1e-5)
        np.testing.assert_allclose(v[:, 1][:, forest], -12.0, atol=1e-5)
        cleared = scene.labels == DEFOREST
        onset = scene.reference.change_index
        for y, x in np.argwhere(cleared):
            done = onset[y, x] + 3 - 1
            np.testing.assert_allclose(v[done:, :, y, x], [[-11.0, -18.0]] * (16 - done), atol=1e-5)
            np.testing.assert_allclose(v[: onset[y, x], :, y, x], [[-7.0, -12.0]] * onset[y, x], atol=1e-5)

    @pytest.mark.trivial
    def test_same_seed_bit_identical(self):
        a = generate_scene(acceptance_scene_spec(seed=5))
        b = generate_scene(acceptance_scene_spec(seed=5))
        assert np.array_equal(a.cube.values.view(np.uint32), b.cube.values.view(np.uint32))
        c = generate_scene(acceptance_scene_spec(seed=6))
        assert not np.array_equal(a.cube.values, c.cube.values)

    def test_acceptance_class_means(self, scene):
        spec = scene.spec
        for code, name in ((FOREST, "forest"), (NONFOREST, "nonforest")):
            sig = spec.classes[name]
            pixels = scene.cube.values[:, :, scene.labels == code]
            n_pix = pixels.shape[2]
            # class mean over time, with the seasonal term averaged out by the sample
            days = np.array([(d - spec.dates[0]).days for d in spec.dates], dtype=float)
            season = np.sin(2 * np.pi * days / 365.25 + sig.seasonal_phase).mean()
            for v in range(2):
                expected = sig.mean[v] + season * sig.seasonal_amplitude[v]
                sample = pixels[:, v].mean()
                # per-pixel offsets dominate: the mean over n pixels has std sigma/sqrt(n)
                sd = np.sqrt(sig.std[v] ** 2 + spec.noise_std[v] ** 2 / spec.n_time)
                assert abs(sample - expected) <= 3 * sd / np.sqrt(n_pix)

    def test_acceptance_scene_layout(self, scene):
        assert scene.cube.shape == (60, 2, 128, 128)
        assert scene.cube.dates[1].toordinal() - scene.cube.dates[0].toordinal() == 12
        assert len(np.unique(scene.reference.change_index[scene.reference.changed])) > 6
        gap = np.array(scene.spec.classes["forest"].mean) - np.array(scene.spec.classes["nonforest"].mean)
        assert np.all(gap >= 2.0)
        assert not (scene.forest.flags & scene.reference.changed).any()
        assert not (scene.forest.flags & scene.pool.flags).any()

    def test_rainbow_patch_sweeps_west_to_east(self, scene):
        rows = scene.reference.change_index[50:66, 10:40]
        assert rows[:, 0].max() == 28 and rows[:, -1].min() == 38
        assert np.all(np.diff(rows[0]) >= 0)

    def test_lookalike_patch(self, lookalike_scene):
        labels = lookalike_scene.labels
        assert (labels == LOOKALIKE).sum() == 20 * 16
        assert lookalike_scene.pool.flags[labels == LOOKALIKE].all()
        assert not lookalike_scene.reference.changed[labels == LOOKALIKE].any()

    def test_transition_weight(self):
        assert transition_weight(8, 3, 3).tolist() == pytest.approx([0, 0, 0, 1 / 3, 2 / 3, 1, 1, 1])

    def test_overlapping_patches_rejected(self):
        spec = quiet_spec()
        spec.patches.append(Patch("nonforest", x0=4, y0=4, x1=6, y1=6))
        with pytest.raises(SceneError, match="overlap"):
            generate_scene(spec)

    def test_change_index_out_of_range(self):
        spec = quiet_spec()
        spec.patches[1].change_index = 16
        with pytest.raises(SceneError):
            generate_scene(spec)

    @pytest.mark.slow
    def test_class_separability_dial(self):
        from forestcd.accuracy import assess
        from forestcd.detector import DetectorParams, detect_cube
        from forestcd.model import fit_model

        pa = []
        for gap in (0.5, 1.5, 4.0):
            spec = acceptance_scene_spec()
            spec.classes["nonforest"].mean = [-7.0 - gap, -12.5 - gap]
            scene = generate_scene(spec)
            model = fit_model(scene.cube, scene.forest, q=0.05)
            change_map, _ = detect_cube(model, scene.cube, DetectorParams(L=100))
            pa.append(assess(change_map, scene.reference).pa)
        assert pa[0] < pa[1] < pa[2]


class TestWriteScene:
    def test_files(self, tmp_path):
        scene = generate_scene(quiet_spec(noise_std=[1.0, 1.0]))
        paths = write_scene(scene, tmp_path)
        assert np.array_equal(read_cube(paths["cube"]).values, scene.cube.values)
        assert np.array_equal(read_mask(paths["mask"]).flags, scene.forest.flags)
        assert np.array_equal(read_mask(paths["pool"]).flags, scene.pool.flags)
        assert np.array_equal(read_reference(paths["ref"]).change_index, scene.reference.change_index)
        again = generate_scene(SceneSpec.from_json(json.loads(paths["spec"].read_text())))
        assert np.array_equal(again.cube.values, scene.cube.values)
