import copy
import json

import numpy as np
import pytest

from oracles import rotation_distance
from probe_vio.dataset import POSES_HEADER, load_dataset, read_labels
from probe_vio.frontend import run_sequence
from probe_vio.geometry import integrate_gyro_rates
from probe_vio.predictors import blur_metric, patch_entropy
from probe_vio.scenarios import blurred, clean, loop, moving_object
from probe_vio.simulator import (
    MovingCluster,
    NoiseSpec,
    Path3,
    SimulationSpec,
    SpecError,
    TrajectorySpec,
    WorldSpec,
    generate,
    load_spec,
    render_patches,
    write_simulation,
)


@pytest.fixture(scope="module")
def noisy():
    return generate(moving_object(seed=11, frames=20))


def spec_dict(**overrides):
    d = clean("line", frames=5).to_dict()
    d.update(overrides)
    return d


class TestSpec:
    def test_dict_round_trip(self):
        spec = moving_object(seed=3, frames=10)
        again = SimulationSpec.from_dict(json.loads(json.dumps(spec.to_dict())))
        assert again == spec

    @pytest.mark.parametrize("section", ["camera", "world", "trajectory", "noise"])
    def test_missing_section_named(self, section):
        d = spec_dict()
        del d[section]
        with pytest.raises(SpecError, match=section) as info:
            SimulationSpec.from_dict(d)
        assert info.value.field == section

    def test_missing_cluster_field_named(self):
        d = spec_dict()
        d["world"]["clusters"] = [{"center": [0, 0, 10]}]
        with pytest.raises(SpecError, match="count") as info:
            SimulationSpec.from_dict(d)
        assert info.value.field == "world.clusters[0].count"

    def test_unknown_field_named(self):
        d = spec_dict()
        d["noise"]["pixel_noise"] = 1.0
        with pytest.raises(SpecError, match="pixel_noise"):
            SimulationSpec.from_dict(d)

    @pytest.mark.parametrize("section, key, value, field_name", [
        ("trajectory", "imu_rate", 5.0, "trajectory.imu_rate"),
        ("trajectory", "imu_rate", 205.0, "trajectory.imu_rate"),
        ("trajectory", "kind", "spiral", "trajectory.kind"),
        ("world", "static_count", 0, "world.static_count"),
        ("world", "bounds_max", [-30, 0, 0], "world.bounds_min"),
        ("noise", "pixel_sigma", -1.0, "noise"),
        ("noise", "outlier_prob", 1.5, "noise.outlier_prob"),
        ("noise", "blur", [0, 0, 2, 0, 0], "noise.blur"),
    ])
    def test_invalid_values(self, section, key, value, field_name):
        d = spec_dict()
        d[section][key] = value
        with pytest.raises(SpecError) as info:
            SimulationSpec.from_dict(d)
        assert info.value.field == field_name

    def test_load_spec_bad_json(self, tmp_path):
        (tmp_path / "s.json").write_text("{not json")
        with pytest.raises(SpecError):
            load_spec(tmp_path / "s.json")

    def test_blur_length_checked(self):
        spec = clean("line", frames=5)
        spec.noise.blur = [0.0, 0.5]
        with pytest.raises(SpecError, match="blur"):
            generate(spec)


class TestGeometry:
    @pytest.mark.parametrize("kind", ["line", "arc", "loop"])
    def test_noise_free_reproduces_ground_truth(self, kind):
        res = generate(clean(kind, seed=1, frames=30))
        gt = np.array([p for _, p, _ in res.poses])
        out = run_sequence(res.dataset, "nominal")
        assert np.abs(out.positions - gt).max() < 1e-8

    def test_observations_valid(self, noisy):
        cam = noisy.dataset.cam
        for fr in noisy.dataset.frames:
            assert np.all(fr.y[:, 0] - fr.y[:, 2] > 0)
            assert np.all((fr.y[:, [0, 2]] >= -5) & (fr.y[:, [0, 2]] < cam.image_width + 5))
        for y in noisy.truth_y:
            assert np.all(y[:, 0] - y[:, 2] > 0)
            assert np.all((y[:, [0, 2]] >= 0) & (y[:, [0, 2]] < cam.image_width))
            assert np.all((y[:, 1] >= 0) & (y[:, 1] < cam.image_height))

    def test_pixel_noise_statistics(self):
        res = generate(moving_object(seed=4, frames=10, vehicles_count=0))
        resid = np.concatenate([(fr.y - y).ravel() for fr, y in zip(res.dataset.frames, res.truth_y)])
        assert resid.size >= 10_000
        assert resid.std() == pytest.approx(0.5, abs=0.05)

    def test_blur_inflates_noise(self):
        res = generate(blurred(seed=2, frames=20))
        per_frame = [np.std(fr.y - y) for fr, y in zip(res.dataset.frames, res.truth_y)]
        np.testing.assert_allclose(res.pixel_sigma_per_frame, 0.5 * (1 + 3.0 * res.blur))
        high, low = res.blur > 0.5, res.blur == 0
        assert np.mean(np.array(per_frame)[high]) > 2 * np.mean(np.array(per_frame)[low])

    @pytest.mark.parametrize("kind", ["arc", "loop"])
    def test_gyro_matches_ground_truth_rotation(self, kind):
        res = generate(clean(kind, seed=0, frames=20, wobble_deg=2.0))
        ds = res.dataset
        for k in range(ds.n_frames - 1):
            om, _, dt = ds.imu_window(ds.frame_times[k], ds.frame_times[k + 1])
            C = integrate_gyro_rates(om, dt, ds.rig.C_cv)
            C_true = res.poses[k + 1][2] @ res.poses[k][2].T
            assert rotation_distance(C, C_true) < 1e-9

    def test_loop_closes(self):
        tr = TrajectorySpec(kind="loop", duration=12.0, radius=8.0)
        path = Path3(tr)
        assert np.linalg.norm(path.position(tr.duration) - path.position(0.0)) < 1e-12
        wp = TrajectorySpec(kind="waypoints", duration=10.0, closed=True,
                            waypoints=[[0, 0, 0], [5, 0, 5], [0, 0, 10], [-5, 0, 5]])
        p = Path3(wp)
        assert np.linalg.norm(p.position(wp.duration) - p.position(0.0)) < 1e-12
        res = generate(loop(seed=1, frames=40, vehicles_count=0))
        assert np.linalg.norm(res.poses[-1][1] - res.poses[0][1]) < 1e-12

    def test_no_visible_landmarks(self):
        spec = clean("line", frames=5)
        spec.world = WorldSpec(layout="box", bounds_min=[-5, -5, -30], bounds_max=[5, 5, -10])
        with pytest.raises(SpecError, match="frame 0"):
            generate(spec)


class TestLabels:
    def test_partition(self, noisy):
        seen = {}
        for f, t, lab in noisy.labels:
            assert (f, t) not in seen
            seen[(f, t)] = lab
        expected = {(k, int(i)) for k, fr in enumerate(noisy.dataset.frames) for i in fr.ids}
        assert set(seen) == expected
        assert set(seen.values()) <= {"static", "moving", "outlier"}
        assert "moving" in seen.values()

    def test_outliers_labelled(self):
        spec = clean("line", frames=6)
        spec.noise = NoiseSpec(pixel_sigma=0.0, outlier_prob=0.2)
        res = generate(spec)
        for k, (fr, y) in enumerate(zip(res.dataset.frames, res.truth_y)):
            err = np.abs(fr.y - y).max(axis=1)
            labels = np.array([res.label_map()[(k, int(i))] for i in fr.ids])
            assert np.all(err[labels == "outlier"] > 1.0)
            assert np.all(err[labels != "outlier"] == 0.0)

    def test_moving_cluster_flow_score(self):
        spec = clean("line", frames=10, speed=2.0)
        spec.noise.pixel_sigma = 0.5
        spec.world.clusters = [MovingCluster(count=150, center=[-3.0, 0.0, 12.0], extent=[1.5, 0.8, 1.0],
                                             velocity=[2.0, 0.0, 0.0])]
        res = generate(spec)
        labels = res.label_map()
        moving, static = [], []
        for k in range(1, res.dataset.n_frames):
            ids, cols = res.dataset.predictors[k]
            for i, score in zip(ids, cols[:, 4]):
                (moving if labels[(k, int(i))] == "moving" else static).append(score)
        assert len(moving) > 100
        assert np.mean(moving) > np.mean(static)


class TestRendering:
    def test_blur_level_raises_metric(self):
        res = generate(blurred(seed=5, frames=20))
        sharp = [blur_metric(render_patches(res, k)) for k in np.flatnonzero(res.blur == 0)]
        soft = [blur_metric(render_patches(res, k)) for k in np.flatnonzero(res.blur >= 0.8)]
        assert min(soft) > max(sharp)

    def test_textured_vs_flat_entropy(self, noisy):
        img = render_patches(noisy, 5)
        fr = noisy.dataset.frames[5]
        u, v = np.round(fr.y[0, :2]).astype(int)
        textured = img[v - 4:v + 5, u - 4:u + 5]
        assert patch_entropy(textured) > patch_entropy(np.full((9, 9), img[v, u]))

    def test_deterministic_images(self, tmp_path):
        spec = blurred(seed=1, frames=4)
        spec.render_images = True
        a = write_simulation(generate(spec), tmp_path / "a")
        b = write_simulation(generate(copy.deepcopy(spec)), tmp_path / "b")
        for k in range(4):
            assert (a / "images" / f"{k:06d}.pgm").read_bytes() == (b / "images" / f"{k:06d}.pgm").read_bytes()

    def test_render_matches_stored_image(self):
        spec = blurred(seed=1, frames=4)
        res = generate(spec, keep_images=True)
        np.testing.assert_array_equal(render_patches(res, 2), res.images[2])


class TestOutput:
    def test_layout(self, noisy, tmp_path):
        out = write_simulation(noisy, tmp_path / "sim")
        for name in ("calib.json", "imu.csv", "tracks.csv", "predictors.csv", "groundtruth.csv",
                     "labels.csv", "poses_gt.csv", "spec.json"):
            assert (out / name).exists(), name
        assert (out / "poses_gt.csv").read_text().splitlines()[0] == ",".join(POSES_HEADER)
        assert read_labels(out / "labels.csv") == noisy.label_map()
        ds = load_dataset(out)
        assert ds.n_frames == noisy.dataset.n_frames
        assert ds.pixel_sigma == 0.5

    def test_byte_identical(self, tmp_path):
        a = write_simulation(generate(moving_object(seed=8, frames=6)), tmp_path / "a")
        b = write_simulation(generate(moving_object(seed=8, frames=6)), tmp_path / "b")
        for f in sorted(p.name for p in a.iterdir()):
            assert (a / f).read_bytes() == (b / f).read_bytes(), f

    @pytest.mark.parametrize("density, frames", [("every", list(range(7))), ("endpoints", [0, 6]),
                                                 ("every_n", [0, 3, 6]), ("none", [])])
    def test_groundtruth_density(self, density, frames):
        spec = clean("line", frames=7)
        spec.groundtruth, spec.groundtruth_every = density, 3
        got, _ = generate(spec).dataset.groundtruth_at_frames()
        assert got.tolist() == frames

    def test_unwritable(self, noisy, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(SpecError):
            write_simulation(noisy, blocker / "sub")
