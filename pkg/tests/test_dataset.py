import json

import numpy as np
import pytest

from probe_vio.dataset import (
    GT_HEADER,
    IMU_HEADER,
    TRACKS_HEADER,
    load_dataset,
    read_labels,
    read_pgm,
    read_trajectory_csv,
    save_dataset,
    write_labels,
    write_pgm,
    write_table,
)
from probe_vio.errors import DatasetError
from probe_vio.scenarios import clean
from probe_vio.simulator import generate


@pytest.fixture(scope="module")
def small():
    spec = clean("line", seed=2, frames=6)
    spec.groundtruth, spec.groundtruth_every = "every_n", 2
    return generate(spec).dataset


def test_round_trip(small, tmp_path):
    save_dataset(small, tmp_path / "d", write_images=True)
    ds = load_dataset(tmp_path / "d")
    assert ds.n_frames == small.n_frames
    np.testing.assert_array_equal(ds.frame_times, small.frame_times)
    np.testing.assert_array_equal(ds.imu_omega, small.imu_omega)
    np.testing.assert_array_equal(ds.imu_accel, small.imu_accel)
    for a, b in zip(ds.frames, small.frames):
        np.testing.assert_array_equal(a.ids, b.ids)
        np.testing.assert_array_equal(a.y, b.y)
    np.testing.assert_array_equal(ds.groundtruth[1], small.groundtruth[1])
    np.testing.assert_array_equal(ds.rig.C_cv, small.rig.C_cv)
    assert ds.cam == small.cam
    np.testing.assert_array_equal(ds.image(3), small.image(3))
    for k in small.predictors:
        np.testing.assert_array_equal(ds.predictors[k][1], small.predictors[k][1])


def test_headers(small, tmp_path):
    save_dataset(small, tmp_path)
    assert (tmp_path / "imu.csv").read_text().splitlines()[0] == ",".join(IMU_HEADER)
    assert (tmp_path / "tracks.csv").read_text().splitlines()[0] == ",".join(TRACKS_HEADER)
    assert (tmp_path / "groundtruth.csv").read_text().splitlines()[0] == ",".join(GT_HEADER)
    assert (tmp_path / "predictors.csv").read_text().splitlines()[0] == (
        "frame_idx,track_id,w_mag,a_mag,entropy,blur,flow_var,f_low,f_high")
    calib = json.loads((tmp_path / "calib.json").read_text())
    assert {"f", "b", "c_u", "c_v", "image_width", "image_height", "frame_rate"} <= set(calib)


def test_sparse_groundtruth(small):
    frames, xyz = small.groundtruth_at_frames()
    assert frames.tolist() == [0, 2, 4, 5]
    assert len(xyz) == 4


def test_imu_window_half_open(small):
    om, _, dt = small.imu_window(small.frame_times[1], small.frame_times[2])
    assert len(om) == 20
    assert dt.sum() == pytest.approx(0.1, abs=1e-12)
    inside = (small.imu_t >= small.frame_times[1] - 1e-12) & (small.imu_t < small.frame_times[2] - 1e-12)
    np.testing.assert_array_equal(om, small.imu_omega[inside])


@pytest.mark.parametrize("missing", ["calib.json", "imu.csv", "tracks.csv"])
def test_missing_required_file(small, tmp_path, missing):
    save_dataset(small, tmp_path)
    (tmp_path / missing).unlink()
    with pytest.raises(DatasetError, match=missing.split(".")[0]):
        load_dataset(tmp_path)


def test_optional_files(small, tmp_path):
    save_dataset(small, tmp_path, write_groundtruth=False)
    (tmp_path / "predictors.csv").unlink()
    ds = load_dataset(tmp_path)
    assert ds.groundtruth is None and ds.predictors is None and ds.image(0) is None


def test_bad_header(small, tmp_path):
    save_dataset(small, tmp_path)
    text = (tmp_path / "imu.csv").read_text().replace("wx", "gx", 1)
    (tmp_path / "imu.csv").write_text(text)
    with pytest.raises(DatasetError, match="header"):
        load_dataset(tmp_path)


def test_non_monotone_imu(small, tmp_path):
    save_dataset(small, tmp_path)
    write_table(tmp_path / "imu.csv", IMU_HEADER, np.c_[[0.0, 0.2, 0.1], np.zeros((3, 6))])
    with pytest.raises(DatasetError, match="increasing"):
        load_dataset(tmp_path)


def test_calib_missing_field(small, tmp_path):
    save_dataset(small, tmp_path)
    calib = json.loads((tmp_path / "calib.json").read_text())
    del calib["b"]
    (tmp_path / "calib.json").write_text(json.dumps(calib))
    with pytest.raises(DatasetError, match="b"):
        load_dataset(tmp_path)


def test_not_a_directory(tmp_path):
    with pytest.raises(DatasetError):
        load_dataset(tmp_path / "nowhere")


def test_pgm_round_trip(tmp_path, rng):
    img = rng.integers(0, 256, (17, 23)).astype(np.uint8)
    write_pgm(tmp_path / "x.pgm", img)
    assert (tmp_path / "x.pgm").read_bytes()[:2] == b"P5"
    np.testing.assert_array_equal(read_pgm(tmp_path / "x.pgm"), img)


def test_labels_round_trip(tmp_path):
    labels = [(0, 3, "static"), (0, 9, "moving"), (1, 3, "outlier")]
    write_labels(tmp_path / "labels.csv", labels)
    assert read_labels(tmp_path / "labels.csv") == {(f, t): lab for f, t, lab in labels}


def test_trajectory_csv(tmp_path, rng):
    rows = np.c_[np.arange(5) * 0.1, rng.normal(size=(5, 3))]
    write_table(tmp_path / "traj.csv", GT_HEADER, rows)
    t, xyz = read_trajectory_csv(tmp_path / "traj.csv")
    np.testing.assert_array_equal(t, rows[:, 0])
    np.testing.assert_array_equal(xyz, rows[:, 1:])
