"""On-disk dataset layout.

::

    calib.json        flat JSON: f, b, c_u, c_v, image_width, image_height,
                      C_cv (9 numbers, row-major), frame_rate, t0 [, pixel_sigma, camera_id]
    imu.csv           t,wx,wy,wz,ax,ay,az
    tracks.csv        frame_idx,track_id,ul,vl,ur,vr
    images/NNNNNN.pgm optional 8-bit left images
    predictors.csv    optional frame_idx,track_id + 7 predictor columns
    groundtruth.csv   optional t,x,y,z (camera position in the first camera frame)

Simulated datasets additionally carry ``labels.csv`` and ``poses_gt.csv``.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from PIL import Image

from .errors import DatasetError
from .geometry import RigCalibration, StereoCamera
from .predictors import PREDICTOR_NAMES

log = logging.getLogger(__name__)

IMU_HEADER = ["t", "wx", "wy", "wz", "ax", "ay", "az"]
TRACKS_HEADER = ["frame_idx", "track_id", "ul", "vl", "ur", "vr"]
PREDICTORS_HEADER = ["frame_idx", "track_id", *PREDICTOR_NAMES]
GT_HEADER = ["t", "x", "y", "z"]
LABELS_HEADER = ["frame_idx", "track_id", "label"]
POSES_HEADER = ["t", "x", "y", "z"] + [f"r{i}{j}" for i in range(3) for j in range(3)]
CALIB_REQUIRED = ("f", "b", "c_u", "c_v", "image_width", "image_height", "frame_rate")

FLOAT_FMT = "%.17g"


@dataclass
class FrameObservations:
    ids: np.ndarray  # (n,) int64, sorted
    y: np.ndarray  # (n, 4)


@dataclass
class Dataset:
    cam: StereoCamera
    rig: RigCalibration
    frame_times: np.ndarray
    imu_t: np.ndarray
    imu_omega: np.ndarray
    imu_accel: np.ndarray
    frames: list[FrameObservations]
    groundtruth: tuple[np.ndarray, np.ndarray] | None = None
    predictors: dict[int, tuple[np.ndarray, np.ndarray]] | None = None
    image_loader: Callable[[int], np.ndarray] | None = None
    pixel_sigma: float | None = None
    camera_id: str = "stereo"
    name: str = "dataset"
    extras: dict = field(default_factory=dict)

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    @property
    def frame_rate(self) -> float:
        if len(self.frame_times) < 2:
            return 1.0
        return float(1.0 / np.median(np.diff(self.frame_times)))

    def image(self, k: int) -> np.ndarray | None:
        return None if self.image_loader is None else self.image_loader(k)

    def imu_window(self, t_a: float, t_b: float):
        """Samples with ``t_a <= t < t_b`` and their periods."""
        eps = 1e-9
        lo = np.searchsorted(self.imu_t, t_a - eps, side="left")
        hi = np.searchsorted(self.imu_t, t_b - eps, side="left")
        idx = np.arange(lo, hi)
        end = self.imu_t[hi] if hi < len(self.imu_t) else t_b
        dt = np.diff(np.append(self.imu_t[idx], end))
        return self.imu_omega[idx], self.imu_accel[idx], dt

    def groundtruth_at_frames(self) -> tuple[np.ndarray, np.ndarray]:
        """Frame indices with a ground-truth position and those positions."""
        if self.groundtruth is None:
            return np.zeros(0, dtype=int), np.zeros((0, 3))
        t_gt, xyz = self.groundtruth
        tol = 0.5 / max(self.frame_rate, 1e-9)
        j = np.clip(np.searchsorted(self.frame_times, t_gt), 0, self.n_frames - 1)
        j_prev = np.clip(j - 1, 0, self.n_frames - 1)
        pick = np.where(np.abs(self.frame_times[j_prev] - t_gt) < np.abs(self.frame_times[j] - t_gt), j_prev, j)
        ok = np.abs(self.frame_times[pick] - t_gt) <= tol
        frames, first = np.unique(pick[ok], return_index=True)
        return frames, xyz[ok][first]


# --- CSV helpers ---------------------------------------------------------------


def _read_table(path: Path, header: list[str], required=True) -> np.ndarray | None:
    if not path.exists():
        if required:
            raise DatasetError(f"missing {path.name}")
        return None
    with open(path, newline="", encoding="utf-8") as fh:
        first = fh.readline().strip()
        cols = [c.strip() for c in first.split(",")]
        if cols != header:
            raise DatasetError(f"{path.name}: header {cols} != expected {header}")
        try:
            data = np.loadtxt(fh, delimiter=",", ndmin=2)
        except ValueError as exc:
            raise DatasetError(f"{path.name}: {exc}") from exc
    if data.size == 0:
        data = np.zeros((0, len(header)))
    if data.shape[1] != len(header):
        raise DatasetError(f"{path.name}: expected {len(header)} columns")
    return data


def write_table(path: Path, header: list[str], rows: np.ndarray, int_cols: int = 0) -> None:
    rows = np.asarray(rows, dtype=float).reshape(-1, len(header))
    fmt = ["%d"] * int_cols + [FLOAT_FMT] * (len(header) - int_cols)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        if len(rows):
            np.savetxt(fh, rows, fmt=fmt, delimiter=",")


def read_pgm(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "P"):
            raise DatasetError(f"{path}: expected 8-bit grayscale PGM, got mode {im.mode}")
        return np.asarray(im.convert("L"), dtype=np.uint8)


def write_pgm(path, image: np.ndarray) -> None:
    Image.fromarray(np.asarray(image, dtype=np.uint8), mode="L").save(path, format="PPM")


# --- load / save -----------------------------------------------------------------


def load_calib(path: Path) -> tuple[StereoCamera, RigCalibration, dict]:
    try:
        calib = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise DatasetError("missing calib.json") from exc
    except json.JSONDecodeError as exc:
        raise DatasetError(f"calib.json: {exc}") from exc
    missing = [k for k in CALIB_REQUIRED if k not in calib]
    if missing:
        raise DatasetError(f"calib.json missing fields: {', '.join(missing)}")
    try:
        cam = StereoCamera(float(calib["f"]), float(calib["b"]), float(calib["c_u"]), float(calib["c_v"]),
                           int(calib["image_width"]), int(calib["image_height"]))
        rig = RigCalibration(np.asarray(calib.get("C_cv", np.eye(3).ravel().tolist()), float).reshape(3, 3))
    except ValueError as exc:
        raise DatasetError(f"calib.json: {exc}") from exc
    return cam, rig, calib


def load_dataset(root) -> Dataset:
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset directory {root} does not exist")
    cam, rig, calib = load_calib(root / "calib.json")
    imu = _read_table(root / "imu.csv", IMU_HEADER)
    tracks = _read_table(root / "tracks.csv", TRACKS_HEADER)
    if np.any(np.diff(imu[:, 0]) <= 0):
        raise DatasetError("imu.csv timestamps must be strictly increasing")
    frame_idx = tracks[:, 0].astype(np.int64)
    n_frames = int(calib.get("n_frames", frame_idx.max() + 1 if len(frame_idx) else 0))
    frames = _split_frames(frame_idx, tracks[:, 1].astype(np.int64), tracks[:, 2:6], n_frames)
    rate = float(calib["frame_rate"])
    frame_times = float(calib.get("t0", 0.0)) + np.arange(n_frames) / rate

    gt = _read_table(root / "groundtruth.csv", GT_HEADER, required=False)
    preds = _read_table(root / "predictors.csv", PREDICTORS_HEADER, required=False)
    predictors = None
    if preds is not None:
        predictors = {}
        fi = preds[:, 0].astype(np.int64)
        for k in np.unique(fi):
            sel = fi == k
            ids = preds[sel, 1].astype(np.int64)
            order = np.argsort(ids, kind="stable")
            predictors[int(k)] = (ids[order], preds[sel][order, 2:])

    image_loader = None
    img_dir = root / "images"
    if img_dir.is_dir() and any(img_dir.glob("*.pgm")):
        def image_loader(k: int, _d=img_dir):
            p = _d / f"{k:06d}.pgm"
            if not p.exists():
                raise DatasetError(f"missing image {p.name}")
            return read_pgm(p)

    return Dataset(
        cam=cam,
        rig=rig,
        frame_times=frame_times,
        imu_t=imu[:, 0],
        imu_omega=imu[:, 1:4],
        imu_accel=imu[:, 4:7],
        frames=frames,
        groundtruth=None if gt is None else (gt[:, 0], gt[:, 1:4]),
        predictors=predictors,
        image_loader=image_loader,
        pixel_sigma=calib.get("pixel_sigma"),
        camera_id=str(calib.get("camera_id", "stereo")),
        name=root.name,
    )


def _split_frames(frame_idx, track_ids, y, n_frames) -> list[FrameObservations]:
    frames = []
    order = np.lexsort((track_ids, frame_idx))
    frame_idx, track_ids, y = frame_idx[order], track_ids[order], y[order]
    bounds = np.searchsorted(frame_idx, np.arange(n_frames + 1))
    for k in range(n_frames):
        lo, hi = bounds[k], bounds[k + 1]
        frames.append(FrameObservations(track_ids[lo:hi].copy(), y[lo:hi].copy()))
    return frames


def calib_dict(ds: Dataset) -> dict:
    out = {
        "f": ds.cam.f,
        "b": ds.cam.b,
        "c_u": ds.cam.c_u,
        "c_v": ds.cam.c_v,
        "image_width": ds.cam.image_width,
        "image_height": ds.cam.image_height,
        "C_cv": ds.rig.C_cv.ravel().tolist(),
        "frame_rate": float(1.0 / np.median(np.diff(ds.frame_times))) if ds.n_frames > 1 else 1.0,
        "t0": float(ds.frame_times[0]) if ds.n_frames else 0.0,
        "n_frames": ds.n_frames,
        "camera_id": ds.camera_id,
    }
    if ds.pixel_sigma is not None:
        out["pixel_sigma"] = float(ds.pixel_sigma)
    return out


def save_dataset(ds: Dataset, root, write_images: bool = False, write_groundtruth: bool = True) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "calib.json").write_text(json.dumps(calib_dict(ds), indent=2, sort_keys=True) + "\n")
    write_table(root / "imu.csv", IMU_HEADER, np.c_[ds.imu_t, ds.imu_omega, ds.imu_accel])
    rows = [np.c_[np.full(len(fr.ids), k), fr.ids, fr.y] for k, fr in enumerate(ds.frames)]
    write_table(root / "tracks.csv", TRACKS_HEADER, np.vstack(rows) if rows else np.zeros((0, 6)), int_cols=2)
    if ds.predictors is not None:
        rows = [np.c_[np.full(len(ids), k), ids, vals] for k, (ids, vals) in sorted(ds.predictors.items())]
        write_table(root / "predictors.csv", PREDICTORS_HEADER, np.vstack(rows), int_cols=2)
    if write_groundtruth and ds.groundtruth is not None:
        t, xyz = ds.groundtruth
        write_table(root / "groundtruth.csv", GT_HEADER, np.c_[t, xyz])
    if write_images and ds.image_loader is not None:
        img_dir = root / "images"
        img_dir.mkdir(exist_ok=True)
        for k in range(ds.n_frames):
            write_pgm(img_dir / f"{k:06d}.pgm", ds.image(k))
    return root


def write_labels(path, labels: list[tuple[int, int, str]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LABELS_HEADER)
        w.writerows(labels)


def read_labels(path) -> dict[tuple[int, int], str]:
    with open(path, newline="", encoding="utf-8") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header != LABELS_HEADER:
            raise DatasetError(f"labels.csv: unexpected header {header}")
        return {(int(f), int(t)): lab for f, t, lab in r}


def read_trajectory_csv(path) -> tuple[np.ndarray, np.ndarray]:
    data = _read_table(Path(path), GT_HEADER)
    return data[:, 0], data[:, 1:4]
