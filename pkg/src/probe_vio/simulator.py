"""Synthetic stereo-inertial datasets with exact ground truth.

The world holds static landmarks and rigid clusters moving at constant
velocity. A camera follows a parametric path; gyro samples are derived from
consecutive orientations so that integrating them reproduces the true
inter-frame rotation exactly when noise is off. Feature tracks carry Gaussian
pixel noise whose standard deviation grows linearly with the frame's blur
level, optional gross outliers, and every observation is labelled
static / moving / outlier.

World frame: x right, y down, z forward at the start of the path. All written
ground truth is re-expressed in the first camera frame.
"""

from __future__ import annotations

import json
import logging
from dataclasses import MISSING, asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.ndimage import gaussian_filter
from scipy.spatial.transform import Rotation

from .dataset import (
    POSES_HEADER,
    Dataset,
    FrameObservations,
    save_dataset,
    write_labels,
    write_table,
)
from .errors import ProbeError
from .geometry import MIN_DISPARITY, RigCalibration, StereoCamera, project
from .predictors import PredictorConfig, flow_variance_scores, image_predictors, imu_magnitudes
from .rng import stream

log = logging.getLogger(__name__)

GRAVITY = np.array([0.0, 9.81, 0.0])  # y points down
# IMU axes x forward, y left, z up
DEFAULT_C_CV = [[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]]


class SpecError(ProbeError, ValueError):
    """Invalid simulation spec; ``field`` names the offending entry."""

    def __init__(self, message: str, field_name: str | None = None):
        super().__init__(message)
        self.field = field_name


@dataclass
class CameraSpec:
    f: float = 450.0
    b: float = 0.5
    c_u: float = 320.0
    c_v: float = 240.0
    image_width: int = 640
    image_height: int = 480
    C_cv: list = field(default_factory=lambda: [row[:] for row in DEFAULT_C_CV])
    min_depth: float = 1.5
    max_depth: float = 40.0
    min_disparity: float = 1.0


@dataclass
class MovingCluster:
    count: int
    center: list
    extent: list = field(default_factory=lambda: [1.0, 0.75, 1.0])
    velocity: list = field(default_factory=lambda: [1.0, 0.0, 0.0])
    texture: float = 0.35


@dataclass
class WorldSpec:
    static_count: int = 2000
    bounds_min: list = field(default_factory=lambda: [-20.0, -6.0, -5.0])
    bounds_max: list = field(default_factory=lambda: [20.0, 2.5, 80.0])
    clusters: list = field(default_factory=list)
    static_texture: float = 1.0
    seed: int = 0
    layout: str = "path"  # path: corridor around the trajectory; box: uniform in bounds
    corridor: float = 15.0


@dataclass
class TrajectorySpec:
    kind: str = "line"  # line | arc | loop | waypoints
    duration: float = 10.0
    frame_rate: float = 10.0
    imu_rate: float = 200.0
    speed: float = 5.0
    yaw_rate: float = 0.0
    radius: float = 10.0
    waypoints: list = field(default_factory=list)
    closed: bool = False
    wobble_deg: float = 0.0
    wobble_hz: float = 0.5


@dataclass
class NoiseSpec:
    pixel_sigma: float = 0.5
    gyro_sigma: float = 0.0
    gyro_bias: float = 0.0
    outlier_prob: float = 0.0
    outlier_px: float = 40.0
    blur: list | None = None  # per-frame blur level in [0, 1]
    blur_gain: float = 3.0
    blur_max_sigma: float = 4.0


@dataclass
class SimulationSpec:
    camera: CameraSpec = field(default_factory=CameraSpec)
    world: WorldSpec = field(default_factory=WorldSpec)
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    groundtruth: str = "every"  # every | every_n | endpoints | none
    groundtruth_every: int = 1
    render_images: bool = False
    name: str = "sim"

    # required top-level sections of a JSON spec file
    REQUIRED = ("camera", "world", "trajectory", "noise")

    @classmethod
    def from_dict(cls, d: dict) -> "SimulationSpec":
        for key in cls.REQUIRED:
            if key not in d:
                raise SpecError(f"simulation spec missing field '{key}'", key)
        try:
            world = dict(d["world"])
            world["clusters"] = [_build(MovingCluster, c, f"world.clusters[{i}]")
                                 for i, c in enumerate(world.get("clusters", []))]
            spec = cls(
                camera=_build(CameraSpec, d["camera"], "camera"),
                world=_build(WorldSpec, world, "world"),
                trajectory=_build(TrajectorySpec, d["trajectory"], "trajectory"),
                noise=_build(NoiseSpec, d["noise"], "noise"),
                **{k: d[k] for k in ("groundtruth", "groundtruth_every", "render_images", "name") if k in d},
            )
        except TypeError as exc:
            raise SpecError(f"invalid simulation spec: {exc}") from exc
        spec.validate()
        return spec

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> None:
        w, t, n = self.world, self.trajectory, self.noise
        if w.static_count <= 0:
            raise SpecError("world.static_count must be positive", "world.static_count")
        if np.any(np.asarray(w.bounds_max, float) <= np.asarray(w.bounds_min, float)):
            raise SpecError("world bounds are degenerate", "world.bounds_min")
        for i, c in enumerate(w.clusters):
            if c.count <= 0:
                raise SpecError("cluster count must be positive", f"world.clusters[{i}].count")
        if w.layout not in ("path", "box"):
            raise SpecError(f"unknown world layout {w.layout!r}", "world.layout")
        if t.kind not in ("line", "arc", "loop", "waypoints"):
            raise SpecError(f"unknown trajectory kind {t.kind!r}", "trajectory.kind")
        if t.imu_rate < t.frame_rate or t.frame_rate <= 0:
            raise SpecError("imu_rate must be >= frame_rate > 0", "trajectory.imu_rate")
        ratio = t.imu_rate / t.frame_rate
        if abs(ratio - round(ratio)) > 1e-9:
            raise SpecError("imu_rate must be an integer multiple of frame_rate", "trajectory.imu_rate")
        if t.kind == "waypoints" and len(t.waypoints) < 2:
            raise SpecError("waypoint trajectory needs >= 2 waypoints", "trajectory.waypoints")
        if min(n.pixel_sigma, n.gyro_sigma, n.blur_gain, n.blur_max_sigma) < 0:
            raise SpecError("noise parameters must be non-negative", "noise")
        if not 0 <= n.outlier_prob <= 1:
            raise SpecError("outlier_prob must lie in [0, 1]", "noise.outlier_prob")
        if n.blur is not None and np.any((np.asarray(n.blur) < 0) | (np.asarray(n.blur) > 1)):
            raise SpecError("blur levels must lie in [0, 1]", "noise.blur")
        if self.groundtruth not in ("every", "every_n", "endpoints", "none"):
            raise SpecError(f"unknown groundtruth density {self.groundtruth!r}", "groundtruth")


def _build(cls, d, where):
    if not isinstance(d, dict):
        raise SpecError(f"{where} must be an object", where)
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise SpecError(f"{where}: unknown field(s) {sorted(unknown)}", f"{where}.{sorted(unknown)[0]}")
    required = [f.name for f in fields(cls) if f.default is f.default_factory is MISSING]
    for r in required:
        if r not in d:
            raise SpecError(f"{where} missing field '{r}'", f"{where}.{r}")
    return cls(**d)


def load_spec(path) -> SimulationSpec:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SpecError(f"spec file is not valid JSON: {exc}") from exc
    return SimulationSpec.from_dict(raw)


# --- trajectory ----------------------------------------------------------------


def _rot_y(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rot_x(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _rot_z(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


class Path3:
    """Position and camera orientation as functions of time."""

    def __init__(self, spec: TrajectorySpec):
        self.spec = spec
        if spec.kind == "waypoints":
            pts = np.asarray(spec.waypoints, dtype=float)
            if spec.closed and np.linalg.norm(pts[0] - pts[-1]) > 1e-12:
                pts = np.vstack([pts, pts[:1]])
            seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
            knots = np.concatenate([[0.0], np.cumsum(seg)])
            knots *= spec.duration / knots[-1]
            self._spline = CubicSpline(knots, pts, bc_type="periodic" if spec.closed else "natural")

    def position(self, t):
        s = self.spec
        t = np.asarray(t, dtype=float)
        if s.kind == "line":
            return np.stack([np.zeros_like(t), np.zeros_like(t), s.speed * t], axis=-1)
        if s.kind == "arc":
            if abs(s.yaw_rate) < 1e-12:
                return np.stack([np.zeros_like(t), np.zeros_like(t), s.speed * t], axis=-1)
            r = s.speed / s.yaw_rate
            th = s.yaw_rate * t
            return np.stack([r * (1 - np.cos(th)), np.zeros_like(t), r * np.sin(th)], axis=-1)
        if s.kind == "loop":
            th = 2 * np.pi * t / s.duration
            return np.stack([s.radius * (1 - np.cos(th)), np.zeros_like(t), s.radius * np.sin(th)], axis=-1)
        return self._spline(t)

    def yaw(self, t):
        s = self.spec
        if s.kind == "line":
            return 0.0
        if s.kind == "arc":
            return s.yaw_rate * t
        if s.kind == "loop":
            return 2 * np.pi * t / s.duration
        v = self._spline(t, 1)
        return float(np.arctan2(v[0], v[2]))

    def C_wc(self, t) -> np.ndarray:
        """Camera-to-world rotation."""
        s = self.spec
        R = _rot_y(self.yaw(t))
        if s.wobble_deg:
            amp = np.radians(s.wobble_deg)
            w = 2 * np.pi * s.wobble_hz
            R = R @ _rot_x(amp * np.sin(w * t)) @ _rot_z(0.7 * amp * np.sin(1.3 * w * t + 0.4))
        return R


# --- generation ------------------------------------------------------------------


@dataclass
class SimulationResult:
    spec: SimulationSpec
    dataset: Dataset
    labels: list  # (frame, track, label)
    poses: list  # (t, position (3,), C_k0 (3, 3)) in the first camera frame
    truth_y: list  # per frame (n, 4) noise-free observations aligned with dataset.frames
    blur: np.ndarray
    pixel_sigma_per_frame: np.ndarray
    bodies: list  # per frame image boxes of the moving clusters
    images: list | None = None

    def label_map(self) -> dict:
        return {(f, t): lab for f, t, lab in self.labels}


def n_frames(spec: TrajectorySpec) -> int:
    return int(round(spec.duration * spec.frame_rate)) + 1


def _landmarks(world: WorldSpec, trajectory: TrajectorySpec):
    rng = stream(world.seed, "landmarks")
    lo, hi = np.asarray(world.bounds_min, float), np.asarray(world.bounds_max, float)
    if world.layout == "box":
        static = rng.uniform(lo, hi, size=(world.static_count, 3))
    else:
        # scatter around the path, extending past its end so the last frames see ahead
        ts = rng.uniform(0.0, trajectory.duration * 1.1 + 4.0, world.static_count)
        if trajectory.kind in ("loop", "waypoints"):
            ts = np.minimum(ts, trajectory.duration)
        static = Path3(trajectory).position(ts)
        w = world.corridor
        static[:, 0] += rng.uniform(-w, w, world.static_count)
        static[:, 2] += rng.uniform(-w, w, world.static_count)
        static[:, 1] = rng.uniform(lo[1], hi[1], world.static_count)
    moving, vel, tex = [], [], []
    for c in world.clusters:
        ext = np.asarray(c.extent, float)
        moving.append(np.asarray(c.center, float) + rng.uniform(-ext, ext, size=(c.count, 3)))
        vel.append(np.broadcast_to(np.asarray(c.velocity, float), (c.count, 3)))
        tex.append(np.full(c.count, c.texture))
    P0 = np.vstack([static, *moving]) if moving else static
    V = np.vstack([np.zeros_like(static), *vel]) if moving else np.zeros_like(static)
    texture = np.concatenate([np.full(len(static), world.static_texture), *tex])
    cluster = np.concatenate([np.full(len(static), -1), *(np.full(c.count, i) for i, c in enumerate(world.clusters))])
    return P0, V, texture, cluster


def _textures(world: WorldSpec, contrast: np.ndarray, size: int = 9) -> np.ndarray:
    rng = stream(world.seed, "texture")
    base = rng.uniform(-1.0, 1.0, size=(len(contrast), size, size))
    return np.where(contrast[:, None, None] < 1.0, 100.0, 128.0) + 110.0 * contrast[:, None, None] * base


def _background(cam: CameraSpec, seed: int) -> np.ndarray:
    """Fine-grained scenery texture behind the tracked features."""
    rng = stream(seed, "background")
    noise = gaussian_filter(rng.normal(0.0, 1.0, size=(cam.image_height, cam.image_width)), 1.0)
    noise /= noise.std() + 1e-12
    return 128.0 + 45.0 * noise


def _bodies(P_cam: np.ndarray, cluster: np.ndarray, cam: StereoCamera, min_depth: float) -> list:
    """Image-space bounding boxes ``(cluster, u0, v0, u1, v1)`` of the visible moving clusters."""
    out = []
    for c in np.unique(cluster[cluster >= 0]):
        P = P_cam[cluster == c]
        P = P[P[:, 2] > min_depth]
        if len(P) == 0:
            continue
        uv = project(cam, P)[:, :2]
        u0, v0 = np.floor(uv.min(axis=0)).astype(int) - 4
        u1, v1 = np.ceil(uv.max(axis=0)).astype(int) + 4
        u0, u1 = max(u0, 0), min(u1, cam.image_width)
        v0, v1 = max(v0, 0), min(v1, cam.image_height)
        if u0 < u1 and v0 < v1:
            out.append((int(c), int(u0), int(v0), int(u1), int(v1)))
    return out


def render_frame(background, textures, positions, blur_sigma, bodies=(), seed: int = 0, frame: int = 0) -> np.ndarray:
    """Compose a left image: scenery, smooth moving bodies, then feature stamps; blur last."""
    img = background.copy()
    h, w = img.shape
    for c, u0, v0, u1, v1 in bodies:
        rng = stream(seed, "body", c, frame)
        fill = gaussian_filter(rng.normal(0.0, 1.0, size=(v1 - v0, u1 - u0)), 3.0)
        fill /= fill.std() + 1e-12
        img[v0:v1, u0:u1] = 100.0 + 6.0 * fill
    s = textures.shape[1]
    half = s // 2
    for tex, (u, v) in zip(textures, positions):
        u0, v0 = int(round(u)) - half, int(round(v)) - half
        r0, r1 = max(v0, 0), min(v0 + s, h)
        c0, c1 = max(u0, 0), min(u0 + s, w)
        if r0 < r1 and c0 < c1:
            img[r0:r1, c0:c1] = tex[r0 - v0:r1 - v0, c0 - u0:c1 - u0]
    if blur_sigma > 0:
        img = gaussian_filter(img, blur_sigma)
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def generate(spec: SimulationSpec, predictor_cfg: PredictorConfig = PredictorConfig(),
             keep_images: bool | None = None) -> SimulationResult:
    """Build a dataset (in memory) plus truth labels for ``spec``."""
    spec.validate()
    cs, tr, nz, world = spec.camera, spec.trajectory, spec.noise, spec.world
    cam = StereoCamera(cs.f, cs.b, cs.c_u, cs.c_v, cs.image_width, cs.image_height)
    rig = RigCalibration(np.asarray(cs.C_cv, float))
    path = Path3(tr)
    n = n_frames(tr)
    m = int(round(tr.imu_rate / tr.frame_rate))
    J = (n - 1) * m
    imu_t = np.arange(J + 1) / tr.imu_rate
    frame_times = np.arange(n) / tr.frame_rate

    C_wc = np.array([path.C_wc(t) for t in imu_t])  # (J+1, 3, 3)
    C_cw = np.swapaxes(C_wc, 1, 2)
    pos = path.position(imu_t)

    # gyro: body rates reproducing C_{j+1} C_j^T exactly, expressed in the IMU frame
    rel = C_cw[1:] @ C_wc[:-1]
    psi_c = -Rotation.from_matrix(rel).as_rotvec()
    C_cv = rig.C_cv
    omega = (psi_c @ C_cv) * tr.imu_rate  # rows of C_cv^T psi
    h = 1e-3
    acc_w = (path.position(imu_t[:-1] + h) - 2 * path.position(imu_t[:-1]) + path.position(imu_t[:-1] - h)) / h**2
    accel = np.einsum("ij,njk,nk->ni", C_cv.T, C_cw[:-1], acc_w - GRAVITY)
    grng = stream(world.seed, "gyro")
    if nz.gyro_sigma > 0 or nz.gyro_bias:
        bias = nz.gyro_bias * np.ones(3) if np.isscalar(nz.gyro_bias) else np.asarray(nz.gyro_bias, float)
        omega = omega + bias + grng.normal(0.0, nz.gyro_sigma, omega.shape)

    blur = np.zeros(n) if nz.blur is None else np.asarray(nz.blur, float)
    if len(blur) != n:
        raise SpecError(f"blur schedule has {len(blur)} entries, expected {n}", "noise.blur")
    sigma_k = nz.pixel_sigma * (1.0 + nz.blur_gain * blur)

    P0, V, contrast, cluster = _landmarks(world, tr)
    is_moving = cluster >= 0
    bodies = []
    prng = stream(world.seed, "pixel_noise")
    orng = stream(world.seed, "outliers")
    frames, truth, labels, poses = [], [], [], []
    C_0w = C_cw[0]
    r0 = pos[0]
    for k in range(n):
        j = k * m
        t = frame_times[k]
        Pw = P0 + V * t
        Pc = (Pw - pos[j]) @ C_cw[j].T
        bodies.append(_bodies(Pc, cluster, cam, cs.min_depth))
        z = Pc[:, 2]
        vis = (z > cs.min_depth) & (z < cs.max_depth)
        ids = np.flatnonzero(vis)
        y_true = project(cam, Pc[ids])
        inside = (
            (y_true[:, 0] >= 2) & (y_true[:, 0] < cs.image_width - 2)
            & (y_true[:, 2] >= 2) & (y_true[:, 2] < cs.image_width - 2)
            & (y_true[:, 1] >= 2) & (y_true[:, 1] < cs.image_height - 2)
        )
        ids, y_true = ids[inside], y_true[inside]
        y = y_true + prng.normal(0.0, 1.0, y_true.shape) * sigma_k[k]
        outl = orng.random(len(ids)) < nz.outlier_prob
        if outl.any():
            ang = orng.uniform(0, 2 * np.pi, outl.sum())
            du, dv = nz.outlier_px * np.cos(ang), nz.outlier_px * np.sin(ang)
            y[outl] += np.stack([du, dv, du, dv], axis=1)
        keep = (y[:, 0] - y[:, 2]) >= max(cs.min_disparity, MIN_DISPARITY)
        ids, y, y_true, outl = ids[keep], y[keep], y_true[keep], outl[keep]
        if len(ids) == 0:
            raise SpecError(f"no visible landmarks at frame {k}", "world")
        frames.append(FrameObservations(ids.astype(np.int64), y))
        truth.append(y_true)
        for i, o in zip(ids, outl):
            labels.append((k, int(i), "outlier" if o else ("moving" if is_moving[i] else "static")))
        C_k0 = C_cw[j] @ C_0w.T
        poses.append((t, C_0w @ (pos[j] - r0), C_k0))

    # ground truth positions in the first camera frame
    gt_frames = {
        "every": np.arange(n),
        "every_n": np.unique(np.r_[np.arange(0, n, max(spec.groundtruth_every, 1)), n - 1]),
        "endpoints": np.array([0, n - 1]),
        "none": np.zeros(0, dtype=int),
    }[spec.groundtruth]
    groundtruth = None
    if len(gt_frames):
        groundtruth = (frame_times[gt_frames], np.array([poses[k][1] for k in gt_frames]))

    ds = Dataset(
        cam=cam,
        rig=rig,
        frame_times=frame_times,
        imu_t=imu_t[:-1],
        imu_omega=omega,
        imu_accel=accel,
        frames=frames,
        groundtruth=groundtruth,
        pixel_sigma=nz.pixel_sigma if nz.pixel_sigma > 0 else None,
        camera_id=f"sim-f{cs.f:g}-b{cs.b:g}",
        name=spec.name,
    )

    # images and image-derived predictors
    textures = _textures(world, contrast)
    background = _background(cs, world.seed)
    keep_images = spec.render_images if keep_images is None else keep_images
    images = [] if keep_images else None
    predictors = {}
    prev = None
    for k, fr in enumerate(frames):
        img = render_frame(background, textures[fr.ids], fr.y[:, :2], blur[k] * nz.blur_max_sigma,
                           bodies[k], world.seed, k)
        if images is not None:
            images.append(img)
        ip = image_predictors(img, fr.y[:, :2], predictor_cfg)
        w_mag = a_mag = 0.0
        flow = np.zeros(len(fr.ids))
        if prev is not None:
            om, ac, _ = ds.imu_window(frame_times[k - 1], frame_times[k])
            w_mag, a_mag = imu_magnitudes(om, ac)
            _, ia, ib = np.intersect1d(prev.ids, fr.ids, assume_unique=True, return_indices=True)
            if len(ib):
                sc, _ = flow_variance_scores(fr.y[ib, :2], fr.y[ib, :2] - prev.y[ia, :2],
                                             predictor_cfg.flow_radius_small,
                                             predictor_cfg.flow_radius_large, predictor_cfg.flow_floor)
                flow[ib] = sc
        cols = np.stack([np.full(len(fr.ids), w_mag), np.full(len(fr.ids), a_mag), ip.entropy,
                         np.full(len(fr.ids), ip.blur), flow, ip.f_low, ip.f_high], axis=1)
        predictors[k] = (fr.ids.copy(), cols)
        prev = fr
    ds.predictors = predictors
    if images is not None:
        ds.image_loader = images.__getitem__

    return SimulationResult(spec, ds, labels, poses, truth, blur, sigma_k, bodies, images)


def render_patches(result: SimulationResult, frame: int) -> np.ndarray:
    """Re-render the left image of ``frame`` (deterministic for a given spec)."""
    spec = result.spec
    P0, V, contrast, _ = _landmarks(spec.world, spec.trajectory)
    textures = _textures(spec.world, contrast)
    background = _background(spec.camera, spec.world.seed)
    fr = result.dataset.frames[frame]
    return render_frame(background, textures[fr.ids], fr.y[:, :2],
                        result.blur[frame] * spec.noise.blur_max_sigma, result.bodies[frame],
                        spec.world.seed, frame)


def write_simulation(result: SimulationResult, out_dir) -> Path:
    """Write the ingestion layout plus ``labels.csv`` and ``poses_gt.csv``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise SpecError(f"cannot create output directory {out}: {exc}") from exc
    ds = result.dataset
    if result.spec.render_images and ds.image_loader is None:
        images = [render_patches(result, k) for k in range(ds.n_frames)]
        ds.image_loader = images.__getitem__
    save_dataset(ds, out, write_images=result.spec.render_images)
    write_labels(out / "labels.csv", result.labels)
    rows = [np.r_[t, p, C.ravel()] for t, p, C in result.poses]
    write_table(out / "poses_gt.csv", POSES_HEADER, np.array(rows))
    (out / "spec.json").write_text(json.dumps(result.spec.to_dict(), indent=2, sort_keys=True) + "\n")
    return out


def to_jsonable(obj):
    if is_dataclass(obj):
        return asdict(obj)
    raise TypeError(type(obj))
