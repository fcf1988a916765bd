"""Frame-pair motion estimation and trajectory chaining.

Three estimator modes are supported:

* ``nominal`` / ``aggressive``: RANSAC on the 3-D alignment residual (99% and
  99.99% confidence against 50% outliers), then refinement on the inliers.
* ``probe``: no RANSAC. Matches are screened against the gyro rotation, each
  surviving feature gets a covariance scale from the learned model, and all of
  them enter the weighted refinement.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .dataset import Dataset
from .errors import ConfigurationError, DegenerateGeometryError, ProbeError
from .estimator import (
    Correspondences,
    RefineResult,
    SolverConfig,
    direct_solution,
    refine,
)
from .geometry import MIN_DISPARITY, Pose, RigCalibration, StereoCamera, integrate_gyro_rates
from .model import ProbeModel, compute_rmse
from .predictors import (
    PredictorConfig,
    assemble,
    flow_variance_scores,
    image_predictors,
    imu_magnitudes,
)

log = logging.getLogger(__name__)

MODES = ("nominal", "aggressive", "probe")
BETA_BIN_EDGES = tuple(10.0 ** e for e in np.arange(-3.0, 6.01, 0.5))


@dataclass(frozen=True)
class RansacConfig:
    confidence: float = 0.99
    outlier_fraction: float = 0.5
    sample_size: int = 3
    threshold: float = 0.1  # m, 3-D alignment residual

    def __post_init__(self):
        if not 0 < self.confidence < 1:
            raise ValueError("confidence must lie in (0, 1)")
        if not 0 <= self.outlier_fraction < 1:
            raise ValueError("outlier fraction must lie in [0, 1)")
        if self.sample_size < 1 or self.threshold <= 0:
            raise ValueError("sample size and threshold must be positive")


@dataclass
class PipelineConfig:
    solver: SolverConfig = field(default_factory=SolverConfig)
    predictor: PredictorConfig = field(default_factory=PredictorConfig)
    ransac_threshold: float = 0.1
    outlier_fraction: float = 0.5
    nominal_confidence: float = 0.99
    aggressive_confidence: float = 0.9999
    prefilter_deg: float = 5.0
    sigma_px: float | None = None  # None: dataset value, else 0.5 px
    seed: int = 0

    def ransac(self, mode: str) -> RansacConfig:
        conf = {"nominal": self.nominal_confidence, "aggressive": self.aggressive_confidence}[mode]
        return RansacConfig(conf, self.outlier_fraction, 3, self.ransac_threshold)


def ransac_iterations(cfg: RansacConfig) -> int:
    """Draws needed to hit an all-inlier minimal set with the configured confidence."""
    p_good = (1.0 - cfg.outlier_fraction) ** cfg.sample_size
    if p_good >= 1.0:
        return 1
    return max(1, math.ceil(math.log(1.0 - cfg.confidence) / math.log(1.0 - p_good)))


def bearings(cam: StereoCamera, y: np.ndarray) -> np.ndarray:
    y = np.atleast_2d(y)
    d = np.stack([y[:, 0] - cam.c_u, y[:, 1] - cam.c_v, np.full(len(y), cam.f)], axis=1)
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def prefilter_mask(y_a, y_b, C_ba, cam: StereoCamera, threshold_deg: float = 5.0) -> np.ndarray:
    """True for matches whose rotation-compensated bearings agree within the threshold."""
    if len(y_a) == 0:
        return np.zeros(0, dtype=bool)
    pred = bearings(cam, y_a) @ np.asarray(C_ba).T
    cos = np.clip(np.sum(pred * bearings(cam, y_b), axis=1), -1.0, 1.0)
    return cos >= math.cos(math.radians(threshold_deg))


def prefilter_cosine(matches, C_ba, cam: StereoCamera, threshold_deg: float = 5.0):
    """Filter ``(y_a, y_b)`` pairs; returns the retained pairs in input order."""
    matches = list(matches)
    if not matches:
        return []
    y_a = np.array([m[0] for m in matches], dtype=float)
    y_b = np.array([m[1] for m in matches], dtype=float)
    keep = prefilter_mask(y_a, y_b, C_ba, cam, threshold_deg)
    return [m for m, k in zip(matches, keep) if k]


def ransac_align(
    corrs: Correspondences,
    C: np.ndarray,
    cfg: RansacConfig,
    seed=0,
    solver: SolverConfig | None = None,
) -> tuple[np.ndarray, RefineResult]:
    """Consensus translation under a fixed rotation, then refinement on the inliers.

    Returns the inlier indices and the refinement result.
    """
    n = len(corrs)
    if n < cfg.sample_size:
        raise DegenerateGeometryError(f"RANSAC needs >= {cfg.sample_size} correspondences, got {n}")
    rng = np.random.default_rng(seed)
    iters = ransac_iterations(cfg)
    samples = np.stack([rng.choice(n, size=cfg.sample_size, replace=False) for _ in range(iters)])
    u_a = corrs.p_a[samples].mean(axis=1)
    u_b = corrs.p_b[samples].mean(axis=1)
    hyps = u_a - u_b @ C  # rows of -C^T u_b + u_a
    pred = (corrs.p_a[None, :, :] - hyps[:, None, :]) @ C.T
    resid = np.linalg.norm(corrs.p_b[None, :, :] - pred, axis=2)
    counts = (resid < cfg.threshold).sum(axis=1)
    best = int(np.argmax(counts))
    if counts[best] < 3:
        raise DegenerateGeometryError("no RANSAC hypothesis reached 3 inliers")
    inliers = np.flatnonzero(resid[best] < cfg.threshold)
    sub = corrs.subset(inliers).with_beta(1.0)
    initial = Pose(C, direct_solution(sub, C))
    return inliers, refine(sub, initial, solver)


# --- frame pairs -----------------------------------------------------------------


@dataclass
class FramePair:
    index: int
    t_a: float
    t_b: float
    ids: np.ndarray
    y_a: np.ndarray
    y_b: np.ndarray
    imu_omega: np.ndarray
    imu_accel: np.ndarray
    imu_dt: np.ndarray
    image_b: np.ndarray | None = None
    # entropy, blur, f_low, f_high per match when no image is available
    image_predictors: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.ids)


def make_pair(ds: Dataset, k: int, load_image: bool = True) -> FramePair:
    fa, fb = ds.frames[k], ds.frames[k + 1]
    common, ia, ib = np.intersect1d(fa.ids, fb.ids, assume_unique=True, return_indices=True)
    y_a, y_b = fa.y[ia], fb.y[ib]
    valid = (y_a[:, 0] - y_a[:, 2] >= MIN_DISPARITY) & (y_b[:, 0] - y_b[:, 2] >= MIN_DISPARITY)
    common, y_a, y_b = common[valid], y_a[valid], y_b[valid]
    t_a, t_b = float(ds.frame_times[k]), float(ds.frame_times[k + 1])
    om, ac, dt = ds.imu_window(t_a, t_b)
    image = ds.image(k + 1) if load_image else None
    table = None
    if image is None and ds.predictors is not None and (k + 1) in ds.predictors:
        pid, pvals = ds.predictors[k + 1]
        table = np.zeros((len(common), 4))
        if len(pid):
            pos = np.clip(np.searchsorted(pid, common), 0, len(pid) - 1)
            found = pid[pos] == common
            table[found] = pvals[pos[found]][:, [2, 3, 5, 6]]
    return FramePair(k, t_a, t_b, common, y_a, y_b, om, ac, dt, image, table)


def pair_predictors(pair: FramePair, cfg: PredictorConfig = PredictorConfig()) -> np.ndarray:
    """``(N, 7)`` predictor matrix for the matches of a frame pair (current frame)."""
    n = len(pair)
    if len(pair.imu_omega):
        w_mag, a_mag = imu_magnitudes(pair.imu_omega, pair.imu_accel)
    else:
        w_mag = a_mag = 0.0
    pos = pair.y_b[:, :2]
    flow, _ = flow_variance_scores(pos, pos - pair.y_a[:, :2], cfg.flow_radius_small,
                                   cfg.flow_radius_large, cfg.flow_floor)
    if pair.image_b is not None:
        img = image_predictors(pair.image_b, pos, cfg)
        return assemble(w_mag, a_mag, img.entropy, img.blur, flow, img.f_low, img.f_high)
    tab = pair.image_predictors if pair.image_predictors is not None else np.zeros((n, 4))
    return assemble(w_mag, a_mag, tab[:, 0], tab[:, 1], flow, tab[:, 2], tab[:, 3])


class PairContext:
    """Derived quantities of one frame pair, cached for repeated solves."""

    def __init__(self, pair: FramePair, cam: StereoCamera, rig: RigCalibration, cfg: PipelineConfig,
                 sigma_px: float = 0.5):
        self.pair = pair
        self.cam = cam
        self.cfg = cfg
        self.C_gyro = integrate_gyro_rates(pair.imu_omega, pair.imu_dt, rig.C_cv)
        self.corrs = Correspondences.from_observations(cam, pair.y_a, pair.y_b, sigma_px, ids=pair.ids)
        self.prefilter = prefilter_mask(pair.y_a, pair.y_b, self.C_gyro, cam, cfg.prefilter_deg)
        self._pi = None

    @property
    def pi(self) -> np.ndarray:
        if self._pi is None:
            self._pi = pair_predictors(self.pair, self.cfg.predictor)
        return self._pi

    def solve(self, idx, beta=1.0) -> RefineResult:
        sub = self.corrs.subset(idx).with_beta(beta)
        initial = Pose(self.C_gyro, direct_solution(sub, self.C_gyro))
        return refine(sub, initial, self.cfg.solver)


@dataclass
class MotionEstimate:
    pose: Pose
    diagnostics: dict
    used_ids: np.ndarray
    beta: np.ndarray | None = None


def _beta_histogram(beta: np.ndarray) -> list[int]:
    edges = np.array(BETA_BIN_EDGES)
    counts, _ = np.histogram(np.clip(beta, edges[0], edges[-1]), bins=edges)
    return counts.astype(int).tolist()


def estimate_with_context(ctx: PairContext, mode: str, model: ProbeModel | None = None) -> MotionEstimate:
    if mode not in MODES:
        raise ConfigurationError(f"unknown mode {mode!r}; expected one of {MODES}")
    pair = ctx.pair
    diag = {"frame": pair.index + 1, "mode": mode, "n_matches": len(pair)}
    try:
        if mode == "probe":
            if model is None:
                raise ConfigurationError("probe mode requires a trained model")
            idx = np.flatnonzero(ctx.prefilter)
            beta = model.beta(ctx.pi[idx]) if len(idx) else np.zeros(0)
            res = ctx.solve(idx, beta)
            diag.update(n_prefiltered=int(len(pair) - len(idx)), beta_histogram=_beta_histogram(beta),
                        beta_median=float(np.median(beta)) if len(beta) else None)
        else:
            seed = np.random.SeedSequence([ctx.cfg.seed, pair.index, MODES.index(mode)])
            idx, res = ransac_align(ctx.corrs, ctx.C_gyro, ctx.cfg.ransac(mode), seed, ctx.cfg.solver)
            beta = None
            diag["n_inliers"] = int(len(idx))
    except ConfigurationError:
        raise
    except ProbeError as exc:
        raise type(exc)(f"frame {pair.index + 1}: {exc}") from exc
    diag.update(n_used=int(len(idx)), iterations=res.iterations, dropped=res.dropped, cost=res.cost)
    return MotionEstimate(res.pose, diag, pair.ids[idx], beta)


def estimate_motion(pair: FramePair, mode: str, rig: RigCalibration, cam: StereoCamera,
                    cfg: PipelineConfig | None = None, model: ProbeModel | None = None,
                    sigma_px: float = 0.5) -> MotionEstimate:
    if mode == "probe" and model is None:
        raise ConfigurationError("probe mode requires a trained model")
    cfg = cfg or PipelineConfig()
    return estimate_with_context(PairContext(pair, cam, rig, cfg, sigma_px), mode, model)


# --- sequences ---------------------------------------------------------------------


def resolve_sigma(ds: Dataset, cfg: PipelineConfig) -> float:
    if cfg.sigma_px is not None:
        return float(cfg.sigma_px)
    if ds.pixel_sigma:
        return float(ds.pixel_sigma)
    return 0.5


def prepare_contexts(ds: Dataset, cfg: PipelineConfig, load_images: bool = True) -> list[PairContext]:
    sigma = resolve_sigma(ds, cfg)
    return [PairContext(make_pair(ds, k, load_images), ds.cam, ds.rig, cfg, sigma)
            for k in range(ds.n_frames - 1)]


class Trajectory:
    """Chains pair increments into camera poses expressed in the first frame."""

    def __init__(self):
        self.rotations = [np.eye(3)]  # C_k0
        self.positions = [np.zeros(3)]  # camera k origin in frame 0

    def append(self, increment: Pose) -> None:
        C_a0, p_a = self.rotations[-1], self.positions[-1]
        self.positions.append(p_a + C_a0.T @ increment.r)
        self.rotations.append(increment.C @ C_a0)

    def as_arrays(self):
        return np.array(self.rotations), np.array(self.positions)


@dataclass
class SequenceResult:
    mode: str
    times: np.ndarray
    positions: np.ndarray
    rotations: np.ndarray
    estimates: list[MotionEstimate]
    complete: bool = True
    failed_frame: int | None = None
    error: str | None = None

    @property
    def diagnostics(self) -> list[dict]:
        return [e.diagnostics for e in self.estimates]


def run_sequence(ds: Dataset, mode: str, cfg: PipelineConfig | None = None,
                 model: ProbeModel | None = None, contexts: list[PairContext] | None = None) -> SequenceResult:
    """Estimate every frame pair in order and chain the increments from identity.

    A failing frame stops the run; the partial trajectory is returned with
    ``complete=False``.
    """
    if mode not in MODES:
        raise ConfigurationError(f"unknown mode {mode!r}; expected one of {MODES}")
    if mode == "probe" and model is None:
        raise ConfigurationError("probe mode requires a trained model")
    cfg = cfg or PipelineConfig()
    if contexts is None:
        contexts = prepare_contexts(ds, cfg, load_images=(mode == "probe"))
    traj = Trajectory()
    estimates = []
    for ctx in contexts:
        try:
            est = estimate_with_context(ctx, mode, model)
        except ProbeError as exc:
            log.warning("aborting %s run: %s", mode, exc)
            R, P = traj.as_arrays()
            return SequenceResult(mode, ds.frame_times[: len(P)], P, R, estimates, False,
                                  ctx.pair.index + 1, str(exc))
        traj.append(est.pose)
        estimates.append(est)
    R, P = traj.as_arrays()
    return SequenceResult(mode, ds.frame_times[: len(P)], P, R, estimates)


def path_length(positions: np.ndarray) -> float:
    return float(np.sum(np.linalg.norm(np.diff(positions, axis=0), axis=1))) if len(positions) > 1 else 0.0


def sequence_metrics(result: SequenceResult, ds: Dataset, trial: str | None = None) -> dict:
    """Trajectory error summary; ``None`` marks quantities without ground truth."""
    n = ds.n_frames
    est = result.positions
    gt_frames, gt_xyz = ds.groundtruth_at_frames()
    series = [None] * n
    sel = gt_frames < len(est)
    errs = np.linalg.norm(est[gt_frames[sel]] - gt_xyz[sel], axis=1)
    for f, e in zip(gt_frames[sel], errs):
        series[int(f)] = float(e)
    armse = compute_rmse(est[gt_frames[sel]], gt_xyz[sel], "full_path") if sel.any() else None
    final = None
    if result.complete and len(gt_frames) and gt_frames[-1] == n - 1:
        final = float(np.linalg.norm(est[-1] - gt_xyz[-1]))
    elif result.complete and len(gt_frames) == 0:
        final = None
    betas = [e.beta for e in result.estimates if e.beta is not None and len(e.beta)]
    beta_all = np.concatenate(betas) if betas else np.zeros(0)
    return {
        "trial": trial or ds.name,
        "mode": result.mode,
        "path_length": path_length(gt_xyz) if len(gt_frames) > 1 else path_length(est),
        "armse": armse,
        "final_error": final,
        "loop_closure_error": compute_rmse(est, mode="loop_closure"),
        "complete": result.complete,
        "failed_frame": result.failed_frame,
        "frame_count": n,
        "error_series": series,
        "features": {
            "mean_used": float(np.mean([d["n_used"] for d in result.diagnostics])) if result.estimates else 0.0,
            "beta_median": float(np.median(beta_all)) if len(beta_all) else None,
            "beta_mean": float(np.mean(beta_all)) if len(beta_all) else None,
        },
    }
