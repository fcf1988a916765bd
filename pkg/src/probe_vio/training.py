"""Learning the predictor-to-error map from repeated traversals.

Each iteration re-runs the odometry over the training sequence with a
different feature subset per step. The translational error of the resulting
estimate is attributed to every feature that was used, so features whose
presence tends to coincide with large errors accumulate large alphas.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .dataset import Dataset
from .errors import DatasetError, ProbeError, TrainingError
from .frontend import (
    PairContext,
    PipelineConfig,
    Trajectory,
    prepare_contexts,
    run_sequence,
)
from .model import (
    DEFAULT_GAMMAS,
    DEFAULT_KS,
    ProbeModel,
    TrainingSet,
    compute_rmse,
    select_gamma,
    select_k,
)
from .rng import stream

log = logging.getLogger(__name__)

SUBSET_POLICIES = ("uniform", "predictor_split")
# coordinates that vary between features of one frame
SPLIT_COORDINATES = (2, 4, 5, 6)
MIN_SUBSET = 6


@dataclass
class TrainingConfig:
    iterations: int = 10
    mode: str | None = None  # per_step | windowed | full_path | loop_closure; None picks from the data
    policy: str = "predictor_split"
    subset_fraction: float = 0.5
    seed: int = 0
    loop: bool | None = None  # declare the path closed; None detects from shared tracks
    k_candidates: tuple = DEFAULT_KS
    gamma_candidates: tuple = DEFAULT_GAMMAS
    folds: int = 5

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.mode is not None and self.mode not in ("per_step", "windowed", "full_path", "loop_closure"):
            raise ValueError(f"unknown training mode {self.mode!r}")
        if self.policy not in SUBSET_POLICIES:
            raise ValueError(f"unknown subset policy {self.policy!r}")
        if not 0 < self.subset_fraction <= 1:
            raise ValueError("subset_fraction must lie in (0, 1]")


@dataclass
class TrainingOutcome:
    training_set: TrainingSet
    mode: str
    policy: str
    iteration_errors: list
    skipped_steps: int
    samples_per_iteration: list = field(default_factory=list)


def looks_closed(ds: Dataset, min_shared: int = 10) -> bool:
    """Heuristic loop check: tracks of the first frame lost along the way and re-observed at the end.

    Tracks visible throughout (distant points on a short open path) do not count.
    """
    shared = np.intersect1d(ds.frames[0].ids, ds.frames[-1].ids)
    for fr in ds.frames[1:-1]:
        if len(shared) < min_shared:
            break
        lost = np.setdiff1d(shared, fr.ids, assume_unique=True)
        if len(lost) >= min_shared:
            return True
    return False


def choose_mode(ds: Dataset, loop: bool | None = None) -> str:
    gt_frames, _ = ds.groundtruth_at_frames()
    n = ds.n_frames
    if len(gt_frames) == n:
        return "per_step"
    if len(gt_frames) >= 2:
        return "windowed"
    closed = looks_closed(ds) if loop is None else loop
    if not closed:
        raise DatasetError("dataset has no usable ground truth and its path is not a closed loop")
    return "loop_closure"


def uniform_subset(candidates: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    n = len(candidates)
    m = max(min(MIN_SUBSET, n), int(math.ceil(fraction * n)))
    return np.sort(rng.choice(candidates, size=m, replace=False))


@dataclass
class SplitRule:
    coordinate: int
    quantile: float
    upper: bool

    def apply(self, values: np.ndarray, candidates: np.ndarray) -> np.ndarray:
        v = values[candidates]
        thr = np.quantile(v, self.quantile)
        keep = v >= thr if self.upper else v < thr
        return candidates[keep]


def split_rule(rng: np.random.Generator) -> SplitRule:
    return SplitRule(int(rng.choice(SPLIT_COORDINATES)), float(rng.uniform(0.25, 0.75)), bool(rng.integers(2)))


def _step_errors(mode: str, positions: np.ndarray, gt_frames: np.ndarray, gt_xyz: np.ndarray, n_steps: int):
    """Alpha per step (NaN where the step is not covered by ground truth)."""
    alpha = np.full(n_steps, np.nan)
    if mode == "loop_closure":
        alpha[:] = compute_rmse(positions, mode="loop_closure")
    elif mode == "full_path":
        alpha[:] = compute_rmse(positions[gt_frames], gt_xyz, "full_path")
    else:
        # per_step is the window case with ground truth at every frame
        for (f0, f1), (g0, g1) in zip(zip(gt_frames[:-1], gt_frames[1:]), zip(gt_xyz[:-1], gt_xyz[1:])):
            err = compute_rmse(positions[f1] - positions[f0], g1 - g0, "per_step")
            alpha[f0:f1] = err
    return alpha


def train(
    ds: Dataset,
    cfg: TrainingConfig = TrainingConfig(),
    pipeline: PipelineConfig | None = None,
    contexts: list[PairContext] | None = None,
) -> TrainingOutcome:
    """Collect (predictor, alpha) samples over ``cfg.iterations`` traversals."""
    pipeline = pipeline or PipelineConfig()
    mode = cfg.mode or choose_mode(ds, cfg.loop)
    gt_frames, gt_xyz = ds.groundtruth_at_frames()
    if mode != "loop_closure" and len(gt_frames) < 2:
        raise DatasetError(f"training mode {mode} needs ground truth at two or more frames")
    policy = cfg.policy
    if contexts is None:
        contexts = prepare_contexts(ds, pipeline)
    n_steps = len(contexts)

    pis, alphas, errors, per_iter = [], [], [], []
    skipped = 0
    for it in range(cfg.iterations):
        rule = split_rule(stream(cfg.seed, "split", it)) if policy == "predictor_split" else None
        traj = Trajectory()
        used = []  # (step, predictor rows)
        for s, ctx in enumerate(contexts):
            candidates = np.flatnonzero(ctx.prefilter)
            if rule is not None and len(candidates):
                subset = rule.apply(ctx.pi[:, rule.coordinate], candidates)
            else:
                subset = uniform_subset(candidates, cfg.subset_fraction, stream(cfg.seed, "subset", it, s))
            try:
                if len(subset) < MIN_SUBSET:
                    raise ProbeError(f"subset of {len(subset)} features too small")
                pose = ctx.solve(subset).pose
                used.append((s, ctx.pi[subset]))
            except ProbeError as exc:
                skipped += 1
                log.info("iteration %d step %d skipped: %s", it, s, exc)
                try:
                    pose = ctx.solve(candidates).pose
                except ProbeError as exc2:
                    raise TrainingError(f"frame {s + 1}: estimator failed on the full feature set: {exc2}") from exc2
            traj.append(pose)
        _, positions = traj.as_arrays()
        step_alpha = _step_errors(mode, positions, gt_frames, gt_xyz, n_steps)
        count = 0
        for s, rows in used:
            if np.isfinite(step_alpha[s]):
                pis.append(rows)
                alphas.append(np.full(len(rows), step_alpha[s]))
                count += len(rows)
        per_iter.append(count)
        if len(gt_frames) >= 2:
            errors.append(compute_rmse(positions[gt_frames], gt_xyz, "full_path"))
        else:
            errors.append(compute_rmse(positions, mode="loop_closure"))
        log.info("training iteration %d: error %.4f m, %d samples", it, errors[-1], count)
    if not pis:
        raise TrainingError("no training samples were collected")
    ts = TrainingSet(np.vstack(pis), np.concatenate(alphas))
    return TrainingOutcome(ts, mode, policy, errors, skipped, per_iter)


def evaluation_error(ds: Dataset, model: ProbeModel, pipeline: PipelineConfig,
                     contexts: list[PairContext], mode: str) -> float:
    """Trajectory error of the weighted pipeline; inf when the run fails."""
    res = run_sequence(ds, "probe", pipeline, model, contexts)
    if not res.complete:
        return math.inf
    gt_frames, gt_xyz = ds.groundtruth_at_frames()
    if mode != "loop_closure" and len(gt_frames):
        return compute_rmse(res.positions[gt_frames], gt_xyz, "full_path")
    return compute_rmse(res.positions, mode="loop_closure")


@dataclass
class TrainedModel:
    model: ProbeModel
    outcome: TrainingOutcome
    gamma_scores: dict

    def report(self) -> dict:
        o = self.outcome
        return {
            "mode": o.mode,
            "subset_policy": o.policy,
            "alpha_bar": self.model.alpha_bar,
            "k": self.model.k,
            "gamma": self.model.gamma,
            "n_samples": len(self.model),
            "iterations": len(o.iteration_errors),
            "iteration_errors": [float(e) for e in o.iteration_errors],
            "samples_per_iteration": [int(c) for c in o.samples_per_iteration],
            "skipped_steps": int(o.skipped_steps),
            "gamma_scores": [{"gamma": g, "error": (None if not math.isfinite(v) else v)}
                             for g, v in sorted(self.gamma_scores.items())],
        }


def train_model(ds: Dataset, cfg: TrainingConfig = TrainingConfig(),
                pipeline: PipelineConfig | None = None) -> TrainedModel:
    """Full training: collect samples, pick K by cross-validation, pick gamma on the training run."""
    pipeline = pipeline or PipelineConfig()
    contexts = prepare_contexts(ds, pipeline)
    outcome = train(ds, cfg, pipeline, contexts)
    ts = outcome.training_set
    ks = [k for k in cfg.k_candidates if k <= len(ts)] or [min(cfg.k_candidates)]
    k = select_k(ts, ks, folds=cfg.folds, seed=cfg.seed) if len(ts) >= max(ks) else 1
    metadata = {
        "camera_id": ds.camera_id,
        "predictor_digest": pipeline.predictor.digest(),
        "training_mode": outcome.mode,
        "subset_policy": outcome.policy,
        "iterations": cfg.iterations,
        "seed": cfg.seed,
        "dataset": ds.name,
    }
    base = ProbeModel.from_training_set(ts, k, 0.0, metadata)
    gamma, scores = select_gamma(
        cfg.gamma_candidates,
        lambda g: evaluation_error(ds, base.with_gamma(g), pipeline, contexts, outcome.mode),
    )
    return TrainedModel(base.with_gamma(gamma), outcome, scores)
