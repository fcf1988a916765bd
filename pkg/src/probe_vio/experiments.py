"""Simulator benchmarks shared by the experiment scripts and the acceptance tests."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import mannwhitneyu

from .frontend import PipelineConfig, prepare_contexts, run_sequence
from .model import compute_rmse
from .predictors import blur_metric
from .scenarios import blurred, loop, moving_object
from .simulator import SimulationResult, generate, render_patches
from .training import TrainingConfig, TrainedModel, train_model

log = logging.getLogger(__name__)

# features per vehicle that put about a fifth of all tracks on moving objects
VEHICLE_FEATURES_20PCT = 56


@dataclass
class MovingObjectConfig:
    seeds: int = 25
    train_seed: int = 1000
    train_frames: int = 60
    test_frames: int = 60
    vehicle_features: int = VEHICLE_FEATURES_20PCT
    pixel_sigma: float = 0.5
    iterations: int = 10


@dataclass
class LoopConfig:
    seeds: int = 10
    train_seed: int = 2000
    frames: int = 120
    iterations: int = 10


@dataclass
class BenchmarkResult:
    nominal: list = field(default_factory=list)
    probe: list = field(default_factory=list)
    beta_moving: list = field(default_factory=list)
    beta_static: list = field(default_factory=list)
    moving_fraction: list = field(default_factory=list)
    seconds: float = 0.0
    model: TrainedModel | None = None

    @property
    def ratio(self) -> float:
        return float(np.median(self.probe) / np.median(self.nominal))

    @property
    def beta_ratio(self) -> float:
        return float(np.median(self.beta_moving) / np.median(self.beta_static))

    def summary(self) -> dict:
        out = {
            "median_nominal": float(np.median(self.nominal)),
            "median_probe": float(np.median(self.probe)),
            "ratio": self.ratio,
            "seconds": self.seconds,
        }
        if self.beta_moving:
            out.update(median_beta_moving=float(np.median(self.beta_moving)),
                       median_beta_static=float(np.median(self.beta_static)), beta_ratio=self.beta_ratio)
        if self.moving_fraction:
            out["moving_fraction"] = float(np.mean(self.moving_fraction))
        return out


def _final_error(run, sim: SimulationResult) -> float:
    if not run.complete:
        return float("inf")
    return float(np.linalg.norm(run.positions[-1] - sim.poses[-1][1]))


def betas_by_label(run, sim: SimulationResult) -> tuple[np.ndarray, np.ndarray]:
    """Per-feature betas of a probe run split into (moving, static)."""
    labels = sim.label_map()
    moving, static = [], []
    for est in run.estimates:
        frame = est.diagnostics["frame"]
        for track, b in zip(est.used_ids, est.beta):
            lab = labels.get((frame, int(track)))
            if lab == "moving":
                moving.append(b)
            elif lab == "static":
                static.append(b)
    return np.array(moving), np.array(static)


def moving_object_benchmark(cfg: MovingObjectConfig = MovingObjectConfig(),
                            pipeline: PipelineConfig | None = None) -> BenchmarkResult:
    """Train once on a held-out seed, then compare probe and nominal final errors over ``cfg.seeds`` seeds."""
    pipeline = pipeline or PipelineConfig()
    start = time.perf_counter()
    scene = dict(pixel_sigma=cfg.pixel_sigma, vehicle_features=cfg.vehicle_features)
    train_sim = generate(moving_object(seed=cfg.train_seed, frames=cfg.train_frames, **scene), keep_images=False)
    trained = train_model(train_sim.dataset, TrainingConfig(iterations=cfg.iterations, seed=0), pipeline)
    log.info("trained %s", trained.report())
    out = BenchmarkResult(model=trained)
    for seed in range(cfg.seeds):
        sim = generate(moving_object(seed=seed, frames=cfg.test_frames, **scene), keep_images=False)
        contexts = prepare_contexts(sim.dataset, pipeline)
        nominal = run_sequence(sim.dataset, "nominal", pipeline, contexts=contexts)
        probe = run_sequence(sim.dataset, "probe", pipeline, trained.model, contexts)
        out.nominal.append(_final_error(nominal, sim))
        out.probe.append(_final_error(probe, sim))
        bm, bs = betas_by_label(probe, sim)
        out.beta_moving.extend(bm.tolist())
        out.beta_static.extend(bs.tolist())
        labs = [lab for _, _, lab in sim.labels]
        out.moving_fraction.append(labs.count("moving") / len(labs))
        log.info("seed %d: nominal %.3f m, probe %.3f m", seed, out.nominal[-1], out.probe[-1])
    out.seconds = time.perf_counter() - start
    return out


@dataclass
class BlurStudy:
    residual_variance: np.ndarray
    blur_score: np.ndarray
    high: np.ndarray
    p_value: float
    auc: float


def rank_auc(positive, negative) -> float:
    """Probability that a random positive outranks a random negative (ties count half)."""
    u = mannwhitneyu(positive, negative, alternative="greater").statistic
    return float(u / (len(positive) * len(negative)))


def blur_study(seed: int = 0, frames: int = 60, high: float = 0.8) -> BlurStudy:
    """Tracking residual variance and blur score per frame of a blur-scheduled sequence."""
    sim = generate(blurred(seed=seed, frames=frames, high=high))
    var = np.array([np.var(fr.y - y) for fr, y in zip(sim.dataset.frames, sim.truth_y)])
    score = np.array([blur_metric(render_patches(sim, k)) for k in range(sim.dataset.n_frames)])
    is_high = sim.blur >= 0.5 * high
    p = float(mannwhitneyu(var[is_high], var[~is_high], alternative="greater").pvalue)
    return BlurStudy(var, score, is_high, p, rank_auc(score[is_high], score[~is_high]))


def loop_benchmark(cfg: LoopConfig = LoopConfig(), pipeline: PipelineConfig | None = None) -> BenchmarkResult:
    """Train without ground truth on one loop, compare loop-closure error on held-out loops."""
    pipeline = pipeline or PipelineConfig()
    start = time.perf_counter()
    train_sim = generate(loop(seed=cfg.train_seed, frames=cfg.frames), keep_images=False)
    trained = train_model(train_sim.dataset, TrainingConfig(iterations=cfg.iterations, seed=0), pipeline)
    out = BenchmarkResult(model=trained)
    for seed in range(cfg.seeds):
        sim = generate(loop(seed=seed, frames=cfg.frames), keep_images=False)
        contexts = prepare_contexts(sim.dataset, pipeline)
        for name, model, sink in (("nominal", None, out.nominal), ("probe", trained.model, out.probe)):
            run = run_sequence(sim.dataset, name, pipeline, model, contexts)
            sink.append(compute_rmse(run.positions, mode="loop_closure") if run.complete else float("inf"))
        log.info("loop seed %d: nominal %.3f m, probe %.3f m", seed, out.nominal[-1], out.probe[-1])
    out.seconds = time.perf_counter() - start
    return out

