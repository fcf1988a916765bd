"""Preset simulation specs used by the experiment scripts and benchmarks."""

from __future__ import annotations

import numpy as np

from .rng import stream
from .simulator import (
    MovingCluster,
    NoiseSpec,
    SimulationSpec,
    TrajectorySpec,
    WorldSpec,
    n_frames,
)


def clean(kind: str = "line", seed: int = 0, frames: int = 100, **traj) -> SimulationSpec:
    """Noise-free sequence of ``frames`` frames on a parametric path."""
    tr = TrajectorySpec(kind=kind, duration=(frames - 1) / 10.0, **traj)
    if kind == "arc" and "yaw_rate" not in traj:
        tr.yaw_rate = 0.15
    if kind == "loop" and "radius" not in traj:
        tr.radius = 8.0
    return SimulationSpec(
        world=WorldSpec(seed=seed),
        trajectory=tr,
        noise=NoiseSpec(pixel_sigma=0.0),
        name=f"clean-{kind}-{seed}",
    )


def vehicles(rng: np.random.Generator, trajectory: TrajectorySpec, count: int, features: int,
             texture: float, speed: tuple[float, float]) -> list[MovingCluster]:
    """Rigid car-sized clusters that cross in front of the camera at staggered times."""
    out = []
    T = trajectory.duration
    slots = (np.arange(count) + rng.uniform(0.15, 0.85, count)) / count * T
    for t_cross in slots:
        z_cross = trajectory.speed * t_cross + rng.uniform(7.0, 12.0)
        side = rng.choice([-1.0, 1.0])
        v = rng.uniform(*speed)
        # the cluster reaches the camera's line of travel at t_cross
        x0 = -side * v * t_cross
        out.append(MovingCluster(
            count=features,
            center=[x0, rng.uniform(-0.5, 0.5), z_cross],
            extent=[2.0, 0.8, 1.0],
            velocity=[side * v, 0.0, 0.0],
            texture=texture,
        ))
    return out


def moving_object(seed: int = 0, frames: int = 100, pixel_sigma: float = 0.5, vehicles_count: int = 4,
                  vehicle_features: int = 90, texture: float = 0.3, speed=(2.0, 4.0),
                  static_count: int = 2000) -> SimulationSpec:
    """Forward motion past several crossing vehicles."""
    tr = TrajectorySpec(kind="line", duration=(frames - 1) / 10.0, speed=2.0, wobble_deg=1.0)
    rng = stream(seed, "scenario")
    world = WorldSpec(
        static_count=static_count,
        clusters=vehicles(rng, tr, vehicles_count, vehicle_features, texture, speed),
        seed=seed,
    )
    return SimulationSpec(world=world, trajectory=tr, noise=NoiseSpec(pixel_sigma=pixel_sigma),
                          name=f"moving-{seed}")


def blur_schedule(frames: int, period: int = 10, high: float = 0.8, low: float = 0.0) -> list[float]:
    """Alternating blocks of sharp and blurred frames."""
    return [high if (k // period) % 2 else low for k in range(frames)]


def blurred(seed: int = 0, frames: int = 60, pixel_sigma: float = 0.5, period: int = 10,
            high: float = 0.8) -> SimulationSpec:
    tr = TrajectorySpec(kind="line", duration=(frames - 1) / 10.0, speed=2.0)
    return SimulationSpec(
        world=WorldSpec(seed=seed),
        trajectory=tr,
        noise=NoiseSpec(pixel_sigma=pixel_sigma, blur=blur_schedule(n_frames(tr), period, high)),
        name=f"blur-{seed}",
    )


def loop(seed: int = 0, frames: int = 120, pixel_sigma: float = 0.5, radius: float = 8.0,
         vehicles_count: int = 3, vehicle_features: int = 80, texture: float = 0.3,
         groundtruth: str = "none") -> SimulationSpec:
    """Closed circular path with moving clusters; no ground truth by default."""
    tr = TrajectorySpec(kind="loop", duration=(frames - 1) / 10.0, radius=radius)
    rng = stream(seed, "scenario")
    clusters = []
    for _ in range(vehicles_count):
        th = rng.uniform(0.2, 0.9) * 2 * np.pi
        ahead = np.array([radius * (1 - np.cos(th)), rng.uniform(-0.5, 0.5), radius * np.sin(th)])
        clusters.append(MovingCluster(count=vehicle_features, center=ahead.tolist(),
                                      extent=[1.0, 0.8, 1.0],
                                      velocity=[rng.uniform(-3, 3), 0.0, rng.uniform(-3, 3)],
                                      texture=texture))
    world = WorldSpec(static_count=2500, clusters=clusters, seed=seed, corridor=12.0)
    return SimulationSpec(world=world, trajectory=tr, noise=NoiseSpec(pixel_sigma=pixel_sigma),
                          groundtruth=groundtruth, name=f"loop-{seed}")
