"""Rectified stereo camera model, rotation utilities and gyro integration.

Conventions
-----------
* Camera frame: x right, y down, z forward, origin at the left camera centre.
* ``Pose(C, r)`` describes frame b relative to frame a: ``C`` rotates
  coordinates from a to b and ``r`` is the origin of b expressed in a, so a
  landmark transforms as ``p_b = C @ (p_a - r)``.
* ``axis_angle_matrix(psi)`` returns ``exp(-psi^)``, i.e. the *frame*
  rotation produced by a body rotating through ``psi``. Gyro samples expressed
  in the body frame therefore compose by left multiplication.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DegenerateDisparityError, DomainError

MIN_DISPARITY = 0.1  # px
SMALL_ANGLE = 1e-12


@dataclass(frozen=True)
class StereoCamera:
    f: float
    b: float
    c_u: float
    c_v: float
    image_width: int
    image_height: int

    def __post_init__(self):
        if not self.f > 0 or not self.b > 0:
            raise ValueError("focal length and baseline must be positive")
        if not (0 <= self.c_u < self.image_width and 0 <= self.c_v < self.image_height):
            raise ValueError("principal point must lie inside the image")


@dataclass(frozen=True)
class RigCalibration:
    """Rotation ``C_cv`` taking IMU-frame vectors into the camera frame."""

    C_cv: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        C = np.asarray(self.C_cv, dtype=float)
        if C.shape != (3, 3) or not is_rotation(C, tol=1e-9):
            raise ValueError("C_cv must be a proper rotation matrix")
        object.__setattr__(self, "C_cv", C)


@dataclass(frozen=True)
class ImuSample:
    omega: np.ndarray
    accel: np.ndarray
    dt: float

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("IMU sample period must be positive")


@dataclass(frozen=True)
class Pose:
    C: np.ndarray
    r: np.ndarray

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    def transform(self, p_a: np.ndarray) -> np.ndarray:
        """Map points from frame a into frame b."""
        return (np.asarray(p_a) - self.r) @ self.C.T


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def skew_batch(v: np.ndarray) -> np.ndarray:
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def is_rotation(C: np.ndarray, tol: float = 1e-9) -> bool:
    C = np.asarray(C)
    return bool(
        np.allclose(C.T @ C, np.eye(3), atol=tol) and abs(np.linalg.det(C) - 1.0) < tol
    )


def project(cam: StereoCamera, p: np.ndarray) -> np.ndarray:
    """Project camera-frame point(s) ``(..., 3)`` to ``(u_l, v_l, u_r, v_r)``."""
    p = np.asarray(p, dtype=float)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    if np.any(~(z > 0)):
        raise DomainError("cannot project a point with non-positive depth")
    s = cam.f / z
    u_l = s * x + cam.c_u
    v = s * y + cam.c_v
    u_r = s * (x - cam.b) + cam.c_u
    return np.stack([u_l, v, u_r, v], axis=-1)


def _disparity(y: np.ndarray) -> np.ndarray:
    d = y[..., 0] - y[..., 2]
    if np.any(~(d >= MIN_DISPARITY)):
        raise DegenerateDisparityError(
            f"disparity below {MIN_DISPARITY} px (min {np.min(d):.3g})"
        )
    return d


def unproject(cam: StereoCamera, y: np.ndarray) -> np.ndarray:
    """Triangulate stereo observation(s) ``(..., 4)`` back to camera-frame points."""
    y = np.asarray(y, dtype=float)
    d = _disparity(y)
    z = cam.f * cam.b / d
    v_bar = 0.5 * (y[..., 1] + y[..., 3])
    x = (y[..., 0] - cam.c_u) * z / cam.f
    yy = (v_bar - cam.c_v) * z / cam.f
    return np.stack([x, yy, z], axis=-1)


def unproject_jacobian(cam: StereoCamera, y: np.ndarray) -> np.ndarray:
    """Analytic ``d unproject / d y`` with shape ``(..., 3, 4)``."""
    y = np.asarray(y, dtype=float)
    d = _disparity(y)
    b, f = cam.b, cam.f
    du = y[..., 0] - cam.c_u
    dv = 0.5 * (y[..., 1] + y[..., 3]) - cam.c_v
    d2 = d * d
    J = np.zeros(y.shape[:-1] + (3, 4))
    # x = du * b / d
    J[..., 0, 0] = b / d - du * b / d2
    J[..., 0, 2] = du * b / d2
    # y = dv * b / d
    J[..., 1, 0] = -dv * b / d2
    J[..., 1, 1] = 0.5 * b / d
    J[..., 1, 2] = dv * b / d2
    J[..., 1, 3] = 0.5 * b / d
    # z = f b / d
    J[..., 2, 0] = -f * b / d2
    J[..., 2, 2] = f * b / d2
    return J


def axis_angle_matrix(psi: np.ndarray) -> np.ndarray:
    """``cos(a) I + (1 - cos(a)) n n^T - sin(a) n^`` for ``psi = a n``."""
    psi = np.asarray(psi, dtype=float)
    angle = float(np.linalg.norm(psi))
    if angle < SMALL_ANGLE:
        P = skew(psi)
        return np.eye(3) - P + 0.5 * P @ P
    n = psi / angle
    c, s = np.cos(angle), np.sin(angle)
    return c * np.eye(3) + (1.0 - c) * np.outer(n, n) - s * skew(n)


def integrate_gyro_rates(omegas: np.ndarray, dts, C_cv: np.ndarray) -> np.ndarray:
    """Array form of :func:`integrate_gyro`; ``dts`` may be scalar or per sample."""
    omegas = np.asarray(omegas, dtype=float).reshape(-1, 3)
    dts = np.broadcast_to(np.asarray(dts, dtype=float), (len(omegas),))
    acc = np.eye(3)
    for w, dt in zip(omegas, dts):
        acc = axis_angle_matrix(w * dt) @ acc
    return C_cv @ acc @ C_cv.T


def integrate_gyro(samples: Sequence[ImuSample], rig: RigCalibration) -> np.ndarray:
    """Camera-frame rotation ``C_ba`` accumulated over a window of gyro samples.

    An empty window means no elapsed rotation and yields the identity.
    """
    if len(samples) == 0:
        return np.eye(3)
    omegas = np.array([s.omega for s in samples], dtype=float)
    dts = np.array([s.dt for s in samples], dtype=float)
    return integrate_gyro_rates(omegas, dts, rig.C_cv)


def rotation_angle(C: np.ndarray) -> float:
    """Angle (rad) of a rotation matrix, robust near 0 and pi."""
    c = np.clip((np.trace(C) - 1.0) / 2.0, -1.0, 1.0)
    s = 0.5 * np.linalg.norm([C[2, 1] - C[1, 2], C[0, 2] - C[2, 0], C[1, 0] - C[0, 1]])
    return float(np.arctan2(s, c))


def orthonormalize(C: np.ndarray) -> np.ndarray:
    """Project a nearly orthonormal matrix back onto SO(3)."""
    U, _, Vt = np.linalg.svd(C)
    R = U @ Vt
    if np.linalg.det(R) < 0:
        U[:, -1] *= -1
        R = U @ Vt
    return R
