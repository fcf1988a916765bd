"""Two-frame stereo point-cloud alignment.

The initial guess comes from the gyro rotation plus the centroid translation
(:func:`direct_solution`); :func:`refine` then runs Levenberg-Marquardt on the
information-weighted 3-D alignment cost. Per-feature quality weights ``beta``
multiply the image-space covariances before they are propagated to 3-D.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateGeometryError, UnobservableMotionError
from .geometry import (
    Pose,
    StereoCamera,
    axis_angle_matrix,
    orthonormalize,
    skew_batch,
    unproject,
    unproject_jacobian,
)

log = logging.getLogger(__name__)

MAX_CONDITION = 1e12


@dataclass
class SolverConfig:
    max_iterations: int = 50
    convergence_tol: float = 1e-10
    lambda_init: float = 1e-4
    lambda_up: float = 10.0
    lambda_down: float = 0.1
    max_lambda: float = 1e12
    # False replaces every information matrix by the identity (plain
    # least-squares alignment); only used as a baseline.
    use_information: bool = True

    def __post_init__(self):
        if self.max_iterations < 1 or self.convergence_tol <= 0 or self.lambda_init <= 0:
            raise ValueError("solver limits must be positive")
        if not (self.lambda_up > 1.0 > self.lambda_down > 0.0):
            raise ValueError("need lambda_up > 1 > lambda_down > 0")


@dataclass
class Correspondences:
    """A batch of N stereo landmark observations in frames a and b.

    Shapes: ``y_*`` (N, 4), ``p_*`` (N, 3), ``R_*`` (N, 4, 4), ``G_*`` (N, 3, 4),
    ``beta`` (N,).
    """

    y_a: np.ndarray
    y_b: np.ndarray
    p_a: np.ndarray
    p_b: np.ndarray
    R_a: np.ndarray
    R_b: np.ndarray
    G_a: np.ndarray
    G_b: np.ndarray
    beta: np.ndarray
    ids: np.ndarray | None = None

    @classmethod
    def from_observations(
        cls,
        cam: StereoCamera,
        y_a,
        y_b,
        sigma_px: float = 0.5,
        beta=None,
        ids=None,
    ) -> "Correspondences":
        y_a = np.atleast_2d(np.asarray(y_a, dtype=float))
        y_b = np.atleast_2d(np.asarray(y_b, dtype=float))
        n = len(y_a)
        R = np.broadcast_to(np.eye(4) * sigma_px**2, (n, 4, 4)).copy()
        beta = np.ones(n) if beta is None else np.broadcast_to(np.asarray(beta, float), (n,)).copy()
        return cls(
            y_a=y_a,
            y_b=y_b,
            p_a=unproject(cam, y_a),
            p_b=unproject(cam, y_b),
            R_a=R,
            R_b=R.copy(),
            G_a=unproject_jacobian(cam, y_a),
            G_b=unproject_jacobian(cam, y_b),
            beta=beta,
            ids=None if ids is None else np.asarray(ids),
        )

    def __len__(self) -> int:
        return len(self.p_a)

    def subset(self, idx) -> "Correspondences":
        return Correspondences(
            y_a=self.y_a[idx],
            y_b=self.y_b[idx],
            p_a=self.p_a[idx],
            p_b=self.p_b[idx],
            R_a=self.R_a[idx],
            R_b=self.R_b[idx],
            G_a=self.G_a[idx],
            G_b=self.G_b[idx],
            beta=self.beta[idx],
            ids=None if self.ids is None else self.ids[idx],
        )

    def with_beta(self, beta) -> "Correspondences":
        out = self.subset(slice(None))
        out.beta = np.broadcast_to(np.asarray(beta, float), (len(self),)).copy()
        return out


@dataclass
class LinearizedSystem:
    residuals: np.ndarray  # (N, 3)
    jacobians: np.ndarray  # (N, 3, 6)
    gamma: np.ndarray  # (N, 3, 3)
    A: np.ndarray  # (6, 6)
    b: np.ndarray  # (6,)
    kept: np.ndarray  # (N,) bool, False where the weight was near singular

    def solve(self, damping: float = 0.0) -> np.ndarray:
        A = self.A + damping * np.diag(np.diag(self.A))
        return np.linalg.solve(A, self.b)


@dataclass
class RefineResult:
    pose: Pose
    cost: float
    iterations: int
    cost_history: list = field(default_factory=list)
    dropped: int = 0


def direct_solution(corrs: Correspondences, C: np.ndarray) -> np.ndarray:
    """Translation that aligns the two point-cloud centroids under rotation ``C``."""
    if len(corrs) == 0:
        raise UnobservableMotionError("direct solution needs at least one correspondence")
    u_a = corrs.p_a.mean(axis=0)
    u_b = corrs.p_b.mean(axis=0)
    return -C.T @ u_b + u_a


def information_matrices(G_a, R_a, G_b, R_b, C, beta=1.0):
    """Batched 3x3 information matrices and a mask of well-conditioned ones."""
    beta = np.asarray(beta, dtype=float).reshape(-1, 1, 1)
    R_a = 0.5 * (R_a + np.swapaxes(R_a, -1, -2))
    R_b = 0.5 * (R_b + np.swapaxes(R_b, -1, -2))
    S_a = G_a @ R_a @ np.swapaxes(G_a, -1, -2)
    S_b = G_b @ R_b @ np.swapaxes(G_b, -1, -2)
    M = beta * (S_b + C @ S_a @ C.T)
    M = 0.5 * (M + np.swapaxes(M, -1, -2))
    inv, det = _inverse_sym3(M)
    with np.errstate(invalid="ignore", over="ignore"):
        # Frobenius bound: cond_2 <= |M|_F |M^-1|_F <= 3 cond_2
        cond_f = np.linalg.norm(M, axis=(1, 2)) * np.linalg.norm(inv, axis=(1, 2))
    ok = np.isfinite(cond_f) & (det > 0)
    kept = ok & (cond_f <= MAX_CONDITION)
    unsure = ok & ~kept & (cond_f <= 3 * MAX_CONDITION)
    if np.any(unsure):
        w = np.linalg.eigvalsh(M[unsure])
        kept[unsure] = (w[:, 0] > 0) & (w[:, -1] <= MAX_CONDITION * w[:, 0])
    gamma = np.where(kept[:, None, None], inv, 0.0)
    return gamma, kept


def _inverse_sym3(M: np.ndarray):
    """Adjugate inverse of a batch of symmetric 3x3 matrices, with determinants."""
    a, b, c = M[:, 0, 0], M[:, 0, 1], M[:, 0, 2]
    d, e, f = M[:, 1, 1], M[:, 1, 2], M[:, 2, 2]
    A = d * f - e * e
    B = c * e - b * f
    Cc = b * e - c * d
    det = a * A + b * B + c * Cc
    adj = np.stack([
        np.stack([A, B, Cc], -1),
        np.stack([B, a * f - c * c, b * c - a * e], -1),
        np.stack([Cc, b * c - a * e, a * d - b * b], -1),
    ], -2)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = adj / det[:, None, None]
    return inv, det


def gamma_weight(corrs: Correspondences, C: np.ndarray, cam: StereoCamera | None = None):
    """Per-correspondence information matrices ``(N, 3, 3)`` at rotation ``C``.

    The Jacobians are stored on ``corrs`` (evaluated at the measured pixels), so
    ``cam`` is accepted only for interface symmetry. Near-singular entries are
    returned as zero matrices; callers use the second return value to drop them.
    """
    return information_matrices(corrs.G_a, corrs.R_a, corrs.G_b, corrs.R_b, C, corrs.beta)


def _residuals(corrs: Correspondences, pose: Pose) -> np.ndarray:
    return corrs.p_b - (corrs.p_a - pose.r) @ pose.C.T


def cost(corrs: Correspondences, pose: Pose, gamma: np.ndarray | None = None) -> float:
    """Half the sum of information-weighted squared 3-D alignment residuals.

    ``gamma`` defaults to the weights evaluated at ``pose.C``; pass a fixed set
    to evaluate the cost with weights frozen at a linearization point.
    """
    if gamma is None:
        gamma, _ = gamma_weight(corrs, pose.C)
    e = _residuals(corrs, pose)
    return 0.5 * float(np.einsum("ni,nij,nj->", e, gamma, e))


def build_linear_system(
    corrs: Correspondences, pose: Pose, gamma: np.ndarray | None = None, kept=None
) -> LinearizedSystem:
    """Normal equations ``A xi = b`` for the perturbation ``xi = [eps, phi]``."""
    if len(corrs) == 0:
        raise UnobservableMotionError("no correspondences")
    if gamma is None:
        gamma, kept = gamma_weight(corrs, pose.C)
    elif kept is None:
        kept = np.ones(len(corrs), dtype=bool)
    q = (corrs.p_a - pose.r) @ pose.C.T
    e = corrs.p_b - q
    E = np.empty((len(corrs), 3, 6))
    E[:, :, :3] = pose.C
    E[:, :, 3:] = -skew_batch(q)
    GE = gamma @ E
    A = np.einsum("nki,nkj->ij", E, GE)
    b = -np.einsum("nki,nk->i", GE, e)
    A = 0.5 * (A + A.T)
    return LinearizedSystem(residuals=e, jacobians=E, gamma=gamma, A=A, b=b, kept=kept)


def check_observable(A: np.ndarray) -> None:
    w = np.linalg.eigvalsh(A)
    if not np.all(np.isfinite(w)) or w[-1] <= 0 or w[0] <= w[-1] * 1e-12:
        raise DegenerateGeometryError("alignment normal matrix is rank deficient")


def apply_update(pose: Pose, xi: np.ndarray) -> Pose:
    """Left-perturb the rotation by ``exp(-phi^)`` and shift the translation by ``eps``."""
    xi = np.asarray(xi, dtype=float)
    C = axis_angle_matrix(xi[3:]) @ pose.C
    return Pose(orthonormalize(C), pose.r + xi[:3])


def _identity_gamma(n: int):
    return np.broadcast_to(np.eye(3), (n, 3, 3)).copy(), np.ones(n, dtype=bool)


def refine(
    corrs: Correspondences, initial: Pose, cfg: SolverConfig | None = None
) -> RefineResult:
    """Levenberg-Marquardt alignment starting from ``initial``.

    Weights are re-linearized once per outer iteration. A damped step is
    accepted only if it does not increase the cost, so the accepted cost
    sequence is non-increasing by construction.
    """
    cfg = cfg or SolverConfig()
    if len(corrs) < 3:
        raise UnobservableMotionError(f"need >= 3 correspondences, got {len(corrs)}")

    def weights(C):
        if cfg.use_information:
            return gamma_weight(corrs, C)
        return _identity_gamma(len(corrs))

    pose = initial
    gamma, kept = weights(pose.C)
    current = cost(corrs, pose, gamma)
    history = [current]
    lam = cfg.lambda_init
    iterations = 0
    for iterations in range(1, cfg.max_iterations + 1):
        system = build_linear_system(corrs, pose, gamma, kept)
        if iterations == 1:
            if np.count_nonzero(kept) < 3:
                raise UnobservableMotionError("fewer than 3 well-conditioned correspondences")
            try:
                check_observable(system.A)
            except DegenerateGeometryError as exc:
                raise UnobservableMotionError(str(exc)) from exc
        xi = system.solve(0.0)
        if np.linalg.norm(xi) < cfg.convergence_tol:
            break
        accepted = False
        while lam <= cfg.max_lambda:
            xi = system.solve(lam)
            candidate = apply_update(pose, xi)
            c_gamma, c_kept = weights(candidate.C)
            c_cost = cost(corrs, candidate, c_gamma)
            if c_cost <= current:
                pose, gamma, kept, current = candidate, c_gamma, c_kept, c_cost
                history.append(current)
                lam = max(lam * cfg.lambda_down, 1e-12)
                accepted = True
                break
            lam *= cfg.lambda_up
        if not accepted or np.linalg.norm(xi) < cfg.convergence_tol:
            break
    dropped = int(np.count_nonzero(~kept))
    if dropped:
        log.debug("dropped %d near-singular correspondences", dropped)
    return RefineResult(pose, current, iterations, history, dropped)
