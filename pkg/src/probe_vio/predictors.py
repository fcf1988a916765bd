"""Per-feature prediction-space vectors.

Each tracked feature is described by seven numbers::

    w_mag, a_mag, entropy, blur, flow_var, f_low, f_high

IMU magnitudes and the blur metric are shared by every feature of a frame;
entropy and the two frequency coefficients come from a patch centred on the
feature in the left image; the flow score compares optical-flow variance in a
small and a large neighbourhood of the feature.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy import fft as sp_fft
from scipy.ndimage import uniform_filter1d
from scipy.sparse import coo_matrix
from scipy.spatial import cKDTree

PREDICTOR_NAMES = ("w_mag", "a_mag", "entropy", "blur", "flow_var", "f_low", "f_high")
N_PREDICTORS = len(PREDICTOR_NAMES)


@dataclass(frozen=True)
class PredictorConfig:
    patch_size: int = 32
    entropy_bins: int = 256
    blur_kernel: int = 9
    flow_radius_small: float = 25.0
    flow_radius_large: float = 100.0
    flow_floor: float = 1e-6
    freq_cutoff: float = 0.25  # fraction of Nyquist

    def __post_init__(self):
        if not self.flow_radius_large > self.flow_radius_small > 0:
            raise ValueError("need flow_radius_large > flow_radius_small > 0")
        if self.entropy_bins < 2 or self.patch_size < 2:
            raise ValueError("entropy_bins and patch_size must be >= 2")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def imu_magnitudes(omegas, accels) -> tuple[float, float]:
    """Norms of the mean angular rate and mean acceleration over a window."""
    omegas = np.asarray(omegas, dtype=float).reshape(-1, 3)
    accels = np.asarray(accels, dtype=float).reshape(-1, 3)
    if len(omegas) == 0 or len(accels) == 0:
        raise ValueError("IMU window is empty")
    return float(np.linalg.norm(omegas.mean(axis=0))), float(np.linalg.norm(accels.mean(axis=0)))


def patch_entropy(patch, bins: int = 256) -> float:
    """Shannon entropy (bits) of the intensity histogram over [0, 256)."""
    counts, _ = np.histogram(np.asarray(patch, dtype=float), bins=bins, range=(0.0, 256.0))
    return _entropy_from_counts(counts[None, :])[0]


def _entropy_from_counts(counts: np.ndarray) -> np.ndarray:
    total = counts.sum(axis=1, keepdims=True)
    p = counts / np.maximum(total, 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log2(p), 0.0)
    return np.abs(terms.sum(axis=1))


def patch_entropy_batch(patches: np.ndarray, bins: int = 256) -> np.ndarray:
    """Entropy of each patch in an ``(N, h, w)`` stack."""
    n = len(patches)
    if n == 0:
        return np.zeros(0)
    idx = np.clip((np.asarray(patches, dtype=float) * (bins / 256.0)).astype(np.int64), 0, bins - 1)
    idx = idx.reshape(n, -1) + (np.arange(n) * bins)[:, None]
    counts = np.bincount(idx.ravel(), minlength=n * bins).reshape(n, bins)
    return _entropy_from_counts(counts)


def blur_metric(image, kernel: int = 9) -> float:
    """No-reference re-blur metric in [0, 1]; larger means blurrier.

    The image is low-pass filtered along each axis and the loss of
    neighbouring-pixel variation is measured. An image that is already blurred
    loses little variation, so its normalized score approaches 1.
    """
    img = np.asarray(image, dtype=float)
    if img.ndim != 2 or min(img.shape) < 3:
        raise ValueError("blur_metric needs a 2-D image of at least 3x3")
    scores = []
    for axis in (0, 1):
        blurred = uniform_filter1d(img, size=kernel, axis=axis, mode="reflect")
        d_img = np.abs(np.diff(img, axis=axis))
        d_blur = np.abs(np.diff(blurred, axis=axis))
        s_img = d_img.sum()
        if s_img <= 0:
            scores.append(1.0)
            continue
        s_var = np.maximum(0.0, d_img - d_blur).sum()
        scores.append((s_img - s_var) / s_img)
    return float(np.clip(max(scores), 0.0, 1.0))


def flow_variance_scores(
    positions, flows, radius_small: float = 25.0, radius_large: float = 100.0, floor: float = 1e-6
) -> tuple[np.ndarray, np.ndarray]:
    """Log ratio of local to regional optical-flow variance for every feature.

    ``positions`` (N, 2) are the feature locations and ``flows`` (N, 2) their
    displacement vectors; each feature is scored against all others. Returns the
    scores and a boolean flag marking features whose neighbourhoods held fewer
    than two vectors (those score 0).
    """
    positions = np.asarray(positions, dtype=float).reshape(-1, 2)
    flows = np.asarray(flows, dtype=float).reshape(-1, 2)
    n = len(positions)
    if n == 0:
        return np.zeros(0), np.zeros(0, dtype=bool)
    # variance is shift invariant; centring first keeps the moment formula exact
    centred = flows - flows.mean(axis=0)
    tree = cKDTree(positions)
    pairs = tree.sparse_distance_matrix(tree, radius_large, output_type="ndarray")
    i, j, d = pairs["i"], pairs["j"], pairs["v"]  # includes self-pairs

    def mean_variance(radius):
        sel = d <= radius
        S = coo_matrix((np.ones(sel.sum()), (i[sel], j[sel])), shape=(n, n)).tocsr()
        count = np.asarray(S.sum(axis=1)).ravel()
        m1 = S @ centred / count[:, None]
        m2 = S @ (centred**2) / count[:, None]
        var = np.maximum(m2 - m1**2, 0.0)
        return var.mean(axis=1), count

    var_s, n_s = mean_variance(radius_small)
    var_l, n_l = mean_variance(radius_large)
    insufficient = (n_s < 2) | (n_l < 2)
    score = np.log(var_s + floor) - np.log(var_l + floor)
    score[insufficient] = 0.0
    return score, insufficient


def flow_variance_score(var_small: float, var_large: float, floor: float = 1e-6) -> float:
    """Score from the two mean variances directly."""
    return float(np.log(var_small + floor) - np.log(var_large + floor))


def _pad_pow2(patch: np.ndarray) -> np.ndarray:
    h, w = patch.shape[-2:]
    side = 1 << int(np.ceil(np.log2(max(h, w, 2))))
    if side == h == w:
        return patch
    pad = [(0, 0)] * (patch.ndim - 2) + [(0, side - h), (0, side - w)]
    return np.pad(patch, pad, mode="reflect" if min(h, w) > 1 else "edge")


def frequency_coefficients_batch(patches, cutoff: float = 0.25) -> np.ndarray:
    """``(N, 2)`` mean low/high-band Fourier magnitudes of zero-mean patches."""
    patches = np.asarray(patches, dtype=float)
    if patches.ndim == 2:
        patches = patches[None]
    if len(patches) == 0:
        return np.zeros((0, 2))
    patches = patches - patches.mean(axis=(-2, -1), keepdims=True)
    patches = _pad_pow2(patches)
    side = patches.shape[-1]
    # real FFT holds each conjugate pair once; weight the interior columns twice
    mag = np.abs(sp_fft.rfft2(patches, norm="ortho")).reshape(len(patches), -1)
    fy = np.fft.fftfreq(side)[:, None]
    fx = np.fft.rfftfreq(side)[None, :]
    rho = np.hypot(fy, fx)
    mult = np.full(fx.shape, 2.0)
    mult[0, 0] = 1.0
    if side % 2 == 0:
        mult[0, -1] = 1.0
    mult = np.broadcast_to(mult, rho.shape)
    rho_c = cutoff * 0.5
    w_low = (((rho < rho_c) & (rho > 0)) * mult).ravel()
    w_high = ((rho >= rho_c) * mult).ravel()
    return np.stack([mag @ w_low / w_low.sum(), mag @ w_high / w_high.sum()], axis=1)


def frequency_coefficients(patch, cutoff: float = 0.25) -> tuple[float, float]:
    f_low, f_high = frequency_coefficients_batch(patch, cutoff)[0]
    return float(f_low), float(f_high)


def extract_patches(image: np.ndarray, centres, size: int = 32) -> np.ndarray:
    """Square patches around ``centres`` (N, 2) as (u, v); windows are clamped
    so they always lie fully inside the image."""
    image = np.asarray(image)
    h, w = image.shape
    centres = np.asarray(centres, dtype=float).reshape(-1, 2)
    ph, pw = min(size, h), min(size, w)
    u0 = np.clip(np.round(centres[:, 0]).astype(int) - pw // 2, 0, w - pw)
    v0 = np.clip(np.round(centres[:, 1]).astype(int) - ph // 2, 0, h - ph)
    rows = v0[:, None] + np.arange(ph)[None, :]
    cols = u0[:, None] + np.arange(pw)[None, :]
    return image[rows[:, :, None], cols[:, None, :]]


@dataclass
class ImagePredictors:
    """Image-derived predictors of one frame for a batch of features."""

    entropy: np.ndarray
    blur: float
    f_low: np.ndarray
    f_high: np.ndarray


def image_predictors(image, centres, cfg: PredictorConfig = PredictorConfig()) -> ImagePredictors:
    patches = extract_patches(image, centres, cfg.patch_size).astype(float)
    freq = frequency_coefficients_batch(patches, cfg.freq_cutoff)
    return ImagePredictors(
        entropy=patch_entropy_batch(patches, cfg.entropy_bins),
        blur=blur_metric(image, cfg.blur_kernel),
        f_low=freq[:, 0],
        f_high=freq[:, 1],
    )


def assemble(w_mag, a_mag, entropy, blur, flow_var, f_low, f_high) -> np.ndarray:
    """Stack predictor columns into an ``(N, 7)`` matrix (scalars broadcast)."""
    cols = np.broadcast_arrays(
        *(np.atleast_1d(np.asarray(c, dtype=float)) for c in (w_mag, a_mag, entropy, blur, flow_var, f_low, f_high))
    )
    return np.stack(cols, axis=1)


def build_predictor_vectors(
    positions,
    flows,
    image,
    imu_omegas,
    imu_accels,
    cfg: PredictorConfig = PredictorConfig(),
) -> np.ndarray:
    """Prediction-space vectors ``(N, 7)`` for the features at ``positions``.

    ``positions`` are left-image locations in the current frame and ``flows``
    their displacement since the previous frame.
    """
    positions = np.asarray(positions, dtype=float).reshape(-1, 2)
    w_mag, a_mag = imu_magnitudes(imu_omegas, imu_accels)
    flow, _ = flow_variance_scores(
        positions, flows, cfg.flow_radius_small, cfg.flow_radius_large, cfg.flow_floor
    )
    img = image_predictors(image, positions, cfg)
    return assemble(w_mag, a_mag, img.entropy, img.blur, flow, img.f_low, img.f_high)


def build_predictor_vector(position, image, flow_positions, flows, imu_omegas, imu_accels,
                           cfg: PredictorConfig = PredictorConfig()) -> np.ndarray:
    """Single-feature convenience wrapper; ``flow_positions``/``flows`` give the
    frame's full flow context, which must include the feature itself."""
    position = np.asarray(position, dtype=float).reshape(1, 2)
    flow_positions = np.asarray(flow_positions, dtype=float).reshape(-1, 2)
    flows = np.asarray(flows, dtype=float).reshape(-1, 2)
    d = np.linalg.norm(flow_positions - position, axis=1)
    own = int(np.argmin(d)) if len(d) else -1
    if own < 0 or d[own] > 1e-9:
        raise ValueError("feature position must be part of the flow context")
    w_mag, a_mag = imu_magnitudes(imu_omegas, imu_accels)
    scores, _ = flow_variance_scores(flow_positions, flows, cfg.flow_radius_small,
                                     cfg.flow_radius_large, cfg.flow_floor)
    img = image_predictors(image, position, cfg)
    return assemble(w_mag, a_mag, img.entropy, img.blur, scores[own], img.f_low, img.f_high)[0]
