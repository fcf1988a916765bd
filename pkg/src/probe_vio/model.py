"""Feature-quality model: training samples, k-NN lookup and covariance scale.

A training set is a bag of (predictor vector, alpha) pairs where alpha is the
translational error of the estimate the feature contributed to. At test time
each feature is scaled by

    beta = (mean alpha of its K nearest training samples / mean alpha) ** gamma

and ``beta`` multiplies the feature's image covariance.
"""

from __future__ import annotations

import csv
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import ModelFormatError, TrainingError
from .predictors import N_PREDICTORS, PREDICTOR_NAMES

MAGIC = b"PRB1"
FORMAT_VERSION = 1
BETA_MIN, BETA_MAX = 1e-3, 1e6
ALPHA_BAR_MIN = 1e-9

DEFAULT_GAMMAS = (0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 5.0)
DEFAULT_KS = (1, 2, 5, 10, 20, 50, 100)

RMSE_MODES = ("per_step", "windowed", "full_path", "loop_closure")


def compute_rmse(estimated, ground_truth=None, mode: str = "full_path") -> float:
    """Translational error of an estimate.

    ``per_step`` takes a single translation vector each; ``windowed`` and
    ``full_path`` take matched ``(n, 3)`` position arrays; ``loop_closure``
    ignores ``ground_truth`` and returns the start-to-end gap of ``estimated``.
    """
    if mode not in RMSE_MODES:
        raise ValueError(f"unknown RMSE mode {mode!r}")
    est = np.atleast_2d(np.asarray(estimated, dtype=float))
    if mode == "loop_closure":
        return float(np.linalg.norm(est[-1] - est[0]))
    gt = np.atleast_2d(np.asarray(ground_truth, dtype=float))
    if est.shape != gt.shape:
        raise ValueError(f"length mismatch: {est.shape} vs {gt.shape}")
    if mode == "per_step" and len(est) != 1:
        raise ValueError("per_step mode compares a single translation")
    return float(np.sqrt(np.mean(np.sum((est - gt) ** 2, axis=1))))


@dataclass
class TrainingSet:
    """Raw predictor vectors with their alphas plus standardization stats."""

    pi: np.ndarray  # (M, 7) raw predictor vectors
    alpha: np.ndarray  # (M,)
    mean: np.ndarray = field(init=False)
    std: np.ndarray = field(init=False)
    alpha_bar: float = field(init=False)

    def __post_init__(self):
        self.pi = np.asarray(self.pi, dtype=float).reshape(-1, N_PREDICTORS)
        self.alpha = np.asarray(self.alpha, dtype=float).reshape(-1)
        if len(self.pi) != len(self.alpha):
            raise ValueError("pi and alpha lengths differ")
        if len(self.pi) == 0:
            raise TrainingError("training set is empty")
        if not np.all(np.isfinite(self.pi)) or not np.all(np.isfinite(self.alpha)):
            raise TrainingError("training set contains non-finite values")
        if np.any(self.alpha < 0):
            raise TrainingError("alpha must be non-negative")
        self.mean = self.pi.mean(axis=0)
        std = self.pi.std(axis=0)
        self.std = np.where(std > 1e-12, std, 1.0)
        self.alpha_bar = float(self.alpha.mean())
        if self.alpha_bar < ALPHA_BAR_MIN:
            raise TrainingError(
                f"mean alpha {self.alpha_bar:.3g} m is degenerate; training data carries no error signal"
            )

    def __len__(self) -> int:
        return len(self.alpha)

    @property
    def standardized(self) -> np.ndarray:
        return (self.pi - self.mean) / self.std

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([*PREDICTOR_NAMES, "alpha"])
            for row, a in zip(self.standardized, self.alpha):
                w.writerow([repr(float(v)) for v in row] + [repr(float(a))])


class ProbeModel:
    """Immutable k-NN quality model. Query methods take *raw* predictor vectors."""

    def __init__(
        self,
        samples: np.ndarray,
        alpha: np.ndarray,
        mean: np.ndarray,
        std: np.ndarray,
        k: int,
        gamma: float,
        alpha_bar: float | None = None,
        metadata: dict | None = None,
    ):
        if k < 1:
            raise ValueError("K must be >= 1")
        if gamma < 0:
            raise ValueError("gamma must be >= 0")
        self.samples = np.ascontiguousarray(samples, dtype=float).reshape(-1, N_PREDICTORS)
        self.alpha = np.ascontiguousarray(alpha, dtype=float).reshape(-1)
        self.mean = np.asarray(mean, dtype=float)
        self.std = np.asarray(std, dtype=float)
        self.k = int(k)
        self.gamma = float(gamma)
        self.alpha_bar = float(self.alpha.mean() if alpha_bar is None else alpha_bar)
        if self.alpha_bar < ALPHA_BAR_MIN:
            raise TrainingError("mean alpha is degenerate")
        self.metadata = dict(metadata or {})
        self.config_mismatch = False
        self._tree = cKDTree(self.samples)
        for arr in (self.samples, self.alpha, self.mean, self.std):
            arr.setflags(write=False)

    @classmethod
    def from_training_set(cls, ts: TrainingSet, k: int, gamma: float, metadata=None) -> "ProbeModel":
        return cls(ts.standardized, ts.alpha, ts.mean, ts.std, k, gamma, ts.alpha_bar, metadata)

    def with_gamma(self, gamma: float) -> "ProbeModel":
        return ProbeModel(self.samples, self.alpha, self.mean, self.std, self.k, gamma,
                          self.alpha_bar, self.metadata)

    def __len__(self) -> int:
        return len(self.alpha)

    def standardize(self, pi) -> np.ndarray:
        return (np.asarray(pi, dtype=float).reshape(-1, N_PREDICTORS) - self.mean) / self.std

    def neighbors(self, pi, k: int | None = None) -> np.ndarray:
        """Indices ``(Q, k)`` of the nearest samples, ties broken by insertion order."""
        q = self.standardize(pi)
        return nearest_indices(self._tree, self.samples, q, self.k if k is None else k)

    def knn_alphas(self, pi, k: int | None = None) -> np.ndarray:
        return self.alpha[self.neighbors(pi, k)]

    def beta(self, pi) -> np.ndarray:
        """Covariance scale for each row of ``pi``; clamped to a safe range."""
        mean_alpha = self.knn_alphas(pi).mean(axis=1)
        ratio = mean_alpha / self.alpha_bar
        with np.errstate(divide="ignore"):
            beta = np.power(ratio, self.gamma)
        return np.clip(beta, BETA_MIN, BETA_MAX)

    def beta_at_ratio(self, ratio: float) -> float:
        """Response of the scale law to a neighbour mean of ``ratio * alpha_bar``."""
        return float(np.clip(ratio**self.gamma, BETA_MIN, BETA_MAX))


def knn_query(model: ProbeModel, pi) -> np.ndarray:
    """Alpha values of the K nearest training samples of a single vector."""
    return model.knn_alphas(pi)[0]


def weight(model: ProbeModel, pi) -> float:
    return float(model.beta(pi)[0])


def nearest_indices(tree: cKDTree, data: np.ndarray, queries: np.ndarray, k: int,
                    window: int = 16) -> np.ndarray:
    """k nearest neighbours with deterministic (distance, index) ordering.

    The tree is asked for ``k + window`` candidates so that ties straddling the
    k-th distance are usually resolved in bulk; rows whose tie group overflows
    the window fall back to an exact ball query.
    """
    n = len(data)
    k = min(k, n)
    queries = np.atleast_2d(queries)
    kk = min(k + window, n)
    dist, idx = tree.query(queries, k=kk)
    dist = dist.reshape(len(queries), kk)
    idx = idx.reshape(len(queries), kk)
    order = np.lexsort((idx, dist), axis=-1)
    idx = np.take_along_axis(idx, order, axis=1)
    dist = np.take_along_axis(dist, order, axis=1)
    out = idx[:, :k].astype(np.int64)
    if kk < n:
        for row in np.flatnonzero(dist[:, -1] <= dist[:, k - 1]):
            radius = dist[row, k - 1]
            cand = np.asarray(tree.query_ball_point(queries[row], radius * (1 + 1e-9) + 1e-12))
            cd = np.linalg.norm(data[cand] - queries[row], axis=1)
            out[row] = cand[np.lexsort((cand, cd))][:k]
    return out


def brute_force_knn(data: np.ndarray, query: np.ndarray, k: int) -> np.ndarray:
    d = np.linalg.norm(np.asarray(data) - np.asarray(query), axis=1)
    return np.lexsort((np.arange(len(d)), d))[: min(k, len(d))]


def select_k(ts: TrainingSet, candidates: Sequence[int] = DEFAULT_KS, folds: int = 5, seed: int = 0,
             max_queries: int | None = 5000) -> int:
    """K minimizing 5-fold cross-validated squared error of the neighbour-mean alpha.

    Each fold scores at most ``max_queries`` of its held-out samples (a seeded
    random selection); ``None`` scores all of them.
    """
    candidates = sorted(set(int(c) for c in candidates))
    if not candidates or candidates[0] < 1:
        raise ValueError("K candidates must be positive")
    if len(ts) < candidates[-1]:
        raise ValueError(f"training set ({len(ts)}) smaller than largest K candidate")
    x, a = ts.standardized, ts.alpha
    perm = np.random.default_rng(seed).permutation(len(ts))
    parts = np.array_split(perm, folds)
    sse = np.zeros(len(candidates))
    kmax = candidates[-1]
    for held in parts:
        if len(held) == 0:
            continue
        train = np.setdiff1d(perm, held)
        if max_queries is not None and len(held) > max_queries:
            held = held[:max_queries]  # parts are slices of a random permutation
        tree = cKDTree(x[train])
        idx = nearest_indices(tree, x[train], x[held], kmax)
        neigh = a[train][idx]
        csum = np.cumsum(neigh, axis=1)
        for j, k in enumerate(candidates):
            kk = min(k, neigh.shape[1])
            pred = csum[:, kk - 1] / kk
            sse[j] += np.sum((pred - a[held]) ** 2)
    best = np.flatnonzero(sse <= sse.min() * (1 + 1e-12) + 1e-300)
    return candidates[int(best[0])]


def select_gamma(candidates: Iterable[float], evaluate: Callable[[float], float]) -> tuple[float, dict]:
    """Candidate minimizing ``evaluate(gamma)`` (training-set trajectory error).

    Ties go to the smallest gamma. Returns the choice and all scores.
    """
    cands = sorted(set(float(g) for g in candidates))
    if not cands:
        raise ValueError("no gamma candidates")
    scores = {g: float(evaluate(g)) for g in cands} if len(cands) > 1 else {cands[0]: float("nan")}
    if len(cands) == 1:
        return cands[0], scores
    best = min(cands, key=lambda g: (scores[g], g))
    return best, scores


# --- persistence -------------------------------------------------------------

_HEADER = struct.Struct("<4sII")


def model_to_bytes(model: ProbeModel) -> bytes:
    header = {
        "k": model.k,
        "gamma": model.gamma,
        "alpha_bar": model.alpha_bar,
        "mean": model.mean.tolist(),
        "std": model.std.tolist(),
        "n_samples": len(model),
        "predictors": list(PREDICTOR_NAMES),
        "metadata": model.metadata,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    payload = model.samples.astype("<f8").tobytes() + model.alpha.astype("<f8").tobytes()
    body = _HEADER.pack(MAGIC, FORMAT_VERSION, len(hbytes)) + hbytes + payload
    return body + struct.pack("<I", zlib.crc32(body))


def model_from_bytes(blob: bytes, predictor_digest: str | None = None) -> ProbeModel:
    if len(blob) < _HEADER.size + 4:
        raise ModelFormatError("model file truncated (no header)")
    magic, version, hlen = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise ModelFormatError(f"bad magic {magic!r}; not a model file")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model version {version} (expected {FORMAT_VERSION})")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise ModelFormatError("model file corrupt or truncated (checksum mismatch)")
    try:
        header = json.loads(body[_HEADER.size:_HEADER.size + hlen])
        n = int(header["n_samples"])
        raw = body[_HEADER.size + hlen:]
        if len(raw) != n * (N_PREDICTORS + 1) * 8:
            raise ModelFormatError("payload length does not match sample count")
        arr = np.frombuffer(raw, dtype="<f8")
        samples = arr[: n * N_PREDICTORS].reshape(n, N_PREDICTORS).astype(float)
        alpha = arr[n * N_PREDICTORS:].astype(float)
        model = ProbeModel(samples, alpha, header["mean"], header["std"], header["k"],
                           header["gamma"], header["alpha_bar"], header.get("metadata"))
    except (KeyError, ValueError, TypeError) as exc:
        raise ModelFormatError(f"malformed model header: {exc}") from exc
    if predictor_digest is not None and model.metadata.get("predictor_digest") != predictor_digest:
        model.config_mismatch = True
    return model


def save_model(model: ProbeModel, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(model_to_bytes(model))
    tmp.replace(path)


def load_model(path, predictor_digest: str | None = None) -> ProbeModel:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise ModelFormatError(f"cannot read model file {path}: {exc}") from exc
    return model_from_bytes(blob, predictor_digest)

