"""Independent reference implementations used only by the tests.

None of these import the package's own math; they are written from the
defining formulas with different numerical routes (quaternions, brute force,
dense inverses, finite differences).
"""

import math

import numpy as np
import scipy.linalg
from scipy.stats import entropy as scipy_entropy


def quat_mul(p, q):
    w1, x1, y1, z1 = p
    w2, x2, y2, z2 = q
    return np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])


def quat_to_matrix(q):
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def step_quaternion(psi):
    """Quaternion of the frame rotation for an increment ``psi``.

    A frame rotating by ``psi`` maps fixed vectors by the inverse rotation,
    i.e. the active rotation about ``psi`` by ``-|psi|``.
    """
    theta = np.linalg.norm(psi)
    if theta == 0:
        return np.array([1.0, 0.0, 0.0, 0.0])
    axis = psi / theta
    return np.r_[math.cos(theta / 2), -axis * math.sin(theta / 2)]


def quaternion_gyro(omegas, dts, C_cv=np.eye(3)):
    q = np.array([1.0, 0.0, 0.0, 0.0])
    for w, dt in zip(omegas, dts):
        q = quat_mul(step_quaternion(np.asarray(w) * dt), q)
    return C_cv @ quat_to_matrix(q) @ C_cv.T


def rotation_distance(A, B):
    """Angle of A^T B from the chord length |A - B|_F = 2 sqrt(2) sin(angle / 2)."""
    chord = np.linalg.norm(np.asarray(A) - np.asarray(B))
    return 2 * math.asin(min(1.0, chord / (2 * math.sqrt(2))))


def central_gradient(fun, x0, h=1e-6):
    x0 = np.asarray(x0, dtype=float)
    g = np.zeros_like(x0)
    for i in range(len(x0)):
        e = np.zeros_like(x0)
        e[i] = h
        g[i] = (fun(x0 + e) - fun(x0 - e)) / (2 * h)
    return g


def central_jacobian(fun, x0, h=1e-4):
    x0 = np.asarray(x0, dtype=float)
    cols = []
    for i in range(len(x0)):
        e = np.zeros_like(x0)
        e[i] = h
        cols.append((np.asarray(fun(x0 + e)) - np.asarray(fun(x0 - e))) / (2 * h))
    return np.stack(cols, axis=-1)


def ransac_count(p, eps, s):
    """Smallest N with P(at least one all-inlier draw) >= p, by counting."""
    w = (1 - eps) ** s
    if w >= 1:
        return 1
    n, miss = 0, 1.0
    while True:
        n += 1
        miss *= 1 - w
        if 1 - miss >= p - 1e-15:
            return n


def knn_scan(data, q, k):
    d = np.sqrt(((np.asarray(data) - np.asarray(q)) ** 2).sum(axis=1))
    order = sorted(range(len(d)), key=lambda i: (d[i], i))
    return np.array(order[:k])


def dense_information(G_a, R_a, G_b, R_b, C, beta):
    M = beta * (G_b @ R_b @ G_b.T + C @ G_a @ R_a @ G_a.T @ C.T)
    return scipy.linalg.inv(M)


def histogram_entropy(patch, bins=256):
    counts, _ = np.histogram(np.asarray(patch).ravel(), bins=bins, range=(0, 256))
    return float(scipy_entropy(counts[counts > 0], base=2)) if counts.sum() else 0.0


def norm_of_mean(vectors):
    v = np.asarray(vectors, dtype=float)
    return float(np.sqrt(sum(c * c for c in v.sum(axis=0) / len(v))))
