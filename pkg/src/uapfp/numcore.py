"""Deterministic numeric primitives shared by the rest of the package.

Everything random flows through :class:`RandomStream` (splitmix64), so a
seed reproduces the same draws on any platform.  Matrices are plain 2-D
``float64`` numpy arrays.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import special

logger = logging.getLogger(__name__)

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def _mix64(z: int) -> int:
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    return z ^ (z >> 31)


def splitmix64(x: int) -> int:
    """First output of a splitmix64 generator whose state is ``x``."""
    return _mix64((int(x) + _GAMMA) & _MASK64)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    return z ^ (z >> np.uint64(31))


class RandomStream:
    """splitmix64 stream.

    Integer draws are raw 64-bit outputs; uniform reals use the top 53 bits.
    A stream is single-owner; derive independent children with :meth:`spawn`.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self.state = self.seed

    def __repr__(self):
        return f"RandomStream(seed={self.seed}, state={self.state})"

    def next_u64(self, size: int) -> np.ndarray:
        size = int(size)
        if size < 0:
            raise ValueError("size must be non-negative")
        steps = np.arange(1, size + 1, dtype=np.uint64) * np.uint64(_GAMMA)
        with np.errstate(over="ignore"):
            states = np.uint64(self.state) + steps
            out = _mix64_array(states)
        self.state = (self.state + size * _GAMMA) & _MASK64
        return out

    def uniform(self, size: int) -> np.ndarray:
        """Reals in [0, 1) with 53-bit resolution."""
        return (self.next_u64(size) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def normal(self, size: int) -> np.ndarray:
        """Standard normal draws via Box-Muller (two uniforms per pair)."""
        half = (int(size) + 1) // 2
        u = self.uniform(2 * half)
        u1 = 1.0 - u[:half]  # (0, 1]
        u2 = u[half:]
        rad = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([rad * np.cos(2 * np.pi * u2), rad * np.sin(2 * np.pi * u2)])
        return z[: int(size)]

    def integers(self, high: int, size: int) -> np.ndarray:
        if high < 1:
            raise ValueError("high must be >= 1")
        return np.minimum((self.uniform(size) * high).astype(np.int64), high - 1)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def choice(self, n: int, size: int) -> np.ndarray:
        """``size`` distinct indices from ``range(n)``."""
        if size > n:
            raise ValueError(f"cannot draw {size} distinct items from {n}")
        return self.permutation(n)[:size]

    def spawn(self, index: int) -> "RandomStream":
        return RandomStream(splitmix64(self.seed ^ (int(index) & _MASK64)))


def as_stream(rng) -> RandomStream:
    if isinstance(rng, RandomStream):
        return rng
    if rng is None:
        return RandomStream(0)
    return RandomStream(int(rng))


def check_finite_matrix(a, name: str = "matrix") -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.size == 0:
        raise ValueError(f"{name} must be a non-empty 2-D array, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        bad = np.argwhere(~np.isfinite(a))[0]
        raise ValueError(f"{name} has a non-finite entry at {tuple(int(i) for i in bad)}")
    return a


# --------------------------------------------------------------------- SVD


@dataclass(frozen=True)
class SvdResult:
    u: np.ndarray
    singular_values: np.ndarray
    vt: np.ndarray

    def rank(self, rtol: float = 1e-10) -> int:
        s = self.singular_values
        if s.size == 0 or s[0] == 0.0:
            return 0
        return int(np.sum(s > rtol * s[0]))


def _complete_orthonormal(q: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Replace columns of ``q`` not flagged in ``keep`` with an orthonormal completion."""
    m, k = q.shape
    basis = [q[:, j] for j in range(k) if keep[j]]
    out = q.copy()
    candidates = iter(np.eye(m))
    for j in range(k):
        if keep[j]:
            continue
        while True:
            e = next(candidates).copy()
            for b in basis:
                e -= (b @ e) * b
            for b in basis:  # second pass for stability
                e -= (b @ e) * b
            norm = np.linalg.norm(e)
            if norm > 1e-8:
                e /= norm
                break
        basis.append(e)
        out[:, j] = e
    return out


def _jacobi_columns(a: np.ndarray, tol: float = 1e-15, max_sweeps: int = 60):
    """One-sided (Hestenes) Jacobi on a tall matrix: returns (a @ v, v)."""
    a = a.copy()
    n = a.shape[1]
    v = np.eye(n)
    for _ in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                ap = a[:, p]
                aq = a[:, q]
                alpha = ap @ ap
                beta = aq @ aq
                gamma = ap @ aq
                if abs(gamma) <= tol * np.sqrt(alpha * beta) or gamma == 0.0:
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.copysign(1.0, zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                a[:, [p, q]] = np.column_stack([c * ap - s * aq, s * ap + c * aq])
                vp = v[:, p].copy()
                vq = v[:, q]
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
        if not rotated:
            break
    return a, v


def svd(a) -> SvdResult:
    """Thin SVD by one-sided Jacobi on the smaller Gram side.

    Returns ``u`` (m x k), descending ``singular_values`` (k) and ``vt``
    (k x n) with k = min(m, n).
    """
    a = check_finite_matrix(a, "svd input")
    m, n = a.shape
    transposed = m < n
    work = a.T if transposed else a
    b, v = _jacobi_columns(work)
    s = np.linalg.norm(b, axis=0)
    order = np.argsort(-s, kind="stable")
    s = s[order]
    b = b[:, order]
    v = v[:, order]
    scale = s[0] if s.size and s[0] > 0 else 1.0
    keep = s > 1e-13 * scale
    u = np.zeros_like(b)
    u[:, keep] = b[:, keep] / s[keep]
    if not np.all(keep):
        s = np.where(keep, s, 0.0)
        u = _complete_orthonormal(u, keep)
    if transposed:
        return SvdResult(u=v, singular_values=s, vt=u.T)
    return SvdResult(u=u, singular_values=s, vt=v.T)


# ------------------------------------------------------------------ k-means


@dataclass
class KMeansResult:
    centroids: np.ndarray
    assignments: np.ndarray
    objective_trace: list

    @property
    def objective(self) -> float:
        return self.objective_trace[-1]


def _sq_dists(points, centroids):
    d = (
        np.sum(points**2, axis=1)[:, None]
        - 2.0 * points @ centroids.T
        + np.sum(centroids**2, axis=1)[None, :]
    )
    return np.maximum(d, 0.0)


def _kmeanspp(points, k, rng: RandomStream):
    n = points.shape[0]
    first = int(rng.integers(n, 1)[0])
    idx = [first]
    closest = np.sum((points - points[first]) ** 2, axis=1)
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            # all remaining mass is zero: take the lowest unused index
            unused = np.setdiff1d(np.arange(n), idx)
            nxt = int(unused[0])
        else:
            target = rng.uniform(1)[0] * total
            nxt = int(np.searchsorted(np.cumsum(closest), target, side="right"))
            nxt = min(nxt, n - 1)
        idx.append(nxt)
        closest = np.minimum(closest, np.sum((points - points[nxt]) ** 2, axis=1))
    return points[idx].copy()


def kmeans(points, k: int, max_iters: int = 100, rng=None) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding.

    Empty clusters are reseeded with the point farthest from its current
    centroid (lowest index on ties).  ``objective_trace`` holds the
    within-cluster sum of squares after every assignment step.
    """
    points = check_finite_matrix(points, "points")
    n = points.shape[0]
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > n:
        raise ValueError(f"k={k} exceeds the number of points ({n})")
    rng = as_stream(rng)
    centroids = _kmeanspp(points, k, rng)
    d = _sq_dists(points, centroids)
    labels = np.argmin(d, axis=1)
    trace = [float(d[np.arange(n), labels].sum())]
    for _ in range(max_iters):
        new_centroids = np.empty_like(centroids)
        point_cost = d[np.arange(n), labels]
        taken = set()
        for c in range(k):
            members = labels == c
            if members.any():
                new_centroids[c] = points[members].mean(axis=0)
        for c in range(k):
            if not (labels == c).any():
                cost = point_cost.copy()
                if taken:
                    cost[list(taken)] = -1.0
                far = int(np.argmax(cost))
                taken.add(far)
                logger.debug("kmeans: reseeding empty cluster %d with point %d", c, far)
                new_centroids[c] = points[far]
        centroids = new_centroids
        d = _sq_dists(points, centroids)
        new_labels = np.argmin(d, axis=1)
        trace.append(float(d[np.arange(n), new_labels].sum()))
        if np.array_equal(new_labels, labels):
            labels = new_labels
            break
        labels = new_labels
    return KMeansResult(centroids=centroids, assignments=labels, objective_trace=trace)


# -------------------------------------------------------------- statistics


def _as_samples(x, name):
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size < 2:
        raise ValueError(f"{name} needs at least 2 samples, got {x.size}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")
    return x


def student_t_sf(t: float, df: float) -> float:
    """P(T >= t) for Student's t with ``df`` degrees of freedom."""
    if np.isinf(t):
        return 0.0 if t > 0 else 1.0
    x = df / (df + t * t)
    tail = 0.5 * special.betainc(0.5 * df, 0.5, x)
    return float(tail if t > 0 else 1.0 - tail)


def welch_statistic(a, b):
    """Welch t statistic and Welch-Satterthwaite degrees of freedom."""
    a = _as_samples(a, "a")
    b = _as_samples(b, "b")
    va = a.var(ddof=1) / a.size
    vb = b.var(ddof=1) / b.size
    se2 = va + vb
    diff = a.mean() - b.mean()
    if se2 == 0.0:
        return (0.0 if diff == 0 else np.copysign(np.inf, diff)), np.nan
    t = diff / np.sqrt(se2)
    df = se2**2 / (va**2 / (a.size - 1) + vb**2 / (b.size - 1))
    return float(t), float(df)


def welch_ttest_one_sided(a, b) -> float:
    """p-value for H0: mean(a) < mean(b) with Welch's unequal-variance test.

    A small p supports mean(a) >= mean(b).
    """
    t, df = welch_statistic(a, b)
    if np.isnan(df):
        if t == 0.0:
            logger.warning("welch test: both samples have zero variance and equal means; p=0.5")
            return 0.5
        logger.warning("welch test: zero variance in both samples; p is degenerate")
        return 0.0 if t > 0 else 1.0
    return student_t_sf(t, df)


def auc(positive_scores, negative_scores) -> float:
    """P(pos > neg) + 0.5 P(pos == neg) over all pairs."""
    pos = np.asarray(positive_scores, dtype=np.float64).ravel()
    neg = np.sort(np.asarray(negative_scores, dtype=np.float64).ravel())
    if pos.size == 0 or neg.size == 0:
        raise ValueError("auc needs non-empty positive and negative score lists")
    below = np.searchsorted(neg, pos, side="left")
    at_or_below = np.searchsorted(neg, pos, side="right")
    wins2 = int(2 * below.sum() + (at_or_below - below).sum())
    return wins2 / (2.0 * pos.size * neg.size)


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine is undefined for a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def cosine_rows(a, b) -> np.ndarray:
    """Row-wise cosine between two equally shaped matrices."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    if np.any(na == 0) or np.any(nb == 0):
        raise ValueError("cosine is undefined for a zero vector")
    return np.clip(np.sum(a * b, axis=1) / (na * nb), -1.0, 1.0)
