"""Soft-assignment clustering math.

Student's-t responsibilities between latent points and centroids, sharpened
target distributions (plain squared-frequency and the frequency-normalized
variant), the KL clustering loss with analytic gradients, hard-label
bookkeeping, and a deterministic K-means initializer.

Everything here is a pure float64 numpy function: no torch, no globals, no
hidden RNG state beyond explicit seeds.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError, NumericDomainError

PROB_EPS = 1e-8
ROW_SUM_TOL = 1e-6


def _as_matrix(a, name: str) -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise InvalidArgumentError(f"{name} must be a 2-D matrix, got shape {arr.shape}")
    return arr


def _centroid_values(m) -> np.ndarray:
    return m.values if isinstance(m, Centroids) else _as_matrix(m, "centroids")


@dataclass(frozen=True)
class SoftAssignment:
    """Row-stochastic N x K matrix of Student's-t cluster responsibilities.

    ``alpha`` is the degrees of freedom of the kernel that produced the rows;
    it travels with the matrix because the loss gradients depend on it.
    """

    values: np.ndarray
    alpha: float = 1.0

    def __post_init__(self):
        v = _as_matrix(self.values, "values")
        object.__setattr__(self, "values", v)
        n, k = v.shape
        if n < 1 or k < 2:
            raise InvalidArgumentError(f"need N >= 1 and K >= 2, got {v.shape}")
        if self.alpha <= 0:
            raise InvalidArgumentError(f"alpha must be positive, got {self.alpha}")
        if not np.isfinite(v).all():
            raise NumericDomainError("soft assignment contains non-finite entries")
        if (v <= 0).any() or (v > 1).any():
            raise NumericDomainError("soft assignment entries must lie in (0, 1]")
        if np.abs(v.sum(axis=1) - 1.0).max() > ROW_SUM_TOL:
            raise NumericDomainError("soft assignment rows must sum to 1")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def k(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class TargetDistribution:
    """Row-stochastic N x K self-training target, tagged with its construction."""

    values: np.ndarray
    variant: str

    def __post_init__(self):
        v = _as_matrix(self.values, "values")
        object.__setattr__(self, "values", v)
        if self.variant not in ("dec_baseline", "dvc_modified"):
            raise InvalidArgumentError(f"unknown target variant {self.variant!r}")
        if not np.isfinite(v).all():
            raise NumericDomainError("target distribution contains non-finite entries")
        if (v < 0).any() or (v > 1).any():
            raise NumericDomainError("target entries must lie in [0, 1]")
        if np.abs(v.sum(axis=1) - 1.0).max() > ROW_SUM_TOL:
            raise NumericDomainError("target rows must sum to 1")


@dataclass(frozen=True)
class Centroids:
    """K x d_z matrix of cluster centers, pairwise distinct."""

    values: np.ndarray

    def __post_init__(self):
        v = _as_matrix(self.values, "values")
        object.__setattr__(self, "values", v)
        if v.shape[0] < 2:
            raise InvalidArgumentError("need at least 2 centroids")
        if not np.isfinite(v).all():
            raise NumericDomainError("centroids contain non-finite entries")
        d2 = ((v[:, None, :] - v[None, :, :]) ** 2).sum(axis=2)
        np.fill_diagonal(d2, np.inf)
        if d2.min() <= 0.0:
            raise InvalidArgumentError("centroids must be pairwise distinct")

    @property
    def k(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class ClusterStats:
    """Per-cluster quantities feeding the frequency-normalized target.

    ``u`` are soft frequencies (column sums of Q), ``v`` the frequency
    penalties, ``n_hard`` hard counts of argmax labels floored at 1 so the
    penalty's cardinality ratio stays defined.
    """

    u: np.ndarray
    v: np.ndarray
    n_hard: np.ndarray
    gamma: float = 2.0

    def __post_init__(self):
        u = np.asarray(self.u, dtype=np.float64)
        v = np.asarray(self.v, dtype=np.float64)
        n_hard = np.asarray(self.n_hard, dtype=np.int64)
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "n_hard", n_hard)
        if not (u.shape == v.shape == n_hard.shape) or u.ndim != 1:
            raise InvalidArgumentError("u, v, n_hard must be equal-length vectors")
        if self.gamma < 0:
            raise InvalidArgumentError("gamma must be nonnegative")
        if (u <= 0).any() or not np.isfinite(u).all():
            raise NumericDomainError("soft frequencies must be positive and finite")
        if (v < 0).any() or not np.isfinite(v).all():
            raise NumericDomainError("frequency penalties must be nonnegative and finite")
        if (n_hard < 1).any():
            raise InvalidArgumentError("hard counts must be >= 1 after flooring")

    @classmethod
    def from_assignment(cls, q: SoftAssignment, labels: np.ndarray | None = None,
                        gamma: float = 2.0) -> "ClusterStats":
        """Build stats from an assignment at a target update.

        Hard counts come from the argmax labels (floored at 1 so a transiently
        empty cluster cannot zero the cardinality ratio).
        """
        if labels is None:
            labels = assign_labels(q)
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (q.n,):
            raise InvalidArgumentError("labels length must match assignment rows")
        counts = np.bincount(labels, minlength=q.k)
        n_hard = np.maximum(counts, 1)
        u = cluster_frequencies(q)
        v = frequency_penalty(q, n_hard, gamma)
        return cls(u=u, v=v, n_hard=n_hard, gamma=gamma)


def soft_assign(z, centroids, alpha: float = 1.0) -> SoftAssignment:
    """Student's-t responsibilities of each latent point for each centroid.

    q_ij = (1 + ||z_i - m_j||^2 / alpha)^(-(alpha+1)/2), row-normalized.
    """
    z = _as_matrix(z, "z")
    m = _centroid_values(centroids)
    if alpha <= 0:
        raise InvalidArgumentError(f"alpha must be positive, got {alpha}")
    if z.shape[1] != m.shape[1]:
        raise InvalidArgumentError(
            f"latent dim mismatch: points have {z.shape[1]}, centroids {m.shape[1]}")
    if m.shape[0] < 2:
        raise InvalidArgumentError("need at least 2 centroids")
    if not (np.isfinite(z).all() and np.isfinite(m).all()):
        raise NumericDomainError("non-finite inputs to soft_assign")
    d2 = ((z[:, None, :] - m[None, :, :]) ** 2).sum(axis=2)
    s = (1.0 + d2 / alpha) ** (-(alpha + 1.0) / 2.0)
    q = s / s.sum(axis=1, keepdims=True)
    return SoftAssignment(q, alpha=alpha)


def cluster_frequencies(q: SoftAssignment) -> np.ndarray:
    """Soft cluster frequencies u_j: column sums of the assignment."""
    return q.values.sum(axis=0)


def frequency_penalty(q: SoftAssignment, n_hard, gamma: float = 2.0) -> np.ndarray:
    """Per-cluster frequency penalty.

    v_j = sum_i sqrt( (sum_k N_k / N_j) * (1 - q_ij)^gamma * (-log q_ij) )

    Down-weights confident assignments and inflates the penalty for small
    clusters through the cardinality ratio.
    """
    if gamma < 0:
        raise InvalidArgumentError("gamma must be nonnegative")
    n_hard = np.asarray(n_hard, dtype=np.int64)
    if n_hard.shape != (q.k,):
        raise InvalidArgumentError(f"n_hard must have length K={q.k}")
    if (n_hard < 1).any():
        raise InvalidArgumentError("hard counts must be >= 1")
    qv = np.clip(q.values, PROB_EPS, 1.0 - PROB_EPS)
    if not np.isfinite(qv).all() or (qv <= 0).any() or (qv >= 1).any():
        raise NumericDomainError("assignment entries outside (0, 1) after clamping")
    ratio = n_hard.sum() / n_hard.astype(np.float64)
    inner = ratio[None, :] * (1.0 - qv) ** gamma * (-np.log(qv))
    return np.sqrt(inner).sum(axis=0)


def modified_target(q: SoftAssignment, stats: ClusterStats) -> TargetDistribution:
    """Frequency-normalized sharpened target: raw_ij = q_ij^2 / (u_j + v_j), rows renormalized."""
    if stats.u.shape != (q.k,):
        raise InvalidArgumentError("stats dimensionality does not match assignment")
    denom = stats.u + stats.v
    if (denom <= 0).any():
        raise InvalidArgumentError("u_j + v_j must be positive for every cluster")
    raw = q.values ** 2 / denom[None, :]
    row_sums = raw.sum(axis=1)
    if (row_sums <= 0).any() or not np.isfinite(row_sums).all():
        raise NumericDomainError("target row vanished after squaring")
    return TargetDistribution(raw / row_sums[:, None], variant="dvc_modified")


def dec_baseline_target(q: SoftAssignment) -> TargetDistribution:
    """Plain sharpened target: raw_ij = q_ij^2 / u_j, rows renormalized."""
    u = cluster_frequencies(q)
    raw = q.values ** 2 / u[None, :]
    row_sums = raw.sum(axis=1)
    if (row_sums <= 0).any() or not np.isfinite(row_sums).all():
        raise NumericDomainError("target row vanished after squaring")
    return TargetDistribution(raw / row_sums[:, None], variant="dec_baseline")


def kl_clustering_loss(p: TargetDistribution, q: SoftAssignment) -> float:
    """KL(P || Q) summed over all samples and clusters, with 0 log 0 = 0."""
    pv, qv = p.values, q.values
    if pv.shape != qv.shape:
        raise InvalidArgumentError(f"shape mismatch: P {pv.shape} vs Q {qv.shape}")
    mask = pv > 0
    contrib = np.zeros_like(pv)
    contrib[mask] = pv[mask] * (np.log(pv[mask]) - np.log(qv[mask]))
    total = float(contrib.sum())
    if -1e-12 < total < 0.0:
        total = 0.0
    return total


def cluster_loss_gradients(q: SoftAssignment, p: TargetDistribution, z,
                           centroids) -> tuple[np.ndarray, np.ndarray]:
    """Analytic gradients of the KL clustering loss w.r.t. points and centroids.

    P is treated as a constant. For the Student's-t kernel,

        dL/dz_i =  (a+1)/a * sum_j (p_ij - q_ij) (z_i - m_j) / (1 + ||z_i - m_j||^2 / a)
        dL/dm_j = -(a+1)/a * sum_i (p_ij - q_ij) (z_i - m_j) / (1 + ||z_i - m_j||^2 / a)
    """
    z = _as_matrix(z, "z")
    m = _centroid_values(centroids)
    if p.values.shape != q.values.shape:
        raise InvalidArgumentError("P and Q shapes differ")
    if z.shape[0] != q.n or m.shape[0] != q.k or z.shape[1] != m.shape[1]:
        raise InvalidArgumentError("z/centroid shapes inconsistent with assignment")
    alpha = q.alpha
    diff = z[:, None, :] - m[None, :, :]
    d2 = (diff ** 2).sum(axis=2)
    w = ((alpha + 1.0) / alpha) * (p.values - q.values) / (1.0 + d2 / alpha)
    grad_z = (w[:, :, None] * diff).sum(axis=1)
    grad_m = -(w[:, :, None] * diff).sum(axis=0)
    return grad_z, grad_m


def assign_labels(q: SoftAssignment) -> np.ndarray:
    """Hard labels: argmax over clusters, ties broken by the lowest index."""
    return np.argmax(q.values, axis=1).astype(np.int64)


def label_change_fraction(prev, curr) -> float:
    """Fraction of positions whose label differs between two assignments."""
    prev = np.asarray(prev)
    curr = np.asarray(curr)
    if prev.shape != curr.shape or prev.ndim != 1:
        raise InvalidArgumentError(
            f"label vectors must have equal length, got {prev.shape} vs {curr.shape}")
    return float(np.mean(prev != curr))


def kmeans(z, k: int, seed: int = 0, restarts: int = 20,
           max_iter: int = 300) -> tuple[Centroids, np.ndarray]:
    """Lloyd's algorithm with distance-weighted seeding, best of ``restarts`` by WCSS.

    Deterministic given the seed. An emptied cluster is re-seeded from the
    point farthest from its assigned center.
    """
    z = _as_matrix(z, "z")
    n = z.shape[0]
    if k < 2:
        raise InvalidArgumentError("need K >= 2")
    if restarts < 1:
        raise InvalidArgumentError("need at least one restart")
    if n < k:
        raise InvalidArgumentError(f"cannot place {k} centroids on {n} points")
    if not np.isfinite(z).all():
        raise NumericDomainError("non-finite inputs to kmeans")
    rng = np.random.default_rng(seed)
    best_wcss = np.inf
    best = None
    for _ in range(restarts):
        centers = _weighted_seed(z, k, rng)
        centers, labels, wcss = _lloyd(z, centers, max_iter)
        if wcss < best_wcss:
            best_wcss = wcss
            best = (centers, labels)
    centers, labels = best
    return Centroids(centers), labels


def _weighted_seed(z: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Distance-weighted (k-means++ style) choice of k initial centers."""
    n = z.shape[0]
    centers = np.empty((k, z.shape[1]), dtype=np.float64)
    idx = int(rng.integers(n))
    centers[0] = z[idx]
    d2 = ((z - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total > 0:
            probs = d2 / total
            idx = int(rng.choice(n, p=probs))
        else:
            idx = int(rng.integers(n))
        centers[j] = z[idx]
        d2 = np.minimum(d2, ((z - centers[j]) ** 2).sum(axis=1))
    return centers


def _lloyd(z: np.ndarray, centers: np.ndarray,
           max_iter: int) -> tuple[np.ndarray, np.ndarray, float]:
    n, k = z.shape[0], centers.shape[0]
    labels = np.zeros(n, dtype=np.int64)
    for _ in range(max_iter):
        d2 = ((z[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        labels = d2.argmin(axis=1)
        point_cost = d2[np.arange(n), labels]
        for j in range(k):
            if not (labels == j).any():
                far = int(point_cost.argmax())
                centers[j] = z[far]
                labels[far] = j
                point_cost[far] = 0.0
        new_centers = np.stack([z[labels == j].mean(axis=0) for j in range(k)])
        if np.array_equal(new_centers, centers):
            break
        centers = new_centers
    d2 = ((z[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    labels = d2.argmin(axis=1)
    wcss = float(d2[np.arange(n), labels].sum())
    return centers, labels, wcss
