"""Clustering evaluation: accuracy under optimal matching, NMI, ARI.

All three are computed from a value-indexed contingency table so the
conventions at degenerate partitions are explicit and test-pinned.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import InvalidArgumentError


@dataclass(frozen=True)
class ContingencyTable:
    """counts[r][c] = number of samples with true class r and predicted cluster c."""

    counts: np.ndarray
    n: int


def _check_labels(y_true, y_pred) -> tuple[np.ndarray, np.ndarray]:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.ndim != 1 or y_true.shape != y_pred.shape:
        raise InvalidArgumentError(
            f"label vectors must be 1-D and equal length, got {y_true.shape} vs {y_pred.shape}")
    if y_true.size < 1:
        raise InvalidArgumentError("need at least one sample")
    if (y_true < 0).any() or (y_pred < 0).any():
        raise InvalidArgumentError("labels must be nonnegative integers")
    return y_true, y_pred


def contingency(y_true, y_pred) -> ContingencyTable:
    """Dense contingency table indexed by label value."""
    y_true, y_pred = _check_labels(y_true, y_pred)
    rows = int(y_true.max()) + 1
    cols = int(y_pred.max()) + 1
    counts = np.zeros((rows, cols), dtype=np.int64)
    np.add.at(counts, (y_true, y_pred), 1)
    return ContingencyTable(counts=counts, n=int(y_true.size))


def hungarian_match(cost) -> np.ndarray:
    """Column permutation minimizing the total cost of a square matrix.

    Returns ``perm`` with ``perm[r]`` the column matched to row r.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise InvalidArgumentError(f"cost matrix must be square, got {cost.shape}")
    if not np.isfinite(cost).all():
        raise InvalidArgumentError("cost matrix must be finite")
    row_ind, col_ind = linear_sum_assignment(cost)
    perm = np.empty(cost.shape[0], dtype=np.int64)
    perm[row_ind] = col_ind
    return perm


def clustering_accuracy(y_true, y_pred) -> float:
    """Best fraction of agreeing samples over all cluster-to-class matchings."""
    table = contingency(y_true, y_pred)
    counts = table.counts
    size = max(counts.shape)
    padded = np.zeros((size, size), dtype=np.int64)
    padded[: counts.shape[0], : counts.shape[1]] = counts
    perm = hungarian_match(-padded.astype(np.float64))
    matched = padded[np.arange(size), perm].sum()
    return float(matched) / table.n


def _entropy(marginal: np.ndarray, n: int) -> float:
    p = marginal[marginal > 0] / n
    return float(-(p * np.log(p)).sum())


def nmi(y_true, y_pred) -> float:
    """Normalized mutual information with geometric-mean normalization.

    Two single-block partitions count as identical (1.0); if exactly one side
    is a single block the score is 0 by convention.
    """
    table = contingency(y_true, y_pred)
    counts, n = table.counts, table.n
    h_true = _entropy(counts.sum(axis=1), n)
    h_pred = _entropy(counts.sum(axis=0), n)
    if h_true == 0.0 and h_pred == 0.0:
        return 1.0
    if h_true == 0.0 or h_pred == 0.0:
        return 0.0
    pij = counts / n
    pi = counts.sum(axis=1) / n
    pj = counts.sum(axis=0) / n
    mask = pij > 0
    outer = pi[:, None] * pj[None, :]
    info = float((pij[mask] * np.log(pij[mask] / outer[mask])).sum())
    return min(max(info / math.sqrt(h_true * h_pred), 0.0), 1.0)


def ari(y_true, y_pred) -> float:
    """Adjusted Rand index by pair counting; 1.0 for identical partitions."""
    table = contingency(y_true, y_pred)
    counts = table.counts

    def comb2(x: np.ndarray) -> np.ndarray:
        return x * (x - 1) // 2

    index = int(comb2(counts).sum())
    sum_rows = int(comb2(counts.sum(axis=1)).sum())
    sum_cols = int(comb2(counts.sum(axis=0)).sum())
    total_pairs = table.n * (table.n - 1) // 2
    if total_pairs == 0:
        return 1.0
    expected = sum_rows * sum_cols / total_pairs
    max_index = (sum_rows + sum_cols) / 2.0
    if max_index == expected:
        return 1.0
    return (index - expected) / (max_index - expected)
