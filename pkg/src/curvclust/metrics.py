"""Clustering scores (NMI, ARI, ACC) and cluster-structure statistics."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

BRUTE_FORCE_MAX_K = 8
MAX_MATCH_K = 20


@dataclass(frozen=True)
class ClusteringResult:
    hard_labels: np.ndarray
    k: int

    def __post_init__(self):
        lab = np.asarray(self.hard_labels)
        if lab.size and (lab.min() < 0 or lab.max() >= self.k):
            raise ValueError(f"labels must lie in [0, {self.k})")

    @classmethod
    def from_membership(cls, pi) -> "ClusteringResult":
        pi = np.asarray(pi)
        return cls(np.argmax(pi, axis=1), pi.shape[1])


def _pair(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred)
    t = np.asarray(truth)
    if p.shape != t.shape or p.ndim != 1:
        raise ValueError(f"pred and truth must be equal-length 1-D, got {p.shape} and {t.shape}")
    return p, t


def contingency(pred, truth) -> np.ndarray:
    p, t = _pair(pred, truth)
    _, pi = np.unique(p, return_inverse=True)
    _, ti = np.unique(t, return_inverse=True)
    table = np.zeros((pi.max(initial=-1) + 1, ti.max(initial=-1) + 1), dtype=np.int64)
    np.add.at(table, (pi, ti), 1)
    return table


def _entropy(counts: np.ndarray) -> float:
    n = counts.sum()
    q = counts[counts > 0] / n
    return float(-np.sum(q * np.log(q)))


def nmi(pred, truth) -> float:
    """Mutual information over the arithmetic mean of the two entropies.

    Returns 0 when both partitions are a single cluster (or ``N == 0``).
    """
    table = contingency(pred, truth)
    n = table.sum()
    if n == 0:
        return 0.0
    hp = _entropy(table.sum(axis=1))
    ht = _entropy(table.sum(axis=0))
    denom = 0.5 * (hp + ht)
    if denom == 0:
        return 0.0
    nz = table > 0
    pij = table[nz] / n
    outer = np.outer(table.sum(axis=1), table.sum(axis=0))[nz] / (n * n)
    mi = float(np.sum(pij * np.log(pij / outer)))
    return float(min(1.0, max(0.0, mi / denom)))


def _comb2(x):
    return x * (x - 1) / 2.0


def ari(pred, truth) -> float:
    """Adjusted Rand index from pair counts of the contingency table."""
    p, _ = _pair(pred, truth)
    if p.size < 2:
        raise ValueError("ARI needs at least two points")
    table = contingency(pred, truth).astype(np.float64)
    sum_ij = _comb2(table).sum()
    sum_a = _comb2(table.sum(axis=1)).sum()
    sum_b = _comb2(table.sum(axis=0)).sum()
    total = _comb2(float(p.size))
    expected = sum_a * sum_b / total
    max_index = 0.5 * (sum_a + sum_b)
    if max_index == expected:
        return 1.0
    return float((sum_ij - expected) / (max_index - expected))


def best_matching(table: np.ndarray) -> float:
    """Largest number of points matched by a one-to-one map of rows to columns."""
    r, c = table.shape
    k = max(r, c)
    if k > MAX_MATCH_K:
        raise ValueError(f"label matching supports at most {MAX_MATCH_K} clusters, got {k}")
    square = np.zeros((k, k), dtype=np.int64)
    square[:r, :c] = table
    if k <= BRUTE_FORCE_MAX_K:
        rows = np.arange(k)
        return float(max(square[rows, list(perm)].sum() for perm in itertools.permutations(range(k))))
    ri, ci = linear_sum_assignment(square, maximize=True)
    return float(square[ri, ci].sum())


def acc(pred, truth) -> float:
    """Fraction of points correct under the best cluster-to-class bijection."""
    p, _ = _pair(pred, truth)
    if p.size == 0:
        return 0.0
    return best_matching(contingency(pred, truth)) / p.size


def cluster_density(g, hard_labels) -> float:
    """Mean over clusters with at least two nodes of ``E_k / (V_k (V_k - 1))``.

    Returns NaN when every cluster is a singleton.
    """
    lab = np.asarray(hard_labels)
    e = g.edges
    same = lab[e[:, 0]] == lab[e[:, 1]] if len(e) else np.zeros(0, dtype=bool)
    vals = []
    for k in np.unique(lab):
        v = int(np.sum(lab == k))
        if v < 2:
            continue
        ek = int(np.sum(same & (lab[e[:, 0]] == k))) if len(e) else 0
        vals.append(ek / (v * (v - 1)))
    return float(np.mean(vals)) if vals else math.nan


def cluster_entropy(hard_labels, truth) -> float:
    """Mean over clusters of the class entropy inside the cluster (natural log)."""
    table = contingency(hard_labels, truth)
    if table.size == 0:
        return 0.0
    return float(np.mean([_entropy(row) for row in table]))


def score(pred, truth) -> dict[str, float]:
    return {"nmi": nmi(pred, truth), "ari": ari(pred, truth), "acc": acc(pred, truth)}
