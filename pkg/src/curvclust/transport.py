"""Exact balanced transportation problems by the transportation simplex.

The basis is kept as a spanning tree over the ``m`` supply and ``n`` demand
nodes (``m + n - 1`` basic cells).  Potentials come from a tree walk,
the entering cell is the most negative reduced cost (lowest flat index on
ties) and the leaving cell is the first blocking cell of the pivot cycle.
After a run of degenerate pivots the pricing switches to Bland's rule, which
rules out cycling.  No randomness anywhere, so results are reproducible
bit for bit.
"""

from __future__ import annotations

from collections import deque

import numpy as np

_DEGENERATE_SWITCH = 50


class TransportInfeasible(ValueError):
    """Supplies and demands do not balance, or a cost is infinite."""


def _initial_basis(a: np.ndarray, b: np.ndarray):
    m, n = a.size, b.size
    a = a.copy()
    b = b.copy()
    x = np.zeros((m, n))
    basic = np.zeros((m, n), dtype=bool)
    i = j = 0
    while True:
        q = min(a[i], b[j])
        x[i, j] = q
        basic[i, j] = True
        a[i] -= q
        b[j] -= q
        if i == m - 1 and j == n - 1:
            break
        if i == m - 1:
            j += 1
        elif j == n - 1:
            i += 1
        elif a[i] <= b[j]:
            i += 1
        else:
            j += 1
    return x, basic


def _tree(basic: np.ndarray):
    m, n = basic.shape
    adj = [[] for _ in range(m + n)]
    for i, j in zip(*np.nonzero(basic)):
        adj[i].append(m + j)
        adj[m + j].append(i)
    return adj


def _potentials(cost: np.ndarray, adj, m: int, n: int):
    u = np.zeros(m)
    v = np.zeros(n)
    seen = np.zeros(m + n, dtype=bool)
    seen[0] = True
    queue = deque([0])
    while queue:
        node = queue.popleft()
        for other in adj[node]:
            if seen[other]:
                continue
            seen[other] = True
            if node < m:
                v[other - m] = cost[node, other - m] - u[node]
            else:
                u[other] = cost[other, node - m] - v[node - m]
            queue.append(other)
    return u, v


def _path(adj, start: int, goal: int) -> list[int]:
    parent = {start: -1}
    queue = deque([start])
    while queue:
        node = queue.popleft()
        if node == goal:
            break
        for other in adj[node]:
            if other not in parent:
                parent[other] = node
                queue.append(other)
    out = [goal]
    while out[-1] != start:
        out.append(parent[out[-1]])
    out.reverse()
    return out


def transport(supply, demand, cost, tol: float = 1e-12, max_iter: int = 100000):
    """Minimum-cost plan moving ``supply`` onto ``demand``.

    Returns ``(value, plan)`` with ``plan[i, j]`` the mass sent from supply
    ``i`` to demand ``j``.
    """
    a = np.asarray(supply, dtype=np.float64)
    b = np.asarray(demand, dtype=np.float64)
    c = np.asarray(cost, dtype=np.float64)
    m, n = a.size, b.size
    if c.shape != (m, n):
        raise ValueError(f"cost shape {c.shape} does not match ({m}, {n})")
    if np.any(a < 0) or np.any(b < 0):
        raise TransportInfeasible("negative mass")
    if abs(a.sum() - b.sum()) > 1e-9 * max(1.0, a.sum()):
        raise TransportInfeasible(f"unbalanced problem: {a.sum()} vs {b.sum()}")
    if not np.all(np.isfinite(c)):
        raise TransportInfeasible("infinite transport cost")
    if m == 0 or n == 0:
        return 0.0, np.zeros((m, n))

    x, basic = _initial_basis(a, b)
    degenerate = 0
    for _ in range(max_iter):
        adj = _tree(basic)
        u, v = _potentials(c, adj, m, n)
        red = c - u[:, None] - v[None, :]
        red[basic] = 0.0
        if degenerate >= _DEGENERATE_SWITCH:
            cand = np.flatnonzero(red < -tol)
            if cand.size == 0:
                break
            k = int(cand[0])
        else:
            k = int(np.argmin(red))
            if red.flat[k] >= -tol:
                break
        p, q = divmod(k, n)
        nodes = _path(adj, p, m + q)
        cells = []
        for t in range(len(nodes) - 1):
            r, s = nodes[t], nodes[t + 1]
            cells.append((r, s - m) if r < m else (s, r - m))
        minus = cells[0::2]
        plus = cells[1::2]
        theta = min(x[cell] for cell in minus)
        leaving = min((cell for cell in minus if x[cell] == theta), key=lambda rc: rc[0] * n + rc[1])
        for cell in minus:
            x[cell] -= theta
        for cell in plus:
            x[cell] += theta
        x[p, q] += theta
        x[leaving] = 0.0
        basic[leaving] = False
        basic[p, q] = True
        degenerate = degenerate + 1 if theta == 0 else 0
    else:
        raise RuntimeError("transportation simplex did not converge")
    np.maximum(x, 0.0, out=x)
    return float(np.sum(c * x)), x
