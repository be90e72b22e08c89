"""Ollivier-Ricci curvature of edges and nodes.

Each node ``i`` carries the lazy one-hop measure ``m_i``: mass ``lam`` on
``i`` and ``(1 - lam) / deg(i)`` on every neighbour.  The curvature of an
edge is ``1 - W1(m_i, m_j)`` where ``W1`` is the exact optimal-transport
cost under hop distance; a node's curvature is the mean over its edges.
"""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .graph import Graph, GraphValidationError, bfs_distances
from .transport import TransportInfeasible, transport

log = logging.getLogger(__name__)

CACHE_VERSION = 1


class EmptyNeighborhoodError(ValueError):
    """The node has no neighbours, so its mass distribution is undefined."""


@dataclass(frozen=True)
class MassDistribution:
    support: np.ndarray
    mass: np.ndarray


def mass_distribution(g: Graph, i: int, lam: float) -> MassDistribution:
    if not 0.0 <= lam < 1.0:
        raise ValueError(f"lambda must lie in [0, 1), got {lam}")
    deg = int(g.degrees[i])
    if deg == 0:
        raise EmptyNeighborhoodError(f"node {i} is isolated")
    support = np.concatenate([[i], g.neighbors[i]]).astype(np.int64)
    mass = np.full(deg + 1, (1.0 - lam) / deg)
    mass[0] = lam
    return MassDistribution(support, mass)


def wasserstein(g: Graph, a: MassDistribution, b: MassDistribution,
                max_depth: int | None = None) -> float:
    """Exact W1 between two measures under shortest-hop ground cost."""
    cost = np.empty((a.support.size, b.support.size))
    for r, src in enumerate(a.support):
        dist = bfs_distances(g, int(src), max_depth)
        for s, dst in enumerate(b.support):
            d = dist.get(int(dst))
            if d is None:
                raise TransportInfeasible(f"node {dst} unreachable from {src}")
            cost[r, s] = d
    return transport(a.mass, b.mass, cost)[0]


def _adjacency(g: Graph) -> sp.csr_matrix:
    e = g.edges
    data = np.ones(2 * len(e))
    rows = np.concatenate([e[:, 0], e[:, 1]])
    cols = np.concatenate([e[:, 1], e[:, 0]])
    return sp.csr_matrix((data, (rows, cols)), shape=(g.num_nodes, g.num_nodes))


def _support_costs(adj: sp.csr_matrix, si: np.ndarray, sj: np.ndarray) -> np.ndarray:
    """Hop distances between the two closed neighbourhoods of an edge.

    Every such pair is at most 3 hops apart, so one- and two-hop
    reachability determine the matrix exactly.
    """
    rows = adj[si]
    one = rows[:, sj].toarray() > 0
    two = (rows @ adj[:, sj]).toarray() > 0
    cost = np.full((si.size, sj.size), 3.0)
    cost[two] = 2.0
    cost[one] = 1.0
    cost[si[:, None] == sj[None, :]] = 0.0
    return cost


def _edge_curvature(g: Graph, adj, i: int, j: int, lam: float) -> float:
    mi = mass_distribution(g, i, lam)
    mj = mass_distribution(g, j, lam)
    cost = _support_costs(adj, mi.support, mj.support)
    return 1.0 - transport(mi.mass, mj.mass, cost)[0]


def edge_ricci(g: Graph, i: int, j: int, lam: float = 0.5) -> float:
    """Curvature ``1 - W1(m_i, m_j) / d(i, j)`` of an existing edge (``d = 1``)."""
    if not g.has_edge(i, j):
        raise GraphValidationError(f"({i}, {j}) is not an edge")
    return _edge_curvature(g, _adjacency(g), i, j, lam)


@dataclass
class RicciTable:
    """Per-edge curvature aligned with ``edges`` and per-node means.

    ``node_values`` is NaN for isolated nodes.
    """

    edges: np.ndarray
    edge_values: np.ndarray
    node_values: np.ndarray
    lam: float
    graph_hash: str = ""

    @property
    def num_nodes(self) -> int:
        return int(self.node_values.size)

    @property
    def node_mask(self) -> np.ndarray:
        return ~np.isnan(self.node_values)

    def edge(self, i: int, j: int) -> float:
        a, b = min(i, j), max(i, j)
        k = np.flatnonzero((self.edges[:, 0] == a) & (self.edges[:, 1] == b))
        if k.size == 0:
            raise KeyError((i, j))
        return float(self.edge_values[k[0]])

    def node(self, i: int) -> float | None:
        v = self.node_values[i]
        return None if np.isnan(v) else float(v)

    def as_dicts(self) -> tuple[dict, dict]:
        edge = {(int(a), int(b)): float(v) for (a, b), v in zip(self.edges, self.edge_values)}
        node = {i: float(v) for i, v in enumerate(self.node_values) if not np.isnan(v)}
        return edge, node

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            np.savez(fh, version=CACHE_VERSION, graph_hash=self.graph_hash, lam=self.lam,
                     edges=self.edges, edge_values=self.edge_values, node_values=self.node_values)

    @classmethod
    def load(cls, path) -> "RicciTable":
        with np.load(path, allow_pickle=False) as z:
            if int(z["version"]) != CACHE_VERSION:
                raise ValueError(f"unsupported curvature cache version {int(z['version'])}")
            return cls(z["edges"], z["edge_values"], z["node_values"], float(z["lam"]),
                       str(z["graph_hash"]))

    def to_csv(self, edge_path, node_path=None) -> None:
        with open(edge_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["src", "dst", "ricci"])
            for (a, b), v in zip(self.edges, self.edge_values):
                w.writerow([int(a), int(b), repr(float(v))])
        if node_path is not None:
            with open(node_path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["node", "ricci"])
                for i, v in enumerate(self.node_values):
                    if not np.isnan(v):
                        w.writerow([i, repr(float(v))])


def _curvature_chunk(args) -> np.ndarray:
    g, edges, lam = args
    adj = _adjacency(g)
    return np.array([_edge_curvature(g, adj, int(a), int(b), lam) for a, b in edges])


def compute_ricci_table(g: Graph, lam: float = 0.5, workers: int = 1) -> RicciTable:
    """Curvature of every edge and node of ``g``.

    With ``workers > 1`` edges are split into contiguous chunks solved in
    separate processes and concatenated in edge order, so the result does
    not depend on the worker count.
    """
    if not 0.0 <= lam < 1.0:
        raise ValueError(f"lambda must lie in [0, 1), got {lam}")
    edges = g.edges
    if workers > 1 and len(edges) > workers:
        chunks = np.array_split(edges, workers)
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_curvature_chunk, [(g, c, lam) for c in chunks]))
        values = np.concatenate(parts)
    else:
        values = _curvature_chunk((g, edges, lam)) if len(edges) else np.zeros(0)
    sums = np.zeros(g.num_nodes)
    np.add.at(sums, edges[:, 0], values)
    np.add.at(sums, edges[:, 1], values)
    deg = g.degrees.astype(np.float64)
    node = np.full(g.num_nodes, np.nan)
    nz = deg > 0
    node[nz] = sums[nz] / deg[nz]
    return RicciTable(edges.copy(), values, node, float(lam), g.content_hash())


def load_or_compute(g: Graph, lam: float, cache_path=None, workers: int = 1) -> RicciTable:
    """Reuse a cached table when its graph hash and lambda match, else recompute."""
    if cache_path is not None and Path(cache_path).exists():
        try:
            table = RicciTable.load(cache_path)
            if table.graph_hash == g.content_hash() and table.lam == float(lam):
                return table
            log.info("curvature cache %s is stale; recomputing", cache_path)
        except (OSError, ValueError, KeyError) as exc:
            log.warning("ignoring unreadable curvature cache %s: %s", cache_path, exc)
    table = compute_ricci_table(g, lam, workers)
    if cache_path is not None:
        table.save(cache_path)
    return table
