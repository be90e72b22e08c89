"""Attributed undirected graphs: loading, validation, hop distances.

On-disk layout (all indices zero-based):

* ``edges.tsv``   -- one ``src<TAB>dst`` integer pair per line
* ``features.csv`` -- ``N`` rows of ``F`` comma-separated reals
* ``labels.csv``  -- ``N`` lines, one integer class id each (optional)

Edges are symmetrised and deduplicated; self-loops are dropped.
"""

from __future__ import annotations

import csv
import hashlib
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

INF = math.inf


class GraphFormatError(ValueError):
    """A data file could not be parsed; carries the offending line number."""

    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.path = str(path)
        self.line = line


class GraphValidationError(ValueError):
    """Parsed data is inconsistent (bad endpoint, row-count mismatch, ...)."""


@dataclass(frozen=True, eq=False)
class Graph:
    """Immutable undirected attributed graph.

    ``edges`` is an ``(E, 2)`` int array with ``src < dst``, sorted
    lexicographically.  ``neighbors[i]`` is a sorted int array.
    """

    num_nodes: int
    edges: np.ndarray
    features: np.ndarray
    labels: np.ndarray | None = None
    neighbors: tuple = field(repr=False, default=())
    degrees: np.ndarray = field(repr=False, default=None)

    @classmethod
    def from_edges(cls, num_nodes: int, edges, features, labels=None) -> "Graph":
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2:
            raise GraphValidationError("features must be a 2-D matrix")
        if features.shape[0] != num_nodes:
            raise GraphValidationError(
                f"feature rows ({features.shape[0]}) != num_nodes ({num_nodes})")
        e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if e.size and (e.min() < 0 or e.max() >= num_nodes):
            bad = e[(e < 0).any(1) | (e >= num_nodes).any(1)][0]
            raise GraphValidationError(
                f"edge ({bad[0]}, {bad[1]}) has an endpoint outside [0, {num_nodes})")
        e = e[e[:, 0] != e[:, 1]]
        e = np.sort(e, axis=1)
        e = np.unique(e, axis=0) if e.size else np.zeros((0, 2), dtype=np.int64)
        if labels is not None:
            labels = np.asarray(labels, dtype=np.int64)
            if labels.shape != (num_nodes,):
                raise GraphValidationError(
                    f"label count ({labels.shape[0]}) != num_nodes ({num_nodes})")
        nbrs = [[] for _ in range(num_nodes)]
        for a, b in e:
            nbrs[a].append(b)
            nbrs[b].append(a)
        neighbors = tuple(np.array(sorted(n), dtype=np.int64) for n in nbrs)
        degrees = np.array([len(n) for n in neighbors], dtype=np.int64)
        for arr in (e, features, degrees):
            arr.setflags(write=False)
        if labels is not None:
            labels.setflags(write=False)
        return cls(num_nodes, e, features, labels, neighbors, degrees)

    @property
    def num_edges(self) -> int:
        return int(self.edges.shape[0])

    def has_edge(self, i: int, j: int) -> bool:
        n = self.neighbors[i]
        k = np.searchsorted(n, j)
        return bool(k < len(n) and n[k] == j)

    def content_hash(self) -> str:
        """SHA-256 over node count and edge list (features excluded)."""
        h = hashlib.sha256()
        h.update(np.int64(self.num_nodes).tobytes())
        h.update(np.ascontiguousarray(self.edges, dtype=np.int64).tobytes())
        return h.hexdigest()

    def row_normalized(self) -> "Graph":
        """Copy whose feature rows sum to one (all-zero rows left as is)."""
        s = self.features.sum(axis=1, keepdims=True)
        x = self.features / np.where(s == 0, 1.0, s)
        return Graph.from_edges(self.num_nodes, self.edges, x, self.labels)


def _check_node(g: Graph, i: int) -> None:
    if not (0 <= i < g.num_nodes):
        raise GraphValidationError(f"node {i} outside [0, {g.num_nodes})")


def shortest_hop_distance(g: Graph, i: int, j: int) -> float:
    """BFS hop count between ``i`` and ``j``; ``math.inf`` when disconnected."""
    _check_node(g, i)
    _check_node(g, j)
    if i == j:
        return 0
    seen = {i}
    frontier = deque([(i, 0)])
    while frontier:
        u, d = frontier.popleft()
        for v in g.neighbors[u]:
            v = int(v)
            if v == j:
                return d + 1
            if v not in seen:
                seen.add(v)
                frontier.append((v, d + 1))
    return INF


def bfs_distances(g: Graph, source: int, max_depth: int | None = None) -> dict[int, int]:
    """Hop distances from ``source`` to every node within ``max_depth``."""
    dist = {source: 0}
    frontier = deque([source])
    while frontier:
        u = frontier.popleft()
        du = dist[u]
        if max_depth is not None and du >= max_depth:
            continue
        for v in g.neighbors[u]:
            v = int(v)
            if v not in dist:
                dist[v] = du + 1
                frontier.append(v)
    return dist


# ---------------------------------------------------------------- file io

def _read_edges(path) -> list[tuple[int, int]]:
    out = []
    with open(path) as fh:
        for ln, line in enumerate(fh, start=1):
            s = line.strip()
            if not s:
                continue
            parts = s.split("\t")
            if len(parts) != 2:
                raise GraphFormatError(path, ln, f"expected 2 tab-separated fields, got {len(parts)}")
            try:
                out.append((int(parts[0]), int(parts[1])))
            except ValueError:
                raise GraphFormatError(path, ln, f"non-integer node id in {s!r}") from None
    return out


def _read_features(path) -> np.ndarray:
    rows = []
    with open(path, newline="") as fh:
        for ln, rec in enumerate(csv.reader(fh), start=1):
            if not rec:
                continue
            try:
                rows.append([float(v) for v in rec])
            except ValueError:
                raise GraphFormatError(path, ln, "non-numeric feature value") from None
            if len(rows[-1]) != len(rows[0]):
                raise GraphFormatError(path, ln, f"expected {len(rows[0])} columns, got {len(rows[-1])}")
    if not rows:
        raise GraphFormatError(path, 1, "feature file is empty")
    return np.array(rows, dtype=np.float64)


def _read_labels(path) -> np.ndarray:
    out = []
    with open(path) as fh:
        for ln, line in enumerate(fh, start=1):
            s = line.strip()
            if not s:
                continue
            try:
                out.append(int(s))
            except ValueError:
                raise GraphFormatError(path, ln, f"non-integer label {s!r}") from None
    return np.array(out, dtype=np.int64)


def load_graph(edge_path, feature_path, label_path=None, normalize_features: bool = False) -> Graph:
    """Load and validate a graph from TSV/CSV files."""
    features = _read_features(feature_path)
    edges = _read_edges(edge_path)
    labels = _read_labels(label_path) if label_path is not None else None
    g = Graph.from_edges(features.shape[0], edges, features, labels)
    return g.row_normalized() if normalize_features else g


def save_graph(g: Graph, edge_path, feature_path, label_path=None) -> None:
    with open(edge_path, "w") as fh:
        for a, b in g.edges:
            fh.write(f"{a}\t{b}\n")
    with open(feature_path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in g.features:
            w.writerow([repr(float(v)) for v in row])
    if label_path is not None and g.labels is not None:
        with open(label_path, "w") as fh:
            fh.writelines(f"{int(y)}\n" for y in g.labels)


def convert_planetoid_raw(content_path, cites_path, out_dir) -> Graph:
    """Convert the raw ``<name>.content`` / ``<name>.cites`` distribution of
    Cora or Citeseer into ``edges.tsv``, ``features.csv`` and ``labels.csv``.

    Document ids are renumbered in file order, class names in sorted order.
    Citations that reference documents missing from the content file are dropped.
    """
    ids, feats, names = [], [], []
    with open(content_path) as fh:
        for line in fh:
            parts = line.strip().split("\t")
            if len(parts) < 3:
                continue
            ids.append(parts[0])
            feats.append([float(v) for v in parts[1:-1]])
            names.append(parts[-1])
    index = {pid: k for k, pid in enumerate(ids)}
    classes = {c: k for k, c in enumerate(sorted(set(names)))}
    edges = []
    with open(cites_path) as fh:
        for line in fh:
            parts = line.strip().split()
            if len(parts) == 2 and parts[0] in index and parts[1] in index:
                edges.append((index[parts[0]], index[parts[1]]))
    g = Graph.from_edges(len(ids), edges, np.array(feats), [classes[c] for c in names])
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_graph(g, out / "edges.tsv", out / "features.csv", out / "labels.csv")
    return g


def stochastic_block_model(sizes, p_in: float, p_out: float, feature_dim: int = 16,
                           feature_shift: float = 3.0, feature_noise: float = 1.0,
                           seed: int = 0) -> Graph:
    """Planted-partition graph with class-shifted Gaussian node features.

    Block ``b`` gets features ``N(feature_shift * e_b, feature_noise^2 I)``
    (``e_b`` the ``b``-th unit vector, cycling when blocks outnumber dims).
    """
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(len(sizes)), sizes)
    n = int(labels.size)
    same = labels[:, None] == labels[None, :]
    prob = np.where(same, p_in, p_out)
    upper = np.triu(rng.random((n, n)) < prob, k=1)
    edges = np.argwhere(upper)
    means = np.zeros((len(sizes), feature_dim))
    for b in range(len(sizes)):
        means[b, b % feature_dim] = feature_shift
    x = means[labels] + feature_noise * rng.standard_normal((n, feature_dim))
    return Graph.from_edges(n, edges, x, labels)
