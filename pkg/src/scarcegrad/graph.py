"""Undirected graphs: supports, weights, Laplacians and hop distances."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .tensor import ContractError

INF = math.inf


@dataclass(frozen=True)
class SupportPattern:
    """Set of optimizable unordered pairs ``{i, j}``, stored with ``i < j``.

    ``edges`` is an ``(m, 2)`` int array sorted lexicographically.
    """

    n: int
    edges: np.ndarray = field(repr=False)

    def __post_init__(self):
        e = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if e.size and (e.min() < 0 or e.max() >= self.n):
            raise ContractError(f"edge endpoint outside 0..{self.n - 1}")
        if np.any(e[:, 0] == e[:, 1]):
            raise ContractError("self-loops are not allowed in a support")
        e = np.sort(e, axis=1)
        e = np.unique(e, axis=0)
        e.setflags(write=False)
        object.__setattr__(self, "edges", e)

    @classmethod
    def from_pairs(cls, n: int, pairs: Iterable[Sequence[int]]) -> "SupportPattern":
        """Build from arbitrary pairs; self-loops and duplicates are dropped."""
        e = np.asarray(list(pairs), dtype=np.int64).reshape(-1, 2)
        e = e[e[:, 0] != e[:, 1]]
        return cls(n, e)

    @classmethod
    def from_adjacency(cls, A: np.ndarray) -> "SupportPattern":
        A = np.asarray(A)
        i, j = np.nonzero(np.triu(A != 0, k=1) | np.triu(A.T != 0, k=1))
        return cls(A.shape[0], np.stack([i, j], axis=1))

    @property
    def m(self) -> int:
        return len(self.edges)

    @property
    def rows(self) -> np.ndarray:
        return self.edges[:, 0]

    @property
    def cols(self) -> np.ndarray:
        return self.edges[:, 1]

    def neighbors(self) -> list[list[int]]:
        adj: list[list[int]] = [[] for _ in range(self.n)]
        for i, j in self.edges.tolist():
            adj[i].append(j)
            adj[j].append(i)
        return adj

    def indicator(self) -> np.ndarray:
        """0/1 symmetric matrix of the pattern."""
        M = np.zeros((self.n, self.n))
        M[self.rows, self.cols] = 1.0
        M[self.cols, self.rows] = 1.0
        return M

    def pair_set(self) -> set[tuple[int, int]]:
        return set(map(tuple, self.edges.tolist()))

    def issubset(self, other: "SupportPattern") -> bool:
        return self.n == other.n and self.pair_set() <= other.pair_set()

    def components(self) -> np.ndarray:
        """Connected-component label per node."""
        label = -np.ones(self.n, dtype=np.int64)
        adj = self.neighbors()
        current = 0
        for s in range(self.n):
            if label[s] >= 0:
                continue
            label[s] = current
            queue = deque([s])
            while queue:
                u = queue.popleft()
                for v in adj[u]:
                    if label[v] < 0:
                        label[v] = current
                        queue.append(v)
            current += 1
        return label

    def is_connected(self) -> bool:
        return self.n <= 1 or bool(np.all(self.components() == 0))


@dataclass(frozen=True)
class WeightedGraph:
    """One nonnegative weight per support edge; adjacency is symmetric by construction."""

    support: SupportPattern
    weights: np.ndarray = field(repr=False)

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64).reshape(-1)
        if len(w) != self.support.m:
            raise ContractError(f"{len(w)} weights for {self.support.m} edges")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @classmethod
    def from_adjacency(cls, A: np.ndarray) -> "WeightedGraph":
        A = np.asarray(A, dtype=np.float64)
        if not np.array_equal(A, A.T):
            raise ContractError("adjacency must be symmetric")
        s = SupportPattern.from_adjacency(A)
        return cls(s, A[s.rows, s.cols])

    @property
    def n(self) -> int:
        return self.support.n

    @property
    def n_edges(self) -> int:
        return self.support.m

    def adjacency(self) -> np.ndarray:
        A = np.zeros((self.n, self.n))
        A[self.support.rows, self.support.cols] = self.weights
        A[self.support.cols, self.support.rows] = self.weights
        return A


@dataclass(frozen=True)
class NodeSplit:
    train: np.ndarray
    outer: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def __post_init__(self):
        parts = {}
        for name in ("train", "outer", "val", "test"):
            arr = np.asarray(getattr(self, name), dtype=np.int64).reshape(-1)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
            parts[name] = arr
        if len(self.train) == 0 or len(self.outer) == 0:
            raise ContractError("train and outer node sets must be nonempty")
        seen: set[int] = set()
        for name, arr in parts.items():
            s = set(arr.tolist())
            if len(s) != len(arr) or s & seen:
                raise ContractError(f"node split is not disjoint ({name})")
            seen |= s

    def subset(self, name: str) -> np.ndarray:
        key = {"tr": "train", "out": "outer"}.get(name, name)
        return getattr(self, key)

    def labelled(self) -> np.ndarray:
        return np.concatenate([self.train, self.outer])


def laplacian(g: WeightedGraph | np.ndarray) -> np.ndarray:
    """Combinatorial Laplacian ``D - A``."""
    A = g.adjacency() if isinstance(g, WeightedGraph) else np.asarray(g, dtype=np.float64)
    return np.diag(A.sum(axis=1)) - A


def hop_distances(support: SupportPattern, sources: Iterable[int]) -> np.ndarray:
    """BFS hop count to the nearest source; ``inf`` when unreachable."""
    sources = list(sources)
    if not sources:
        raise ContractError("hop_distances needs at least one source")
    dist = np.full(support.n, INF)
    adj = support.neighbors()
    queue = deque()
    for s in sources:
        if dist[s] != 0:
            dist[s] = 0
            queue.append(s)
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if dist[v] == INF:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


def edge_distance(support: SupportPattern, train: Iterable[int], outer: Iterable[int],
                  mode: str = "gcn", metric: SupportPattern | None = None) -> np.ndarray:
    """Per-edge distance to the labelled nodes.

    ``laplacian``: min over endpoints of (hops to train + hops to outer).
    ``gcn``: min over endpoints of hops to train ∪ outer.
    Hop counts are taken on ``metric`` (defaults to ``support``), so edges of
    an enlarged support can be measured against the observed graph.
    """
    metric = support if metric is None else metric
    if metric.n != support.n:
        raise ContractError("metric graph has a different node count")
    train, outer = list(train), list(outer)
    i, j = support.rows, support.cols
    if mode == "laplacian":
        node = hop_distances(metric, train) + hop_distances(metric, outer)
    elif mode == "gcn":
        node = hop_distances(metric, train + outer)
    else:
        raise ContractError(f"unknown edge distance mode {mode!r}")
    return np.minimum(node[i], node[j])


def power_support(support: SupportPattern, r: int) -> SupportPattern:
    """Pairs joined by a path of length ``<= r`` (pattern of sum_{t<=r} A^t)."""
    if r < 1:
        raise ContractError(f"power_support needs r >= 1, got {r}")
    adj = support.neighbors()
    pairs = []
    for s in range(support.n):
        dist = {s: 0}
        frontier = [s]
        for depth in range(1, r + 1):
            nxt = []
            for u in frontier:
                for v in adj[u]:
                    if v not in dist:
                        dist[v] = depth
                        nxt.append(v)
            frontier = nxt
            if not frontier:
                break
        pairs.extend((s, v) for v in dist if v > s)
    return SupportPattern(support.n, np.array(pairs, dtype=np.int64).reshape(-1, 2))


def project_weights(g: WeightedGraph, lo: float = 0.0, hi: float = 1e6) -> WeightedGraph:
    if lo > hi:
        raise ContractError(f"empty box [{lo}, {hi}]")
    return WeightedGraph(g.support, np.clip(g.weights, lo, hi))


def diameter(support: SupportPattern) -> float:
    """Largest finite eccentricity over all components."""
    from scipy.sparse import csr_matrix
    from scipy.sparse.csgraph import shortest_path

    if support.m == 0:
        return 0.0
    ones = np.ones(support.m)
    mat = csr_matrix((ones, (support.rows, support.cols)), shape=(support.n, support.n))
    d = shortest_path(mat, directed=False, unweighted=True)
    return float(d[np.isfinite(d)].max())


# edge-list text format: one "i j w" line per edge, 0-indexed


def write_edge_list(g: WeightedGraph, path: str | Path) -> None:
    lines = [f"{i} {j} {w!r}" for (i, j), w in zip(g.support.edges.tolist(), g.weights.tolist())]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_edge_list(path: str | Path, n: int | None = None) -> WeightedGraph:
    pairs, weights = [], []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected 'i j w', got {line!r}")
        try:
            i, j, w = int(parts[0]), int(parts[1]), float(parts[2])
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
        pairs.append((min(i, j), max(i, j)))
        weights.append(w)
    if n is None:
        n = 1 + max((max(p) for p in pairs), default=-1)
    support = SupportPattern(n, np.array(pairs, dtype=np.int64).reshape(-1, 2))
    lookup = dict(zip(pairs, weights))
    return WeightedGraph(support, [lookup[tuple(e)] for e in support.edges.tolist()])
