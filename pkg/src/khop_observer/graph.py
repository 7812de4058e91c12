"""Undirected communication graphs, k-hop neighborhoods and disagreement matrices.

Node ids are 1-based everywhere in the public API.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

STANDARD = "standard"
EXTENDED = "extended"
MODES = (STANDARD, EXTENDED)


class EmptyNeighborhoodError(ValueError):
    pass


@dataclass(frozen=True)
class Graph:
    node_count: int
    edges: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if self.node_count < 1:
            raise ValueError("node_count must be positive")
        canon = set()
        for i, j in self.edges:
            i, j = int(i), int(j)
            if i == j:
                raise ValueError(f"self-loop on node {i}")
            self._check(i)
            self._check(j)
            canon.add((min(i, j), max(i, j)))
        object.__setattr__(self, "edges", frozenset(canon))
        adj = {v: set() for v in range(1, self.node_count + 1)}
        for i, j in canon:
            adj[i].add(j)
            adj[j].add(i)
        object.__setattr__(self, "_adj", {v: frozenset(s) for v, s in adj.items()})

    @classmethod
    def from_edges(cls, node_count: int, edges) -> "Graph":
        return cls(node_count, frozenset(tuple(e) for e in edges))

    def _check(self, i: int) -> None:
        if not 1 <= i <= self.node_count:
            raise ValueError(f"node id {i} outside 1..{self.node_count}")

    @property
    def nodes(self) -> range:
        return range(1, self.node_count + 1)

    def neighbors(self, i: int) -> frozenset:
        self._check(i)
        return self._adj[i]

    def has_edge(self, i: int, j: int) -> bool:
        return j in self.neighbors(i)

    def distances_from(self, i: int) -> dict:
        """BFS hop distances from ``i`` to every reachable node."""
        self._check(i)
        dist = {i: 0}
        queue = deque([i])
        while queue:
            v = queue.popleft()
            for w in self._adj[v]:
                if w not in dist:
                    dist[w] = dist[v] + 1
                    queue.append(w)
        return dist

    def laplacian(self) -> np.ndarray:
        L = np.zeros((self.node_count, self.node_count))
        for i, j in self.edges:
            L[i - 1, j - 1] = L[j - 1, i - 1] = -1.0
            L[i - 1, i - 1] += 1.0
            L[j - 1, j - 1] += 1.0
        return L


def is_connected(g: Graph) -> bool:
    return len(g.distances_from(1)) == g.node_count


def load_edge_list(path) -> Graph:
    """Read ``N`` on the first line, then one ``i j`` pair per line (1-based)."""
    lines = [ln.split("#", 1)[0].strip() for ln in Path(path).read_text().splitlines()]
    lines = [ln for ln in lines if ln]
    if not lines:
        raise ValueError(f"{path}: empty edge list")
    try:
        n = int(lines[0])
        edges = []
        for ln in lines[1:]:
            a, b = ln.split()
            edges.append((int(a), int(b)))
    except ValueError as exc:
        raise ValueError(f"{path}: malformed edge list ({exc})") from None
    return Graph.from_edges(n, edges)


def write_edge_list(g: Graph, path) -> None:
    rows = [str(g.node_count)] + [f"{i} {j}" for i, j in sorted(g.edges)]
    Path(path).write_text("\n".join(rows) + "\n")


@dataclass(frozen=True)
class KhopNeighborhood:
    agent: int
    k: int
    members: tuple
    mode: str = STANDARD

    @property
    def eta(self) -> int:
        return len(self.members)

    def index(self, node: int) -> int:
        return self.members.index(node)


def khop_neighbors(g: Graph, i: int, k: int, mode: str = STANDARD) -> KhopNeighborhood:
    """Nodes whose shortest path to ``i`` has length in [2, k] ([1, k] in extended mode)."""
    g._check(i)
    if k < 2:
        raise ValueError("k must be at least 2")
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    lo = 1 if mode == EXTENDED else 2
    dist = g.distances_from(i)
    members = tuple(sorted(v for v, d in dist.items() if lo <= d <= k))
    return KhopNeighborhood(i, k, members, mode)


def truth_weight(g: Graph, target: int, estimator: int, mode: str = STANDARD) -> int:
    """Coefficient of the (estimate - truth) term in the estimator's disagreement.

    Standard mode counts common 1-hop neighbors, each of which relays the target's
    state. Extended mode assumes no relaying, so only a direct neighbor of the
    target sees its true state.
    """
    if mode == EXTENDED:
        return int(estimator in g.neighbors(target))
    return len(g.neighbors(estimator) & g.neighbors(target))


@dataclass(frozen=True)
class DisagreementMatrix:
    agent: int
    L: np.ndarray
    H: np.ndarray
    M: np.ndarray
    lambda_min: float
    lambda_max: float


def disagreement_matrix(g: Graph, nbhd: KhopNeighborhood) -> DisagreementMatrix:
    if nbhd.eta == 0:
        raise EmptyNeighborhoodError(f"agent {nbhd.agent}: nothing to estimate")
    members = nbhd.members
    pos = {v: a for a, v in enumerate(members)}
    eta = len(members)
    L = np.zeros((eta, eta))
    for p, q in g.edges:
        if p in pos and q in pos:
            a, b = pos[p], pos[q]
            L[a, b] = L[b, a] = -1.0
            L[a, a] += 1.0
            L[b, b] += 1.0
    H = np.diag([float(truth_weight(g, nbhd.agent, v, nbhd.mode)) for v in members])
    M = L + H
    eig = np.linalg.eigvalsh(M)
    for arr in (L, H, M):
        arr.setflags(write=False)
    return DisagreementMatrix(nbhd.agent, L, H, M, float(eig[0]), float(eig[-1]))


def analyze(g: Graph, k: int, mode: str = STANDARD) -> dict:
    """Per-agent (eta, lambda_min, lambda_max); agents with empty neighborhoods map to (0, None, None)."""
    out = {}
    for i in g.nodes:
        nb = khop_neighbors(g, i, k, mode)
        if nb.eta == 0:
            out[i] = (0, None, None)
        else:
            dm = disagreement_matrix(g, nb)
            out[i] = (nb.eta, dm.lambda_min, dm.lambda_max)
    return out
