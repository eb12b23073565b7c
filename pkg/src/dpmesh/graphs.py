"""Communication graphs and the gossip matrices derived from them."""

from __future__ import annotations

import hashlib
import logging
from collections import deque
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import (
    ConnectivityRetriesExhausted,
    Disconnected,
    EmptyGraph,
    InputError,
    ParseError,
)

log = logging.getLogger(__name__)

GOSSIP_SCHEMES = ("metropolis-hastings", "uniform-neighbor")
MAX_ER_ATTEMPTS = 1000


@dataclass(frozen=True)
class Graph:
    """Undirected simple graph on nodes ``0..n-1``.

    ``edges`` holds each edge once as ``(u, v)`` with ``u < v``, sorted.
    """

    n: int
    edges: tuple
    labels: tuple = ()
    dropped_self_loops: int = field(default=0, compare=False)

    def __post_init__(self):
        canon = set()
        for u, v in self.edges:
            u, v = int(u), int(v)
            if u == v:
                raise InputError(f"self-loop on node {u}")
            if not (0 <= u < self.n and 0 <= v < self.n):
                raise InputError(f"edge ({u}, {v}) out of range for n={self.n}")
            canon.add((min(u, v), max(u, v)))
        object.__setattr__(self, "edges", tuple(sorted(canon)))

    @property
    def m(self) -> int:
        return len(self.edges)

    def neighbors(self, u: int) -> list:
        return self._adj[u]

    @property
    def _adj(self):
        adj = self.__dict__.get("_adj_cache")
        if adj is None:
            adj = [[] for _ in range(self.n)]
            for u, v in self.edges:
                adj[u].append(v)
                adj[v].append(u)
            adj = [sorted(a) for a in adj]
            object.__setattr__(self, "_adj_cache", adj)
        return adj

    def degrees(self) -> np.ndarray:
        return np.array([len(a) for a in self._adj], dtype=np.int64)

    def adjacency(self) -> np.ndarray:
        A = np.zeros((self.n, self.n))
        for u, v in self.edges:
            A[u, v] = A[v, u] = 1.0
        return A

    def is_connected(self) -> bool:
        if self.n == 0:
            return False
        return len(_bfs(self._adj, 0)) == self.n

    def digest(self) -> str:
        h = hashlib.sha256(f"{self.n}".encode())
        for u, v in self.edges:
            h.update(f";{u},{v}".encode())
        return h.hexdigest()[:16]


@dataclass(frozen=True)
class GossipMatrix:
    """Row-stochastic mixing matrix supported on ``graph`` plus self-loops."""

    n: int
    W: np.ndarray
    scheme: str = "metropolis-hastings"
    graph: Graph | None = None


def _bfs(adj, src):
    dist = {src: 0}
    q = deque([src])
    while q:
        u = q.popleft()
        for v in adj[u]:
            if v not in dist:
                dist[v] = dist[u] + 1
                q.append(v)
    return dist


def erdos_renyi(n: int, p: float, seed: int) -> Graph:
    """G(n, p), resampled with derived seeds until connected."""
    if n < 2:
        raise InputError("n must be >= 2")
    if not 0.0 < p <= 1.0:
        raise InputError(f"p must be in (0, 1], got {p}")
    iu, ju = np.triu_indices(n, k=1)
    for attempt in range(MAX_ER_ATTEMPTS):
        rng = np.random.default_rng([int(seed), attempt])
        keep = rng.random(iu.size) < p
        g = Graph(n, tuple(zip(iu[keep].tolist(), ju[keep].tolist())))
        if g.is_connected():
            return g
    raise ConnectivityRetriesExhausted(
        f"no connected G({n}, {p}) after {MAX_ER_ATTEMPTS} attempts"
    )


def complete_graph(n: int) -> Graph:
    if n < 2:
        raise InputError("n must be >= 2")
    iu, ju = np.triu_indices(n, k=1)
    return Graph(n, tuple(zip(iu.tolist(), ju.tolist())))


def ring_graph(n: int) -> Graph:
    if n < 3:
        raise InputError("a ring needs n >= 3")
    return Graph(n, tuple((i, (i + 1) % n) for i in range(n)))


def _parse_edge_lines(lines, source="<edges>") -> Graph:
    ids: dict = {}
    edges = []
    loops = 0
    for no, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ParseError(no, f"expected two node labels, got {len(parts)} field(s)")
        a, b = (ids.setdefault(x, len(ids)) for x in parts)
        if a == b:
            loops += 1
            continue
        edges.append((a, b))
    if not edges:
        raise EmptyGraph(f"{source}: no edges")
    if loops:
        log.warning("%s: dropped %d self-loop(s)", source, loops)
    labels = tuple(sorted(ids, key=ids.get))
    return Graph(len(ids), tuple(edges), labels=labels, dropped_self_loops=loops)


def load_edge_list(path) -> Graph:
    """Read a whitespace-separated edge list; labels get 0-based ids in order of appearance."""
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        return _parse_edge_lines(fh, source=str(path))


def save_edge_list(g: Graph, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# n={g.n} m={g.m}\n")
        for u, v in g.edges:
            fh.write(f"{u} {v}\n")


def builtin_florentine() -> Graph:
    text = resources.files("dpmesh").joinpath("data/florentine.txt").read_text("utf-8")
    return _parse_edge_lines(text.splitlines(), source="florentine")


def resolve_graph(spec: str) -> Graph:
    """``florentine`` names the embedded graph; anything else is an edge-list path."""
    if spec == "florentine":
        return builtin_florentine()
    return load_edge_list(spec)


def gossip_from_graph(g: Graph, scheme: str = "metropolis-hastings") -> GossipMatrix:
    """Gossip weights on ``g``.

    metropolis-hastings: ``1 / (1 + max(deg u, deg v))`` per edge, remainder on
    the diagonal (symmetric, doubly stochastic).
    uniform-neighbor: ``1 / (deg u + 1)`` on ``u``'s closed neighborhood.
    """
    if scheme not in GOSSIP_SCHEMES:
        raise InputError(f"unknown gossip scheme {scheme!r}")
    if not g.is_connected():
        raise Disconnected("gossip matrix requires a connected graph")
    deg = g.degrees()
    W = np.zeros((g.n, g.n))
    if scheme == "metropolis-hastings":
        for u, v in g.edges:
            W[u, v] = W[v, u] = 1.0 / (1.0 + max(deg[u], deg[v]))
        W[np.diag_indices(g.n)] = 1.0 - W.sum(axis=1)
    else:
        for u in range(g.n):
            w = 1.0 / (deg[u] + 1.0)
            W[u, u] = w
            W[u, g.neighbors(u)] = w
    return GossipMatrix(g.n, W, scheme, g)


def pairwise_distances(g: Graph) -> np.ndarray:
    """All-pairs hop distances by BFS from every node."""
    D = np.empty((g.n, g.n), dtype=np.int64)
    for s in range(g.n):
        dist = _bfs(g._adj, s)
        if len(dist) != g.n:
            raise Disconnected("graph is not connected")
        for v, d in dist.items():
            D[s, v] = d
    return D
