"""Attributed directed graphs, random generators, batching and statistics."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .delaunay import DegeneratePointsError, delaunay_edges

GENERATORS = ("er", "knn", "planar", "lobster")
PLANAR_RETRIES = 20


def rng_for(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for ``(seed, *keys)`` via a hashed seed sequence."""
    return np.random.default_rng(np.random.SeedSequence([int(seed) % 2**64, *map(int, keys)]))


def derive_seed(seed: int, *keys: int) -> int:
    """64-bit seed mixed from a master seed and an index path."""
    state = np.random.SeedSequence([int(seed) % 2**64, *map(int, keys)]).generate_state(2, np.uint32)
    return int(state[0]) << 32 | int(state[1])


def _rows(values, rows: int) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 2 and arr.shape[0] == rows:
        return arr
    if arr.size == 0:
        return arr.reshape(rows, 0 if rows else (arr.shape[-1] if arr.ndim == 2 else 1))
    return arr.reshape(rows, -1)


@dataclass(eq=False)
class Graph:
    """Directed multigraph with node attributes, edge attributes and an optional global attribute.

    Undirected links are stored as two directed edges.
    """

    num_nodes: int
    node_attrs: np.ndarray
    senders: np.ndarray
    receivers: np.ndarray
    edge_attrs: np.ndarray
    global_attr: np.ndarray | None = None
    positions: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.node_attrs = _rows(self.node_attrs, self.num_nodes)
        self.senders = np.asarray(self.senders, dtype=np.int64).reshape(-1)
        self.receivers = np.asarray(self.receivers, dtype=np.int64).reshape(-1)
        e = len(self.senders)
        self.edge_attrs = _rows(self.edge_attrs, e)
        if len(self.receivers) != e:
            raise ValueError("senders and receivers differ in length")
        if e and (min(self.senders.min(), self.receivers.min()) < 0
                  or max(self.senders.max(), self.receivers.max()) >= self.num_nodes):
            raise ValueError(f"edge endpoint outside [0, {self.num_nodes})")

    @property
    def num_edges(self) -> int:
        return len(self.senders)

    @property
    def edges(self) -> list[tuple[int, int, tuple[float, ...]]]:
        return [(int(s), int(r), tuple(a)) for s, r, a in
                zip(self.senders, self.receivers, self.edge_attrs)]

    def with_attrs(self, node_attrs=None, edge_attrs=None) -> "Graph":
        """Copy of the graph with replaced node and/or edge attributes."""
        return Graph(
            self.num_nodes,
            self.node_attrs if node_attrs is None else node_attrs,
            self.senders,
            self.receivers,
            self.edge_attrs if edge_attrs is None else edge_attrs,
            self.global_attr,
            self.positions,
        )

    def scaled(self, factor: float) -> "Graph":
        """Node and edge attributes multiplied by ``factor``."""
        return self.with_attrs(self.node_attrs * factor, self.edge_attrs * factor)

    def adjacency(self) -> list[list[int]]:
        """Out-neighbour lists."""
        out: list[list[int]] = [[] for _ in range(self.num_nodes)]
        for s, r in zip(self.senders.tolist(), self.receivers.tolist()):
            out[s].append(r)
        return out

    def same_as(self, other: "Graph") -> bool:
        """Exact structural and attribute equality."""
        def eq(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and np.array_equal(a, b)
        return (self.num_nodes == other.num_nodes
                and eq(self.node_attrs, other.node_attrs)
                and eq(self.senders, other.senders)
                and eq(self.receivers, other.receivers)
                and eq(self.edge_attrs, other.edge_attrs)
                and eq(self.global_attr, other.global_attr))


def from_undirected(num_nodes: int, links, node_attrs=None, weights=None,
                    positions=None) -> Graph:
    """Graph storing every undirected link ``(u, v)`` as ``u->v`` and ``v->u``."""
    links = list(links)
    senders = [u for u, v in links] + [v for u, v in links]
    receivers = [v for u, v in links] + [u for u, v in links]
    if weights is None:
        w = np.ones(len(links))
    else:
        w = np.asarray(weights, dtype=np.float64)
    edge_attrs = np.concatenate([w, w]).reshape(-1, 1)
    if node_attrs is None:
        node_attrs = np.zeros((num_nodes, 0))
    return Graph(num_nodes, node_attrs, senders, receivers, edge_attrs, positions=positions)


def undirected_links(g: Graph) -> list[tuple[int, int]]:
    """Distinct unordered node pairs joined by at least one edge (self-loops dropped)."""
    return sorted({(min(s, r), max(s, r)) for s, r in
                   zip(g.senders.tolist(), g.receivers.tolist()) if s != r})


# generators ---------------------------------------------------------------

def erdos_renyi(n: int, p: float, rng: np.random.Generator) -> Graph:
    iu, ju = np.triu_indices(n, k=1)
    keep = rng.random(len(iu)) < p
    return from_undirected(n, zip(iu[keep].tolist(), ju[keep].tolist()))


def knn_graph(n: int, d: int, k: int, rng: np.random.Generator) -> Graph:
    if k >= n:
        raise ValueError(f"knn needs k < n (got k={k}, n={n})")
    pos = rng.random((n, d))
    dist = np.linalg.norm(pos[:, None, :] - pos[None, :, :], axis=-1)
    np.fill_diagonal(dist, np.inf)
    # stable sort: equal distances resolve by node index
    nbrs = np.argsort(dist, axis=1, kind="stable")[:, :k]
    senders = np.repeat(np.arange(n), k)
    receivers = nbrs.reshape(-1)
    return Graph(n, np.zeros((n, 0)), senders, receivers, np.ones((n * k, 1)), positions=pos)


def planar_graph(n: int, d: int, rng: np.random.Generator, seed: int = 0) -> Graph:
    for attempt in range(PLANAR_RETRIES):
        sub = rng if attempt == 0 else rng_for(seed, 0x504C, attempt)
        pos = sub.random((n, d))
        if d == 1:
            if len(np.unique(pos)) != n:
                continue
            order = np.argsort(pos[:, 0])
            return from_undirected(n, zip(order[:-1].tolist(), order[1:].tolist()), positions=pos)
        if n < 3:
            if n == 2 and np.array_equal(pos[0], pos[1]):
                continue
            return from_undirected(n, [(0, 1)] if n == 2 else [], positions=pos)
        try:
            links = delaunay_edges(pos)
        except DegeneratePointsError:
            continue
        return from_undirected(n, links, positions=pos)
    raise DegeneratePointsError(f"planar: degenerate point sets after {PLANAR_RETRIES} attempts")


def lobster_graph(n: int, p1: float, p2: float, rng: np.random.Generator) -> Graph:
    links = [(i, i + 1) for i in range(n - 1)]
    n1 = int(rng.binomial(n, p1))
    parents1 = rng.integers(0, n, size=n1)
    first = list(range(n, n + n1))
    links += list(zip(parents1.tolist(), first))
    n2 = int(rng.binomial(n1, p2)) if n1 else 0
    if n2:
        parents2 = rng.integers(0, n1, size=n2) + n
        links += list(zip(parents2.tolist(), range(n + n1, n + n1 + n2)))
    return from_undirected(n + n1 + n2, links)


def generate(kind: str, seed: int, **params) -> Graph:
    """Draw one graph from a named generator; deterministic in ``(kind, params, seed)``.

    Kinds and parameters:
        ``er``: n, p. ``knn``: n, d, k. ``planar``: n, d. ``lobster``: n, p1, p2.
    """
    n = int(params["n"])
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = rng_for(seed)
    if kind == "er":
        p = float(params.get("p", 0.5))
        _check_prob(p)
        return erdos_renyi(n, p, rng)
    if kind == "knn":
        d, k = int(params.get("d", 1)), int(params.get("k", 8))
        if d not in (1, 2) or k < 1:
            raise ValueError("knn needs d in {1, 2} and k >= 1")
        return knn_graph(n, d, k, rng)
    if kind == "planar":
        d = int(params.get("d", 2))
        if d not in (1, 2):
            raise ValueError("planar needs d in {1, 2}")
        return planar_graph(n, d, rng, seed)
    if kind == "lobster":
        p1, p2 = float(params.get("p1", 0.2)), float(params.get("p2", 0.2))
        _check_prob(p1)
        _check_prob(p2)
        return lobster_graph(n, p1, p2, rng)
    raise ValueError(f"unknown generator {kind!r}; expected one of {GENERATORS}")


def _check_prob(p: float) -> None:
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"probability {p} outside [0, 1]")


def disjoint_union(graphs: list[Graph]) -> Graph:
    offsets = np.cumsum([0] + [g.num_nodes for g in graphs])
    return Graph(
        int(offsets[-1]),
        np.concatenate([g.node_attrs for g in graphs], axis=0),
        np.concatenate([g.senders + o for g, o in zip(graphs, offsets)]),
        np.concatenate([g.receivers + o for g, o in zip(graphs, offsets)]),
        np.concatenate([g.edge_attrs for g in graphs], axis=0),
    )


def generate_multi_component(n: int, base: str, seed: int, m_max: int = 6,
                             base_params: dict | None = None, m: int | None = None,
                             cuts=None) -> tuple[Graph, int]:
    """Graph made of up to ``m_max`` independently generated parts.

    ``m`` parts are cut at ``m - 1`` distinct positions in ``1..n-1``; each
    part is wired by the ``base`` generator. The returned label is the
    union-find component count, which can exceed ``m`` when a base generator
    emits a disconnected part.
    """
    from .oracles import count_components

    if n < m_max:
        raise ValueError(f"need n >= m_max ({n} < {m_max})")
    rng = rng_for(seed, 0)
    if cuts is None:
        if m is None:
            m = int(rng.integers(1, m_max + 1))
        cuts = np.sort(rng.choice(np.arange(1, n), size=m - 1, replace=False)) if m > 1 else []
    bounds = [0, *sorted(int(c) for c in cuts), n]
    params = dict(base_params or {})
    parts = []
    for i, (lo, hi) in enumerate(zip(bounds[:-1], bounds[1:])):
        size = hi - lo
        part_params = dict(params, n=size)
        if base == "knn":
            part_params["k"] = min(int(params.get("k", 8)), size - 1)
            if part_params["k"] < 1:
                parts.append(Graph(1, np.zeros((1, 0)), [], [], np.zeros((0, 1))))
                continue
        parts.append(generate(base, derive_seed(seed, 1, i), **part_params))
    g = disjoint_union(parts)
    return g, count_components(g)


# batching -----------------------------------------------------------------

@dataclass(eq=False)
class GraphBatch:
    """Disjoint union of several graphs plus bookkeeping to split it again."""

    graph: Graph
    graph_ids: np.ndarray
    node_offsets: np.ndarray
    edge_offsets: np.ndarray
    globals_: list = field(default_factory=list)

    @property
    def num_graphs(self) -> int:
        return len(self.node_offsets) - 1


def batch(graphs: list[Graph]) -> GraphBatch:
    if not graphs:
        raise ValueError("cannot batch an empty list")
    dv = {g.node_attrs.shape[1] for g in graphs}
    de = {g.edge_attrs.shape[1] for g in graphs if g.num_edges} or {graphs[0].edge_attrs.shape[1]}
    if len(dv) != 1 or len(de) != 1:
        raise ValueError(f"attribute dimensions differ: node {sorted(dv)}, edge {sorted(de)}")
    d_e = de.pop()
    fixed = [g if g.edge_attrs.shape[1] == d_e else g.with_attrs(edge_attrs=np.zeros((0, d_e)))
             for g in graphs]
    merged = disjoint_union(fixed)
    node_offsets = np.cumsum([0] + [g.num_nodes for g in graphs])
    edge_offsets = np.cumsum([0] + [g.num_edges for g in graphs])
    graph_ids = np.repeat(np.arange(len(graphs)), [g.num_nodes for g in graphs])
    return GraphBatch(merged, graph_ids, node_offsets, edge_offsets,
                      [g.global_attr for g in graphs])


def unbatch(b: GraphBatch) -> list[Graph]:
    out = []
    g = b.graph
    for i in range(b.num_graphs):
        n0, n1 = b.node_offsets[i], b.node_offsets[i + 1]
        e0, e1 = b.edge_offsets[i], b.edge_offsets[i + 1]
        out.append(Graph(int(n1 - n0), g.node_attrs[n0:n1], g.senders[e0:e1] - n0,
                         g.receivers[e0:e1] - n0, g.edge_attrs[e0:e1],
                         b.globals_[i] if b.globals_ else None))
    return out


# statistics ---------------------------------------------------------------

@dataclass(frozen=True)
class GraphStats:
    size: int
    diameter: int
    magnitude: float


def hop_distances(g: Graph, source: int) -> np.ndarray:
    """BFS hop counts along directed edges; -1 marks unreachable nodes."""
    adj = g.adjacency()
    dist = np.full(g.num_nodes, -1, dtype=np.int64)
    dist[source] = 0
    queue = deque([source])
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if dist[v] < 0:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


def stats(g: Graph) -> GraphStats:
    diameter = 0
    for s in range(g.num_nodes):
        diameter = max(diameter, int(hop_distances(g, s).max()))
    node_mag = float(np.linalg.norm(g.node_attrs, axis=1).max()) if g.node_attrs.size else 0.0
    edge_mag = float(np.linalg.norm(g.edge_attrs, axis=1).max()) if g.edge_attrs.size else 0.0
    return GraphStats(g.num_nodes, diameter, node_mag + edge_mag)
