"""Exact ground-truth solvers for every task."""

from __future__ import annotations

import heapq
import math
from collections import deque
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .graph import Graph

INF_SENTINEL = 1e18
TSP_EXACT_MAX = 16
BALL_RADIUS = 0.1
PASSABLE_MAX_HEIGHT = 0.8
#: Bumped whenever a solver's output could change; recorded in dataset manifests.
ORACLE_VERSIONS = {"dijkstra": 1, "count_components": 1, "tsp_exact": 1, "tsp_heuristic": 1,
                   "newton_step": 1, "grid_truth": 1}


@dataclass
class DistanceResult:
    dist: np.ndarray
    reachable: np.ndarray
    parent: np.ndarray

    def path_to(self, node: int) -> list[int]:
        if not self.reachable[node]:
            return []
        path = [node]
        while self.parent[path[-1]] >= 0:
            path.append(int(self.parent[path[-1]]))
        return path[::-1]


def edge_weights(g: Graph) -> np.ndarray:
    if g.num_edges == 0:
        return np.zeros(0)
    return g.edge_attrs[:, 0]


def dijkstra(g: Graph, source: int) -> DistanceResult:
    """Single-source shortest paths over directed edges with positive weights."""
    w = edge_weights(g)
    if len(w) and w.min() <= 0:
        raise ValueError("dijkstra requires strictly positive edge weights")
    out: list[list[tuple[int, float]]] = [[] for _ in range(g.num_nodes)]
    for s, r, wt in zip(g.senders.tolist(), g.receivers.tolist(), w.tolist()):
        out[s].append((r, wt))
    dist = np.full(g.num_nodes, np.inf)
    parent = np.full(g.num_nodes, -1, dtype=np.int64)
    done = np.zeros(g.num_nodes, dtype=bool)
    dist[source] = 0.0
    heap = [(0.0, source)]
    while heap:
        d, u = heapq.heappop(heap)
        if done[u]:
            continue
        done[u] = True
        for v, wt in out[u]:
            nd = d + wt
            if nd < dist[v]:
                dist[v] = nd
                parent[v] = u
                heapq.heappush(heap, (nd, v))
    return DistanceResult(dist, np.isfinite(dist), parent)


def bellman_ford_k(g: Graph, source: int, k: int) -> np.ndarray:
    """Distances after exactly ``k`` synchronous relaxation sweeps.

    Unreached nodes hold :data:`INF_SENTINEL`.
    """
    w = edge_weights(g)
    dist = np.full(g.num_nodes, INF_SENTINEL)
    dist[source] = 0.0
    for _ in range(k):
        cand = np.full(g.num_nodes, INF_SENTINEL)
        np.minimum.at(cand, g.receivers, dist[g.senders] + w)
        dist = np.minimum(dist, cand)
    return dist


class UnionFind:
    """Disjoint sets over ``0..n-1`` with path compression and union by size."""

    def __init__(self, n: int):
        self.parent = list(range(n))
        self.size = [1] * n
        self.count = n

    def find(self, x: int) -> int:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a: int, b: int) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        if self.size[ra] < self.size[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        self.size[ra] += self.size[rb]
        self.count -= 1
        return True


def count_components(g: Graph) -> int:
    """Number of connected components, treating edges as undirected."""
    uf = UnionFind(g.num_nodes)
    for s, r in zip(g.senders.tolist(), g.receivers.tolist()):
        uf.union(s, r)
    return uf.count


# travelling salesman --------------------------------------------------------

def _distance_matrix(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    return np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1))


def tour_length(points, tour) -> float:
    d = _distance_matrix(points)
    return float(sum(d[tour[i], tour[(i + 1) % len(tour)]] for i in range(len(tour))))


class TSPCapacityError(ValueError):
    """Instance too large for the exact solver; use :func:`tsp_heuristic`."""


def tsp_exact(points) -> float:
    """Optimal closed-tour length by Held-Karp dynamic programming (n <= 16)."""
    d = _distance_matrix(points)
    n = len(d)
    if n < 2:
        raise ValueError("tsp needs at least 2 points")
    if n > TSP_EXACT_MAX:
        raise TSPCapacityError(f"n={n} exceeds {TSP_EXACT_MAX}; use tsp_heuristic")
    m = n - 1
    full = 1 << m
    dp = np.full((full, m), np.inf)
    for j in range(m):
        dp[1 << j, j] = d[0, j + 1]
    inner = d[1:, 1:]
    bits = 1 << np.arange(m)
    for mask in range(1, full):
        members = np.nonzero(mask & bits)[0]
        if len(members) < 2:
            continue
        # dp[mask, j] = min_k dp[mask - j, k] + d[k, j]
        prev = dp[mask ^ bits[members]][:, members]
        dp[mask, members] = (prev + inner[np.ix_(members, members)].T).min(axis=1)
    return float((dp[full - 1] + d[1:, 0]).min())


def tsp_heuristic(points) -> tuple[float, bool]:
    """Nearest-neighbour tour refined by 2-opt; returns ``(length, approximate=True)``."""
    d = _distance_matrix(points)
    n = len(d)
    if n < 2:
        raise ValueError("tsp needs at least 2 points")
    tour = [0]
    left = set(range(1, n))
    while left:
        last = tour[-1]
        nxt = min(left, key=lambda j: (d[last, j], j))
        tour.append(nxt)
        left.remove(nxt)
    improved = True
    while improved:
        improved = False
        for i in range(n - 1):
            for j in range(i + 2, n if i > 0 else n - 1):
                a, b = tour[i], tour[i + 1]
                c, e = tour[j], tour[(j + 1) % n]
                if d[a, c] + d[b, e] < d[a, b] + d[c, e] - 1e-12:
                    tour[i + 1:j + 1] = tour[i + 1:j + 1][::-1]
                    improved = True
    return tour_length(points, tour), True


# physics ------------------------------------------------------------------

@dataclass(frozen=True)
class PhysicsState:
    """End-ball kinematics in a frame where the moving ball starts at 0."""

    left_pos: float
    left_speed: float
    right_pos: float
    right_speed: float


def newton_start(n_balls: int, gap: float, radius: float = BALL_RADIUS) -> np.ndarray:
    """Initial centre positions; ball 0 moves, balls 1.. form a touching chain."""
    chain = 2 * radius + gap + 2 * radius * np.arange(n_balls - 1)
    return np.concatenate([[0.0], chain])


def newton_step(n_balls: int, gap: float, v: float, dt: float = 1.0,
                radius: float = BALL_RADIUS) -> PhysicsState:
    """Advance a Newton's-ball chain by ``dt`` with one incoming ball.

    Equal masses and elastic contact: on impact the incoming ball stops at
    contact and the far ball leaves with the full speed.
    """
    if gap < 0 or v < 0 or dt < 0:
        raise ValueError("gap, v and dt must be non-negative")
    if n_balls < 2:
        raise ValueError("need at least 2 balls")
    start = newton_start(n_balls, gap, radius)
    travel = v * dt
    if travel < gap:
        return PhysicsState(travel, v, float(start[-1]), 0.0)
    return PhysicsState(gap, 0.0, float(start[-1]) + travel - gap, v)


def collides(gap: float, v: float, dt: float = 1.0) -> bool:
    return v * dt >= gap


# grid navigation ------------------------------------------------------------

def passable(heights: np.ndarray) -> np.ndarray:
    return np.asarray(heights) <= PASSABLE_MAX_HEIGHT


def grid_truth(heights, src, tgt) -> tuple[bool, int, list[tuple[int, int]]]:
    """BFS over 4-connected passable cells: ``(reachable, hops, path)``."""
    h = np.asarray(heights, dtype=np.float64)
    ok = passable(h)
    src, tgt = tuple(src), tuple(tgt)
    if not ok[src] or not ok[tgt]:
        raise ValueError("source and target must be passable cells")
    rows, cols = h.shape
    prev = {src: None}
    queue = deque([src])
    while queue:
        cell = queue.popleft()
        if cell == tgt:
            break
        r, c = cell
        for nr, nc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
            if 0 <= nr < rows and 0 <= nc < cols and ok[nr, nc] and (nr, nc) not in prev:
                prev[(nr, nc)] = cell
                queue.append((nr, nc))
    if tgt not in prev:
        return False, -1, []
    path = [tgt]
    while prev[path[-1]] is not None:
        path.append(prev[path[-1]])
    path.reverse()
    return True, len(path) - 1, path


# brute-force references (test oracles) ---------------------------------------

def brute_force_shortest(g: Graph, source: int, target: int) -> float:
    """Minimum over all simple directed paths by exhaustive DFS; inf if none."""
    w = edge_weights(g)
    out: list[list[tuple[int, float]]] = [[] for _ in range(g.num_nodes)]
    for s, r, wt in zip(g.senders.tolist(), g.receivers.tolist(), w.tolist()):
        out[s].append((r, wt))
    best = math.inf
    stack = [(source, 0.0, 1 << source)]
    while stack:
        u, length, seen = stack.pop()
        if u == target:
            best = min(best, length)
            continue
        for v, wt in out[u]:
            if not seen >> v & 1:
                stack.append((v, length + wt, seen | 1 << v))
    return best


def brute_force_tsp(points) -> float:
    """Shortest closed tour by enumerating permutations with node 0 fixed."""
    from itertools import permutations

    d = _distance_matrix(points)
    n = len(d)
    if n <= 3:
        return float(sum(d[i, (i + 1) % n] for i in range(n))) if n > 2 else 2 * float(d[0, 1])
    best = math.inf
    for perm in permutations(range(1, n)):
        if perm[0] > perm[-1]:
            continue
        tour = (0,) + perm
        best = min(best, sum(d[tour[i], tour[(i + 1) % n]] for i in range(n)))
    return float(best)


def bfs_components(g: Graph) -> int:
    """Connected components by flood fill over the undirected view."""
    adj: list[set[int]] = [set() for _ in range(g.num_nodes)]
    for s, r in zip(g.senders.tolist(), g.receivers.tolist()):
        adj[s].add(r)
        adj[r].add(s)
    seen = [False] * g.num_nodes
    count = 0
    for start in range(g.num_nodes):
        if seen[start]:
            continue
        count += 1
        seen[start] = True
        queue = deque([start])
        while queue:
            u = queue.popleft()
            for v in adj[u]:
                if not seen[v]:
                    seen[v] = True
                    queue.append(v)
    return count


def segments_cross(p1, p2, p3, p4) -> bool:
    """True when segments p1p2 and p3p4 intersect at an interior point."""
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1, d2 = orient(p3, p4, p1), orient(p3, p4, p2)
    d3, d4 = orient(p1, p2, p3), orient(p1, p2, p4)
    return d1 * d2 < 0 and d3 * d4 < 0


def has_crossing(points, links) -> bool:
    pts = np.asarray(points)
    for (a, b), (c, e) in combinations(links, 2):
        if len({a, b, c, e}) < 4:
            continue
        if segments_cross(pts[a], pts[b], pts[c], pts[e]):
            return True
    return False
