"""Task encodings, dataset generation and JSONL persistence."""

from __future__ import annotations

import json
import os
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import oracles
from .graph import Graph, derive_seed, from_undirected, generate, generate_multi_component, rng_for, stats

TASKS = ("shortest_path", "components", "tsp", "physics", "navigation")
SPLITS = {"train": 1, "val": 2, "test": 3}
PAIR_RETRIES = 50
SOURCE, TARGET, OTHER = 0, 1, 2


@dataclass
class TaskSample:
    graph: Graph
    target: np.ndarray
    task: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.target = np.asarray(self.target, dtype=np.float64)
        if not np.all(np.isfinite(self.target)):
            raise ValueError("target must be finite")

    @property
    def scalar_target(self) -> float:
        return float(self.target.reshape(-1)[0])

    def same_as(self, other: "TaskSample") -> bool:
        return (self.task == other.task and self.graph.same_as(other.graph)
                and self.target.shape == other.target.shape
                and np.array_equal(self.target, other.target) and self.meta == other.meta)


@dataclass(frozen=True)
class DatasetSpec:
    """Recipe for a dataset.

    ``n_min``/``n_max`` bound the generator size parameter (half-open); for
    navigation it is the grid side. ``attr_scale`` multiplies the node
    attributes, used to build magnitude-scaled evaluation sets.
    """

    task: str = "shortest_path"
    generator: str = "lobster"
    gen_params: dict = field(default_factory=lambda: {"p1": 0.2, "p2": 0.2})
    n_min: int = 4
    n_max: int = 34
    weighted: bool = False
    weight_min: float = 0.5
    weight_max: float = 1.5
    count: int = 100
    seed: int = 0
    attr_scale: float = 1.0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.n_min < 2 or self.n_max <= self.n_min:
            raise ValueError("need 2 <= n_min < n_max")
        if self.weighted and not 0 < self.weight_min < self.weight_max:
            raise ValueError("weight range must be positive and non-empty")
        if self.attr_scale <= 0:
            raise ValueError("attr_scale must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def _sample_size(spec: DatasetSpec, rng: np.random.Generator) -> int:
    return int(rng.integers(spec.n_min, spec.n_max))


def one_hot_roles(n: int, source: int, target: int, scale: float = 1.0) -> np.ndarray:
    x = np.zeros((n, 3))
    x[:, OTHER] = 1.0
    x[source] = (1.0, 0.0, 0.0)
    x[target] = (0.0, 1.0, 0.0)
    return x * scale


def _assign_weights(g: Graph, spec: DatasetSpec, rng: np.random.Generator) -> Graph:
    if not spec.weighted or g.num_edges == 0:
        return g.with_attrs(edge_attrs=np.ones((g.num_edges, 1)))
    # one weight per undirected link so both directions agree
    key = np.minimum(g.senders, g.receivers) * g.num_nodes + np.maximum(g.senders, g.receivers)
    uniq, inverse = np.unique(key, return_inverse=True)
    w = spec.weight_min + (spec.weight_max - spec.weight_min) * rng.random(len(uniq))
    return g.with_attrs(edge_attrs=w[inverse].reshape(-1, 1))


def _pick_pair(g: Graph, rng: np.random.Generator) -> tuple[int, int] | None:
    """Uniform draw over ordered (source, target) pairs with target reachable."""
    adj = g.adjacency()
    counts = []
    reach_sets = []
    for s in range(g.num_nodes):
        seen = {s}
        queue = deque([s])
        while queue:
            u = queue.popleft()
            for v in adj[u]:
                if v not in seen:
                    seen.add(v)
                    queue.append(v)
        reach = sorted(seen - {s})
        reach_sets.append(reach)
        counts.append(len(reach))
    total = sum(counts)
    if total == 0:
        return None
    s = int(rng.choice(g.num_nodes, p=np.asarray(counts) / total))
    return s, int(reach_sets[s][rng.integers(len(reach_sets[s]))])


def make_shortest_path_sample(spec: DatasetSpec, seed: int) -> TaskSample:
    rng = rng_for(seed, 0x5350)
    for attempt in range(PAIR_RETRIES):
        n = _sample_size(spec, rng)
        g = generate(spec.generator, derive_seed(seed, attempt), n=n, **spec.gen_params)
        if g.num_nodes < 2:
            continue
        g = _assign_weights(g, spec, rng)
        pair = _pick_pair(g, rng)
        if pair is None:
            continue
        return shortest_path_sample(g, *pair, spec=spec, gen_n=n)
    raise RuntimeError(f"no reachable pair after {PAIR_RETRIES} graphs (seed {seed})")


def shortest_path_sample(g: Graph, source: int, target: int, spec: DatasetSpec | None = None,
                         gen_n: int | None = None, scale: float | None = None) -> TaskSample:
    """Encode a graph with chosen endpoints; the label is the Dijkstra length."""
    if scale is None:
        scale = spec.attr_scale if spec is not None else 1.0
    res = oracles.dijkstra(g, source)
    if not res.reachable[target]:
        raise ValueError("target not reachable from source")
    g = g.with_attrs(node_attrs=one_hot_roles(g.num_nodes, source, target, scale))
    st = stats(g)
    w = g.edge_attrs[:, 0]
    meta = {
        "size": g.num_nodes,
        "gen_n": gen_n if gen_n is not None else g.num_nodes,
        "diameter": st.diameter,
        "source": source,
        "target": target,
        "hops": len(res.path_to(target)) - 1,
        "weight_range": [float(w.min()), float(w.max())] if len(w) else [0.0, 0.0],
        "approximate": False,
    }
    return TaskSample(g, [float(res.dist[target])], "shortest_path", meta)


def reencode(sample: TaskSample, source: int, target: int) -> Graph:
    """Same graph with the role one-hot rewritten for a new endpoint pair."""
    scale = float(sample.graph.node_attrs.sum(axis=1).max()) if sample.graph.num_nodes else 1.0
    return sample.graph.with_attrs(node_attrs=one_hot_roles(sample.graph.num_nodes, source, target, scale))


def make_component_sample(spec: DatasetSpec, seed: int) -> TaskSample:
    rng = rng_for(seed, 0x4343)
    n = _sample_size(spec, rng)
    g, count = generate_multi_component(max(n, 6), spec.generator, derive_seed(seed, 1),
                                        base_params=spec.gen_params)
    return component_sample(g, count, rng, spec.attr_scale, gen_n=n)


def component_sample(g: Graph, count: int, rng: np.random.Generator, scale: float = 1.0,
                     gen_n: int | None = None) -> TaskSample:
    g = g.with_attrs(node_attrs=rng.random((g.num_nodes, 1)) * scale,
                     edge_attrs=np.ones((g.num_edges, 1)))
    meta = {"size": g.num_nodes, "gen_n": gen_n or g.num_nodes, "approximate": False}
    return TaskSample(g, [float(count)], "components", meta)


def make_tsp_sample(spec: DatasetSpec, seed: int) -> TaskSample:
    rng = rng_for(seed, 0x5453)
    n = max(_sample_size(spec, rng), 3)
    pts = rng.integers(1, 1001, size=(n, 2)).astype(np.float64)
    return tsp_sample(pts, spec.attr_scale)


def tsp_sample(points, scale: float = 1.0) -> TaskSample:
    pts = np.asarray(points, dtype=np.float64) * scale
    n = len(pts)
    links = [(i, j) for i in range(n) for j in range(i + 1, n)]
    dist = [float(np.linalg.norm(pts[i] - pts[j])) for i, j in links]
    g = from_undirected(n, links, node_attrs=pts, weights=dist)
    if n <= oracles.TSP_EXACT_MAX:
        length, approx = oracles.tsp_exact(pts), False
    else:
        length, approx = oracles.tsp_heuristic(pts)
    meta = {"size": n, "gen_n": n, "approximate": bool(approx)}
    return TaskSample(g, [length], "tsp", meta)


def make_physics_sample(spec: DatasetSpec, seed: int) -> TaskSample:
    rng = rng_for(seed, 0x5048)
    n = max(_sample_size(spec, rng), 4)
    top = 200 * oracles.BALL_RADIUS
    gap, v = float(rng.uniform(0, top)), float(rng.uniform(0, top))
    return physics_sample(n, gap, v, spec.attr_scale)


def physics_sample(n: int, gap: float, v: float, scale: float = 1.0) -> TaskSample:
    """Chain of ``n`` balls; ball 0 approaches with speed ``v`` across ``gap``."""
    r = oracles.BALL_RADIUS
    start = oracles.newton_start(n, gap, r)
    origin = float(start[1] + start[-1]) / 2.0
    state = oracles.newton_step(n, gap, v, 1.0, r)
    speed0 = np.zeros(n)
    speed0[0] = v
    after_pos = start.copy()
    after_pos[0] = state.left_pos
    after_pos[-1] = state.right_pos
    after_speed = np.zeros(n)
    after_speed[0], after_speed[-1] = state.left_speed, state.right_speed
    links = [(i, i + 1) for i in range(n - 1)]
    gaps = [gap] + [0.0] * (n - 2)
    node_attrs = np.stack([start - origin, speed0], axis=1) * scale
    g = from_undirected(n, links, node_attrs=node_attrs, weights=np.asarray(gaps) * scale)
    target = np.stack([after_pos - origin, after_speed], axis=1) * scale
    meta = {"size": n, "gen_n": n, "gap": gap, "speed": v,
            "collision": oracles.collides(gap, v), "target_nodes": [0, n - 1],
            "attr_scale": scale, "approximate": False}
    return TaskSample(g, target, "physics", meta)


def grid_graph(side: int) -> Graph:
    links = []
    for r in range(side):
        for c in range(side):
            i = r * side + c
            if c + 1 < side:
                links.append((i, i + 1))
            if r + 1 < side:
                links.append((i, i + side))
    return from_undirected(side * side, links)


def _passable_components(ok: np.ndarray) -> list[list[tuple[int, int]]]:
    side_r, side_c = ok.shape
    seen = np.zeros_like(ok, dtype=bool)
    comps = []
    for r in range(side_r):
        for c in range(side_c):
            if not ok[r, c] or seen[r, c]:
                continue
            comp, queue = [], deque([(r, c)])
            seen[r, c] = True
            while queue:
                cr, cc = queue.popleft()
                comp.append((cr, cc))
                for nr, nc in ((cr - 1, cc), (cr + 1, cc), (cr, cc - 1), (cr, cc + 1)):
                    if 0 <= nr < side_r and 0 <= nc < side_c and ok[nr, nc] and not seen[nr, nc]:
                        seen[nr, nc] = True
                        queue.append((nr, nc))
            comps.append(comp)
    return comps


def make_navigation_sample(spec: DatasetSpec, seed: int) -> TaskSample:
    rng = rng_for(seed, 0x4E56)
    side = max(_sample_size(spec, rng), 3)
    for _ in range(PAIR_RETRIES):
        heights = rng.random((side, side))
        comps = [c for c in _passable_components(oracles.passable(heights)) if len(c) > 1]
        if not comps:
            continue
        sizes = np.array([len(c) * (len(c) - 1) for c in comps], dtype=np.float64)
        comp = comps[int(rng.choice(len(comps), p=sizes / sizes.sum()))]
        i, j = rng.choice(len(comp), size=2, replace=False)
        return navigation_sample(heights, comp[i], comp[j], spec.attr_scale)
    raise RuntimeError(f"no connected passable pair after {PAIR_RETRIES} grids (seed {seed})")


def navigation_sample(heights, src, tgt, scale: float = 1.0) -> TaskSample:
    heights = np.asarray(heights, dtype=np.float64)
    side = heights.shape[0]
    ok, hops, _ = oracles.grid_truth(heights, src, tgt)
    if not ok:
        raise ValueError("target not reachable")
    s_idx, t_idx = src[0] * side + src[1], tgt[0] * side + tgt[1]
    roles = one_hot_roles(side * side, s_idx, t_idx)
    g = grid_graph(side)
    g = g.with_attrs(node_attrs=np.concatenate([heights.reshape(-1, 1), roles], axis=1) * scale,
                     edge_attrs=np.ones((g.num_edges, 1)) * scale)
    meta = {"size": side * side, "gen_n": side, "source": [int(src[0]), int(src[1])],
            "target": [int(tgt[0]), int(tgt[1])], "attr_scale": scale, "approximate": False}
    return TaskSample(g, [float(hops) * scale], "navigation", meta)


MAKERS = {
    "shortest_path": make_shortest_path_sample,
    "components": make_component_sample,
    "tsp": make_tsp_sample,
    "physics": make_physics_sample,
    "navigation": make_navigation_sample,
}


def sample_seed(spec: DatasetSpec, split: str, index: int) -> int:
    return derive_seed(spec.seed, SPLITS[split], index)


def _make_one(args) -> TaskSample:
    spec, seed = args
    return MAKERS[spec.task](spec, seed)


def generate_dataset(spec: DatasetSpec, split: str = "train", workers: int | None = None) -> list[TaskSample]:
    """Deterministic in ``(spec, split)``; the worker count never changes the output."""
    if workers is None:
        workers = int(os.environ.get("GRAPHITER_THREADS", "1"))
    jobs = [(spec, sample_seed(spec, split, i)) for i in range(spec.count)]
    if workers <= 1 or len(jobs) < 2:
        return [_make_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_make_one, jobs, chunksize=max(1, len(jobs) // (4 * workers))))


# persistence --------------------------------------------------------------

class DatasetFormatError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    return x


def sample_to_record(s: TaskSample) -> dict:
    g = s.graph
    edges = [[int(a), int(b), *attr] for a, b, attr in
             zip(g.senders.tolist(), g.receivers.tolist(), g.edge_attrs.tolist())]
    target = s.target.tolist() if s.target.ndim > 1 else s.scalar_target
    meta = dict(_jsonable(s.meta))
    meta["edge_dim"] = int(g.edge_attrs.shape[1])
    return {"task": s.task, "n": g.num_nodes, "node_attrs": g.node_attrs.tolist(),
            "edges": edges, "target": target, "meta": meta}


def record_to_sample(rec: dict) -> TaskSample:
    n = int(rec["n"])
    meta = dict(rec["meta"])
    d_e = int(meta.pop("edge_dim", 1))
    edges = rec["edges"]
    senders = [int(e[0]) for e in edges]
    receivers = [int(e[1]) for e in edges]
    attrs = np.array([e[2:] for e in edges], dtype=np.float64).reshape(len(edges), d_e)
    node_attrs = np.array(rec["node_attrs"], dtype=np.float64).reshape(n, -1)
    g = Graph(n, node_attrs, senders, receivers, attrs)
    target = rec["target"]
    target = np.array(target, dtype=np.float64) if isinstance(target, list) else np.array([target], dtype=np.float64)
    return TaskSample(g, target, rec["task"], meta)


def write_dataset(samples, path) -> None:
    tasks = {s.task for s in samples}
    if len(tasks) > 1:
        raise ValueError(f"mixed task kinds in one file: {sorted(tasks)}")
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(sample_to_record(s)) + "\n")


def read_dataset(path) -> list[TaskSample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(record_to_sample(json.loads(line)))
            except (ValueError, KeyError, TypeError, IndexError) as exc:
                raise DatasetFormatError(lineno, str(exc)) from exc
    return out


def verify_target(s: TaskSample) -> bool:
    """Recompute a sample's label with its oracle."""
    g = s.graph
    if s.task == "shortest_path":
        return oracles.dijkstra(g, s.meta["source"]).dist[s.meta["target"]] == s.scalar_target
    if s.task == "components":
        return oracles.count_components(g) == s.scalar_target
    if s.task == "tsp":
        if s.meta.get("approximate"):
            return oracles.tsp_heuristic(g.node_attrs)[0] == s.scalar_target
        return abs(oracles.tsp_exact(g.node_attrs) - s.scalar_target) <= 1e-9 * s.scalar_target
    if s.task == "navigation":
        side = int(round(np.sqrt(g.num_nodes)))
        scale = s.meta.get("attr_scale", 1.0)
        heights = (g.node_attrs[:, 0] / scale).reshape(side, side)
        ok, hops, _ = oracles.grid_truth(heights, s.meta["source"], s.meta["target"])
        return ok and hops * scale == s.scalar_target
    if s.task == "physics":
        ref = physics_sample(g.num_nodes, s.meta["gap"], s.meta["speed"], s.meta.get("attr_scale", 1.0))
        return np.array_equal(ref.target, s.target)
    raise ValueError(f"unknown task {s.task!r}")
