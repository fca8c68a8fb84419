import itertools
import json

import numpy as np
import pytest

from graphiter import oracles
from graphiter.graph import from_undirected, generate_multi_component
from graphiter.tasks import (DatasetFormatError, DatasetSpec, component_sample, generate_dataset,
                             make_physics_sample, navigation_sample, physics_sample, read_dataset, reencode,
                             shortest_path_sample, tsp_sample, verify_target, write_dataset)


def brute_force_length(g, s, t):
    """Minimum over all simple paths, by enumeration."""
    w = {}
    for a, b, x in zip(g.senders.tolist(), g.receivers.tolist(), g.edge_attrs[:, 0].tolist()):
        w[(a, b)] = min(x, w.get((a, b), np.inf))
    others = [v for v in range(g.num_nodes) if v not in (s, t)]
    best = np.inf
    for k in range(len(others) + 1):
        for mid in itertools.permutations(others, k):
            route = (s, *mid, t)
            if all(e in w for e in zip(route[:-1], route[1:])):
                best = min(best, sum(w[e] for e in zip(route[:-1], route[1:])))
    return best


# shortest path -------------------------------------------------------------------

def test_two_node_sample():
    s = shortest_path_sample(from_undirected(2, [(0, 1)]), 0, 1)
    assert s.scalar_target == 1.0
    assert s.graph.node_attrs.tolist() == [[1, 0, 0], [0, 1, 0]]


def test_path_endpoints():
    s = shortest_path_sample(from_undirected(5, [(i, i + 1) for i in range(4)]), 0, 4)
    assert s.scalar_target == 4.0 and s.meta["hops"] == 4
    assert s.graph.node_attrs[2].tolist() == [0, 0, 1]


def test_unreachable_target_rejected():
    with pytest.raises(ValueError):
        shortest_path_sample(from_undirected(3, [(0, 1)]), 0, 2)


@pytest.mark.parametrize("weighted", [False, True])
def test_generated_targets_match_brute_force(weighted):
    spec = DatasetSpec(n_min=4, n_max=8, count=60, weighted=weighted, seed=3)
    for s in generate_dataset(spec):
        assert s.meta["size"] == s.graph.num_nodes
        ref = brute_force_length(s.graph, s.meta["source"], s.meta["target"])
        assert abs(s.scalar_target - ref) <= 1e-12
        assert s.meta["source"] != s.meta["target"]
        assert verify_target(s)


def test_weights_in_range_and_symmetric():
    spec = DatasetSpec(weighted=True, count=30, seed=1)
    for s in generate_dataset(spec):
        w = s.graph.edge_attrs[:, 0]
        assert np.all((w >= 0.5) & (w < 1.5))
        lookup = {(a, b): x for a, b, x in zip(s.graph.senders, s.graph.receivers, w)}
        assert all(lookup[(b, a)] == x for (a, b), x in lookup.items())


def test_unweighted_edges_are_one():
    for s in generate_dataset(DatasetSpec(count=10)):
        assert np.all(s.graph.edge_attrs == 1.0)


def test_reencode_moves_roles():
    s = shortest_path_sample(from_undirected(4, [(0, 1), (1, 2), (2, 3)]), 0, 3, scale=2.0)
    g = reencode(s, 2, 3)
    assert g.node_attrs[2].tolist() == [2, 0, 0] and g.node_attrs[3].tolist() == [0, 2, 0]
    assert np.array_equal(g.senders, s.graph.senders)


def test_attr_scale():
    base = generate_dataset(DatasetSpec(count=5, seed=2))
    scaled = generate_dataset(DatasetSpec(count=5, seed=2, attr_scale=4.0))
    for a, b in zip(base, scaled):
        assert np.array_equal(a.graph.node_attrs * 4.0, b.graph.node_attrs)


# components -----------------------------------------------------------------------

def test_component_examples():
    rng = np.random.default_rng(0)
    g, m = generate_multi_component(12, "lobster", 3, m=1)
    s = component_sample(g, m, rng)
    assert s.scalar_target == 1.0
    tri = from_undirected(6, [(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5)])
    s = component_sample(tri, 2, rng)
    assert s.scalar_target == 2.0 and verify_target(s)
    assert np.all((s.graph.node_attrs >= 0) & (s.graph.node_attrs < 1)) and s.graph.node_attrs.shape == (6, 1)


def test_component_census():
    data = generate_dataset(DatasetSpec(task="components", count=500, n_min=6, n_max=34, seed=5))
    counts = {int(s.scalar_target) for s in data}
    assert set(range(1, 7)) <= counts
    assert all(verify_target(s) for s in data[::10])


# TSP -------------------------------------------------------------------------------

def test_tsp_triangle():
    s = tsp_sample([(0, 0), (3, 0), (0, 4)])
    assert abs(s.scalar_target - 12.0) < 1e-12
    assert s.graph.num_edges == 6


def test_tsp_square_and_scaling():
    sq = [(0, 0), (1, 0), (1, 1), (0, 1)]
    assert abs(tsp_sample(sq, scale=5.0).scalar_target - 20.0) < 1e-12
    rng = np.random.default_rng(0)
    pts = rng.integers(1, 1001, size=(7, 2))
    assert abs(tsp_sample(pts, 2.0).scalar_target - 2 * tsp_sample(pts).scalar_target) <= 1e-9


def test_tsp_generated():
    for s in generate_dataset(DatasetSpec(task="tsp", n_min=3, n_max=9, count=20)):
        assert np.all((s.graph.node_attrs >= 1) & (s.graph.node_attrs <= 1000))
        assert not s.meta["approximate"] and verify_target(s)


# physics ---------------------------------------------------------------------------

def test_physics_no_collision():
    r = oracles.BALL_RADIUS
    s = physics_sample(5, gap=10 * r, v=3 * r)
    pos, speed = s.graph.node_attrs[:, 0], s.graph.node_attrs[:, 1]
    assert abs(s.target[0, 0] - (pos[0] + 3 * r)) < 1e-12
    assert s.target[-1, 0] == pos[-1] and s.target[-1, 1] == 0.0
    assert speed[0] == 3 * r
    assert abs(pos[1] + pos[-1]) < 1e-12  # origin centred


def test_physics_touching():
    s = physics_sample(4, gap=0.0, v=1.0)
    assert s.target[0, 1] == 0.0 and s.target[-1, 1] == 1.0


def test_physics_collision_fraction():
    spec = DatasetSpec(task="physics", n_min=4, n_max=10)
    hits = [make_physics_sample(spec, seed).meta["collision"]
            for seed in range(10000)]
    assert abs(np.mean(hits) - 0.5) <= 0.02


# navigation ------------------------------------------------------------------------

def test_navigation_examples():
    s = navigation_sample(np.zeros((3, 3)), (0, 0), (2, 2))
    assert s.scalar_target == 4.0
    assert s.graph.node_attrs.shape == (9, 4) and np.all(s.graph.edge_attrs == 1)
    assert navigation_sample(np.zeros((3, 3)), (1, 1), (1, 2)).scalar_target == 1.0


def test_navigation_generated_matches_oracle():
    for s in generate_dataset(DatasetSpec(task="navigation", n_min=3, n_max=8, count=50, seed=4)):
        assert verify_target(s)


# determinism & splits ----------------------------------------------------------------

def test_generation_deterministic_and_thread_independent():
    spec = DatasetSpec(count=12, seed=9)
    a = generate_dataset(spec, "train", workers=1)
    b = generate_dataset(spec, "train", workers=2)
    assert all(x.same_as(y) for x, y in zip(a, b))


def test_splits_disjoint():
    spec = DatasetSpec(count=50, seed=0, n_min=10, n_max=34)
    key = lambda s: (s.graph.num_nodes, s.graph.senders.tobytes(), s.meta["source"], s.meta["target"])
    train = {key(s) for s in generate_dataset(spec, "train")}
    test = {key(s) for s in generate_dataset(spec, "test")}
    assert not train & test


def test_dataset_spec_validation():
    for kwargs in ({"task": "pacman"}, {"n_min": 1}, {"n_min": 5, "n_max": 5},
                   {"weighted": True, "weight_min": 0.0}, {"attr_scale": -1.0}):
        with pytest.raises(ValueError):
            DatasetSpec(**kwargs)


# persistence -------------------------------------------------------------------------

def test_empty_round_trip(tmp_path):
    write_dataset([], tmp_path / "e.jsonl")
    assert read_dataset(tmp_path / "e.jsonl") == []


@pytest.mark.parametrize("task", ["shortest_path", "components", "tsp", "physics", "navigation"])
def test_round_trip_exact(tmp_path, task):
    spec = DatasetSpec(task=task, n_min=4, n_max=9, count=8, weighted=task == "shortest_path", seed=1)
    data = generate_dataset(spec)
    write_dataset(data, tmp_path / "d.jsonl")
    back = read_dataset(tmp_path / "d.jsonl")
    assert len(back) == len(data) and all(a.same_as(b) for a, b in zip(data, back))


def test_large_round_trip(tmp_path):
    data = generate_dataset(DatasetSpec(count=1000, n_min=4, n_max=12, weighted=True))
    write_dataset(data, tmp_path / "big.jsonl")
    back = read_dataset(tmp_path / "big.jsonl")
    assert all(a.same_as(b) for a, b in zip(data, back))
    assert all(verify_target(s) for s in back[::10])


def test_mixed_tasks_rejected(tmp_path):
    a = generate_dataset(DatasetSpec(count=1))
    b = generate_dataset(DatasetSpec(task="tsp", n_min=3, n_max=5, count=1))
    with pytest.raises(ValueError):
        write_dataset(a + b, tmp_path / "x.jsonl")


def test_malformed_line_reports_number(tmp_path):
    data = generate_dataset(DatasetSpec(count=2))
    path = tmp_path / "bad.jsonl"
    write_dataset(data, path)
    with open(path, "a") as fh:
        fh.write(json.dumps({"task": "shortest_path"}) + "\n")
    with pytest.raises(DatasetFormatError) as err:
        read_dataset(path)
    assert err.value.line == 3
