import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from graphiter import tensor as T
from graphiter.iterative import (IterConfig, act_iterate, expectation_weights, fixed_depth_shared, iterate,
                                 iterate_nodewise, iterate_streaming, write_trace_csv)
from graphiter.tensor import Tensor


class Scripted:
    """Body emitting fixed states and a confidence head replaying a fixed sequence."""

    def __init__(self, states, confidences):
        self.states = [np.asarray(s, dtype=float) for s in states]
        self.conf = [np.asarray(c, dtype=float).reshape(-1, 1) for c in confidences]
        self.k = 0
        self.c = 0

    def body(self, h):
        out = Tensor(self.states[self.k])
        self.k += 1
        return out

    def confidence(self, h):
        out = Tensor(self.conf[self.c])
        self.c += 1
        return out


def run(states, confs, cfg, mode="eval", unit_ids=None):
    s = Scripted(states, confs)
    return iterate(s.body, s.confidence, Tensor(np.zeros_like(s.states[0])), cfg, mode, unit_ids)


def test_worked_example():
    rng = np.random.default_rng(0)
    a, b = 0.3, 0.9995
    states = [rng.normal(size=(1, 4)) for _ in range(2)]
    out, (tr,) = run(states, [a, b], IterConfig(epsilon=1e-3, decay=1.0))
    assert tr.steps == 2 and not tr.forced_halt
    assert np.abs(out.data - (a * states[0] + (1 - a) * b * states[1])).max() <= 1e-12


def test_near_certain_first_step():
    d = 1e-4
    out, (tr,) = run([np.ones((1, 2))], [1 - d], IterConfig(epsilon=1e-3, decay=1.0))
    assert tr.steps == 1 and abs(tr.weights[0] - (1 - d)) < 1e-15


def test_weights_match_product_formula():
    rng = np.random.default_rng(1)
    for _ in range(100):
        c = rng.uniform(0.01, 0.6, size=12)
        lam = rng.choice([1.0, 0.9999, 0.99])
        _, (tr,) = run([np.ones((1, 1))] * 12, list(c), IterConfig(epsilon=1e-9, decay=lam, max_iter_eval=12))
        ref = expectation_weights(c, lam)
        ref[-1] = lam ** 11 * np.prod(1 - c[:-1])  # forced halt at the cap
        assert np.abs(np.array(tr.weights) - ref).max() <= 1e-12


def test_mass_accounting_random_traces():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        k = int(rng.integers(1, 60))
        c = rng.uniform(0.0, 1.0, size=k) ** 3
        lam = rng.choice([1.0, 0.9999, 0.9])
        cfg = IterConfig(epsilon=1e-3, decay=lam, max_iter_eval=k)
        _, (tr,) = run([np.ones((1, 1))] * k, list(c), cfg)
        total = sum(tr.weights) + tr.residual + tr.leak
        assert abs(total - 1.0) <= 1e-12
        if tr.forced_halt:
            assert tr.residual == 0.0
        if lam == 1.0:
            assert 1 - cfg.epsilon < sum(tr.weights) <= 1.0 + 1e-12 or tr.forced_halt


def test_forced_halt_sums_to_one():
    _, (tr,) = run([np.ones((1, 1))] * 5, [0.1] * 5, IterConfig(decay=1.0, max_iter_eval=5))
    assert tr.forced_halt and tr.steps == 5
    assert abs(sum(tr.weights) - 1.0) <= 1e-15


def test_train_cap_applies_in_train_mode():
    _, (tr,) = run([np.ones((1, 1))] * 40, [0.01] * 40, IterConfig(max_iter_train=30), mode="train")
    assert tr.steps == 30 and tr.forced_halt


def test_confidence_outside_unit_interval_rejected():
    with pytest.raises(ValueError, match="sigmoid"):
        run([np.ones((1, 1))], [1.5], IterConfig())


def test_config_validation():
    for kwargs in ({"epsilon": 0.0}, {"decay": 0.0}, {"decay": 1.1}, {"max_iter_train": 0}):
        with pytest.raises(ValueError):
            IterConfig(**kwargs)
    with pytest.raises(ValueError):
        IterConfig().cap("test")


def test_per_unit_halting_masks_finished_units():
    # two graphs: unit 0 halts at step 1, unit 1 at step 3
    states = [np.array([[1.0], [10.0], [100.0]]) * (k + 1) for k in range(3)]
    confs = [[1.0, 0.2], [0.5, 0.5], [0.5, 1.0]]
    unit_ids = np.array([0, 1, 1])
    out, traces = run(states, confs, IterConfig(decay=1.0), unit_ids=unit_ids)
    assert [t.steps for t in traces] == [1, 3]
    w1 = np.array([0.2, 0.8 * 0.5, 0.8 * 0.5 * 1.0])
    expected_unit1 = sum(w * s[1:] for w, s in zip(w1, states))
    assert out.data[0, 0] == 1.0
    assert np.allclose(out.data[1:], expected_unit1, rtol=0, atol=1e-12)


# streaming --------------------------------------------------------------

def stream_vs_batch(k, lam, seed, units=1):
    rng = np.random.default_rng(seed)
    states = [rng.normal(size=(units, 3)) for _ in range(k)]
    confs = [rng.uniform(0.0, 0.05, size=units) for _ in range(k)]
    cfg = IterConfig(epsilon=1e-300, decay=lam, max_iter_eval=k)
    a = run(states, confs, cfg)[0].data
    s = Scripted(states, confs)
    b = iterate_streaming(s.body, s.confidence, Tensor(np.zeros((units, 3))), cfg, None).data
    return np.abs(a - b).max()


def test_streaming_matches_batch():
    rng = np.random.default_rng(3)
    for trial in range(1000):
        k = int(rng.integers(1, 501)) if trial < 20 else int(rng.integers(1, 60))
        assert stream_vs_batch(k, rng.choice([1.0, 0.9999]), trial) <= 1e-12


def test_streaming_first_step_certain():
    s = Scripted([np.full((1, 2), 3.0), np.zeros((1, 2))], [1.0, 0.5])
    out = iterate_streaming(s.body, s.confidence, Tensor(np.zeros((1, 2))), IterConfig())
    assert np.array_equal(out.data, np.full((1, 2), 3.0))


# gradient flow ------------------------------------------------------------

def test_gradient_through_confidences_and_states():
    rng = np.random.default_rng(4)
    w_body = rng.normal(size=(3, 3)) * 0.5
    w_conf = rng.normal(size=(3, 1))

    def f(x):
        body = lambda h: T.leaky_relu(h @ w_body, 0.1) + x
        conf = lambda h: T.sigmoid(h.sum(axis=0).reshape(1, 3) @ w_conf)
        out, _ = iterate(body, conf, x, IterConfig(decay=0.99), "train", np.zeros(4, dtype=np.int64))
        return out

    for seed in range(20):
        x = np.random.default_rng(seed).normal(size=(4, 3))
        assert T.finite_diff_check(f, x, h=1e-6) <= 1e-4


# node-wise --------------------------------------------------------------------

def test_nodewise_identical_confidences_match_graph_level():
    rng = np.random.default_rng(5)
    states = [rng.normal(size=(3, 2)) for _ in range(6)]
    confs = [rng.uniform(0.1, 0.9) for _ in range(6)]
    cfg = IterConfig(decay=0.9999, max_iter_eval=6)
    graph_out = run(states, confs, cfg, unit_ids=np.zeros(3, dtype=np.int64))[0].data
    s = Scripted(states, [[c] * 3 for c in confs])
    node_out, traces = iterate_nodewise(s.body, s.confidence, Tensor(np.zeros((3, 2))), cfg, "eval")
    assert np.abs(node_out.data - graph_out).max() <= 1e-15
    assert len(traces) == 3


def test_nodewise_independent_halting():
    states = [np.array([[1.0], [1.0]]), np.array([[2.0], [2.0]])]
    s = Scripted(states, [[1.0, 0.0], [0.3, 1.0]])
    out, traces = iterate_nodewise(s.body, s.confidence, Tensor(np.zeros((2, 1))), IterConfig(decay=1.0))
    assert out.data.tolist() == [[1.0], [2.0]]
    assert [t.steps for t in traces] == [1, 2]
    for t in traces:
        assert abs(sum(t.weights) + t.residual + t.leak - 1.0) <= 1e-12


# ACT ----------------------------------------------------------------------------

def run_act(states, confs, cfg=IterConfig(decay=1.0)):
    s = Scripted(states, confs)
    return act_iterate(s.body, s.confidence, Tensor(np.zeros_like(s.states[0])), cfg, "eval")


def test_act_examples():
    h1, h2 = np.array([[1.0]]), np.array([[3.0]])
    out, (tr,) = run_act([h1, h2], [0.6, 0.6])
    assert tr.steps == 2 and abs(out.item() - (0.6 * 1 + 0.4 * 3)) < 1e-15
    d = 1e-3
    out, (tr,) = run_act([h1, h2], [1 - d, 0.5])
    assert tr.steps == 2 and np.allclose(tr.weights, [1 - d, d])


def test_act_halts_no_later_than_iterate():
    rng = np.random.default_rng(6)
    for _ in range(500):
        c = list(rng.uniform(0.0, 0.5, size=80))
        eps = float(rng.uniform(1e-4, 0.25))
        cfg = IterConfig(epsilon=eps, decay=1.0, max_iter_eval=80)
        states = [np.ones((1, 1))] * 80
        act_steps = run_act(states, c, cfg)[1][0].steps
        iter_steps = run(states, c, cfg)[1][0].steps
        assert act_steps <= iter_steps


# fixed depth ---------------------------------------------------------------------

def test_fixed_depth_shared():
    h0 = Tensor(np.array([[1.5, -2.0]]))
    assert np.array_equal(fixed_depth_shared(lambda h: h * 2.0, h0, 1).data, h0.data * 2)
    assert np.array_equal(fixed_depth_shared(lambda h: h, h0, 7).data, h0.data)
    assert np.array_equal(fixed_depth_shared(lambda h: h * 2.0, h0, 5).data, 32 * h0.data)
    with pytest.raises(ValueError):
        fixed_depth_shared(lambda h: h, h0, 0)


# trace export --------------------------------------------------------------------

def test_trace_csv(tmp_path):
    _, traces = run([np.ones((1, 1))] * 3, [0.2, 0.5, 1.0], IterConfig(decay=1.0))
    path = tmp_path / "trace.csv"
    write_trace_csv(path, [(7, traces[0])])
    lines = path.read_text().splitlines()
    assert lines[0] == "sample_id,steps,forced_halt,first_crossing"
    assert lines[1] == "7,3,0,2"


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=20))
def test_weights_nonnegative_and_bounded(confs):
    cfg = IterConfig(epsilon=1e-3, decay=0.9999, max_iter_eval=len(confs))
    _, (tr,) = run([np.ones((1, 1))] * len(confs), confs, cfg)
    assert all(w >= 0 for w in tr.weights)
    assert sum(tr.weights) <= 1.0 + 1e-12
