import json

import numpy as np
import pytest

from graphiter import tensor as T
from graphiter.graph import from_undirected, generate, rng_for
from graphiter.layers import (GN_KINDS, BatchContext, ConfigurationError, GNBlockSpec, LayerParams, MLPSpec,
                              gn_forward, homogenize, homomlp_forward, init_gn, init_mlp, mlp_forward,
                              readout, scale_invariant_softmax)
from graphiter.oracles import bellman_ford_k
from graphiter.tensor import Tensor


def max_rel_diff(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-300))


def random_graph(seed, node_in=3, edge_dim=1, n_max=12):
    rng = rng_for(seed, 21)
    n = int(rng.integers(2, n_max))
    g = generate("er", seed, n=n, p=0.4)
    return g.with_attrs(rng.normal(size=(n, node_in)),
                        rng.uniform(0.5, 1.5, size=(g.num_edges, edge_dim)))


def test_mlp_zero_weights_zero_output():
    spec = MLPSpec((3, 4, 2))
    params = LayerParams()
    init_mlp(spec, params, "m", rng_for(0))
    params.load_values({k: np.zeros(p.shape) for k, p in params.items()})
    assert np.array_equal(mlp_forward(spec, params, Tensor(np.ones((5, 3))), "m").data, np.zeros((5, 2)))


def test_mlp_identity_layer():
    spec = MLPSpec((3, 3), use_bias=False)
    params = LayerParams()
    params.add("m/0/W", np.eye(3))
    x = np.random.default_rng(0).normal(size=(4, 3))
    assert np.array_equal(mlp_forward(spec, params, Tensor(x), "m").data, x)


def test_mlp_shape_error():
    spec = MLPSpec((3, 2))
    params = LayerParams()
    init_mlp(spec, params, "m", rng_for(0))
    with pytest.raises(T.DimensionError):
        mlp_forward(spec, params, Tensor(np.ones((2, 4))), "m")


def test_homomlp_rejects_bias_and_sigmoid():
    params = LayerParams()
    with pytest.raises(ConfigurationError):
        homomlp_forward(MLPSpec((2, 2)), params, Tensor(np.ones((1, 2))))
    with pytest.raises(ConfigurationError):
        homogenize(MLPSpec((2, 1), final_activation="sigmoid"))


@pytest.mark.parametrize("lam", [1e-3, 0.5, 2.0, 1e3])
def test_homomlp_scaling(lam):
    spec = homogenize(MLPSpec((4, 16, 16, 3), "leaky_relu"))
    params = LayerParams()
    init_mlp(spec, params, "m", rng_for(1))
    x = np.random.default_rng(2).normal(size=(10, 4))
    a = homomlp_forward(spec, params, Tensor(lam * x), "m").data
    b = lam * homomlp_forward(spec, params, Tensor(x), "m").data
    assert max_rel_diff(a, b) <= 1e-12


def test_l1_fixture():
    d = 2
    spec = MLPSpec((d, 2 * d, 1), "relu", use_bias=False)
    params = LayerParams()
    params.add("l1/0/W", np.hstack([np.eye(d), -np.eye(d)]))
    params.add("l1/1/W", np.ones((2 * d, 1)))
    assert homomlp_forward(spec, params, Tensor(np.array([[3.0, -4.0]])), "l1").item() == 7.0


def test_scale_invariant_softmax_examples():
    w = scale_invariant_softmax(Tensor(np.array([[1.0], [1.0]])), [0, 0], 1).data
    assert np.array_equal(w, [[0.5], [0.5]])
    assert scale_invariant_softmax(Tensor(np.array([[4.2]])), [0], 1).data[0, 0] == 1.0
    s = np.random.default_rng(0).normal(size=(7, 1))
    ids = [0, 0, 0, 1, 1, 2, 2]
    a = scale_invariant_softmax(Tensor(10 * s), ids, 3).data
    b = scale_invariant_softmax(Tensor(s), ids, 3).data
    assert max_rel_diff(a, b) <= 1e-14
    assert np.allclose(np.bincount(ids, weights=b[:, 0]), 1.0)


def test_scale_invariant_softmax_gradient_bounded_for_near_ties():
    scores = np.array([[1.0], [1.0 + 1e-15]])
    err = T.finite_diff_check(lambda s: scale_invariant_softmax(s, [0, 0], 1) * np.array([[1.0], [2.0]]),
                              scores, h=1e-7)
    leaf = Tensor(scores, requires_grad=True)
    with T.Tape() as tape:
        loss = (scale_invariant_softmax(leaf, [0, 0], 1) * np.array([[1.0], [2.0]])).sum()
    assert np.abs(T.backward(loss, tape)[leaf]).max() < 1e4
    assert np.isfinite(err)


# GN blocks ----------------------------------------------------------------

def make_block(kind, seed, homogeneous=True, hidden=8, node_in=3, edge_dim=1):
    spec = GNBlockSpec(kind, hidden, node_in, edge_dim, message_hidden=(hidden,))
    if homogeneous:
        spec = homogenize(spec)
    params = LayerParams()
    init_gn(spec, params, "gn", rng_for(seed, 3))
    return spec, params


@pytest.mark.parametrize("kind", GN_KINDS)
def test_block_homogeneity(kind):
    for seed in range(25):
        spec, params = make_block(kind, seed)
        g = random_graph(seed)
        h = np.random.default_rng(seed).normal(size=(g.num_nodes, 8))
        base = gn_forward(spec, params, BatchContext(g), Tensor(h), prefix="gn").data
        for lam in (1e-3, 0.5, 2.0, 1e3):
            scaled = gn_forward(spec, params, BatchContext(g.scaled(lam)), Tensor(lam * h), prefix="gn").data
            assert max_rel_diff(scaled, lam * base) <= 1e-9, (kind, seed, lam)


def test_biased_pathgnn_breaks_scaling():
    spec, params = make_block("pathgnn", 0, homogeneous=False)
    g = random_graph(0)
    h = np.random.default_rng(0).normal(size=(g.num_nodes, 8))
    base = gn_forward(spec, params, BatchContext(g), Tensor(h), prefix="gn").data
    scaled = gn_forward(spec, params, BatchContext(g.scaled(3.0)), Tensor(3 * h), prefix="gn").data
    assert max_rel_diff(scaled, 3 * base) > 1e-6


def test_homogenize_idempotent_and_rejects_sigmoid():
    spec = GNBlockSpec("pathgnn")
    assert homogenize(homogenize(spec)) == homogenize(spec)
    with pytest.raises(ConfigurationError):
        homogenize(GNBlockSpec("pathgnn", activation="sigmoid"))


@pytest.mark.parametrize("kind", GN_KINDS)
def test_isolated_node_keeps_state(kind):
    spec, params = make_block(kind, 1)
    g = from_undirected(3, [(0, 1)]).with_attrs(np.ones((3, 3)))
    h = np.random.default_rng(1).normal(size=(3, 8))
    out = gn_forward(spec, params, BatchContext(g), Tensor(h), prefix="gn").data
    assert np.array_equal(out[2], h[2])


@pytest.mark.parametrize("kind", GN_KINDS)
def test_block_permutation_equivariance(kind):
    spec, params = make_block(kind, 4)
    g = random_graph(4)
    n = g.num_nodes
    perm = np.random.default_rng(4).permutation(n)
    inv = np.argsort(perm)
    h = np.random.default_rng(5).normal(size=(n, 8))
    # node i of the relabelled graph is node perm[i] of the original
    g2 = type(g)(n, g.node_attrs[perm], inv[g.senders], inv[g.receivers], g.edge_attrs)
    a = gn_forward(spec, params, BatchContext(g), Tensor(h), prefix="gn").data
    b = gn_forward(spec, params, BatchContext(g2), Tensor(h[perm]), prefix="gn").data
    assert np.allclose(b, a[perm], rtol=1e-12, atol=1e-12)


def test_width_mismatch_raises():
    spec, params = make_block("pathgnn", 0)
    g = random_graph(0)
    with pytest.raises(T.DimensionError):
        gn_forward(spec, params, BatchContext(g), Tensor(np.ones((g.num_nodes, 5))), prefix="gn")


def bellman_ford_block():
    spec = GNBlockSpec("mpnn_max", hidden=1, node_in=0, edge_dim=1, homogeneous=True,
                       input_concat=False, activation="identity", message_hidden=())
    params = LayerParams()
    params.add("bf/msg/0/W", np.array([[1.0], [0.0], [-1.0]]))  # [h_s, h_r, w] -> h_s - w
    return spec, params


def test_mpnn_max_realizes_bellman_ford():
    spec, params = bellman_ford_block()
    for seed in range(30):
        rng = rng_for(seed, 8)
        n = int(rng.integers(2, 21))
        g = generate("er", seed, n=n, p=0.3)
        g = g.with_attrs(np.zeros((n, 0)), rng.uniform(0.1, 5.0, size=(g.num_edges, 1)))
        ctx = BatchContext(g)
        h = Tensor(-bellman_ford_k(g, 0, 0)[:, None])
        for k in range(1, 21):
            h = gn_forward(spec, params, ctx, h, prefix="bf")
            assert np.abs(-h.data[:, 0] - bellman_ford_k(g, 0, k)).max() <= 1e-9


def test_readout_modes():
    h = Tensor(np.array([[1.0], [5.0], [2.0]]))
    assert readout(h, [0, 0, 1], 2, "max").data.tolist() == [[5.0], [2.0]]
    assert readout(h, [0, 0, 1], 2, "sum").data.tolist() == [[6.0], [2.0]]
    assert readout(h, [0, 0, 1], 2, "mean").data.tolist() == [[3.0], [2.0]]
    perm = [2, 0, 1]
    assert readout(Tensor(h.data[perm]), np.array([0, 0, 1])[perm], 2, "max").data.tolist() == [[5.0], [2.0]]


# gradients ----------------------------------------------------------------

def test_mlp_gradient_check():
    spec = MLPSpec((3, 6, 2), "leaky_relu")
    params = LayerParams()
    init_mlp(spec, params, "m", rng_for(0))
    x = Tensor(np.random.default_rng(0).normal(size=(5, 3)))
    def loss():
        y = mlp_forward(spec, params, x, "m")
        return (y * y).sum()

    err = T.param_diff_check(loss, params.values())
    assert err <= 1e-4


@pytest.mark.parametrize("kind", GN_KINDS)
@pytest.mark.parametrize("homogeneous", [True, False])
def test_block_gradient_check(kind, homogeneous):
    spec, params = make_block(kind, 7, homogeneous)
    g = random_graph(7)
    ctx = BatchContext(g)
    h = Tensor(np.random.default_rng(7).normal(size=(g.num_nodes, 8)))
    weights = np.random.default_rng(8).uniform(0.5, 1.5, size=(g.num_nodes, 8))
    err = T.param_diff_check(lambda: (gn_forward(spec, params, ctx, h, prefix="gn") * weights).sum(),
                             params.values(), h=1e-5, max_coords=150)
    assert err <= 1e-4
    err_h = T.finite_diff_check(lambda x: gn_forward(spec, params, ctx, x, prefix="gn"), h.data, h=1e-5)
    assert err_h <= 1e-4


# serialization ------------------------------------------------------------

def test_params_json_roundtrip_exact():
    spec, params = make_block("pathgnn", 3)
    back = LayerParams.from_json(params.to_json())
    assert set(back) == set(params)
    assert all(np.array_equal(back[k].data, params[k].data) for k in params)
    doc = json.loads(params.to_json())
    assert all(set(v) == {"shape", "values"} for v in doc.values())


def test_params_duplicate_path():
    params = LayerParams()
    params.add("a", np.ones(2))
    with pytest.raises(KeyError):
        params.add("a", np.ones(2))
