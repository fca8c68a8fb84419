"""Built-in invariant suites run by ``graphiter selftest`` and the acceptance tests.

Each suite returns a :class:`SuiteResult` listing the module it exercises,
how many randomized trials ran and a message (with the seed) for every
violated invariant.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import iterative as it
from . import oracles
from . import tensor as T
from .graph import generate, rng_for
from .layers import (GN_KINDS, BatchContext, GNBlockSpec, LayerParams, MLPSpec, gn_forward, homogenize,
                     init_gn, init_mlp, mlp_forward)
from .model import ModelSpec, forward, init_params
from .tensor import Tensor

SCALES = (1e-3, 0.5, 2.0, 1e3)
HOMOGENEITY_TOL = 1e-9
GRADIENT_TOL = 1e-4
# coordinates below this are compared absolutely: the loss is O(1), so a
# difference quotient with step 1e-5 cannot resolve gradients much smaller
GRADIENT_ATOL = 1e-6
ALGEBRA_TOL = 1e-12
FD_STEP = 1e-5


@dataclass
class SuiteResult:
    name: str
    module: str
    trials: int = 0
    worst: float = 0.0
    failures: list[str] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return not self.failures

    def check(self, ok: bool, message: str) -> None:
        if not ok:
            self.failures.append(message)


def max_rel_diff(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-300))


def random_graph(seed: int, node_in: int = 3, n_max: int = 12):
    """Small ER graph with Gaussian node attributes and positive edge weights."""
    rng = rng_for(seed, 0x5E1F)
    n = int(rng.integers(2, n_max))
    g = generate("er", seed, n=n, p=0.4)
    return g.with_attrs(rng.normal(size=(n, node_in)), rng.uniform(0.5, 1.5, size=(g.num_edges, 1)))


# homogeneity ------------------------------------------------------------------

HOMOGENEITY_CASES = ("homomlp", *GN_KINDS, "homo-path")


def _homogeneity_case(case: str, seed: int, inject_bias: bool):
    """Return ``F(graph_scale, hidden_scale)`` for one random homogenized model."""
    rng = rng_for(seed, 0x4803)
    g = random_graph(seed)
    if case == "homomlp":
        spec = homogenize(MLPSpec((3, 8, 8, 2), "leaky_relu" if seed % 2 else "relu"))
        if inject_bias:
            spec = replace(spec, use_bias=True)
        params = LayerParams()
        init_mlp(spec, params, "m", rng)
        x = g.node_attrs
        return lambda lam: mlp_forward(spec, params, Tensor(lam * x), "m").data
    if case == "homo-path":
        spec = ModelSpec(node_in=3, hidden=8, gn_kind="pathgnn", controller="stacked", depth=3,
                         homogeneous=not inject_bias)
        params = init_params(spec, seed)
        return lambda lam: forward(spec, params, BatchContext(g.scaled(lam)), "eval").prediction.data
    spec = homogenize(GNBlockSpec(case, 8, 3, 1, message_hidden=(8,)))
    if inject_bias:
        spec = replace(spec, homogeneous=False)
    params = LayerParams()
    init_gn(spec, params, "gn", rng)
    h = rng.normal(size=(g.num_nodes, 8))
    return lambda lam: gn_forward(spec, params, BatchContext(g.scaled(lam)), Tensor(lam * h), prefix="gn").data


def homogeneity_suite(trials: int = 500, inject_bias: bool = False) -> SuiteResult:
    """``F(lam * inputs) == lam * F(inputs)`` for random homogenized models.

    ``inject_bias`` is a negative-control hook: it re-enables biases in
    every model, which must make the suite fail.
    """
    res = SuiteResult("homogeneity", "nn-layers")
    t0 = time.perf_counter()
    for seed in range(trials):
        case = HOMOGENEITY_CASES[seed % len(HOMOGENEITY_CASES)]
        f = _homogeneity_case(case, seed, inject_bias)
        base = f(1.0)
        for lam in SCALES:
            err = max_rel_diff(f(lam), lam * base)
            res.worst = max(res.worst, err)
            res.check(err <= HOMOGENEITY_TOL, f"{case} seed={seed} lam={lam:g}: rel diff {err:.3e}")
        res.trials += 1
    res.seconds = time.perf_counter() - t0
    return res


# gradients ------------------------------------------------------------------------

GRADIENT_CASES = ("mlp", *(f"{k}/{h}" for k in GN_KINDS for h in ("homo", "plain")), "iter-homo-path")


def _gradient_case(case: str, seed: int) -> float:
    rng = rng_for(seed, 0x6AD)
    g = random_graph(seed, n_max=8)
    ctx = BatchContext(g)
    if case == "mlp":
        spec = MLPSpec((3, 6, 2), "leaky_relu")
        params = LayerParams()
        init_mlp(spec, params, "m", rng)
        x = Tensor(g.node_attrs)
        w = rng.uniform(0.5, 1.5, size=(g.num_nodes, 2))
        err = T.param_diff_check(lambda: (mlp_forward(spec, params, x, "m") * w).sum(), params.values(),
                                 h=FD_STEP, atol=GRADIENT_ATOL)
        return max(err, T.finite_diff_check(lambda v: mlp_forward(spec, params, v, "m"), g.node_attrs,
                                            h=FD_STEP, atol=GRADIENT_ATOL))
    if case == "iter-homo-path":
        # the cap is reached before the residual drops below epsilon, so
        # every perturbation runs the same number of steps
        spec = ModelSpec(node_in=3, hidden=6, gn_kind="pathgnn", controller="iter", activation="leaky_relu",
                         iter_cfg=it.IterConfig(max_iter_train=5, decay=0.9999))
        params = init_params(spec, seed)
        conf_keys = [k for k in params if "/conf/" in k]
        probe = [params[k] for k in conf_keys] + [params[k] for k in params if k not in conf_keys]
        return T.param_diff_check(lambda: forward(spec, params, ctx, "train").prediction.sum(), probe,
                                  h=FD_STEP, atol=GRADIENT_ATOL, max_coords=80, seed=seed)
    kind, flavour = case.split("/")
    spec = GNBlockSpec(kind, 6, 3, 1, activation="leaky_relu", message_hidden=(6,))
    if flavour == "homo":
        spec = homogenize(spec)
    params = LayerParams()
    init_gn(spec, params, "gn", rng)
    h = rng.normal(size=(g.num_nodes, 6))
    w = rng.uniform(0.5, 1.5, size=(g.num_nodes, 6))
    err = T.param_diff_check(lambda: (gn_forward(spec, params, ctx, Tensor(h), prefix="gn") * w).sum(),
                             params.values(), h=FD_STEP, atol=GRADIENT_ATOL, max_coords=60, seed=seed)
    return max(err, T.finite_diff_check(lambda v: gn_forward(spec, params, ctx, v, prefix="gn"), h,
                                        h=FD_STEP, atol=GRADIENT_ATOL))


def gradient_suite(trials: int = 100) -> SuiteResult:
    """Tape gradients vs central differences for every layer and the full iterative model."""
    res = SuiteResult("gradients", "tensor-autodiff")
    t0 = time.perf_counter()
    for seed in range(trials):
        case = GRADIENT_CASES[seed % len(GRADIENT_CASES)]
        err = _gradient_case(case, seed)
        res.worst = max(res.worst, err)
        res.check(err <= GRADIENT_TOL, f"{case} seed={seed}: rel err {err:.3e}")
        res.trials += 1
    res.seconds = time.perf_counter() - t0
    return res


# iterative algebra -------------------------------------------------------------------

class _Replay:
    """Body returning fixed states; confidence head replaying fixed values."""

    def __init__(self, states, confidences):
        self.states, self.confidences = states, confidences
        self.k = self.c = 0

    def body(self, h):
        self.k += 1
        return Tensor(self.states[self.k - 1])

    def confidence(self, h):
        self.c += 1
        return Tensor(np.array([[self.confidences[self.c - 1]]]))


def _replay_iterate(states, confs, cfg):
    r = _Replay(states, confs)
    return it.iterate(r.body, r.confidence, Tensor(np.zeros_like(states[0])), cfg, "eval")


def iterative_suite(trials: int = 1000, stream_max: int = 500) -> SuiteResult:
    """Worked two-step example, weight normalization and streaming equivalence."""
    res = SuiteResult("iterative-algebra", "iter-control")
    t0 = time.perf_counter()
    rng = np.random.default_rng(0x17E2)
    for seed in range(trials):
        local = np.random.default_rng(seed)
        # two-step worked example: h = a h1 + (1 - a) b h2
        a, b = local.uniform(0.01, 0.99), local.uniform(0.9995, 1.0)
        h1, h2 = local.normal(size=(1, 4)), local.normal(size=(1, 4))
        out, (tr,) = _replay_iterate([h1, h2], [a, b], it.IterConfig(epsilon=1e-3, decay=1.0))
        err = np.abs(out.data - (a * h1 + (1 - a) * b * h2)).max()
        res.check(tr.steps == 2 and err <= ALGEBRA_TOL, f"worked example seed={seed}: err {err:.3e}")
        # mass accounting
        k = int(local.integers(1, 60))
        confs = list(local.uniform(0.0, 1.0, size=k) ** 3)
        decay = float(rng.choice([1.0, 0.9999, 0.9]))
        _, (tr,) = _replay_iterate([np.ones((1, 1))] * k, confs, it.IterConfig(decay=decay, max_iter_eval=k))
        total = sum(tr.weights) + tr.residual + tr.leak
        res.check(abs(total - 1.0) <= ALGEBRA_TOL, f"normalization seed={seed}: total {total!r}")
        res.worst = max(res.worst, err, abs(total - 1.0))
        res.trials += 1
    for seed in range(0, trials, max(1, trials // 50)):
        local = np.random.default_rng(seed + 7)
        k = int(local.integers(1, stream_max + 1))
        states = [local.normal(size=(1, 3)) for _ in range(k)]
        confs = list(local.uniform(0.0, 0.05, size=k))
        cfg = it.IterConfig(epsilon=1e-12, decay=0.9999, max_iter_eval=k)
        batch_out = _replay_iterate(states, confs, cfg)[0].data
        r = _Replay(states, confs)
        stream_out = it.iterate_streaming(r.body, r.confidence, Tensor(np.zeros((1, 3))), cfg).data
        err = np.abs(batch_out - stream_out).max()
        res.worst = max(res.worst, err)
        res.check(err <= ALGEBRA_TOL, f"streaming seed={seed} K={k}: diff {err:.3e}")
    res.seconds = time.perf_counter() - t0
    return res


# oracles -------------------------------------------------------------------------------

def oracle_suite(dijkstra_trials: int = 200, tsp_trials: int = 100, component_trials: int = 500) -> SuiteResult:
    """Dijkstra vs brute force, Held-Karp vs enumeration, union-find vs BFS."""
    res = SuiteResult("oracle-cross-checks", "oracles")
    t0 = time.perf_counter()
    for seed in range(dijkstra_trials):
        rng = rng_for(seed, 0xD1)
        n = int(rng.integers(2, 9))
        g = generate("er", seed, n=n, p=0.4)
        g = g.with_attrs(edge_attrs=rng.uniform(0.5, 1.5, size=(g.num_edges, 1)))
        d = oracles.dijkstra(g, 0)
        for t in range(n):
            ref = oracles.brute_force_shortest(g, 0, t)
            got = d.dist[t] if d.reachable[t] else np.inf
            res.check(got == ref or abs(got - ref) <= 1e-12 * max(ref, 1.0),
                      f"dijkstra seed={seed} target={t}: {got} != {ref}")
        res.trials += 1
    for seed in range(tsp_trials):
        rng = rng_for(seed, 0x75)
        pts = rng.integers(1, 1001, size=(int(rng.integers(3, 9)), 2)).astype(np.float64)
        exact, ref = oracles.tsp_exact(pts), oracles.brute_force_tsp(pts)
        res.check(abs(exact - ref) <= 1e-9 * ref, f"held-karp seed={seed}: {exact} != {ref}")
        res.trials += 1
    for seed in range(component_trials):
        rng = rng_for(seed, 0xC0)
        g = generate("er", seed, n=int(rng.integers(1, 30)), p=float(rng.uniform(0.0, 0.2)))
        a, b = oracles.count_components(g), oracles.bfs_components(g)
        res.check(a == b, f"union-find seed={seed}: {a} != {b}")
        res.trials += 1
    res.seconds = time.perf_counter() - t0
    return res


SUITES = {
    "homogeneity": homogeneity_suite,
    "gradients": gradient_suite,
    "iterative-algebra": iterative_suite,
    "oracle-cross-checks": oracle_suite,
}


def run_selftest(quick: bool = False, inject_bias: bool = False) -> list[SuiteResult]:
    """Run every suite; ``quick`` cuts trial counts roughly tenfold."""
    if quick:
        return [homogeneity_suite(60, inject_bias), gradient_suite(12), iterative_suite(100, 100),
                oracle_suite(20, 10, 50)]
    return [homogeneity_suite(inject_bias=inject_bias), gradient_suite(), iterative_suite(), oracle_suite()]


def format_report(results: list[SuiteResult], max_failures: int = 10) -> str:
    lines = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"{status} {r.name:<20} module={r.module:<16} trials={r.trials:<5} "
                     f"worst={r.worst:.2e} time={r.seconds:.1f}s")
        for msg in r.failures[:max_failures]:
            lines.append(f"    {r.module}: {msg}")
        if len(r.failures) > max_failures:
            lines.append(f"    ... {len(r.failures) - max_failures} more")
    return "\n".join(lines)
