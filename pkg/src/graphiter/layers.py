"""Learned layers: MLPs, message-passing blocks, attention pooling and readouts.

Layers are plain specs plus a :class:`LayerParams` mapping of parameter paths
to :class:`~graphiter.tensor.Parameter` values, so one spec can be evaluated
with many parameter sets and vice versa.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from functools import singledispatch
import numpy as np

from . import tensor as T
from .graph import Graph, GraphBatch
from .tensor import Parameter, Tensor

SOFTMAX_FLOOR = 1e-3
GN_KINDS = ("mpnn_max", "pathgnn", "pathgnn_sim", "gcn", "gat")


class ConfigurationError(ValueError):
    """A spec is inconsistent with the requested mode."""


# parameters ---------------------------------------------------------------

class LayerParams(dict):
    """Named parameters keyed by stable ``module/layer/index`` paths."""

    def add(self, path: str, value) -> Parameter:
        if path in self:
            raise KeyError(f"duplicate parameter path {path!r}")
        p = Parameter(path, value)
        self[path] = p
        return p

    def sub(self, prefix: str) -> "LayerParams":
        out = LayerParams()
        for k, v in self.items():
            if k.startswith(prefix + "/"):
                dict.__setitem__(out, k, v)
        return out

    def num_values(self) -> int:
        return sum(p.size for p in self.values())

    def copy_values(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for k, v in values.items():
            arr = np.array(v, dtype=np.float64).reshape(self[k].shape)
            arr.setflags(write=False)
            self[k].data = arr

    def to_json(self) -> str:
        doc = {k: {"shape": list(p.shape), "values": p.data.reshape(-1).tolist()}
               for k, p in self.items()}
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "LayerParams":
        out = cls()
        for k, entry in json.loads(text).items():
            out.add(k, np.array(entry["values"], dtype=np.float64).reshape(entry["shape"]))
        return out


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = np.sqrt(1.0 / max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


# MLP ----------------------------------------------------------------------

@dataclass(frozen=True)
class MLPSpec:
    """Fully connected stack. ``widths`` lists input, hidden and output sizes."""

    widths: tuple[int, ...]
    activation: str = "relu"
    use_bias: bool = True
    final_activation: str | None = None
    slope: float = 0.01

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ConfigurationError("an MLP needs at least input and output widths")

    @property
    def homogeneous(self) -> bool:
        acts = {self.activation} | ({self.final_activation} if self.final_activation else set())
        return not self.use_bias and acts <= T.HOMOGENEOUS_ACTIVATIONS


def init_mlp(spec: MLPSpec, params: LayerParams, prefix: str, rng: np.random.Generator) -> None:
    for i, (a, b) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
        params.add(f"{prefix}/{i}/W", _uniform(rng, a, (a, b)))
        if spec.use_bias:
            params.add(f"{prefix}/{i}/b", _uniform(rng, a, (b,)))


def mlp_forward(spec: MLPSpec, params: LayerParams, x: Tensor, prefix: str = "mlp") -> Tensor:
    """Alternating linear (or affine) maps and activations, row by row."""
    if x.ndim != 2 or x.shape[1] != spec.widths[0]:
        raise T.DimensionError(f"{prefix}: expected N x {spec.widths[0]} input, got {x.shape}")
    last = len(spec.widths) - 2
    for i in range(last + 1):
        x = x @ params[f"{prefix}/{i}/W"]
        if spec.use_bias:
            x = x + params[f"{prefix}/{i}/b"]
        act = spec.activation if i < last else spec.final_activation
        if act:
            x = T.apply_activation(act, x, spec.slope)
    return x


def homomlp_forward(spec: MLPSpec, params: LayerParams, x: Tensor, prefix: str = "mlp") -> Tensor:
    """Bias-free MLP with homogeneous activations: ``F(a x) = a F(x)`` for ``a > 0``."""
    if not spec.homogeneous:
        raise ConfigurationError(
            f"{prefix}: homogeneous mode needs use_bias=False and relu/leaky_relu activations")
    return mlp_forward(spec, params, x, prefix)


# attention ----------------------------------------------------------------

def scale_invariant_softmax(scores: Tensor, segment_ids, num_segments: int,
                            floor: float = SOFTMAX_FLOOR) -> Tensor:
    """Per-segment softmax of ``score / (max - min + floor * max|score|)``.

    Both terms of the denominator scale linearly with the scores, so the
    result is unchanged when every score is multiplied by ``a > 0``. The
    relative floor keeps gradients bounded when a segment's scores are
    equal up to rounding; segments of all-zero scores are left undivided.
    """
    ids = np.asarray(segment_ids, dtype=np.int64)
    hi = T.segment_reduce(scores, ids, num_segments, "max", fill=0.0)
    lo = -T.segment_reduce(-scores, ids, num_segments, "max", fill=0.0)
    size = T.segment_reduce(scores.abs(), ids, num_segments, "max", fill=0.0)
    spread = hi - lo + size * floor
    safe = T.where(spread.data > 0, spread, 1.0)
    return T.segment_softmax(scores / T.gather_rows(safe, ids), ids, num_segments)


# GN blocks ----------------------------------------------------------------

@dataclass(frozen=True)
class GNBlockSpec:
    """One message-passing block.

    ``node_in`` is the width of the raw node attributes prepended to the
    hidden state on every call when ``input_concat`` is set.
    """

    kind: str
    hidden: int = 64
    node_in: int = 0
    edge_dim: int = 1
    homogeneous: bool = False
    input_concat: bool = True
    activation: str = "relu"
    message_hidden: tuple[int, ...] = (64,)

    def __post_init__(self):
        if self.kind not in GN_KINDS:
            raise ConfigurationError(f"unknown GN block kind {self.kind!r}")
        if self.homogeneous and self.activation not in T.HOMOGENEOUS_ACTIVATIONS:
            raise ConfigurationError("homogeneous blocks need relu or leaky_relu")

    @property
    def node_width(self) -> int:
        return self.hidden + (self.node_in if self.input_concat else 0)

    def _mlp(self, widths) -> MLPSpec:
        return MLPSpec(tuple(widths), self.activation, not self.homogeneous)

    def message_mlp(self) -> MLPSpec:
        v = self.node_width
        inp = v + self.edge_dim if self.kind == "pathgnn_sim" else 2 * v + self.edge_dim
        return self._mlp((inp, *self.message_hidden, self.hidden))

    def score_mlp(self) -> MLPSpec:
        if self.kind == "gat":
            return self._mlp((2 * self.node_width + self.edge_dim, 1))
        return self._mlp((2 * self.node_width + self.edge_dim, *self.message_hidden, 1))

    def linear(self) -> MLPSpec:
        return self._mlp((self.node_width, self.hidden))


def init_gn(spec: GNBlockSpec, params: LayerParams, prefix: str, rng: np.random.Generator) -> None:
    if spec.kind in ("mpnn_max", "pathgnn", "pathgnn_sim"):
        init_mlp(spec.message_mlp(), params, f"{prefix}/msg", rng)
    if spec.kind in ("pathgnn", "pathgnn_sim", "gat"):
        init_mlp(spec.score_mlp(), params, f"{prefix}/score", rng)
    if spec.kind in ("gcn", "gat"):
        init_mlp(spec.linear(), params, f"{prefix}/lin", rng)


class BatchContext:
    """Per-batch index arrays and constants shared by every block call."""

    def __init__(self, graph: Graph, graph_ids: np.ndarray | None = None,
                 num_graphs: int | None = None):
        self.graph = graph
        self.n = graph.num_nodes
        self.senders = graph.senders
        self.receivers = graph.receivers
        self.edges = Tensor(graph.edge_attrs)
        self.nodes = Tensor(graph.node_attrs)
        indeg = np.bincount(self.receivers, minlength=self.n)
        self.has_incoming = (indeg > 0)[:, None]
        self.graph_ids = np.zeros(self.n, dtype=np.int64) if graph_ids is None else graph_ids
        self.num_graphs = 1 if num_graphs is None else num_graphs
        self._gcn: dict[bool, tuple[np.ndarray, np.ndarray]] = {}

    @classmethod
    def from_batch(cls, gb: GraphBatch) -> "BatchContext":
        return cls(gb.graph, gb.graph_ids, gb.num_graphs)

    def gcn_coefficients(self, homogeneous: bool) -> tuple[np.ndarray, np.ndarray]:
        """Symmetric-normalised adjacency entries for edges and self-loops.

        Edge weights fill the adjacency. The self-loop weight is 1, or in
        homogeneous mode the mean incoming weight, so that scaling every
        weight leaves the normalised adjacency unchanged.
        """
        if homogeneous not in self._gcn:
            w = self.graph.edge_attrs[:, 0] if self.graph.num_edges else np.zeros(0)
            w_sum = np.bincount(self.receivers, weights=w, minlength=self.n)
            indeg = np.bincount(self.receivers, minlength=self.n)
            if homogeneous:
                self_w = np.where(indeg > 0, w_sum / np.maximum(indeg, 1), 1.0)
            else:
                self_w = np.ones(self.n)
            deg = w_sum + self_w
            inv = 1.0 / np.sqrt(deg)
            edge_c = w * inv[self.senders] * inv[self.receivers]
            self_c = self_w * inv * inv
            self._gcn[homogeneous] = (edge_c[:, None], self_c[:, None])
        return self._gcn[homogeneous]


def _softmax(spec: GNBlockSpec, scores: Tensor, ctx: BatchContext) -> Tensor:
    if spec.homogeneous:
        return scale_invariant_softmax(scores, ctx.receivers, ctx.n)
    return T.segment_softmax(scores, ctx.receivers, ctx.n)


def gn_forward(spec: GNBlockSpec, params: LayerParams, ctx: BatchContext, hidden: Tensor,
               node_inputs: Tensor | None = None, prefix: str = "gn") -> Tensor:
    """One message-passing sweep; nodes without incoming edges keep their state."""
    if hidden.ndim != 2 or hidden.shape[1] != spec.hidden:
        raise T.DimensionError(f"{prefix}: hidden width {hidden.shape} != {spec.hidden}")
    if spec.input_concat:
        if node_inputs is None:
            node_inputs = ctx.nodes
        if node_inputs.shape[1] != spec.node_in:
            raise T.DimensionError(f"{prefix}: node inputs width {node_inputs.shape[1]} != {spec.node_in}")
        v = T.concat_rows([node_inputs, hidden])
    else:
        v = hidden
    if ctx.senders.size == 0:
        return hidden
    vs = T.gather_rows(v, ctx.senders)
    vr = T.gather_rows(v, ctx.receivers)
    e = ctx.edges
    n = ctx.n

    if spec.kind in ("mpnn_max", "pathgnn", "pathgnn_sim"):
        full_in = T.concat_rows([vs, vr, e])
        msg_in = T.concat_rows([vs, e]) if spec.kind == "pathgnn_sim" else full_in
        msg = mlp_forward(spec.message_mlp(), params, msg_in, f"{prefix}/msg")
        if spec.kind == "mpnn_max":
            agg = T.segment_reduce(msg, ctx.receivers, n, "max", fill=0.0)
        else:
            score = mlp_forward(spec.score_mlp(), params, full_in, f"{prefix}/score")
            alpha = _softmax(spec, score, ctx)
            agg = T.segment_reduce(alpha * msg, ctx.receivers, n, "sum")
        updated = T.maximum(hidden, agg)
    elif spec.kind == "gcn":
        edge_c, self_c = ctx.gcn_coefficients(spec.homogeneous)
        proj = mlp_forward(spec.linear(), params, v, f"{prefix}/lin")
        agg = T.segment_reduce(T.gather_rows(proj, ctx.senders) * edge_c, ctx.receivers, n, "sum")
        updated = T.apply_activation(spec.activation, agg + proj * self_c)
    else:  # gat
        proj = mlp_forward(spec.linear(), params, v, f"{prefix}/lin")
        logits = T.leaky_relu(mlp_forward(spec.score_mlp(), params,
                                          T.concat_rows([vs, vr, e]), f"{prefix}/score"), 0.2)
        alpha = _softmax(spec, logits, ctx)
        agg = T.segment_reduce(alpha * T.gather_rows(proj, ctx.senders), ctx.receivers, n, "sum")
        updated = T.apply_activation(spec.activation, agg)
    return T.where(ctx.has_incoming, updated, hidden)


# readout ------------------------------------------------------------------

def readout(node_h: Tensor, graph_ids, num_graphs: int, mode: str = "max") -> Tensor:
    """Permutation-invariant per-graph pooling of node rows."""
    return T.segment_reduce(node_h, graph_ids, num_graphs, mode, fill=0.0)


# homogenization -------------------------------------------------------------

@singledispatch
def homogenize(spec):
    """Bias-free, homogeneous-activation version of a spec (idempotent)."""
    raise ConfigurationError(f"cannot homogenize {type(spec).__name__}")


@homogenize.register
def _(spec: MLPSpec) -> MLPSpec:
    offenders = [a for a in (spec.activation, spec.final_activation)
                 if a and a not in T.HOMOGENEOUS_ACTIVATIONS]
    if offenders:
        raise ConfigurationError(f"non-homogenizable activation(s): {offenders}")
    return replace(spec, use_bias=False)


@homogenize.register
def _(spec: GNBlockSpec) -> GNBlockSpec:
    if spec.activation not in T.HOMOGENEOUS_ACTIVATIONS:
        raise ConfigurationError(f"non-homogenizable activation: {spec.activation}")
    return replace(spec, homogeneous=True)
