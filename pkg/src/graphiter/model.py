"""Model composition: embedding -> core (controller around GN blocks) -> readout -> head."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import iterative as it
from .graph import GraphBatch, rng_for
from .layers import (BatchContext, ConfigurationError, GNBlockSpec, LayerParams, MLPSpec,
                     gn_forward, homogenize, init_gn, init_mlp, mlp_forward, readout)
from .tensor import Tensor

CONTROLLERS = ("iter", "iter_nodewise", "act", "stacked", "shared")


@dataclass(frozen=True)
class ModelSpec:
    """Full network description.

    ``homogeneous_scope`` is ``"all"`` (embedding, core, readout and head) or
    ``"core"`` (GN blocks only). The confidence head always keeps its bias
    and sigmoid.

    ``embed_final`` is the activation after the embedding's second layer
    (``None`` keeps it linear, so hidden states may start negative).
    ``confidence_bias`` initialises the confidence head's output bias; a
    negative value makes early training run close to the iteration cap.
    """

    node_in: int
    out_dim: int = 1
    edge_dim: int = 1
    hidden: int = 64
    gn_kind: str = "pathgnn"
    controller: str = "iter"
    depth: int = 30
    eval_depth: int | None = None
    readout: str | None = "max"
    num_cores: int = 1
    homogeneous: bool = True
    homogeneous_scope: str = "all"
    activation: str = "relu"
    embed_final: str | None = None
    confidence_bias: float = -3.0
    iter_cfg: it.IterConfig = field(default_factory=it.IterConfig)

    def __post_init__(self):
        if self.controller not in CONTROLLERS:
            raise ConfigurationError(f"unknown controller {self.controller!r}")
        if self.homogeneous_scope not in ("all", "core"):
            raise ConfigurationError("homogeneous_scope must be 'all' or 'core'")
        if self.readout not in (None, "max", "sum", "mean"):
            raise ConfigurationError(f"unknown readout {self.readout!r}")

    # derived sub-specs -------------------------------------------------------
    def _maybe_homo(self, spec, part: str):
        if self.homogeneous and (self.homogeneous_scope == "all" or part == "core"):
            return homogenize(spec)
        return spec

    def embed_spec(self) -> MLPSpec:
        return self._maybe_homo(MLPSpec((self.node_in, self.hidden, self.hidden), self.activation,
                                        final_activation=self.embed_final), "embed")

    def core_spec(self) -> GNBlockSpec:
        return self._maybe_homo(GNBlockSpec(self.gn_kind, self.hidden, self.node_in, self.edge_dim,
                                            activation=self.activation,
                                            message_hidden=(self.hidden,)), "core")

    def head_spec(self) -> MLPSpec:
        return self._maybe_homo(MLPSpec((self.hidden, self.out_dim), self.activation), "head")

    def confidence_spec(self) -> MLPSpec:
        return MLPSpec((self.hidden, self.hidden, 1), self.activation, final_activation="sigmoid")

    @property
    def num_blocks(self) -> int:
        return self.depth if self.controller == "stacked" else 1

    @property
    def adaptive(self) -> bool:
        return self.controller in ("iter", "iter_nodewise", "act")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["iter_cfg"] = asdict(self.iter_cfg)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        d["iter_cfg"] = it.IterConfig(**d.get("iter_cfg", {}))
        return cls(**d)


def homogenize_model(spec: ModelSpec) -> ModelSpec:
    """Model spec with the homogeneous prior switched on (idempotent)."""
    return replace(spec, homogeneous=True)


def init_params(spec: ModelSpec, seed: int) -> LayerParams:
    rng = rng_for(seed, 0x1417)
    params = LayerParams()
    init_mlp(spec.embed_spec(), params, "embed", rng)
    for c in range(spec.num_cores):
        for b in range(spec.num_blocks):
            init_gn(spec.core_spec(), params, f"core{c}/gn{b}", rng)
        if spec.adaptive:
            init_mlp(spec.confidence_spec(), params, f"core{c}/conf", rng)
            last = f"core{c}/conf/{len(spec.confidence_spec().widths) - 2}/b"
            params.load_values({last: np.full(params[last].shape, spec.confidence_bias)})
    init_mlp(spec.head_spec(), params, "head", rng)
    return params


@dataclass
class ForwardResult:
    prediction: Tensor
    traces: list[list[it.IterTrace]]


def forward(spec: ModelSpec, params: LayerParams, ctx: BatchContext, mode: str = "train",
            record: bool = False) -> ForwardResult:
    """Evaluate the model on a batch; ``mode`` picks the iteration cap."""
    x = ctx.nodes
    h = mlp_forward(spec.embed_spec(), params, x, "embed")
    core = spec.core_spec()
    conf_spec = spec.confidence_spec()
    traces = []
    for c in range(spec.num_cores):
        prefix = f"core{c}"

        def body(state, b=0, prefix=prefix):
            return gn_forward(core, params, ctx, state, x, f"{prefix}/gn{b}")

        def graph_conf(state, prefix=prefix):
            pooled = readout(state, ctx.graph_ids, ctx.num_graphs, "max")
            return mlp_forward(conf_spec, params, pooled, f"{prefix}/conf")

        def node_conf(state, prefix=prefix):
            return mlp_forward(conf_spec, params, state, f"{prefix}/conf")

        if spec.controller == "iter":
            h, tr = it.iterate(body, graph_conf, h, spec.iter_cfg, mode, ctx.graph_ids, record)
            traces.append(tr)
        elif spec.controller == "iter_nodewise":
            h, tr = it.iterate_nodewise(body, node_conf, h, spec.iter_cfg, mode, record)
            traces.append(tr)
        elif spec.controller == "act":
            h, tr = it.act_iterate(body, graph_conf, h, spec.iter_cfg, mode, ctx.graph_ids, record)
            traces.append(tr)
        elif spec.controller == "shared":
            steps = spec.depth if mode == "train" or spec.eval_depth is None else spec.eval_depth
            h = it.fixed_depth_shared(body, h, steps)
        else:
            for b in range(spec.depth):
                h = body(h, b)
    if spec.readout is not None:
        h = readout(h, ctx.graph_ids, ctx.num_graphs, spec.readout)
    return ForwardResult(mlp_forward(spec.head_spec(), params, h, "head"), traces)


def predict(spec: ModelSpec, params: LayerParams, gb: GraphBatch, mode: str = "eval") -> np.ndarray:
    """Inference-only forward pass (no tape)."""
    return forward(spec, params, BatchContext.from_batch(gb), mode).prediction.data


def save_checkpoint(path_prefix, spec: ModelSpec, params: LayerParams, extra: dict | None = None) -> None:
    """Write ``<prefix>.params.json`` and ``<prefix>.model.json``."""
    with open(f"{path_prefix}.params.json", "w") as fh:
        fh.write(params.to_json())
    with open(f"{path_prefix}.model.json", "w") as fh:
        json.dump({"model": spec.to_dict(), **(extra or {})}, fh, indent=2)


def load_checkpoint(path_prefix) -> tuple[ModelSpec, LayerParams, dict]:
    with open(f"{path_prefix}.model.json") as fh:
        doc = json.load(fh)
    with open(f"{path_prefix}.params.json") as fh:
        params = LayerParams.from_json(fh.read())
    spec = ModelSpec.from_dict(doc.pop("model"))
    return spec, params, doc
