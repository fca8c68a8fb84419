"""Optimizer, losses, metrics, training loop and evaluation."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .graph import batch, rng_for
from .iterative import IterTrace
from .layers import BatchContext, LayerParams
from .model import ModelSpec, forward
from .tasks import TaskSample, reencode

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    """The training loss became non-finite."""


# optimizer ----------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: LayerParams, grads: dict[str, np.ndarray], state: AdamState,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, applied in place to ``params``."""
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros(p.shape)
        if g.shape != p.shape:
            raise T.DimensionError(f"gradient shape {g.shape} != parameter {name} shape {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros(p.shape)
            state.v[name] = np.zeros(p.shape)
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        new = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
        new.setflags(write=False)
        p.data = new


# losses and metrics ---------------------------------------------------------

def relative_loss(y: float, y_hat: float) -> float:
    if y == 0:
        raise ValueError("relative loss undefined for a zero label")
    return abs(y - y_hat) / abs(y)


def mae_loss(pred: T.Tensor, target: np.ndarray) -> T.Tensor:
    return (pred - target).abs().mean()


def mse_loss(pred: T.Tensor, target: np.ndarray, mask: np.ndarray | None = None) -> T.Tensor:
    diff = pred - target
    sq = diff * diff
    if mask is None:
        return sq.mean()
    return (sq * mask).sum() * (1.0 / max(float(mask.sum()), 1.0))


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 30
    loss: str = "mae"
    seed: int = 0
    val_every: int = 1

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 1 or self.val_every < 1:
            raise ValueError("rates and sizes must be positive")
        if self.loss not in ("mae", "mse"):
            raise ValueError(f"unknown loss {self.loss!r}")


@dataclass
class Batch:
    ctx: BatchContext
    target: np.ndarray
    mask: np.ndarray | None


def make_batch(samples: list[TaskSample], per_node: bool) -> Batch:
    gb = batch([s.graph for s in samples])
    ctx = BatchContext.from_batch(gb)
    if not per_node:
        return Batch(ctx, np.array([[s.scalar_target] for s in samples]), None)
    target = np.concatenate([s.target for s in samples], axis=0)
    mask = np.zeros((len(target), 1))
    for i, s in enumerate(samples):
        for node in s.meta.get("target_nodes", range(s.graph.num_nodes)):
            mask[gb.node_offsets[i] + node] = 1.0
    return Batch(ctx, target, mask)


def batch_loss(spec: ModelSpec, params: LayerParams, b: Batch, kind: str, mode: str = "train") -> T.Tensor:
    pred = forward(spec, params, b.ctx, mode).prediction
    if kind == "mse":
        return mse_loss(pred, b.target, b.mask)
    if b.mask is not None:
        return ((pred - b.target).abs() * b.mask).sum() * (1.0 / max(float(b.mask.sum()), 1.0))
    return mae_loss(pred, b.target)


def train_step(spec: ModelSpec, params: LayerParams, b: Batch, state: AdamState,
               cfg: TrainConfig) -> float:
    with T.Tape() as tape:
        loss = batch_loss(spec, params, b, cfg.loss)
    value = loss.item()
    if not np.isfinite(value):
        raise TrainingDivergedError(f"non-finite loss {value} at step {state.step + 1}")
    grads = T.backward(loss, tape)
    adam_step(params, {k: grads[p] for k, p in params.items()}, state, cfg.lr)
    return value


@dataclass
class TrainResult:
    params: LayerParams
    history: list[dict]
    best_epoch: int
    best_metric: float


def train(spec: ModelSpec, params: LayerParams, train_set: list[TaskSample],
          val_set: list[TaskSample] | None, cfg: TrainConfig,
          progress=None) -> TrainResult:
    """Mini-batch Adam; keeps the parameters of the best validation epoch."""
    per_node = spec.readout is None
    rng = rng_for(cfg.seed, 0x7452)
    state = AdamState()
    history: list[dict] = []
    best = (np.inf, 0, params.copy_values())
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(train_set))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            chunk = [train_set[i] for i in order[start:start + cfg.batch_size]]
            losses.append(train_step(spec, params, make_batch(chunk, per_node), state, cfg))
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)),
               "seconds": time.perf_counter() - t0}
        if val_set and (epoch % cfg.val_every == 0 or epoch == cfg.epochs):
            metric = validation_metric(spec, params, val_set)
            row["val_metric"] = metric
            if metric < best[0]:
                best = (metric, epoch, params.copy_values())
        history.append(row)
        log.info("epoch %d %s", epoch, row)
        if progress is not None:
            progress(row)
    if val_set:
        params.load_values(best[2])
        return TrainResult(params, history, best[1], best[0])
    return TrainResult(params, history, cfg.epochs, history[-1]["train_loss"])


# inference ----------------------------------------------------------------

def predict_samples(spec: ModelSpec, params: LayerParams, samples: list[TaskSample],
                    batch_size: int = 32, mode: str = "eval",
                    record: bool = False) -> tuple[list[np.ndarray], list[IterTrace | None]]:
    """Per-sample predictions (and graph-level traces for iterative models)."""
    per_node = spec.readout is None
    preds: list[np.ndarray] = []
    traces: list[IterTrace | None] = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        gb = batch([s.graph for s in chunk])
        res = forward(spec, params, BatchContext.from_batch(gb), mode, record=record)
        out = res.prediction.data
        for i in range(len(chunk)):
            if per_node:
                preds.append(out[gb.node_offsets[i]:gb.node_offsets[i + 1]])
            else:
                preds.append(out[i])
        if record and res.traces and spec.controller in ("iter", "act"):
            traces.extend(res.traces[-1])
        else:
            traces.extend([None] * len(chunk))
    return preds, traces


def validation_metric(spec: ModelSpec, params: LayerParams, samples: list[TaskSample]) -> float:
    """Lower is better: relative loss, MSE or counting error rate by task."""
    preds, _ = predict_samples(spec, params, samples)
    task = samples[0].task
    if task == "physics":
        return physics_mse(samples, preds)
    if task == "components":
        return 1.0 - counting_accuracy(samples, preds)
    return mean_relative_loss(samples, preds)


def mean_relative_loss(samples, preds) -> float:
    return float(np.mean([relative_loss(s.scalar_target, float(p[0])) for s, p in zip(samples, preds)]))


def counting_accuracy(samples, preds) -> float:
    return float(np.mean([round(float(p[0])) == s.scalar_target for s, p in zip(samples, preds)]))


def physics_mse(samples, preds) -> float:
    errs = []
    for s, p in zip(samples, preds):
        nodes = s.meta.get("target_nodes", list(range(s.graph.num_nodes)))
        errs.append(((p[nodes] - s.target[nodes]) ** 2).mean())
    return float(np.mean(errs))


# post-processing ------------------------------------------------------------

class DistanceModel:
    """Memoised ``dist(source, target)`` predictions for one graph."""

    def __init__(self, spec: ModelSpec, params: LayerParams, sample: TaskSample,
                 batch_size: int = 16):
        self.spec, self.params, self.sample = spec, params, sample
        self.cache: dict[tuple[int, int], float] = {}
        self.batch_size = batch_size
        self.calls = 0

    def __call__(self, sources, target: int) -> np.ndarray:
        todo = [s for s in dict.fromkeys(sources) if (s, target) not in self.cache and s != target]
        for start in range(0, len(todo), self.batch_size):
            chunk = todo[start:start + self.batch_size]
            graphs = [reencode(self.sample, s, target) for s in chunk]
            out = forward(self.spec, self.params, BatchContext.from_batch(batch(graphs)), "eval").prediction.data
            self.calls += len(chunk)
            for s, v in zip(chunk, out[:, 0]):
                self.cache[(s, target)] = float(v)
        return np.array([0.0 if s == target else self.cache[(s, target)] for s in sources])


def path_postprocess(graph, source: int, target: int, dist_fn) -> list[int]:
    """Greedy walk along a predicted distance field.

    ``dist_fn(nodes, target)`` returns predicted distances from each node to
    ``target``. The next node minimises ``|dist_l + w - dist_p|`` among
    neighbours with ``dist_l + w <= dist_p``; an empty list signals failure.
    """
    out_edges: list[dict[int, float]] = [dict() for _ in range(graph.num_nodes)]
    for s, r, w in zip(graph.senders.tolist(), graph.receivers.tolist(), graph.edge_attrs[:, 0].tolist()):
        out_edges[s][r] = min(w, out_edges[s].get(r, np.inf))
    path = [source]
    seen = {source}
    while path[-1] != target:
        here = path[-1]
        nbrs = list(out_edges[here])
        if not nbrs:
            return []
        d_here = dist_fn([here], target)[0]
        d_nbrs = dist_fn(nbrs, target)
        through = d_nbrs + np.array([out_edges[here][l] for l in nbrs])
        ok = through <= d_here
        if not ok.any():
            return []
        gap = np.where(ok, np.abs(through - d_here), np.inf)
        nxt = nbrs[int(np.argmin(gap))]
        if nxt in seen:
            return []
        seen.add(nxt)
        path.append(nxt)
    return path


def path_length(graph, path: list[int]) -> float:
    w = {}
    for s, r, x in zip(graph.senders.tolist(), graph.receivers.tolist(), graph.edge_attrs[:, 0].tolist()):
        w[(s, r)] = min(x, w.get((s, r), np.inf))
    return float(sum(w[(a, b)] for a, b in zip(path[:-1], path[1:])))


def path_success(sample: TaskSample, path: list[int]) -> bool:
    if not path:
        return False
    l_true = sample.scalar_target
    return abs(path_length(sample.graph, path) - l_true) <= 1e-9 * max(l_true, 1.0)


def success_rate(spec: ModelSpec, params: LayerParams, samples: list[TaskSample]) -> tuple[float, list[bool]]:
    flags = []
    for s in samples:
        model = DistanceModel(spec, params, s)
        path = path_postprocess(s.graph, s.meta["source"], s.meta["target"], model)
        flags.append(path_success(s, path))
    return float(np.mean(flags)), flags


# evaluation -----------------------------------------------------------------

@dataclass
class EvalRow:
    scale: str
    metric: str
    value: float
    count: int


def evaluate(spec: ModelSpec, params: LayerParams, grid: list[tuple[str, list[TaskSample]]],
             metrics: tuple[str, ...] | None = None) -> tuple[list[EvalRow], list[dict]]:
    """Per-scale metrics plus per-sample halting records for iterative models.

    ``metrics`` defaults by task: relative loss (+ success rate for
    shortest path), accuracy for components, MSE for physics.
    """
    rows: list[EvalRow] = []
    trace_rows: list[dict] = []
    for label, samples in grid:
        if not samples:
            continue
        task = samples[0].task
        wanted = metrics or {
            "shortest_path": ("relative_loss", "success_rate"),
            "navigation": ("relative_loss",),
            "tsp": ("relative_loss",),
            "components": ("accuracy",),
            "physics": ("mse",),
        }[task]
        preds, traces = predict_samples(spec, params, samples, record=spec.controller in ("iter", "act"))
        flags = None
        for metric in wanted:
            if metric == "relative_loss":
                value = mean_relative_loss(samples, preds)
            elif metric == "success_rate":
                value, flags = success_rate(spec, params, samples)
            elif metric == "accuracy":
                value = counting_accuracy(samples, preds)
            elif metric == "mse":
                value = physics_mse(samples, preds)
            else:
                raise ValueError(f"unknown metric {metric!r}")
            rows.append(EvalRow(label, metric, value, len(samples)))
        for i, (s, p, tr) in enumerate(zip(samples, preds, traces)):
            row = {"scale": label, "sample_id": i, "target": s.scalar_target if s.target.size == 1 else None,
                   "prediction": float(p.reshape(-1)[0]), "distance": s.meta.get("hops")}
            if tr is not None:
                row.update(steps=tr.steps, forced_halt=int(tr.forced_halt), first_crossing=tr.first_crossing)
            if flags is not None:
                row["success"] = int(flags[i])
            trace_rows.append(row)
    return rows, trace_rows


def steps_by_distance(trace_rows: list[dict]) -> list[tuple[int, float, float]]:
    """``(distance, mean steps, distance / 2)`` triples for plotting."""
    buckets: dict[int, list[int]] = {}
    for r in trace_rows:
        if r.get("steps") is None or r.get("distance") is None:
            continue
        buckets.setdefault(int(r["distance"]), []).append(r["steps"])
    return [(d, float(np.mean(v)), d / 2.0) for d, v in sorted(buckets.items())]


def write_metrics_csv(path, rows: list[EvalRow], task: str, model: str, seed: int) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["task", "model", "scale", "metric", "value", "seed"])
        for r in rows:
            w.writerow([task, model, r.scale, r.metric, repr(r.value), seed])


def write_history_csv(path, history: list[dict]) -> None:
    keys = ["epoch", "train_loss", "val_metric", "seconds"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, extrasaction="ignore")
        w.writeheader()
        for row in history:
            w.writerow(row)


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
