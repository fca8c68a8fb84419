"""Differentiable adaptive-depth controllers.

The iterative controller repeats a body and returns the expectation of the
per-step states under a learned halting process. Step ``j`` gets weight

    w_j = decay**(j-1) * c_j * prod_{i<j} (1 - c_i)

and the loop continues while ``decay**k * prod_{i<=k} (1 - c_i) > epsilon``.
At the iteration cap the last confidence is forced to 1 so the residual mass
lands on the final state.

Every controller works on "units": one unit per graph for graph-level
halting, one per node for node-wise halting. ``unit_ids`` maps rows of the
hidden state to units.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Tensor

Body = Callable[[Tensor], Tensor]
Confidence = Callable[[Tensor], Tensor]


@dataclass(frozen=True)
class IterConfig:
    epsilon: float = 1e-3
    decay: float = 0.9999
    max_iter_train: int = 30
    max_iter_eval: int = 5000

    def __post_init__(self):
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError("epsilon must lie in (0, 1)")
        if not 0.0 < self.decay <= 1.0:
            raise ValueError("decay must lie in (0, 1]")
        if self.max_iter_train < 1 or self.max_iter_eval < 1:
            raise ValueError("iteration caps must be >= 1")

    def cap(self, mode: str) -> int:
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        return self.max_iter_train if mode == "train" else self.max_iter_eval


@dataclass
class IterTrace:
    """Halting record of one unit (graph or node)."""

    confidences: list[float] = field(default_factory=list)
    weights: list[float] = field(default_factory=list)
    steps: int = 0
    forced_halt: bool = False
    residual: float = 1.0
    leak: float = 0.0

    @property
    def first_crossing(self) -> int:
        """First step at which the accumulated weight reaches one half."""
        total = 0.0
        for k, w in enumerate(self.weights, start=1):
            total += w
            if total >= 0.5:
                return k
        return self.steps


def _check_confidence(c: np.ndarray) -> None:
    # float64 sigmoid saturates to exactly 0 or 1, so the closed interval is accepted
    if not np.all((c >= 0.0) & (c <= 1.0)):
        bad = c[~((c >= 0.0) & (c <= 1.0))]
        raise ValueError(f"confidence outside [0, 1] (missing sigmoid?): {bad[:5]}")


def _expand(w: Tensor, unit_ids: np.ndarray | None) -> Tensor:
    return w if unit_ids is None else T.gather_rows(w, unit_ids)


def _units(conf0: np.ndarray) -> int:
    return conf0.shape[0] if conf0.ndim else 1


def iterate(body: Body, confidence: Confidence, h0: Tensor, cfg: IterConfig,
            mode: str = "train", unit_ids: np.ndarray | None = None,
            record: bool = True) -> tuple[Tensor, list[IterTrace]]:
    """Confidence-weighted expectation over repeated applications of ``body``.

    ``confidence(h)`` returns one value per unit with shape ``(U, 1)``;
    ``unit_ids`` (length = rows of ``h``) assigns rows to units. With
    ``unit_ids=None`` a single weight multiplies the whole state.

    Returns the output and one :class:`IterTrace` per unit.
    """
    cap = cfg.cap(mode)
    lam = cfg.decay
    h = h0
    out = None
    remain = None
    active = None
    traces: list[IterTrace] = []
    k = 0
    while True:
        k += 1
        h = body(h)
        c = confidence(h)
        cd = c.data
        _check_confidence(cd)
        if remain is None:
            units = _units(cd)
            remain = Tensor(np.ones(cd.shape))
            active = np.ones(cd.shape, dtype=bool)
            traces = [IterTrace() for _ in range(units)]
        would_remain = lam * remain.data * (1.0 - cd)
        forced = active & (k >= cap) & (would_remain > cfg.epsilon)
        c_eff = T.where(forced, 1.0, c)
        w = remain * c_eff * active
        step = _expand(w, unit_ids) * h
        out = step if out is None else out + step
        new_remain = remain * (1.0 - c_eff) * lam
        if record:
            for u in np.nonzero(active.reshape(-1))[0]:
                tr = traces[u]
                tr.confidences.append(float(c_eff.data.reshape(-1)[u]))
                tr.weights.append(float(w.data.reshape(-1)[u]))
                tr.steps = k
                tr.leak += float(new_remain.data.reshape(-1)[u]) * (1.0 - lam) / lam
                tr.residual = float(new_remain.data.reshape(-1)[u])
                tr.forced_halt = bool(forced.reshape(-1)[u])
        remain = new_remain
        active = active & ~forced & (remain.data > cfg.epsilon)
        if not active.any():
            return out, traces


def iterate_nodewise(body: Body, node_confidence: Confidence, h0: Tensor, cfg: IterConfig,
                     mode: str = "train", record: bool = True) -> tuple[Tensor, list[IterTrace]]:
    """Node-wise halting: every node runs its own halting process."""
    return iterate(body, node_confidence, h0, cfg, mode, unit_ids=None, record=record)


def iterate_streaming(body: Body, confidence: Confidence, h0: Tensor, cfg: IterConfig,
                      unit_ids: np.ndarray | None = None) -> Tensor:
    """Constant-memory inference recurrence, evaluated without a tape.

    Runs ``acc += cbar * c * h`` and ``cbar = decay * (1 - c) * cbar`` while
    ``cbar > epsilon``; same output as :func:`iterate` in eval mode.
    """
    cap = cfg.max_iter_eval
    lam, eps = cfg.decay, cfg.epsilon
    h = Tensor(h0.data)
    acc = np.zeros(h0.shape)
    cbar = None
    k = 0
    while True:
        k += 1
        h = Tensor(body(h).data)
        c = confidence(h).data
        _check_confidence(c)
        if cbar is None:
            cbar = np.ones(c.shape)
            live = np.ones(c.shape, dtype=bool)
        nxt = lam * (1.0 - c) * cbar
        c = np.where(live & (k >= cap) & (nxt > eps), 1.0, c)
        w = np.where(live, cbar * c, 0.0)
        acc += (w if unit_ids is None else w[unit_ids]) * h.data
        stop = live & (k >= cap)
        cbar = lam * (1.0 - c) * cbar
        live = live & ~stop & (cbar > eps)
        if not live.any():
            return Tensor(acc)


def act_iterate(body: Body, confidence: Confidence, h0: Tensor, cfg: IterConfig,
                mode: str = "train", unit_ids: np.ndarray | None = None,
                record: bool = True) -> tuple[Tensor, list[IterTrace]]:
    """Adaptive computation time baseline.

    Halts at the first step where the running confidence sum exceeds 1 (or at
    the cap); earlier steps weigh ``c_i`` and the halting step takes the
    remainder ``1 - sum_{i<k} c_i``.
    """
    cap = cfg.cap(mode)
    h = h0
    out = None
    spent = None
    active = None
    traces: list[IterTrace] = []
    k = 0
    while True:
        k += 1
        h = body(h)
        c = confidence(h)
        cd = c.data
        _check_confidence(cd)
        if spent is None:
            spent = Tensor(np.zeros(cd.shape))
            active = np.ones(cd.shape, dtype=bool)
            traces = [IterTrace() for _ in range(_units(cd))]
        halting = active & ((spent.data + cd > 1.0) | (k >= cap))
        w = T.where(halting, 1.0 - spent, c) * active
        step = _expand(w, unit_ids) * h
        out = step if out is None else out + step
        if record:
            for u in np.nonzero(active.reshape(-1))[0]:
                tr = traces[u]
                tr.confidences.append(float(cd.reshape(-1)[u]))
                tr.weights.append(float(w.data.reshape(-1)[u]))
                tr.steps = k
                tr.forced_halt = bool(k >= cap and spent.data.reshape(-1)[u] + cd.reshape(-1)[u] <= 1.0)
                tr.residual = 0.0 if halting.reshape(-1)[u] else 1.0 - float(
                    spent.data.reshape(-1)[u] + cd.reshape(-1)[u])
        spent = spent + c * (active & ~halting)
        active = active & ~halting
        if not active.any():
            return out, traces


def fixed_depth_shared(body: Body, h0: Tensor, steps: int) -> Tensor:
    """``steps`` applications of one shared body."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    h = h0
    for _ in range(steps):
        h = body(h)
    return h


def expectation_weights(confidences, decay: float = 1.0) -> np.ndarray:
    """Step weights computed directly from the product formula (no recurrence)."""
    c = np.asarray(confidences, dtype=np.float64)
    out = np.empty(len(c))
    for j in range(len(c)):
        out[j] = decay ** j * c[j] * np.prod(1.0 - c[:j])
    return out


def write_trace_csv(path, rows) -> None:
    """Write ``(sample_id, IterTrace)`` pairs, one CSV row per run."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "steps", "forced_halt", "first_crossing"])
        for sample_id, tr in rows:
            writer.writerow([sample_id, tr.steps, int(tr.forced_halt), tr.first_crossing])
