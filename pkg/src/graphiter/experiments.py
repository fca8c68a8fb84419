"""Named model/experiment presets and the desk-scale reproduction pipelines.

An *experiment config* is a JSON document (schema in
``schemas/experiment.schema.json``) naming the task dataset, the model, the
training settings and the evaluation grid. Presets below encode the
full-scale configuration (10000 training samples, up to 200 epochs) and
cheaper desk-scale variants; desk scale is the default.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
from dataclasses import dataclass, fields
from importlib import resources

import jsonschema
from scipy.stats import spearmanr

from . import iterative as it
from .model import ModelSpec, init_params
from .tasks import DatasetSpec, TaskSample, generate_dataset
from .training import TrainConfig, TrainResult, evaluate, steps_by_distance, train

log = logging.getLogger(__name__)

#: Max-aggregation PathGNN variant; see ``MODEL_PRESETS``.
PATH_KIND = "mpnn_max"
STACK_DEPTH = 30

# name -> ModelSpec overrides (node_in/out_dim/edge_dim come from the task)
MODEL_PRESETS: dict[str, dict] = {
    "gcn": {"gn_kind": "gcn", "controller": "stacked", "depth": STACK_DEPTH, "homogeneous": False},
    "gat": {"gn_kind": "gat", "controller": "stacked", "depth": STACK_DEPTH, "homogeneous": False},
    "path": {"gn_kind": PATH_KIND, "controller": "stacked", "depth": STACK_DEPTH, "homogeneous": False},
    "homo-path": {"gn_kind": PATH_KIND, "controller": "stacked", "depth": STACK_DEPTH},
    "iter-path": {"gn_kind": PATH_KIND, "controller": "iter", "homogeneous": False},
    "iter-homo-path": {"gn_kind": PATH_KIND, "controller": "iter"},
    "act-homo-path": {"gn_kind": PATH_KIND, "controller": "act"},
    "shared-homo-path": {"gn_kind": PATH_KIND, "controller": "shared", "depth": STACK_DEPTH,
                         "eval_depth": 1000},
    "iter-homo-gcn": {"gn_kind": "gcn", "controller": "iter"},
    "iter-homo-gat": {"gn_kind": "gat", "controller": "iter"},
}

TASK_SHAPES = {  # task -> (node_in, out_dim, readout)
    "shortest_path": (3, 1, "max"),
    "tsp": (2, 1, "max"),
    "components": (1, 1, "sum"),
    "physics": (2, 2, None),
    "navigation": (4, 1, "max"),
}

#: Sample counts per split.
SCALES = {"desk": {"train": 2000, "val": 200, "test": 100},
          "full": {"train": 10000, "val": 1000, "test": 1000}}
DESK_EPOCHS = 30
FULL_EPOCHS = 200
DESK_EVAL_COUNT = 100


class ConfigError(ValueError):
    """An experiment config failed schema or consistency validation."""


def schema() -> dict:
    text = resources.files("graphiter").joinpath("schemas/experiment.schema.json").read_text("utf-8")
    return json.loads(text)


def validate_config(cfg: dict) -> None:
    """Raise :class:`ConfigError` unless ``cfg`` satisfies the published schema."""
    try:
        jsonschema.validate(cfg, schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {exc.message}") from exc
    if cfg["model"].get("name") and cfg["model"]["name"] not in MODEL_PRESETS:
        raise ConfigError(f"unknown model preset {cfg['model']['name']!r}; choose from {sorted(MODEL_PRESETS)}")


def model_spec(name: str | None, task: str, overrides: dict | None = None, edge_dim: int = 1) -> ModelSpec:
    """Build a :class:`ModelSpec` from a preset name plus explicit overrides."""
    node_in, out_dim, ro = TASK_SHAPES[task]
    kw: dict = {"node_in": node_in, "out_dim": out_dim, "edge_dim": edge_dim, "readout": ro}
    if name is not None:
        if name not in MODEL_PRESETS:
            raise ConfigError(f"unknown model preset {name!r}")
        kw.update(MODEL_PRESETS[name])
    extra = dict(overrides or {})
    if "iter_cfg" in extra and isinstance(extra["iter_cfg"], dict):
        extra["iter_cfg"] = it.IterConfig(**extra["iter_cfg"])
    if task == "components":
        # the count does not scale with the random node features, so only the
        # core keeps the homogeneous prior; two cores run in sequence
        kw.update(homogeneous_scope="core", num_cores=2)
    kw.update(extra)
    allowed = {f.name for f in fields(ModelSpec)}
    unknown = set(kw) - allowed
    if unknown:
        raise ConfigError(f"unknown model fields: {sorted(unknown)}")
    return ModelSpec(**kw)


def dataset_spec(d: dict, split_count: int, seed: int) -> DatasetSpec:
    kw = dict(d)
    kw.pop("counts", None)
    if "gen_params" in kw:
        kw["gen_params"] = dict(kw["gen_params"])
    return DatasetSpec(**kw, count=split_count, seed=seed)


# experiment configs ------------------------------------------------------------

def default_config(model: str = "iter-homo-path", scale: str = "desk", seed: int = 0) -> dict:
    """Unweighted lobster shortest path, trained on sizes [4, 34)."""
    counts = SCALES[scale]
    return {
        "name": f"lobster-{model}-{scale}",
        "seed": seed,
        "dataset": {"task": "shortest_path", "generator": "lobster", "gen_params": {"p1": 0.2, "p2": 0.2},
                    "n_min": 4, "n_max": 34, "weighted": False, "counts": counts},
        "model": {"name": model},
        "train": {"epochs": DESK_EPOCHS if scale == "desk" else FULL_EPOCHS, "lr": 1e-3, "batch_size": 32},
        "eval_grid": [{"label": str(n), "n_min": n, "n_max": n + 1,
                       "count": DESK_EVAL_COUNT if scale == "desk" else counts["test"]}
                      for n in (20, 100, 500)],
    }


def train_from_config(cfg: dict, train_set=None, val_set=None, progress=None) -> tuple[ModelSpec, TrainResult]:
    """Generate (unless given) the datasets and train the configured model."""
    validate_config(cfg)
    seed = cfg["seed"]
    d = cfg["dataset"]
    if train_set is None:
        train_set = generate_dataset(dataset_spec(d, d["counts"]["train"], seed), "train")
    if val_set is None:
        val_set = generate_dataset(dataset_spec(d, d["counts"]["val"], seed), "val")
    spec = model_spec(cfg["model"].get("name"), d["task"], cfg["model"].get("overrides"),
                      train_set[0].graph.edge_attrs.shape[1])
    tcfg = TrainConfig(seed=seed, loss="mse" if d["task"] == "physics" else "mae", **cfg["train"])
    params = init_params(spec, seed)
    return spec, train(spec, params, train_set, val_set, tcfg, progress)


def eval_sets(cfg: dict, labels: tuple[str, ...] | None = None) -> list[tuple[str, list[TaskSample]]]:
    """One test set per ``eval_grid`` entry (optionally only the given labels)."""
    d = cfg["dataset"]
    out = []
    for entry in cfg["eval_grid"]:
        if labels is not None and entry["label"] not in labels:
            continue
        base = {k: v for k, v in d.items() if k != "counts"}
        base.update({k: v for k, v in entry.items() if k not in ("label", "count")})
        out.append((entry["label"], generate_dataset(dataset_spec(base, entry["count"], cfg["seed"]), "test")))
    return out


# reproduction -------------------------------------------------------------------

# Reference values (success rate in percent, or relative loss) printed as a
# comparison column next to each measured cell.
REFERENCE = {
    "lobster-generalization": {
        "gcn": {"20": 66.6, "100": 25.7, "500": 5.5},
        "gat": {"20": 100.0, "100": 42.7, "500": 10.5},
        "path": {"20": 100.0, "100": 62.9, "500": 20.1},
        "homo-path": {"20": 100.0, "100": 58.3, "500": 53.7},
        "iter-homo-path": {"20": 100.0, "100": 100.0, "500": 100.0},
    },
    "weight-scaling": {
        "gcn": {"[0.5,1.5)": 0.31, "[1,3)": 0.37, "[2,6)": 0.49, "[8,24)": 0.56},
        "gat": {"[0.5,1.5)": 0.13, "[1,3)": 0.29, "[2,6)": 0.49, "[8,24)": 0.55},
        "path": {"[0.5,1.5)": 0.06, "[1,3)": 0.22, "[2,6)": 0.44, "[8,24)": 0.54},
        "homo-path": {"[0.5,1.5)": 0.03, "[1,3)": 0.03, "[2,6)": 0.03, "[8,24)": 0.03},
        "iter-homo-path": {"[0.5,1.5)": 0.01, "[1,3)": 0.04, "[2,6)": 0.06, "[8,24)": 0.08},
    },
    # reference measured at 1000 nodes
    "ablation": {
        "iter-homo-path": {"success": 100.0}, "homo-path": {"success": 53.7}, "iter-path": {"success": 48.9},
        "act-homo-path": {"success": 52.7}, "iter-homo-gat": {"success": 2.9},
        "shared-homo-path": {"success": 91.7}, "iter-homo-gcn": {"success": 1.4},
    },
    "figure4": {},
}
TABLES = tuple(REFERENCE)

#: weight range -> multiple of the training range [0.5, 1.5)
WEIGHT_RANGES = {"[0.5,1.5)": 1.0, "[1,3)": 2.0, "[2,6)": 4.0, "[8,24)": 16.0}


@dataclass
class TableRow:
    table: str
    model: str
    column: str
    value: float
    reference: float | None


def weight_scaled_grid(cfg: dict, count: int = DESK_EVAL_COUNT) -> list[tuple[str, list[TaskSample]]]:
    """Test sets whose weights (and, for homogeneity, node attributes) are scaled copies.

    The training range [0.5, 1.5) times 2, 4 and 16 gives [1, 3), [2, 6)
    and [8, 24); powers of two keep the scaled weights bit-exact.
    """
    d = dict(cfg["dataset"], weighted=True, weight_min=0.5, weight_max=1.5)
    d.pop("counts", None)
    base = generate_dataset(dataset_spec(d, count, cfg["seed"]), "test")
    grid = []
    for label, factor in WEIGHT_RANGES.items():
        grid.append((label, [scale_sample(s, factor) for s in base]))
    return grid


def scale_sample(s: TaskSample, factor: float) -> TaskSample:
    """Node/edge attributes and label multiplied by ``factor``."""
    g = s.graph.scaled(factor)
    meta = dict(s.meta)
    if "weight_range" in meta:
        meta["weight_range"] = [w * factor for w in meta["weight_range"]]
    return TaskSample(g, s.target * factor, s.task, meta)


def reproduce(table: str, scale: str = "desk", seed: int = 0, models: list[str] | None = None,
              epochs: int | None = None, progress=None, counts: dict | None = None,
              eval_count: int | None = None, model_overrides: dict | None = None
              ) -> tuple[list[TableRow], dict]:
    """Run one table's pipeline; returns rows plus auxiliary data (figure-4 triples, histories).

    ``counts``, ``eval_count`` and ``model_overrides`` shrink the run below
    the named scale (used by smoke tests).
    """
    if table not in TABLES:
        raise ConfigError(f"unknown table {table!r}; choose from {TABLES}")
    weighted = table == "weight-scaling"
    default_models = {"lobster-generalization": list(REFERENCE["lobster-generalization"]),
                      "weight-scaling": list(REFERENCE["weight-scaling"]),
                      "ablation": list(REFERENCE["ablation"]),
                      "figure4": ["iter-homo-path"]}[table]
    models = models or default_models
    rows: list[TableRow] = []
    extra: dict = {"histories": {}, "figure4": [], "spearman": None}
    base_cfg = default_config("iter-homo-path", scale, seed)
    if weighted:
        base_cfg["dataset"].update(weighted=True, weight_min=0.5, weight_max=1.5)
    if epochs is not None:
        base_cfg["train"]["epochs"] = epochs
    if counts is not None:
        base_cfg["dataset"]["counts"] = dict(counts)
    if eval_count is not None:
        for entry in base_cfg["eval_grid"]:
            entry["count"] = eval_count
    d = base_cfg["dataset"]
    train_set = generate_dataset(dataset_spec(d, d["counts"]["train"], seed), "train")
    val_set = generate_dataset(dataset_spec(d, d["counts"]["val"], seed), "val")
    if weighted:
        grid = weight_scaled_grid(base_cfg, base_cfg["eval_grid"][0]["count"])
    elif table in ("ablation", "figure4"):
        grid = eval_sets(base_cfg, labels=("100",))
    else:
        grid = eval_sets(base_cfg)
    for name in models:
        cfg = copy.deepcopy(base_cfg)
        cfg["model"] = {"name": name, "overrides": dict(model_overrides or {})}
        cfg["name"] = f"{table}-{name}"
        spec, res = train_from_config(cfg, train_set, val_set, progress)
        extra["histories"][name] = res.history
        metric = "relative_loss" if weighted else "success_rate"
        metric_rows, traces = evaluate(spec, res.params, grid, metrics=(metric,))
        ref = REFERENCE[table].get(name, {})
        for r in metric_rows:
            value = r.value if weighted else 100.0 * r.value
            column = "success" if table == "ablation" else r.scale
            rows.append(TableRow(table, name, column, value, ref.get(column)))
        if table == "figure4":
            extra["figure4"] = steps_by_distance(traces)
            extra["traces"] = traces
            extra["spearman"] = halting_spearman(traces)
    return rows, extra


def halting_spearman(trace_rows: list[dict]) -> float:
    """Spearman correlation of halting steps vs true distance (NaN if either is constant)."""
    steps = [r["steps"] for r in trace_rows if r.get("steps") is not None]
    dist = [r["distance"] for r in trace_rows if r.get("steps") is not None]
    if len(set(steps)) < 2 or len(set(dist)) < 2:
        return float("nan")
    return float(spearmanr(steps, dist).statistic)


def write_table(path, rows: list[TableRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["table", "model", "column", "value", "reference"])
        for r in rows:
            w.writerow([r.table, r.model, r.column, repr(r.value), "" if r.reference is None else r.reference])


def format_table(rows: list[TableRow]) -> str:
    """Models as rows, scales as columns; reference values in parentheses."""
    cols = list(dict.fromkeys(r.column for r in rows))
    models = list(dict.fromkeys(r.model for r in rows))
    cell = {(r.model, r.column): r for r in rows}
    width = max([len(m) for m in models] + [5])
    lines = [" " * width + " | " + " | ".join(f"{c:>18}" for c in cols)]
    for m in models:
        parts = []
        for c in cols:
            r = cell.get((m, c))
            if r is None:
                parts.append(" " * 18)
                continue
            ref = "" if r.reference is None else f" ({r.reference:g})"
            parts.append(f"{r.value:.4g}{ref}".rjust(18))
        lines.append(f"{m:<{width}} | " + " | ".join(parts))
    return "\n".join(lines)
