"""Command-line entry points: ``generate``, ``train``, ``eval``, ``selftest``, ``reproduce``.

Exit codes: 0 success, 1 usage error, 2 data error (missing/malformed
files, schema violations, task mismatch), 3 invariant failure (self-test
failure, diverged training).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

from . import __version__, experiments as ex, selftest
from .model import load_checkpoint, save_checkpoint
from .oracles import ORACLE_VERSIONS
from .tasks import TASKS, DatasetFormatError, DatasetSpec, generate_dataset, read_dataset, write_dataset
from .training import (TrainingDivergedError, evaluate, steps_by_distance, write_history_csv,
                       write_metrics_csv)

log = logging.getLogger("graphiter")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INVARIANT = 0, 1, 2, 3
CHECKPOINT = "checkpoint"


class UsageError(Exception):
    """Invalid flag combination."""


class DataError(Exception):
    """Missing or inconsistent inputs."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _task(name: str) -> str:
    task = name.replace("-", "_")
    if task not in TASKS:
        raise argparse.ArgumentTypeError(f"unknown task {name!r}; choose from "
                                         + ", ".join(t.replace("_", "-") for t in TASKS))
    return task


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _dump_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# generate ------------------------------------------------------------------------

def cmd_generate(args) -> int:
    if not args.weighted and (args.weight_min is not None or args.weight_max is not None):
        raise UsageError("--weight-min/--weight-max require --weighted")
    if args.n_min < 2 or args.n_max <= args.n_min:
        raise UsageError("need 2 <= --n-min < --n-max")
    gen_params = json.loads(args.gen_params) if args.gen_params else None
    kw = dict(task=args.task, generator=args.generator, n_min=args.n_min, n_max=args.n_max,
              weighted=args.weighted, seed=args.seed, attr_scale=args.attr_scale)
    if gen_params is not None:
        kw["gen_params"] = gen_params
    if args.weighted:
        kw["weight_min"] = 0.5 if args.weight_min is None else args.weight_min
        kw["weight_max"] = 1.5 if args.weight_max is None else args.weight_max
    counts = {"train": args.count,
              "val": args.count if args.val_count is None else args.val_count,
              "test": args.count if args.test_count is None else args.test_count}
    try:
        base = DatasetSpec(**kw)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    for split, n in counts.items():
        path = out / f"{split}.jsonl"
        samples = generate_dataset(DatasetSpec(**{**base.to_dict(), "count": n}), split) if n else []
        write_dataset(samples, path)
        files[split] = {"file": path.name, "count": n, "sha256": _sha256(path)}
    spec = base.to_dict()
    spec.pop("count")
    _dump_json(out / "manifest.json", {"version": __version__, "dataset": spec, "splits": files,
                                       "oracle_versions": ORACLE_VERSIONS})
    print(f"wrote {sum(counts.values())} samples to {out}")
    return EXIT_OK


# train ---------------------------------------------------------------------------

def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise DataError(f"missing file {path}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path} is not valid JSON: {exc}") from exc


def _load_split(path: Path):
    if not path.exists():
        raise DataError(f"missing file {path}")
    return read_dataset(path)


def build_train_config(args) -> dict:
    """Experiment config from ``--config`` and/or flags (flags win)."""
    if args.config:
        cfg = _read_json(args.config)
    else:
        cfg = ex.default_config(args.model or "iter-homo-path", args.scale, args.seed or 0)
        cfg["dataset"]["task"] = args.task
    if args.data:
        manifest = _read_json(Path(args.data) / "manifest.json")
        d = {k: v for k, v in manifest["dataset"].items() if k != "seed"}
        d["counts"] = {k: v["count"] for k, v in manifest["splits"].items()}
        cfg["dataset"] = d
    if args.model:
        cfg["model"] = {"name": args.model}
    if args.seed is not None:
        cfg["seed"] = args.seed
    for flag, key in (("epochs", "epochs"), ("lr", "lr"), ("batch_size", "batch_size")):
        if getattr(args, flag) is not None:
            cfg["train"][key] = getattr(args, flag)
    if args.hidden is not None:
        cfg["model"].setdefault("overrides", {})["hidden"] = args.hidden
    try:
        ex.validate_config(cfg)
    except ex.ConfigError as exc:
        raise DataError(str(exc)) from exc
    return cfg


def cmd_train(args) -> int:
    cfg = build_train_config(args)
    train_set = val_set = None
    if args.data:
        train_set = _load_split(Path(args.data) / "train.jsonl")
        val_set = _load_split(Path(args.data) / "val.jsonl")
        if not train_set:
            raise DataError("training split is empty")
        if train_set[0].task != cfg["dataset"]["task"]:
            raise DataError(f"data task {train_set[0].task!r} does not match config")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _dump_json(out / "config.json", cfg)

    def progress(row):
        print(json.dumps(row), flush=True)

    spec, res = ex.train_from_config(cfg, train_set, val_set, progress if args.verbose else None)
    save_checkpoint(out / CHECKPOINT, spec, res.params,
                    {"task": cfg["dataset"]["task"], "config": cfg, "best_epoch": res.best_epoch,
                     "best_metric": res.best_metric})
    write_history_csv(out / "history.csv", res.history)
    _dump_json(out / "chosen_epoch.json", {"epoch": res.best_epoch, "val_metric": res.best_metric})
    print(f"best epoch {res.best_epoch} val_metric {res.best_metric:.6g}; wrote {out}")
    return EXIT_OK


# eval ----------------------------------------------------------------------------

def _checkpoint_prefix(path: str) -> Path:
    p = Path(path)
    if p.is_dir():
        p = p / CHECKPOINT
    for suffix in (".model.json", ".params.json"):
        if not Path(f"{p}{suffix}").exists():
            raise DataError(f"missing checkpoint file {p}{suffix}")
    return p


def cmd_eval(args) -> int:
    prefix = _checkpoint_prefix(args.checkpoint)
    spec, params, extra = load_checkpoint(prefix)
    task = extra.get("task", "shortest_path")
    grid = []
    if args.data:
        for f in args.data:
            samples = _load_split(Path(f))
            grid.append((Path(f).stem, samples))
    else:
        cfg = extra.get("config") or ex.default_config()
        d = {k: v for k, v in cfg["dataset"].items() if k != "counts"}
        seed = cfg["seed"] if args.seed is None else args.seed
        for n in args.sizes:
            grid.append((str(n), generate_dataset(DatasetSpec(**{**d, "n_min": n, "n_max": n + 1},
                                                              count=args.count, seed=seed), "test")))
    for label, samples in grid:
        if samples and samples[0].task != task:
            raise DataError(f"task mismatch: checkpoint trained on {task!r}, {label} holds {samples[0].task!r}")
    metrics = tuple(args.metrics) if args.metrics else None
    rows, traces = evaluate(spec, params, grid, metrics)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(out / "metrics.csv", rows, task, args.model_name or prefix.parent.name, args.seed or 0)
    write_trace_rows(out / "trace.csv", traces)
    write_steps_by_distance(out / "steps_by_distance.csv", steps_by_distance(traces))
    for r in rows:
        print(f"{r.scale:>8} {r.metric:<14} {r.value:.6g} (n={r.count})")
    return EXIT_OK


TRACE_FIELDS = ["scale", "sample_id", "target", "prediction", "distance", "success",
                "steps", "forced_halt", "first_crossing"]


def write_trace_rows(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TRACE_FIELDS, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)


def write_steps_by_distance(path, triples) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["distance", "mean_steps", "distance_half"])
        w.writerows(triples)


# selftest / reproduce ------------------------------------------------------------

def cmd_selftest(args) -> int:
    results = selftest.run_selftest(quick=args.quick, inject_bias=args.inject_bias)
    print(selftest.format_report(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_INVARIANT


def cmd_reproduce(args) -> int:
    if not args.acknowledge_compute:
        raise UsageError("reproduce trains several models; pass --acknowledge-compute to confirm the budget "
                         "(desk scale: roughly 20-40 CPU-minutes per model)")
    unknown = set(args.models or ()) - set(ex.MODEL_PRESETS)
    if unknown:
        raise UsageError(f"unknown models {sorted(unknown)}")

    def progress(row):
        print(json.dumps(row), flush=True)

    rows, extra = ex.reproduce(args.table, args.scale, args.seed, args.models, args.epochs,
                               progress if args.verbose else None)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ex.write_table(out / f"{args.table}.csv", rows)
    for name, hist in extra["histories"].items():
        write_history_csv(out / f"history_{name}.csv", hist)
    if args.table == "figure4":
        write_steps_by_distance(out / "figure4.csv", extra["figure4"])
        print(f"spearman(steps, distance) = {extra['spearman']:.4f}")
    print(ex.format_table(rows))
    return EXIT_OK


# parser --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="graphiter", description=__doc__.splitlines()[0])
    p.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write train/val/test JSONL datasets plus a manifest")
    g.add_argument("--task", type=_task, default="shortest_path")
    g.add_argument("--generator", default="lobster", choices=["er", "knn", "planar", "lobster"])
    g.add_argument("--gen-params", help="JSON object of generator parameters")
    g.add_argument("--n-min", type=int, default=4)
    g.add_argument("--n-max", type=int, default=34)
    g.add_argument("--count", type=int, default=100, help="train samples (and val/test unless given)")
    g.add_argument("--val-count", type=int)
    g.add_argument("--test-count", type=int)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--weighted", action="store_true")
    g.add_argument("--weight-min", type=float)
    g.add_argument("--weight-max", type=float)
    g.add_argument("--attr-scale", type=float, default=1.0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model; writes checkpoint, history.csv, chosen_epoch.json")
    t.add_argument("--config", help="experiment config JSON (validated against the shipped schema)")
    t.add_argument("--data", help="directory written by 'generate' (else data is generated from the config)")
    t.add_argument("--task", type=_task, default="shortest_path")
    t.add_argument("--model", help="preset: " + ", ".join(ex.MODEL_PRESETS))
    t.add_argument("--scale", default="desk", choices=list(ex.SCALES))
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--hidden", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True)
    t.add_argument("--verbose", action="store_true", help="print one JSON line per epoch")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="metrics.csv, trace.csv and steps_by_distance.csv for a checkpoint")
    e.add_argument("--checkpoint", required=True, help="training output directory or checkpoint prefix")
    src = e.add_mutually_exclusive_group()
    src.add_argument("--data", nargs="+", help="JSONL test files; each becomes one scale row")
    src.add_argument("--sizes", nargs="+", type=int, default=[20, 100, 500],
                     help="generate one test set per node count from the training distribution")
    e.add_argument("--count", type=int, default=ex.DESK_EVAL_COUNT)
    e.add_argument("--metrics", nargs="+", choices=["relative_loss", "success_rate", "accuracy", "mse"])
    e.add_argument("--model-name")
    e.add_argument("--seed", type=int)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("selftest", help="gradient, homogeneity, iterative-algebra and oracle suites")
    s.add_argument("--quick", action="store_true", help="about a tenth of the trials")
    s.add_argument("--inject-bias", action="store_true", help="negative control: homogeneity must fail")
    s.set_defaults(func=cmd_selftest)

    r = sub.add_parser("reproduce", help="desk-scale reproduction of a results table")
    r.add_argument("--table", required=True, choices=list(ex.TABLES))
    r.add_argument("--scale", default="desk", choices=list(ex.SCALES))
    r.add_argument("--models", nargs="+")
    r.add_argument("--epochs", type=int)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--acknowledge-compute", action="store_true")
    r.add_argument("--out", default="reproduce_out")
    r.add_argument("--verbose", action="store_true")
    r.set_defaults(func=cmd_reproduce)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"graphiter {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, DatasetFormatError, ex.ConfigError) as exc:
        print(f"graphiter {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDivergedError as exc:
        print(f"graphiter {args.command}: invariant failure: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
