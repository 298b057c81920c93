"""Command-line entry point: ``incseg <command> ...``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 runtime failure.
``INCSEG_OUTPUT_ROOT`` (if set) prefixes relative ``--out`` paths.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .datamodel import (TaskSchedule, base_training_set, load_dataset, load_schedule, read_manifest,
                        sample_few_shot)
from .errors import ConfigError, DataError, LoadError, SnapshotError
from .evaluation import evaluate_model, parse_task_columns, render_table, stage_columns
from .network import ModelSnapshot, restore
from .pseudolabel import write_pseudo_labels
from .retrieval import EmbeddingCache
from .synthetic import (SyntheticWorldSpec, make_synthetic_data, schedule_for,
                        write_synthetic_dataset)
from .trainer import (METHOD_LABELS, METHODS, ExperimentData, TrainConfig, run_experiment,
                      run_incremental_step, stage_label, train_base)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4
OUTPUT_ROOT_ENV = "INCSEG_OUTPUT_ROOT"

log = logging.getLogger("incseg")


def _out_dir(path: str) -> Path:
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _args_echo(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k != "func"}


def _add_training_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--config", help="JSON file with TrainConfig fields")
    g.add_argument("--seed", type=int)
    g.add_argument("--shots", type=int)
    g.add_argument("--k-neighbors", type=int, dest="k_neighbors")
    g.add_argument("--tau", type=float)
    g.add_argument("--pseudo-mode", choices=["hard", "soft"], dest="pseudo_mode")
    g.add_argument("--retrain-init", choices=["teacher", "initial"], dest="retrain_init")
    g.add_argument("--epochs-base", type=int, dest="epochs_base")
    g.add_argument("--epochs-phase1", type=int, dest="epochs_phase1")
    g.add_argument("--epochs-phase2", type=int, dest="epochs_phase2")
    g.add_argument("--lr", type=float)
    g.add_argument("--batch-size", type=int, dest="batch_size")
    g.add_argument("--no-kd", action="store_true", help="drop the distillation term")
    g.add_argument("--no-pl", action="store_true", help="skip pseudo-labelling (FT+KD baseline)")


def _add_data_flags(p: argparse.ArgumentParser, required: bool = True) -> None:
    p.add_argument("--data", required=required, help="dataset root (images/, labels/, manifest)")
    p.add_argument("--manifest", help="manifest file (default: DATA/manifest.json)")
    p.add_argument("--schedule", help="schedule JSON/TOML (default: DATA/schedule.json)")


def _train_config(args) -> TrainConfig:
    base = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            base = json.loads(path.read_text())
        except ValueError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    cfg = TrainConfig.from_dict(base)
    overrides = {k: getattr(args, k) for k in (
        "seed", "shots", "k_neighbors", "tau", "pseudo_mode", "retrain_init", "epochs_base",
        "epochs_phase1", "epochs_phase2", "lr", "batch_size") if getattr(args, k, None) is not None}
    if getattr(args, "no_kd", False):
        overrides["use_kd"] = False
    if getattr(args, "no_pl", False):
        overrides["use_pl"] = False
    return replace(cfg, **overrides)


def _method_name(cfg: TrainConfig) -> str:
    return ("ftkd" if cfg.use_kd else "ft") + ("pl" if cfg.use_pl else "")


def _schedule(args) -> TaskSchedule:
    path = Path(args.schedule) if args.schedule else Path(args.data) / "schedule.json"
    return load_schedule(path)


def _manifest(args) -> dict:
    path = Path(args.manifest) if args.manifest else Path(args.data) / "manifest.json"
    return read_manifest(path)


def _snapshot_path(out: Path, step: int, method: str) -> Path:
    if step == 1:
        return out / "step1" / "model.snap"
    return out / method / f"step{step}" / "model.snap"


def _load_snapshot(out: Path, step: int, method: str) -> ModelSnapshot:
    path = _snapshot_path(out, step, method)
    if not path.exists():
        hint = "run train-base first" if step == 1 else f"run increment --step {step} first"
        raise LoadError(f"no snapshot for step {step} at {path} ({hint})")
    snap = ModelSnapshot.load(path)
    if snap.position != step:
        raise SnapshotError(f"stale snapshot {path}: records step {snap.position}, expected step {step}")
    return snap


def cmd_synth(args) -> int:
    spec = SyntheticWorldSpec()
    if args.world:
        spec = SyntheticWorldSpec.from_dict(json.loads(Path(args.world).read_text()))
    sizes = None
    if args.split:
        sizes = {}
        for item in args.split:
            name, _, n = item.partition("=")
            if not n.isdigit():
                raise ConfigError(f"--split expects name=count, got {item!r}")
            sizes[name] = int(n)
    elif args.count is None:
        raise ConfigError("give --count or one or more --split name=count")
    out = _out_dir(args.out)
    manifest = write_synthetic_dataset(spec, out, count=args.count, seed=args.seed, sizes=sizes)
    counts = {k: len(v) for k, v in manifest["splits"].items()}
    print(f"wrote {sum(counts.values())} scenes to {out} {counts}")
    return EXIT_OK


def cmd_train_base(args) -> int:
    cfg = _train_config(args)
    schedule = _schedule(args)
    manifest = _manifest(args)
    train, _, _ = load_dataset(args.data, manifest, schedule, step=1)
    if not train:
        raise DataError("manifest has no train_1 split")
    out = _out_dir(args.out)
    snap, report = train_base(base_training_set(train, schedule), schedule, cfg)
    step_dir = out / "step1"
    step_dir.mkdir(parents=True, exist_ok=True)
    snap.save(step_dir / "model.snap")
    _write_json(step_dir / "report.json", _stable_report(report.to_dict()))
    _write_json(step_dir / "config.json", {"command": "train-base", "args": _args_echo(args),
                                           "train_config": cfg.to_dict()})
    print(f"base model ({snap.class_count} classes) -> {step_dir / 'model.snap'} [{snap.digest}]")
    return EXIT_OK


def _stable_report(d: dict) -> dict:
    # wall-clock is the only field that varies between identical runs
    d = dict(d)
    d["wall_clock"] = {k: round(v, 3) for k, v in d.get("wall_clock", {}).items()}
    return d


def cmd_increment(args) -> int:
    cfg = _train_config(args)
    schedule = _schedule(args)
    manifest = _manifest(args)
    out = _out_dir(args.out)
    t = args.step
    if not 2 <= t <= schedule.num_tasks:
        raise ConfigError(f"--step must be in 2..{schedule.num_tasks}")
    method = _method_name(cfg)
    teacher = _load_snapshot(out, t - 1, method)
    train, pool, _ = load_dataset(args.data, manifest, schedule, step=t)
    fewshot = sample_few_shot(train, schedule.classes(t), cfg.shots, seed=cfg.seed * 7919 + t,
                              task_index=t)
    cache = EmbeddingCache(out / "embedding_cache")
    snap, report = run_incremental_step(teacher, fewshot, pool, schedule, cfg, cache=cache,
                                        keep_pseudo=args.dump_pseudo)
    cache.flush()
    step_dir = out / method / f"step{t}"
    step_dir.mkdir(parents=True, exist_ok=True)
    snap.save(step_dir / "model.snap")
    pseudo = getattr(report, "pseudo", None)
    if pseudo is not None:
        write_pseudo_labels(pseudo, step_dir / "pseudo", report.snapshots["initial"])
        del report.pseudo
    rep = _stable_report(report.to_dict())
    rep["fewshot_stems"] = [s.stem for s in fewshot.items]
    _write_json(step_dir / "report.json", rep)
    _write_json(step_dir / "config.json", {"command": "increment", "args": _args_echo(args),
                                           "train_config": cfg.to_dict()})
    flag = " (degraded: empty pool)" if report.degraded else ""
    print(f"{METHOD_LABELS[method]} step {t} -> {step_dir / 'model.snap'} [{snap.digest}]{flag}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    schedule = _schedule(args)
    manifest = _manifest(args)
    out = _out_dir(args.out)
    t = args.step
    snap = _load_snapshot(out, t, args.method)
    _, _, val = load_dataset(args.data, manifest, schedule, step=max(t, 2))
    if not val:
        raise DataError("manifest has no val split")
    columns = parse_task_columns(args.tasks, t) if args.tasks else stage_columns(t)
    report = evaluate_model(restore(snap), val, schedule, t, columns)
    step_dir = _snapshot_path(out, t, args.method).parent
    _write_json(step_dir / "metrics.json", report.to_dict())
    label = "Base" if t == 1 else METHOD_LABELS.get(args.method, args.method)
    table = render_table([(label, stage_label(t), report.columns)], [c for c, _ in columns])
    (step_dir / "metrics.txt").write_text(table)
    print(table, end="")
    return EXIT_OK


def experiment_table(agg: dict) -> str:
    rows, columns = [], []
    for stage, cols in agg.get("base", {}).items():
        rows.append(("Base", stage, {c: (v["mean"], v["ci95"]) for c, v in cols.items()}))
        columns.extend(c for c in cols if c not in columns)
    for method in agg["methods"]:
        for stage, cols in agg["results"].get(method, {}).items():
            rows.append((METHOD_LABELS.get(method, method), stage,
                         {c: (v["mean"], v["ci95"]) for c, v in cols.items()}))
            columns.extend(c for c in cols if c not in columns)
    return render_table(rows, columns)


def cmd_experiment(args) -> int:
    cfg = _train_config(args)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}; choose from {sorted(METHODS)}")
    if args.runs < 1:
        raise ConfigError("--runs must be >= 1")
    if args.synthetic:
        spec = SyntheticWorldSpec()
        if args.world:
            spec = SyntheticWorldSpec.from_dict(json.loads(Path(args.world).read_text()))
        sizes = {"train_1": args.synth_base, "val": args.synth_val}
        for t in range(2, schedule_for(spec).num_tasks + 1):
            sizes[f"train_{t}"] = args.synth_labeled
            sizes[f"unlabeled_{t}"] = args.synth_pool
        synth = make_synthetic_data(spec, sizes, seed=args.synth_seed)
        schedule = synth.schedule
        data = ExperimentData.from_splits(synth.splits, schedule)
    else:
        if not args.data:
            raise ConfigError("give --data or --synthetic")
        schedule = _schedule(args)
        manifest = _manifest(args)
        splits = {}
        for t in range(1, schedule.num_tasks + 1):
            train, pool, val = load_dataset(args.data, manifest, schedule, step=t)
            splits[f"train_{t}"] = train
            if t > 1:
                splits[f"unlabeled_{t}"] = pool
        splits["val"] = val
        data = ExperimentData.from_splits(splits, schedule)
    agg = run_experiment(schedule, data, cfg, n_runs=args.runs, methods=methods)
    out = _out_dir(args.out)
    _write_json(out / "aggregate.json", agg)
    table = experiment_table(agg)
    (out / "table.txt").write_text(table)
    _write_json(out / "config.json", {"command": "experiment", "args": _args_echo(args),
                                      "train_config": cfg.to_dict()})
    print(table, end="")
    for f in agg["failures"]:
        print(f"seed {f['seed']} failed: {f['error']}", file=sys.stderr)
    if agg["failures"] and len(agg["failures"]) == args.runs:
        return EXIT_RUNTIME
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="incseg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int)
    p.add_argument("--split", action="append", metavar="NAME=COUNT")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--world", help="JSON synthetic world spec")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-base", help="train the base model on task 1")
    _add_data_flags(p)
    p.add_argument("--out", required=True)
    _add_training_flags(p)
    p.set_defaults(func=cmd_train_base)

    p = sub.add_parser("increment", help="learn one few-shot task")
    _add_data_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--step", type=int, default=2)
    p.add_argument("--dump-pseudo", action="store_true", help="write pseudo-label PNGs + sidecar")
    _add_training_flags(p)
    p.set_defaults(func=cmd_increment)

    p = sub.add_parser("evaluate", help="mIoU of a trained step on the val split")
    _add_data_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--step", type=int, default=2)
    p.add_argument("--method", default="ftkdpl", choices=sorted(METHODS))
    p.add_argument("--tasks", help="columns, e.g. '1,2,union' (default: the stage's columns)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("experiment", help="repeated runs with mean and 95%% CI per method")
    _add_data_flags(p, required=False)
    p.add_argument("--out", required=True)
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--methods", default="ftkd,ftkdpl")
    p.add_argument("--synthetic", action="store_true", help="generate the data in memory")
    p.add_argument("--world", help="JSON synthetic world spec (with --synthetic)")
    p.add_argument("--synth-seed", type=int, default=0)
    p.add_argument("--synth-base", type=int, default=200)
    p.add_argument("--synth-labeled", type=int, default=40)
    p.add_argument("--synth-pool", type=int, default=200)
    p.add_argument("--synth-val", type=int, default=100)
    _add_training_flags(p)
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
