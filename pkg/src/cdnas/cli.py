"""Command-line driver: ``validate-data``, ``search``, ``train``, ``export``.

Exit codes: 0 success, 1 data error, 2 config error, 3 infeasible tree,
4 run-state error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import shutil
import sys
import time
from dataclasses import asdict
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import numpy as np

from . import __version__
from .data import (
    DEFAULT_RATIOS,
    ConfigError,
    DataError,
    build_dataset,
    fingerprint,
    load_dataset,
    make_planted_mf,
)
from .evolve import SearchConfig, config_to_dict, run_search, write_results
from .genome import StructuralError, from_json, infer_shapes, interpretability, parse_key
from .training import (
    InfeasibleTreeError,
    TrainConfig,
    assemble,
    evaluate_split,
    save_checkpoint,
    train,
    write_trace_csv,
)

EXIT_OK, EXIT_DATA, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_RUN_STATE = range(5)
THREADS_ENV = "CDM_EVO_THREADS"
MANIFEST = "run_manifest.json"

log = logging.getLogger("cdnas")


class RunStateError(RuntimeError):
    pass


# --- config ------------------------------------------------------------------------

_SECTIONS = {"data", "search", "train", "seed"}


def load_config(path) -> dict:
    """Parse a JSON or TOML config (by suffix) and check the top-level sections."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"{path}: no such config file")
    try:
        if path.suffix == ".toml":
            cfg = tomllib.loads(path.read_text())
        else:
            cfg = json.loads(path.read_text())
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be a table")
    unknown = set(cfg) - _SECTIONS
    if unknown:
        raise ConfigError(f"{path}: unknown section(s) {sorted(unknown)}")
    cfg.setdefault("data", {})
    # relative data paths are resolved against the config's directory
    for key in ("logs", "qmatrix"):
        if key in cfg["data"]:
            cfg["data"][key] = str((path.parent / cfg["data"][key]).resolve())
    return cfg


def _hash_arrays(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def dataset_from_config(data_cfg: dict, seed: int):
    """Build a dataset from ``{logs, qmatrix}`` paths or a ``synthetic`` table.

    Returns ``(dataset, source description)``.
    """
    data_cfg = dict(data_cfg)
    ratios = tuple(data_cfg.pop("ratios", DEFAULT_RATIOS))
    min_logs = int(data_cfg.pop("min_logs", 15))
    if "synthetic" in data_cfg:
        params = dict(data_cfg.pop("synthetic") or {})
        params.setdefault("seed", seed)
        try:
            planted = make_planted_mf(**params)
        except TypeError as exc:
            raise ConfigError(f"data.synthetic: {exc}") from None
        logs, q = planted.logs, planted.q
        source = {"synthetic": params,
                  "fingerprint": _hash_arrays(logs.student, logs.exercise, logs.score, q.matrix)}
    elif "logs" in data_cfg and "qmatrix" in data_cfg:
        logs_path, q_path = data_cfg.pop("logs"), data_cfg.pop("qmatrix")
        logs, q = load_dataset(logs_path, q_path)
        source = {"logs": logs_path, "qmatrix": q_path, "fingerprint": fingerprint(logs_path, q_path)}
    else:
        raise ConfigError("data needs either logs + qmatrix or synthetic")
    if data_cfg:
        raise ConfigError(f"data: unknown key(s) {sorted(data_cfg)}")
    return build_dataset(logs, q, ratios, seed, min_logs), source


def search_config_from(cfg: dict, seed: int, workers: int | None) -> SearchConfig:
    try:
        train_cfg = TrainConfig(**cfg.get("train", {}))
        return SearchConfig(**cfg.get("search", {}), train=train_cfg, seed=seed, workers=workers)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def resolve_workers(flag: int | None) -> int:
    workers = flag or os.cpu_count() or 1
    cap = os.environ.get(THREADS_ENV)
    if cap:
        try:
            workers = min(workers, max(1, int(cap)))
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {cap!r}") from None
    return workers


def write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def read_manifest(run_dir: Path) -> dict | None:
    path = run_dir / MANIFEST
    if not path.is_file():
        return None
    return json.loads(path.read_text())


# --- commands -------------------------------------------------------------------------


def cmd_validate_data(args) -> int:
    logs, q = load_dataset(args.logs, args.qmatrix)
    ds = build_dataset(logs, q, seed=args.seed)
    print(f"N={ds.N} M={ds.M} K={ds.K}")
    print(f"logs={len(logs)} kept={len(ds.logs)} dropped_students={logs.n_students - ds.N}")
    print(" ".join(f"{name}={len(ds.splits[name])}" for name in ("train", "val", "test")))
    return EXIT_OK


def cmd_search(args) -> int:
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    run_dir = Path(args.out) if args.out else Path("runs") / Path(args.config).stem
    manifest = read_manifest(run_dir)
    if manifest is not None:
        if args.resume and manifest.get("status") == "finished":
            print(f"{run_dir}: run already finished")
            return EXIT_OK
        if not args.resume:
            raise RunStateError(f"{run_dir} already holds a run; pass --resume to continue it")
        # An interrupted run restarts from generation 0; the search is
        # deterministic, so the finished directory is the same either way.
        log.info("restarting unfinished run in %s", run_dir)

    timings = {}
    t0 = time.perf_counter()
    dataset, source = dataset_from_config(cfg.get("data", {}), seed)
    search_cfg = search_config_from(cfg, seed, resolve_workers(args.threads))
    timings["load"] = time.perf_counter() - t0

    run_dir.mkdir(parents=True, exist_ok=True)
    config_echo = {"search": config_to_dict(search_cfg), "data": cfg.get("data", {}),
                   "dataset": {"N": dataset.N, "M": dataset.M, "K": dataset.K, **source,
                               "splits": dataset.manifest()}}
    # worker count is an execution detail; keep it out of the comparable config
    config_echo["search"].pop("workers")
    write_atomic(run_dir / "config.json", json.dumps(config_echo, indent=2, sort_keys=True) + "\n")
    manifest = {"status": "running", "version": __version__, "seed": seed,
                "dataset_fingerprint": source["fingerprint"], "config": config_echo["search"],
                "workers": search_cfg.workers, "timings": timings}
    write_atomic(run_dir / MANIFEST, json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    t0 = time.perf_counter()
    result = run_search(search_cfg, dataset, on_generation=lambda h: print(
        f"gen {h.generation:3d}  best_f1={h.best_f1:.4f}  front={h.front_size}  archive={h.archive_size}",
        flush=True))
    timings["search"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    write_results(result, run_dir)
    timings["write"] = time.perf_counter() - t0

    manifest.update(status="finished", timings=timings)
    write_atomic(run_dir / MANIFEST, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"{len(result.front)} non-dominated architectures written to {run_dir / 'front'}")
    return EXIT_OK


def _load_tree(spec: str):
    path = Path(spec)
    try:
        if path.is_file():
            return from_json(path.read_text())
        return parse_key(spec)
    except (StructuralError, json.JSONDecodeError, KeyError, ValueError) as exc:
        raise ConfigError(f"cannot read tree {spec!r}: {exc}") from None


def cmd_train(args) -> int:
    tree = _load_tree(args.tree)
    _, infeasible = infer_shapes(tree)
    if infeasible:
        raise InfeasibleTreeError(infeasible)
    if args.config:
        data_cfg = load_config(args.config)["data"]
    elif args.synthetic:
        data_cfg = {"synthetic": {}}
    elif args.logs and args.qmatrix:
        data_cfg = {"logs": args.logs, "qmatrix": args.qmatrix}
    else:
        raise ConfigError("train needs --config, --synthetic, or --logs with --qmatrix")
    if args.ratios:
        data_cfg = {**data_cfg, "ratios": args.ratios}
    dataset, _ = dataset_from_config(data_cfg, args.seed)
    train_cfg = TrainConfig(epochs=args.epochs, seed=args.seed)
    model = assemble(tree, dataset.N, dataset.q.matrix, seed=args.seed)
    result = train(model, dataset, train_cfg)
    report = evaluate_split(model, dataset, "test")
    out = {"tree": args.tree, "f2": interpretability(tree), "best_val_auc": result.best_val_auc,
           "stop_reason": result.stop_reason, "epochs_run": len(result.trace), "test": asdict(report)}
    print(json.dumps(out, indent=2, sort_keys=True))
    if args.out:
        save_checkpoint(model, args.out, train_cfg, report)
        write_trace_csv(result.trace, Path(args.out) / "trace.csv")
    return EXIT_OK


def cmd_export(args) -> int:
    run_dir = Path(args.run_dir)
    manifest = read_manifest(run_dir)
    if manifest is None or manifest.get("status") != "finished":
        raise RunStateError(f"{run_dir} is not a finished run")
    front = run_dir / "front"
    out = Path(args.out) if args.out else run_dir / "export"
    out.mkdir(parents=True, exist_ok=True)
    rows = [json.loads(p.read_text()) for p in sorted(front.glob("*.metrics.json"))]
    if args.format == "csv":
        with (out / "front.csv").open("w", newline="") as fh:
            w = csv.DictWriter(fh, ["canonical_key", "f1", "f2", "depth", "breadth", "num_c"])
            w.writeheader()
            for r in rows:
                w.writerow({"canonical_key": r["key"], **{k: r[k] for k in w.fieldnames[1:]}})
        print(f"wrote {len(rows)} rows to {out / 'front.csv'}")
        return EXIT_OK
    suffix = ".dot" if args.format == "dot" else ".json"
    files = sorted(p for p in front.glob(f"*{suffix}") if not p.name.endswith(".metrics.json"))
    for p in files:
        shutil.copyfile(p, out / p.name)
    print(f"wrote {len(files)} {args.format} files to {out}")
    return EXIT_OK


# --- entry point ------------------------------------------------------------------------


def _global_flags(parser, suppress: bool):
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--seed", type=int, default=argparse.SUPPRESS if suppress else None,
                        help="random seed (overrides the config)")
    parser.add_argument("--threads", type=int, default=default,
                        help=f"evaluation workers (capped by ${THREADS_ENV})")
    parser.add_argument("--out", default=default, help="output directory")
    parser.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cdnas", description="Evolutionary search for cognitive-diagnosis models.")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate-data", help="load logs + Q-matrix and report sizes")
    p.add_argument("logs")
    p.add_argument("qmatrix")
    p.set_defaults(func=cmd_validate_data)

    p = sub.add_parser("search", help="run the multi-objective search")
    p.add_argument("config", help="JSON or TOML config file")
    p.add_argument("--resume", action="store_true", help="continue (or no-op on) an existing run directory")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("train", help="train one architecture and report test metrics")
    p.add_argument("tree", help="tree JSON file or canonical key, e.g. 'Sum(Mul(H_E,H_S))'")
    p.add_argument("--config", help="take the data section from this config")
    p.add_argument("--logs")
    p.add_argument("--qmatrix")
    p.add_argument("--synthetic", action="store_true", help="use the default planted-MF dataset")
    p.add_argument("--ratios", type=float, nargs=3, metavar=("TRAIN", "VAL", "TEST"))
    p.add_argument("--epochs", type=int, default=50)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("export", help="export the front of a finished run")
    p.add_argument("run_dir")
    p.add_argument("--format", choices=("dot", "json", "csv"), required=True)
    p.set_defaults(func=cmd_export)

    for p in sub.choices.values():
        _global_flags(p, suppress=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.seed is None and args.command != "search":
        args.seed = 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasibleTreeError as exc:
        print(f"infeasible tree: nodes {exc.infeasible} (pre-order ids)", file=sys.stderr)
        return EXIT_INFEASIBLE
    except RunStateError as exc:
        print(f"run-state error: {exc}", file=sys.stderr)
        return EXIT_RUN_STATE


if __name__ == "__main__":
    sys.exit(main())
