"""Command-line pipeline: partition -> plan -> collect -> train -> eval / heatmap.

Every command reads an optional TOML or JSON config, writes its artifacts
under ``--out`` and records inputs, outputs and versions in
``<out>/manifest.json``. Exit codes: 0 success, 2 bad input, 3 runtime fault.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import platform
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np
import scipy

from . import __version__, baselines, kernels, mpnet, planner, propagation, scenes
from .errors import (
    ConflictError, DegenerateSceneError, DivergenceError, DomainError, EmptyRegionError,
    IncompatibleCheckpointError, MalformedInputError, NumericFaultError, StructuralError,
)
from .fieldsim import Dataset, MultipathOracle, OracleParams, execute_plan, preprocess
from .partition import Partition, partition_scene
from .scene import OccupancyGrid, load_scene

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("radiomap")

EXIT_OK, EXIT_INPUT, EXIT_FAULT = 0, 2, 3

INPUT_ERRORS = (MalformedInputError, StructuralError, DomainError, ConflictError,
                DegenerateSceneError, EmptyRegionError, IncompatibleCheckpointError,
                FileNotFoundError, IsADirectoryError, json.JSONDecodeError)

_NET_KEYS = ("levels", "table_size", "features", "base_resolution", "finest_resolution",
             "att_width", "att_depth", "feature_dim", "rad_width", "rad_depth")

DEFAULTS = {
    "scene": {"path": None, "format": None, "resolution": 0.25},
    "partition": {"max_extent": 4.0, "D": 8.0, "seed": 0, "spacing": 1.0, "height": 1.0},
    "planner": {"n": 3, "start": None, "restarts": 16},
    "oracle": {**asdict(OracleParams()), "seed": 0},
    "collect": {"spacing": 1.0, "filter_radius": 0.0, "fill_infeasible": True},
    "render": {k: v for k, v in propagation.RenderConfig().to_dict().items()},
    "net": {"levels": 8, "table_size": 2 ** 14, "features": 2, "base_resolution": 16,
            "finest_resolution": 512, "att_width": 128, "att_depth": 4, "feature_dim": 64,
            "rad_width": 128, "rad_depth": 2},
    "train": asdict(mpnet.TrainConfig()),
    "eval": {"split": 0.5, "split_seed": 0},
    "heatmap": {"spacing": 0.25},
}


# -- config ----------------------------------------------------------------

def load_config(path: str | None) -> dict:
    """Defaults overlaid with a TOML/JSON file; unknown keys are rejected."""
    cfg = copy.deepcopy(DEFAULTS)
    if not path:
        return cfg
    p = Path(path)
    text = p.read_text()
    try:
        data = json.loads(text) if p.suffix.lower() == ".json" else tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise MalformedInputError(f"{p}: {exc}") from exc
    if not isinstance(data, dict):
        raise MalformedInputError(f"{p}: config must be a table/object")
    for section, values in data.items():
        if section not in cfg:
            raise MalformedInputError(f"{p}: unknown config section [{section}]")
        if not isinstance(values, dict):
            raise MalformedInputError(f"{p}: section [{section}] must be a table")
        for k, v in values.items():
            if k not in cfg[section]:
                raise MalformedInputError(f"{p}: unknown key {section}.{k}")
            cfg[section][k] = v
    return cfg


def _apply_overrides(cfg: dict, args) -> dict:
    if args.seed is not None:
        cfg["partition"]["seed"] = args.seed
        cfg["oracle"]["seed"] = args.seed
        cfg["train"]["seed"] = args.seed
        cfg["eval"]["split_seed"] = args.seed
    if getattr(args, "scene", None):
        cfg["scene"]["path"] = args.scene
    if getattr(args, "n", None) is not None:
        cfg["planner"]["n"] = args.n
    if getattr(args, "epochs", None) is not None:
        cfg["train"]["epochs"] = args.epochs
    return cfg


def resolve_scene(cfg: dict, out: Path) -> tuple[OccupancyGrid, str]:
    """Scene from ``builtin:NAME[:seed]``, a file, or the copy saved in ``out``."""
    source = cfg["scene"]["path"]
    if source is None:
        saved = out / "scene.json"
        if not saved.exists():
            raise FileNotFoundError("no scene given and no scene.json in the output directory")
        source = str(saved)
    if source.startswith("builtin:"):
        parts = source.split(":")
        name = parts[1]
        builders = {"empty_room": scenes.empty_room, "two_rooms": scenes.two_rooms,
                    "l_corridor": scenes.l_corridor, "two_rooms_corridor": scenes.two_rooms_corridor}
        if name == "random_rooms":
            return scenes.random_rooms(int(parts[2]) if len(parts) > 2 else 0), source
        if name not in builders:
            raise DomainError(f"unknown builtin scene {name!r}")
        return builders[name](), source
    return load_scene(source, cfg["scene"]["format"], cfg["scene"]["resolution"]), source


def _render_cfg(cfg: dict) -> propagation.RenderConfig:
    return propagation.RenderConfig.from_dict(cfg["render"])


def _net_params(cfg: dict, grid: OccupancyGrid) -> mpnet.NetParams:
    return mpnet.NetParams.for_grid(grid, **{k: cfg["net"][k] for k in _NET_KEYS})


def _oracle(cfg: dict, grid: OccupancyGrid) -> MultipathOracle:
    params = OracleParams.from_dict(cfg["oracle"])
    return MultipathOracle(grid, params, seed=int(cfg["oracle"]["seed"]))


def _vec(text: str) -> np.ndarray:
    try:
        v = np.array([float(x) for x in text.split(",")])
    except ValueError as exc:
        raise DomainError(f"expected x,y,z, got {text!r}") from exc
    if v.shape != (3,):
        raise DomainError(f"expected x,y,z, got {text!r}")
    return v


def _pair(text: str) -> tuple[int, int]:
    try:
        i, j = (int(x) for x in text.split(","))
    except ValueError as exc:
        raise DomainError(f"expected i,j, got {text!r}") from exc
    return planner.canon(i, j)


# -- manifest --------------------------------------------------------------

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path, command: str, cfg: dict, inputs: dict, outputs: list[Path],
                   reproducible: bool, runtime: float, summary: dict) -> None:
    path = out / "manifest.json"
    manifest = json.loads(path.read_text()) if path.exists() else {"runs": {}}
    entry = {
        "config": cfg,
        "inputs": {k: (_sha256(Path(v)) if v and Path(v).is_file() else v) for k, v in inputs.items()},
        "outputs": {p.name: _sha256(p) for p in outputs if p.exists()},
        "versions": {"radiomap": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version(), "kernels": kernels.BACKEND},
        "summary": summary,
    }
    if not reproducible:
        entry["runtime_s"] = round(runtime, 3)
    manifest["runs"][command] = entry
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer, np.floating)):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o)}")


def _dump(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, default=_json_default) + "\n")
    return path


# -- commands --------------------------------------------------------------

def cmd_partition(cfg: dict, args, out: Path) -> dict:
    grid, source = resolve_scene(cfg, out)
    pc = cfg["partition"]
    part = partition_scene(grid, pc["max_extent"], pc["D"], int(pc["seed"]), pc["spacing"], pc["height"])
    if source != str(out / "scene.json"):
        grid.save(out / "scene.json")
    part.save(out / "partition.json")
    summary = {"regions": part.m, "patches": len(part.patches),
               "region_sizes": [len(r.patches) for r in part.regions],
               "waypoints": [len(r.waypoints) for r in part.regions]}
    print(f"{part.m} regions ({len(part.patches)} surface patches)")
    return {"inputs": {"scene": source}, "outputs": [out / "scene.json", out / "partition.json"],
            "summary": summary}


def _load_partition(args, out: Path) -> tuple[Partition, Path]:
    path = Path(args.partition) if getattr(args, "partition", None) else out / "partition.json"
    try:
        return Partition.load(path), path
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedInputError(f"{path}: not a partition file ({exc})") from exc


def _plan_report(plan: planner.Plan) -> dict:
    return {"configs": plan.n_configs, "transitions": plan.n_transitions,
            "total_cost_m": plan.total_cost, "compute_time_s": plan.compute_time,
            "notes": plan.notes}


def cmd_plan(cfg: dict, args, out: Path) -> dict:
    grid, source = resolve_scene(cfg, out)
    part, ppath = _load_partition(args, out)
    n = int(cfg["planner"]["n"])
    if n < 2:
        raise DomainError(f"need at least 2 robots, got n={n}")
    if n > part.m:
        raise DomainError(f"n={n} robots exceeds the {part.m} regions")
    start = tuple(cfg["planner"]["start"] or range(n))
    if len(start) != n or len(set(start)) != n or max(start) >= part.m:
        raise DomainError(f"start must be {n} distinct region ids < {part.m}, got {list(start)}")
    travel = planner.travel_cost_matrix(part, grid)
    matrix = planner.init_matrix(part.m)
    if n == 2:
        plan = planner.plan_two_robots(matrix, start, travel)
    else:
        plan = planner.plan_multi(matrix, n, start, travel, restarts=int(cfg["planner"]["restarts"]))
    plan.save(out / "plan.json")
    _dump(out / "travel.json", travel)
    report = {"plan": _plan_report(plan)}
    if args.compare_baseline:
        base = planner.baseline_greedy(matrix, n, start, travel)
        report["baseline"] = _plan_report(base)
    if args.reproducible:
        for r in report.values():
            r.pop("compute_time_s")
    _dump(out / "plan_report.json", report)
    for name, r in report.items():
        print(f"{name}: {r['configs']} configurations, {r['transitions']} transitions, "
              f"cost {r['total_cost_m']:.2f} m")
    return {"inputs": {"scene": source, "partition": str(ppath)},
            "outputs": [out / "plan.json", out / "travel.json", out / "plan_report.json"],
            "summary": report}


def cmd_collect(cfg: dict, args, out: Path) -> dict:
    grid, source = resolve_scene(cfg, out)
    part, ppath = _load_partition(args, out)
    plan_path = Path(args.plan) if args.plan else out / "plan.json"
    try:
        plan = planner.Plan.load(plan_path)
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedInputError(f"{plan_path}: not a plan file ({exc})") from exc
    for c in [plan.start] + plan.configs:
        if any(not 0 <= r < part.m for r in c):
            raise DomainError(f"plan references region outside 0..{part.m - 1}: {list(c)}")
    travel_path = out / "travel.json"
    travel = (np.array(json.loads(travel_path.read_text())) if travel_path.exists()
              else planner.travel_cost_matrix(part, grid))
    cc = cfg["collect"]
    unreachable = [_pair(p) for p in (args.unreachable or [])]
    raw, matrix, total = execute_plan(plan, part, grid, travel, _oracle(cfg, grid),
                                      spacing=cc["spacing"], unreachable_pairs=unreachable)
    fill = []
    if cc["fill_infeasible"]:
        measured = {m.pair for m in raw.measurements}
        for i, j in zip(*np.nonzero(np.triu(matrix.state == -1, k=1))):
            pair = (int(i), int(j))
            if pair in measured:
                continue
            for a in part.regions[pair[0]].waypoints[:1]:
                for b in part.regions[pair[1]].waypoints[:1]:
                    fill.append((a, b, pair))
    ds = preprocess(raw, cc["filter_radius"], OracleParams.from_dict(cfg["oracle"]).noise_floor_dbm, fill)
    ds.save(out / "dataset.jsonl")
    _dump(out / "matrix.json", matrix.to_json())
    ex = raw.meta.get("execution", {})
    report = {"measurements": len(ds), "travel_m": total, "replans": len(ex.get("replans", [])),
              "skipped": ex.get("skipped", []), "collected": matrix.count(1),
              "infeasible": matrix.count(-1), "pending": matrix.count(0)}
    _dump(out / "collect_report.json", report)
    print(f"{len(ds)} measurements, travel {total:.1f} m, {report['replans']} replans, "
          f"{report['pending']} pairs pending")
    return {"inputs": {"scene": source, "partition": str(ppath), "plan": str(plan_path)},
            "outputs": [out / "dataset.jsonl", out / "matrix.json", out / "collect_report.json"],
            "summary": report}


def cmd_train(cfg: dict, args, out: Path) -> dict:
    grid, source = resolve_scene(cfg, out)
    data_path = Path(args.dataset) if args.dataset else out / "dataset.jsonl"
    ds = Dataset.load(data_path)
    if len(ds) == 0:
        raise DomainError(f"{data_path}: dataset is empty")
    outputs = []
    if args.split:
        train_ds, test_ds = ds.split(cfg["eval"]["split"], int(cfg["eval"]["split_seed"]))
        train_ds.save(out / "train.jsonl")
        test_ds.save(out / "test.jsonl")
        outputs += [out / "train.jsonl", out / "test.jsonl"]
        ds = train_ds
    rcfg = _render_cfg(cfg)
    tcfg = mpnet.TrainConfig.from_dict(cfg["train"])
    first_epoch = 0
    if args.resume:
        net = mpnet.load_checkpoint(args.resume, like=_net_params(cfg, grid))
        first_epoch = int(net.extra.get("epochs_done", 0))
    else:
        net = mpnet.MultipathNet(_net_params(cfg, grid), seed=tcfg.seed)
    ckpt = out / "model.ckpt"
    log_path = out / "train_log.csv"
    try:
        net, history = mpnet.train(net, ds, grid, rcfg, tcfg)
    except DivergenceError as exc:
        last = out / "last_good.ckpt"
        if exc.checkpoint is not None:
            mpnet.save_checkpoint(exc.checkpoint, last, extra={"render": rcfg.to_dict()})
        raise DivergenceError(f"{exc} (last good checkpoint: {last})", exc.checkpoint) from exc
    for h in history:
        h.epoch += first_epoch
    if args.reproducible:
        for h in history:
            h.wall_time = 0.0
    mpnet.write_history_csv(history, log_path, append=bool(args.resume))
    extra = {"render": rcfg.to_dict(), "train": asdict(tcfg), "epochs_done": first_epoch + len(history),
             "dataset_sha256": _sha256(data_path)}
    mpnet.save_checkpoint(net, ckpt, extra=extra)
    final = history[-1] if history else None
    summary = {"epochs": len(history), "epochs_done": extra["epochs_done"],
               "final_L_total": final.L_total if final else None, "records": len(ds)}
    print(f"trained {len(history)} epochs on {len(ds)} records; "
          f"final loss {summary['final_L_total'] if final else float('nan'):.6g}")
    return {"inputs": {"scene": source, "dataset": str(data_path), "resume": args.resume},
            "outputs": outputs + [ckpt, log_path], "summary": summary}


def evaluate(net, grid: OccupancyGrid, test: Dataset, rcfg: propagation.RenderConfig,
             train: Dataset | None = None, los: bool = True) -> dict:
    """EvalReport: per-record absolute errors, MAE, LOS/NLOS split, baselines."""
    cache: dict = {}
    preds, los_mask = [], []
    for m in test.measurements:
        preds.append(propagation.predict_rssi(net, grid, m.tx, m.rx, rcfg, los=los, cache=cache))
        los_mask.append(propagation.los_factor(grid, m.tx, m.rx, rcfg) > 0)
    preds = np.array(preds)
    los_mask = np.array(los_mask, dtype=bool)
    errors = np.abs(preds - test.rssi)
    report = {"mae_dbm": float(errors.mean()), "errors_dbm": errors.tolist(),
              "predictions_dbm": preds.tolist(),
              "los_mae_dbm": float(errors[los_mask].mean()) if los_mask.any() else None,
              "nlos_mae_dbm": float(errors[~los_mask].mean()) if (~los_mask).any() else None,
              "counts": {"test": len(test), "los": int(los_mask.sum())}}
    if train is not None and len(train) >= 2:
        report["baselines_mae_dbm"] = baselines.baseline_maes(train, test, rcfg.d0)
        report["counts"]["train"] = len(train)
    return report


def cmd_eval(cfg: dict, args, out: Path) -> dict:
    t0 = time.perf_counter()
    grid, source = resolve_scene(cfg, out)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "model.ckpt"
    net = mpnet.load_checkpoint(ckpt)
    rcfg = propagation.RenderConfig.from_dict(net.extra.get("render", cfg["render"]))
    test_path = Path(args.dataset) if args.dataset else out / "test.jsonl"
    test = Dataset.load(test_path)
    if len(test) == 0:
        raise DomainError(f"{test_path}: test dataset is empty")
    train_path = Path(args.train_dataset) if args.train_dataset else (
        out / "train.jsonl" if (out / "train.jsonl").exists() else None)
    train = Dataset.load(train_path) if train_path else None
    report = evaluate(net, grid, test, rcfg, train, los=not args.no_los)
    if not args.reproducible:
        report["runtime_s"] = time.perf_counter() - t0
    _dump(out / "eval_report.json", report)
    line = f"MAE {report['mae_dbm']:.2f} dBm on {len(test)} records"
    for k, v in report.get("baselines_mae_dbm", {}).items():
        line += f"; {k} {v:.2f}"
    print(line)
    summary = {k: v for k, v in report.items() if k not in ("errors_dbm", "predictions_dbm")}
    return {"inputs": {"scene": source, "checkpoint": str(ckpt), "test": str(test_path),
                       "train": str(train_path) if train_path else None},
            "outputs": [out / "eval_report.json"], "summary": summary}


def cmd_heatmap(cfg: dict, args, out: Path) -> dict:
    grid, source = resolve_scene(cfg, out)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "model.ckpt"
    net = mpnet.load_checkpoint(ckpt)
    rcfg = propagation.RenderConfig.from_dict(net.extra.get("render", cfg["render"]))
    tx = _vec(args.tx)
    z = float(args.z) if args.z is not None else float(tx[2])
    spacing = args.spacing or cfg["heatmap"]["spacing"]
    values, xs, ys = propagation.heatmap(net, grid, tx, z, rcfg, spacing)
    csv_path, pgm_path = out / "heatmap.csv", out / "heatmap.pgm"
    propagation.write_heatmap(values, xs, ys, rcfg, csv_path, pgm_path)
    finite = values[np.isfinite(values)]
    summary = {"shape": list(values.shape), "cells": int(finite.size),
               "max_dbm": float(finite.max()) if finite.size else None}
    print(f"heatmap {values.shape[0]}x{values.shape[1]} at z={z:g} written to {csv_path}")
    return {"inputs": {"scene": source, "checkpoint": str(ckpt)}, "outputs": [csv_path, pgm_path],
            "summary": summary}


COMMANDS = {"partition": cmd_partition, "plan": cmd_plan, "collect": cmd_collect,
            "train": cmd_train, "eval": cmd_eval, "heatmap": cmd_heatmap}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML or JSON run configuration")
    common.add_argument("--seed", type=int, help="override every seed in the config")
    common.add_argument("--reproducible", action="store_true",
                        help="deterministic reductions and no wall-clock fields in outputs")
    common.add_argument("--out", default="out", help="artifact directory (default: out)")
    common.add_argument("--scene", help="scene file or builtin:NAME[:seed]")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="radiomap", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("partition", parents=[common], help="visibility-based scene partition")

    p = sub.add_parser("plan", parents=[common], help="plan data-collection configurations")
    p.add_argument("--partition")
    p.add_argument("-n", type=int, help="number of robots")
    p.add_argument("--compare-baseline", action="store_true")

    p = sub.add_parser("collect", parents=[common], help="simulate plan execution")
    p.add_argument("--partition")
    p.add_argument("--plan")
    p.add_argument("--unreachable", action="append", metavar="I,J",
                   help="force a region pair to fail (repeatable)")

    p = sub.add_parser("train", parents=[common], help="train the propagation model")
    p.add_argument("--dataset")
    p.add_argument("--resume", help="continue from a checkpoint")
    p.add_argument("--epochs", type=int)
    p.add_argument("--split", action="store_true", help="hold out a test split first")

    p = sub.add_parser("eval", parents=[common], help="MAE against a test dataset")
    p.add_argument("--checkpoint")
    p.add_argument("--dataset", help="test dataset (default: <out>/test.jsonl)")
    p.add_argument("--train-dataset", help="training data for the baselines")
    p.add_argument("--no-los", action="store_true", help="disable LOS compensation")

    p = sub.add_parser("heatmap", parents=[common], help="predicted RSSI over a z-slice")
    p.add_argument("--checkpoint")
    p.add_argument("--tx", required=True, metavar="X,Y,Z")
    p.add_argument("--z", type=float)
    p.add_argument("--spacing", type=float)
    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    t0 = time.perf_counter()
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        out.mkdir(parents=True, exist_ok=True)
        result = COMMANDS[args.command](cfg, args, out)
    except INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (DivergenceError, NumericFaultError) as exc:
        print(f"fault: {exc}", file=sys.stderr)
        return EXIT_FAULT
    inputs = {"config": args.config, **result["inputs"]}
    write_manifest(out, args.command, cfg, inputs, result["outputs"], args.reproducible,
                   time.perf_counter() - t0, result["summary"])
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
