"""``ppfl generate|train|sweep``: config-driven entry point.

Exit codes: 0 success, 1 some sweep points failed, 2 invalid configuration,
3 step size outside the convergence guarantee.
"""

from __future__ import annotations

import argparse
import copy
import itertools
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import jsonschema
import numpy as np

from . import baselines, datagen, graph as graphs
from .core import ConfigError, RunConfig
from .metrics import export_run
from .optim import StepSizeError, alternating_run, rbcd_run

EXIT_OK, EXIT_PARTIAL, EXIT_CONFIG, EXIT_BOUND = 0, 1, 2, 3

_num = {"type": "number"}
_pos_int = {"type": "integer", "minimum": 1}
_opt_num = {"type": ["number", "null"]}

TRAIN_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "K": _pos_int, "T": {"type": "integer", "minimum": 0}, "E": _pos_int,
        "eta": {"type": "number", "exclusiveMinimum": 0},
        "eta_schedule": {"enum": ["constant", "inv_sqrt"]},
        "lambda": {"type": "number", "minimum": 0},
        "rho": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 2, "maxItems": 2},
        "batch_size": {"oneOf": [{"const": "full"}, _pos_int]},
        "architecture": {"enum": ["prediction", "parameter", "loss"]},
        "epsilon_floor": {"type": "number", "exclusiveMinimum": 0},
        "algorithm": {"enum": ["rbcd", "alternating", "fedavg", "local", "clustered"]},
        "seed": {"type": "integer", "minimum": 0},
        "init_scale": {"type": "number", "minimum": 0},
        "c_step_scale": {"type": "number", "exclusiveMinimum": 0},
        "enforce_step_bound": {"type": "boolean"},
        "L1": _opt_num, "L2": _opt_num, "sigma1_sq": _opt_num, "delta_sq": _opt_num, "delta_F": _opt_num,
        "snapshot_rounds": {"type": ["array", "null"], "items": {"type": "integer", "minimum": 0}},
        "threads": _pos_int,
        "graph": {"type": "string"},
    },
}

GENERATE_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["benchmark"],
    "properties": {
        "benchmark": {"enum": ["mixture", "domain", "dirichlet"]},
        "seed": {"type": "integer", "minimum": 0},
        "M": _pos_int, "d": _pos_int,
        "K_true": _pos_int,
        "n_range": {"type": "array", "items": _pos_int, "minItems": 2, "maxItems": 2},
        "dirichlet_alpha": {"type": "number", "exclusiveMinimum": 0},
        "task": {"enum": ["regression", "binary"]},
        "noise_std": {"type": "number", "minimum": 0},
        "groups": _pos_int, "classes_per_group": _pos_int,
        "n_per_client": {"oneOf": [_pos_int, {"type": "array", "items": _pos_int,
                                              "minItems": 2, "maxItems": 2}]},
        "separation": {"type": "number", "minimum": 0},
        "n_total": _pos_int, "n_classes": {"type": "integer", "minimum": 2},
        "alpha": {"type": "number", "exclusiveMinimum": 0},
        "train_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
    },
}

GRID_KEYS = ("lambda", "K", "alpha", "algorithm", "seed")

SWEEP_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["grid"],
    "properties": {
        "base": {"type": "object"},
        "generate": {"type": "object"},
        "data": {"type": "string"},
        "grid": {"type": "object", "additionalProperties": False,
                 "properties": {k: {"type": "array"} for k in GRID_KEYS}},
    },
}


def _validate(obj, schema, prefix=""):
    try:
        jsonschema.validate(obj, schema)
    except jsonschema.ValidationError as exc:
        path = ".".join(str(p) for p in exc.absolute_path)
        if exc.validator == "required":
            path = ".".join(filter(None, [path, exc.message.split("'")[1]]))
        elif exc.validator == "additionalProperties" and "'" in exc.message:
            path = ".".join(filter(None, [path, exc.message.split("'")[1]]))
        raise ConfigError(prefix + (path or "<root>"), exc.message) from None


def _load_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"invalid JSON: {exc}") from None
    except OSError as exc:
        raise ConfigError("--config", str(exc)) from None


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: dict, pairs) -> dict:
    cfg = dict(cfg)
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError("--set", f"expected key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        cfg[key.strip()] = _parse_value(value)
    return cfg


def _threads(args) -> int | None:
    if args.threads is not None:
        return args.threads
    env = os.environ.get("PPFL_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError("PPFL_THREADS", f"not an integer: {env!r}") from None
    return None


# ---------------------------------------------------------------------------
# Library-level commands (the CLI is a thin shell over these)


def generate_benchmark(cfg: dict, out_dir) -> str:
    """Generate the configured benchmark and write it to ``out_dir``."""
    _validate(cfg, GENERATE_SCHEMA)
    kind = cfg["benchmark"]
    seed = cfg.get("seed", 0)
    frac = cfg.get("train_fraction", datagen.TRAIN_FRACTION)
    try:
        if kind == "mixture":
            shards, gt = datagen.gen_mixture_synthetic(
                cfg.get("M", 30), cfg.get("K_true", 3), cfg.get("d", 20), tuple(cfg.get("n_range", (50, 200))),
                cfg.get("dirichlet_alpha", 0.5), cfg.get("task", "regression"), seed,
                noise_std=cfg.get("noise_std", datagen.NOISE_STD), train_fraction=frac)
            truth = datagen.mixture_ground_truth_dict(gt)
        elif kind == "domain":
            npc = cfg.get("n_per_client", [80, 120])
            shards, assign = datagen.gen_domain_heterogeneous(
                cfg.get("M", 30), cfg.get("groups", 4), cfg.get("classes_per_group", 2), cfg.get("d", 20),
                npc if isinstance(npc, int) else tuple(npc), cfg.get("separation", 3.0), seed,
                train_fraction=frac)
            truth = {"group_assignment": assign}
        else:
            base = datagen.gen_gaussian_classes(cfg.get("n_total", 3000), cfg.get("d", 20),
                                                cfg.get("n_classes", 10), cfg.get("separation", 3.0), seed)
            shards = datagen.gen_dirichlet_partition(base, cfg.get("M", 30), cfg.get("alpha", 0.5), seed,
                                                     train_fraction=frac)
            truth = {}
    except ValueError as exc:
        raise ConfigError(kind, str(exc)) from None
    return datagen.export_benchmark(shards, out_dir, truth, meta=cfg)


def _graph_for(choice: str | None, shards, data_dir):
    if choice in (None, "default"):
        return graphs.default_affinity(shards)
    if choice == "all_ones":
        return graphs.all_ones(len(shards))
    if choice == "empty":
        return graphs.empty(len(shards))
    if choice == "cosine":
        return graphs.affinity_from_label_histograms(shards)
    path = choice if os.path.isabs(choice) or data_dir is None else os.path.join(data_dir, choice)
    return graphs.load_affinity_csv(path)


def train_config(cfg: dict) -> tuple[RunConfig, str | None]:
    """Validate a training config; returns the run config and the graph choice."""
    _validate(cfg, TRAIN_SCHEMA)
    cfg = dict(cfg)
    graph_choice = cfg.pop("graph", None)
    return RunConfig.from_dict(cfg), graph_choice


def run_training(config: RunConfig, shards, graph=None):
    """Dispatch on ``config.algorithm``."""
    algo = config.algorithm
    if algo == "rbcd":
        return rbcd_run(config, shards, graph)
    if algo == "alternating":
        return alternating_run(config, shards, graph)
    if algo == "fedavg":
        return baselines.run_fedavg(shards, config)
    if algo == "local":
        return baselines.run_local(shards, config)
    return baselines.run_clustered_fl(shards, config, config.K)


def train(cfg: dict, data_dir, out_dir):
    config, graph_choice = train_config(cfg)
    try:
        shards, _ = datagen.load_benchmark(data_dir)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError("--data", str(exc)) from None
    g = _graph_for(graph_choice, shards, data_dir) if config.algorithm in ("rbcd", "alternating") else None
    traj = run_training(config, shards, g)
    export_run(traj, out_dir)
    np.savetxt(os.path.join(out_dir, "theta.csv"), traj.final_theta, delimiter=",", fmt="%.17g")
    return traj


def _grid_points(grid: dict):
    keys = [k for k in GRID_KEYS if k in grid]
    if not keys or any(len(grid[k]) == 0 for k in keys):
        return []
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def sweep(cfg: dict, out_dir, data_dir=None, threads: int | None = None, seed=None) -> int:
    """Run every grid point; writes one run directory per point and ``index.json``."""
    _validate(cfg, SWEEP_SCHEMA)
    base = dict(cfg.get("base", {}))
    if seed is not None:
        base["seed"] = seed
    _validate(base, TRAIN_SCHEMA, "base.")
    data_dir = cfg.get("data", data_dir)
    points = _grid_points(cfg["grid"])
    if any("alpha" in p for p in points) and "generate" not in cfg:
        raise ConfigError("grid.alpha", "sweeping alpha needs a 'generate' section")
    if points and "generate" not in cfg and data_dir is None:
        raise ConfigError("data", "no benchmark given (use --data or a 'generate' section)")
    os.makedirs(out_dir, exist_ok=True)

    def one(idx_point):
        idx, point = idx_point
        run_dir = os.path.join(out_dir, f"point_{idx:04d}")
        entry = {"index": idx, "params": point, "dir": os.path.basename(run_dir)}
        try:
            run_cfg = dict(base)
            run_cfg.update({k: v for k, v in point.items() if k != "alpha"})
            if threads is not None:
                run_cfg["threads"] = threads
            bench = data_dir
            if "generate" in cfg:
                gen_cfg = copy.deepcopy(cfg["generate"])
                if "alpha" in point:
                    key = "dirichlet_alpha" if gen_cfg.get("benchmark") == "mixture" else "alpha"
                    gen_cfg[key] = point["alpha"]
                bench = os.path.join(run_dir, "data")
                generate_benchmark(gen_cfg, bench)
            traj = train(run_cfg, bench, run_dir)
            entry.update(status="ok", final_test_metric=traj.final_test_metric, final_F=traj.final_F)
        except (ConfigError, StepSizeError, ValueError, OSError) as exc:
            entry.update(status="failed", error=f"{type(exc).__name__}: {exc}")
        return entry

    workers = threads or 1
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            entries = list(ex.map(one, enumerate(points)))
    else:
        entries = [one(p) for p in enumerate(points)]
    with open(os.path.join(out_dir, "index.json"), "w") as fh:
        json.dump({"points": entries}, fh, indent=2, sort_keys=True, default=float)
        fh.write("\n")
    return EXIT_PARTIAL if any(e["status"] != "ok" for e in entries) else EXIT_OK


# ---------------------------------------------------------------------------
# Argument handling


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ppfl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in (("generate", "write a synthetic benchmark directory"),
                           ("train", "train on a benchmark directory"),
                           ("sweep", "run a grid of training configurations")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--data", help="benchmark directory (train, sweep)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--threads", type=int, help="worker threads (default: $PPFL_THREADS or 1)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one top-level config field (value parsed as JSON)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = apply_overrides(_load_json(args.config), args.set)
        threads = _threads(args)
        if args.command == "generate":
            if args.seed is not None:
                cfg["seed"] = args.seed
            path = generate_benchmark(cfg, args.out)
            print(f"wrote {path}")
            return EXIT_OK
        if args.command == "train":
            if args.data is None:
                raise ConfigError("--data", "train needs a benchmark directory")
            if args.seed is not None:
                cfg["seed"] = args.seed
            if threads is not None:
                cfg["threads"] = threads
            traj = train(cfg, args.data, args.out)
            print(f"{traj.algorithm}: final F={traj.final_F:.6g} "
                  f"test {traj.metric_name}={traj.final_test_metric:.4f} -> {args.out}")
            return EXIT_OK
        code = sweep(cfg, args.out, args.data, threads, args.seed)
        print(f"sweep finished with exit code {code} -> {args.out}")
        return code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StepSizeError as exc:
        print(f"{exc}\ncomputed bound: {exc.bound:.17g}", file=sys.stderr)
        return EXIT_BOUND


if __name__ == "__main__":
    sys.exit(main())
