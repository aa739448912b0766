"""Experiment driver: config files, orchestration, and metrics emission.

Configs are TOML (JSON also accepted); command-line flags override file
values. Every run writes a metrics.json whose only fields that vary between
identical reruns are "timestamp" and "wall_time_s"; everything numeric is a
pure function of (config, seed). Sweep points run in a worker pool capped by
MTFL_THREADS and are reduced in axis order, so thread count never changes a
byte of output.

Exit codes: 0 ok, 2 config error, 3 runtime error.
"""

import argparse
import csv
import datetime
import hashlib
import io
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import analysis, baselines, downstream, network, pretrain, tasks
from ._util import as_generator, atomic_write_text, dump_json, worker_count

SCHEMA_VERSION = 1
MODES = ("pretrain", "verify", "downstream", "baseline", "sweep", "validate")

SWEEP_COLUMNS = (
    "schema_version", "r", "d", "m", "T", "n_per_task", "seed",
    "thm1_ratio", "prop1_parallel_residual", "prop1_perp_norm", "config_hash",
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str
    out_dir: str = "out"
    seed: int = 0
    # pretraining geometry
    d: int = 32
    r: int = 2
    m: int = 64
    T: int = 1024
    n_per_task: int = 512
    eta: float = 1.0
    lambda_a: float = None
    lambda_w: float = None
    nu_w: float = None
    nu_a: float = None
    # downstream
    m_hat: int = 512
    gamma: float = None
    gamma_hat: float = None
    lambda_hat: float = 1e-3
    n_train: int = 4096
    n_eval: int = 2048
    n_iters: int = 2000
    n_tables: int = 8
    # verify
    n_mc: int = 1_000_000
    n_probes: int = 3
    # sweep
    axis_T: tuple = ()
    axis_d: tuple = ()
    axis_m: tuple = ()
    seeds: tuple = (0,)

    def pretrain_config(self, **overrides):
        base = {
            "d": self.d, "r": self.r, "m": self.m, "T": self.T,
            "n_per_task": self.n_per_task, "seed": self.seed, "eta": self.eta,
            "lambda_a": self.lambda_a, "lambda_w": self.lambda_w,
            "nu_w": self.nu_w, "nu_a": self.nu_a,
        }
        base.update(overrides)
        return pretrain.PretrainConfig(**base)

    def to_dict(self):
        out = {}
        for name in self.__dataclass_fields__:
            value = getattr(self, name)
            out[name] = list(value) if isinstance(value, tuple) else value
        return out


def config_violations(obj):
    """Schema check on a raw config dict; returns a list of messages."""
    problems = []
    known = set(ExperimentConfig.__dataclass_fields__)
    for key in obj:
        if key not in known:
            problems.append(f"unknown field {key!r}")
    mode = obj.get("mode")
    if mode not in MODES:
        problems.append(f"mode must be one of {MODES}, got {mode!r}")

    def need_int(name, minimum=1):
        v = obj.get(name)
        if v is None:
            return None
        if not isinstance(v, int) or isinstance(v, bool) or v < minimum:
            problems.append(f"{name} must be an integer >= {minimum}, got {v!r}")
        return v

    def need_pos(name):
        v = obj.get(name)
        if v is None:
            return None
        if not isinstance(v, (int, float)) or v <= 0:
            problems.append(f"{name} must be > 0, got {v!r}")
        return v

    d = need_int("d")
    r = need_int("r")
    m = need_int("m", 2)
    for name in ("T", "n_per_task", "m_hat", "n_train", "n_eval", "n_iters",
                 "n_probes", "n_tables"):
        need_int(name)
    need_int("n_mc", 10_000)
    for name in ("eta", "lambda_hat", "gamma", "gamma_hat"):
        need_pos(name)
    if isinstance(m, int) and m % 2 != 0:
        problems.append("m must be even")
    if isinstance(d, int) and isinstance(r, int) and d < r:
        problems.append(f"d must be >= r, got d={d}, r={r}")
    for name in ("axis_T", "axis_d", "axis_m", "seeds"):
        v = obj.get(name)
        if v is not None and (not isinstance(v, (list, tuple))
                              or any(not isinstance(e, int) for e in v)):
            problems.append(f"{name} must be a list of integers")
    if mode == "sweep":
        axes = [obj.get(k) for k in ("axis_T", "axis_d", "axis_m")]
        if all(not a for a in axes):
            problems.append("sweep mode needs at least one nonempty axis")
        if not obj.get("seeds"):
            problems.append("sweep mode needs a nonempty seeds list")
    return problems


def load_config_file(path):
    """Parse a TOML or JSON config into a raw dict; parse errors carry position."""
    with open(path, "rb") as fh:
        raw = fh.read()
    text = raw.decode("utf-8")
    if path.endswith(".json"):
        try:
            return json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(
                f"{path}: JSON parse error at line {exc.lineno}, "
                f"column {exc.colno}: {exc.msg}") from exc
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: TOML parse error: {exc}") from exc


def build_config(file_obj, flag_obj):
    """Merge precedence: dataclass defaults < config file < explicit flags."""
    merged = dict(file_obj)
    merged.update({k: v for k, v in flag_obj.items() if v is not None})
    problems = config_violations(merged)
    if problems:
        raise ConfigError("; ".join(problems))
    for name in ("axis_T", "axis_d", "axis_m", "seeds"):
        if name in merged:
            merged[name] = tuple(merged[name])
    return ExperimentConfig(**merged)


def validate_config(path):
    """Full schema check of a config file; returns a list of violations (empty = ok)."""
    try:
        obj = load_config_file(path)
    except FileNotFoundError:
        return [f"{path}: file not found"]
    except ConfigError as exc:
        return [str(exc)]
    return config_violations(obj)


def config_hash(config):
    blob = json.dumps(config.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def new_metrics_record(config, seed):
    return {
        "schema_version": SCHEMA_VERSION,
        "mode": config.mode,
        "config_hash": config_hash(config),
        "seed": seed,
        "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }


def validate_metrics(record):
    """Every emitted record must carry these keys with sane types."""
    problems = []
    for key, kind in (("schema_version", int), ("mode", str),
                      ("config_hash", str), ("seed", int),
                      ("timestamp", str), ("wall_time_s", float)):
        if key not in record:
            problems.append(f"missing {key}")
        elif not isinstance(record[key], kind):
            problems.append(f"{key} has type {type(record[key]).__name__}")
    for key, value in record.items():
        if not isinstance(value, (int, float, str, bool, list, dict, type(None))):
            problems.append(f"{key} is not JSON-serializable")
    return problems


def _finish(record, config, t0):
    record["wall_time_s"] = time.perf_counter() - t0
    problems = validate_metrics(record)
    if problems:
        raise RuntimeError(f"metrics record failed validation: {problems}")
    os.makedirs(config.out_dir, exist_ok=True)
    dump_json(record, os.path.join(config.out_dir, "metrics.json"))


def _run_pretrain(config):
    t0 = time.perf_counter()
    result = pretrain.pretrain(config.pretrain_config())
    cfg = result.config
    os.makedirs(config.out_dir, exist_ok=True)
    final = network.NetParams(result.Wplus, np.zeros(cfg.m), result.heads_plus,
                              cfg.d, cfg.r, cfg.m, cfg.T, cfg.nu_w, cfg.nu_a)
    init = network.NetParams(result.W0, np.zeros(cfg.m),
                             np.zeros((cfg.T, cfg.m)),
                             cfg.d, cfg.r, cfg.m, cfg.T, cfg.nu_w, cfg.nu_a)
    network.save_params(final, os.path.join(config.out_dir, "params.bin"))
    network.save_params(init, os.path.join(config.out_dir, "params_init.bin"))
    metrics = analysis.recovery_metrics(result.W0, result.Wplus, cfg.r,
                                        cfg.eta, cfg.nu_w)
    record = new_metrics_record(config, cfg.seed)
    record.update(metrics.to_dict())
    record["pretrain_wall_time_s"] = result.wall_time_s
    _finish(record, config, t0)


def _run_verify(config):
    t0 = time.perf_counter()
    gen = as_generator(config.seed)
    probe_gen, block_gen, adj_gen, init_gen = gen.spawn(4)

    w = probe_gen.standard_normal(config.d)
    est = analysis.estimate_A_blocks(w, config.r, config.n_mc, block_gen)
    A_pp_t, A_pq_t, A_qq_t = analysis.a_block_closed_forms(w, config.r)
    adjud = analysis.adjudicate_a_parallel_perp(
        config.d, config.r, config.n_mc, config.n_probes, adj_gen)

    cfg = config.pretrain_config()
    params = network.symmetric_init(cfg.d, cfg.r, cfg.m, cfg.T, cfg.nu_w,
                                    cfg.nu_a, init_gen)
    sanity = analysis.init_sanity(params.W, cfg.nu_w, cfg.m, cfg.r)

    report = {
        "seed": config.seed,
        "n_mc": config.n_mc,
        "block_estimate": est.to_dict(),
        "block_errors_spectral": {
            "pp": float(np.linalg.svd(est.A_pp - A_pp_t, compute_uv=False)[0]),
            "pq": float(np.linalg.svd(est.A_pq - A_pq_t, compute_uv=False)[0]),
            "qq": float(np.linalg.svd(est.A_qq - A_qq_t, compute_uv=False)[0]),
        },
        "parallel_perp_adjudication": adjud,
        "init_sanity": sanity,
    }
    os.makedirs(config.out_dir, exist_ok=True)
    dump_json(report, os.path.join(config.out_dir, "ablocks.json"))

    record = new_metrics_record(config, config.seed)
    record["ablock_err_pp"] = report["block_errors_spectral"]["pp"]
    record["ablock_err_pq"] = report["block_errors_spectral"]["pq"]
    record["ablock_err_qq"] = report["block_errors_spectral"]["qq"]
    record["adjudication_winner"] = adjud["winner"]
    record["init_sanity_ok"] = sanity["ok"]
    _finish(record, config, t0)


def _downstream_tables(config, rng):
    universe_size = 1 << (1 << config.r)
    if universe_size <= 16:
        return list(tasks.enumerate_universe(config.r).tables)
    return list(tasks.sample_tasks(config.r, config.n_tables, rng).tables)


def _run_downstream(config):
    t0 = time.perf_counter()
    result = pretrain.pretrain(config.pretrain_config())
    cfg = result.config
    gamma, gamma_hat = config.gamma, config.gamma_hat
    if gamma is None or gamma_hat is None:
        g_def, gh_def = downstream.default_downstream_scales(cfg.r)
        gamma = g_def if gamma is None else gamma
        gamma_hat = gh_def if gamma_hat is None else gamma_hat
    ss = np.random.SeedSequence(config.seed)
    emb_ss, table_ss, data_ss = ss.spawn(3)
    learned, purified = downstream.build_embedding_pair(
        result.W0, result.Wplus, cfg.r, cfg.eta, cfg.nu_w,
        config.m_hat, gamma, gamma_hat, as_generator(emb_ss))

    data_gen = as_generator(data_ss)
    tables = _downstream_tables(config, as_generator(table_ss))
    rows = []
    for idx, table in enumerate(tables):
        V_train = tasks.sample_hypercube_inputs(cfg.d, config.n_train, data_gen)
        y_train = tasks.labels_for(table, V_train)
        head = downstream.fit_hinge_head(
            downstream.embed_batch(learned, V_train), y_train,
            config.lambda_hat, config.n_iters)
        eval_inputs = None
        if cfg.d > downstream.EXHAUSTIVE_D_MAX:
            eval_inputs = tasks.sample_hypercube_inputs(cfg.d, config.n_eval, data_gen)
        rows.append({
            "table": table.to_string(),
            "eval_loss": downstream.eval_loss(learned, head, table, eval_inputs),
            "eval_accuracy": downstream.eval_accuracy(learned, head, table, eval_inputs),
            "converged": head.convergence["converged"],
        })

    gap_inputs = tasks.sample_hypercube_inputs(cfg.d, 1024, data_gen)
    gap = downstream.embedding_gap(learned, purified, gap_inputs)

    os.makedirs(config.out_dir, exist_ok=True)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=("table", "eval_loss",
                                             "eval_accuracy", "converged"),
                            lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    atomic_write_text(os.path.join(config.out_dir, "downstream.csv"), buf.getvalue())
    downstream.save_stack(learned, os.path.join(config.out_dir, "stack_learned"))
    downstream.save_stack(purified, os.path.join(config.out_dir, "stack_purified"))

    record = new_metrics_record(config, config.seed)
    record["n_tables"] = len(rows)
    record["mean_eval_accuracy"] = float(np.mean([r["eval_accuracy"] for r in rows]))
    record["min_eval_accuracy"] = float(np.min([r["eval_accuracy"] for r in rows]))
    record["mean_eval_loss"] = float(np.mean([r["eval_loss"] for r in rows]))
    record["gap_median"] = gap.median
    record["gap_max"] = gap.max
    _finish(record, config, t0)


def _run_baseline(config):
    t0 = time.perf_counter()
    rec = baselines.separation_experiment(
        config.d, config.r, config.m_hat, config.n_train, config.n_eval,
        list(config.seeds), config.pretrain_config(),
        lambda_hat=config.lambda_hat, n_iters=config.n_iters,
        gamma=config.gamma, gamma_hat=config.gamma_hat)
    os.makedirs(config.out_dir, exist_ok=True)
    rec.to_csv(os.path.join(config.out_dir, "baseline.csv"))
    summary = dict(rec.summary)
    summary.pop("wall_time_s", None)
    dump_json(summary, os.path.join(config.out_dir, "baseline_summary.json"))

    record = new_metrics_record(config, config.seed)
    for name, val in rec.summary["median_worst_task_accuracy"].items():
        record[f"median_worst_task_accuracy_{name}"] = val
    _finish(record, config, t0)


def _sweep_point(config, T, d, m, seed):
    cfg = config.pretrain_config(T=T, d=d, m=m, seed=seed)
    result = pretrain.pretrain(cfg)
    metrics = analysis.recovery_metrics(result.W0, result.Wplus, cfg.r,
                                        cfg.eta, cfg.nu_w)
    return {
        "schema_version": SCHEMA_VERSION,
        "r": cfg.r, "d": d, "m": m, "T": T,
        "n_per_task": cfg.n_per_task, "seed": seed,
        "thm1_ratio": metrics.thm1_ratio,
        "prop1_parallel_residual": metrics.prop1_parallel_residual,
        "prop1_perp_norm": metrics.prop1_perp_norm,
        "config_hash": config_hash(config),
    }


def _run_sweep(config):
    t0 = time.perf_counter()
    axis_T = config.axis_T or (config.T,)
    axis_d = config.axis_d or (config.d,)
    axis_m = config.axis_m or (config.m,)
    points = [(T, d, m, seed)
              for T in axis_T for d in axis_d for m in axis_m
              for seed in config.seeds]
    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        rows = list(pool.map(lambda p: _sweep_point(config, *p), points))

    os.makedirs(config.out_dir, exist_ok=True)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    atomic_write_text(os.path.join(config.out_dir, "sweep.csv"), buf.getvalue())

    record = new_metrics_record(config, config.seed)
    record["n_rows"] = len(rows)
    record["median_thm1_ratio"] = float(np.median([r["thm1_ratio"] for r in rows]))
    _finish(record, config, t0)


def run(config):
    """Execute the requested pipeline; returns a process exit code."""
    dispatch = {
        "pretrain": _run_pretrain,
        "verify": _run_verify,
        "downstream": _run_downstream,
        "baseline": _run_baseline,
        "sweep": _run_sweep,
    }
    if config.mode == "validate":
        return EXIT_OK
    try:
        dispatch[config.mode](config)
    except (OSError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def _add_common_flags(sub):
    sub.add_argument("--config", help="TOML or JSON config file")
    sub.add_argument("--out", dest="out_dir", help="output directory")
    sub.add_argument("--seed", type=int)
    for name in ("r", "d", "m", "T", "n-per-task", "m-hat", "n-train",
                 "n-eval", "n-iters", "n-mc", "n-probes", "n-tables"):
        sub.add_argument(f"--{name}", dest=name.replace("-", "_"), type=int)
    for name in ("eta", "lambda-hat", "gamma", "gamma-hat"):
        sub.add_argument(f"--{name}", dest=name.replace("-", "_"), type=float)
    sub.add_argument("--seeds", help="comma-separated seed list")
    sub.add_argument("--axis", action="append", default=None,
                     metavar="NAME=V1,V2,...",
                     help="sweep axis, e.g. T=256,1024,4096 (repeatable)")


def _flags_to_dict(args):
    flags = {}
    for name in ExperimentConfig.__dataclass_fields__:
        if hasattr(args, name) and getattr(args, name) is not None:
            flags[name] = getattr(args, name)
    if getattr(args, "seeds", None):
        flags["seeds"] = [int(s) for s in args.seeds.split(",")]
    for spec in getattr(args, "axis", None) or ():
        name, _, values = spec.partition("=")
        if name not in ("T", "d", "m") or not values:
            raise ConfigError(f"bad axis spec {spec!r}; expected T=.., d=.. or m=..")
        flags[f"axis_{name}"] = [int(v) for v in values.split(",")]
    return flags


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="mtfl",
        description="multi-task feature-learning laboratory")
    subs = parser.add_subparsers(dest="mode", required=True)
    for mode in MODES:
        _add_common_flags(subs.add_parser(mode))
    args = parser.parse_args(argv)

    try:
        file_obj = {}
        if args.config:
            file_obj = load_config_file(args.config)
        if args.mode == "validate":
            if not args.config:
                raise ConfigError("validate mode needs --config")
            problems = validate_config(args.config)
            if problems:
                for p in problems:
                    print(f"violation: {p}", file=sys.stderr)
                return EXIT_CONFIG
            print("ok")
            return EXIT_OK
        flags = _flags_to_dict(args)
        flags["mode"] = args.mode
        config = build_config(file_obj, flags)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return run(config)


if __name__ == "__main__":
    sys.exit(main())
