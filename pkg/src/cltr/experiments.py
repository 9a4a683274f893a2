"""Experiment orchestration behind the CLI subcommands.

Every function here writes its outputs under ``config.out`` and returns the
in-memory report. Output files depend only on the config, so reruns are
byte-identical.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from . import toy
from .dataset import Dataset, generate_synthetic_ltr, load_dataset, standardize_features
from .optimization import (
    DEFAULT_GRID,
    AllDivergentError,
    Method,
    Optimizer,
    TrainConfig,
    TrainResult,
    grid_search_eta,
    regret,
    train,
    train_supervised,
)
from .ranking import EvalSet, LinearModel
from .simulation import (
    BiasConfig,
    ClickLog,
    inverse_propensity_histogram,
    log_stats,
    simulate_clicks,
    train_logging_policy,
    write_log,
)

log = logging.getLogger(__name__)

SPLITS = ("validation", "test")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    data: dict = field(default_factory=lambda: {
        "synthetic": {"n_queries": 200, "docs_per_query": 50, "dim": 20, "seed": 0}
    })
    standardize: bool = False
    logging_policy: dict = field(default_factory=lambda: {"fraction": 0.001, "seed": 0, "T": 100_000})
    gold: dict = field(default_factory=lambda: {"T": 100_000, "seed": 0})
    gammas: list = field(default_factory=lambda: [1.0])
    n_clicks: int = 1_000_000
    noise_click_prob: float = 0.1
    methods: list = field(default_factory=lambda: ["CounterSample", "IpsSgd", "Biased"])
    optimizers: list = field(default_factory=lambda: ["sgd"])
    batch_sizes: list = field(default_factory=lambda: [1])
    T: int = 50_000
    eval_every: int | None = None
    eta: Any = "grid"
    grid: list | None = None
    apply_mbar_scaling: bool = True
    seeds: list = field(default_factory=lambda: [0])
    workers: int = 1
    out: str = "runs/default"
    toy: dict = field(default_factory=lambda: {
        "etas": list(toy.DEFAULT_ETAS), "seeds": list(range(10)), "T": 50, "problem_seed": 0
    })

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls()
        for key, value in raw.items():
            default = getattr(cfg, key)
            if isinstance(default, dict) and isinstance(value, dict) and key != "data":
                value = {**default, **value}
            setattr(cfg, key, value)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(raw)

    def validate(self) -> None:
        if not self.methods:
            raise ConfigError("at least one method is required")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if not self.gammas:
            raise ConfigError("at least one gamma is required")
        try:
            self.methods = [Method.parse(m).value for m in self.methods]
            self.optimizers = [Optimizer.parse(o).value for o in self.optimizers]
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if any(int(b) < 1 for b in self.batch_sizes):
            raise ConfigError("batch sizes must be >= 1")
        if any(float(g) < 0 for g in self.gammas):
            raise ConfigError("gammas must be >= 0")
        if int(self.T) < 1:
            raise ConfigError("T must be >= 1")
        if self.eta != "grid" and not (isinstance(self.eta, (int, float)) and self.eta > 0):
            raise ConfigError("eta must be a positive number or 'grid'")
        if set(self.data) == {"synthetic"}:
            pass
        elif set(self.data) == {"svmlight"}:
            paths = self.data["svmlight"]
            for split in ("train", "validation", "test"):
                if split not in paths:
                    raise ConfigError(f"svmlight data needs a {split!r} path")
                if not Path(paths[split]).exists():
                    raise ConfigError(f"data file not found: {paths[split]}")
        else:
            raise ConfigError("data must have exactly one of 'synthetic' or 'svmlight'")

    @property
    def eta_grid(self) -> list[float]:
        return [float(e) for e in (self.grid if self.grid is not None else DEFAULT_GRID)]

    def to_dict(self) -> dict:
        return asdict(self)


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")


def _fmt(x: float) -> str:
    return repr(float(x))


def load_data(cfg: ExperimentConfig) -> Dataset:
    if "synthetic" in cfg.data:
        p = cfg.data["synthetic"]
        ds = generate_synthetic_ltr(int(p["n_queries"]), int(p["docs_per_query"]), int(p["dim"]), int(p["seed"]))
    else:
        p = cfg.data["svmlight"]
        ds = load_dataset(p["train"], p["validation"], p["test"], dim=p.get("dim"))
    return standardize_features(ds, cfg.standardize)


def logging_policy(cfg: ExperimentConfig, ds: Dataset) -> LinearModel:
    p = cfg.logging_policy
    return train_logging_policy(ds, fraction=float(p["fraction"]), seed=int(p["seed"]), T=int(p["T"]))


def gold_model(cfg: ExperimentConfig, ds: Dataset) -> LinearModel:
    return train_supervised(ds.train, T=int(cfg.gold["T"]), seed=int(cfg.gold["seed"]))


def bias_config(cfg: ExperimentConfig, gamma: float) -> BiasConfig:
    return BiasConfig(gamma=float(gamma), noise_click_prob=float(cfg.noise_click_prob), n_clicks=int(cfg.n_clicks))


def _log_name(gamma: float, seed: int) -> str:
    return f"gamma{float(gamma)!r}_seed{int(seed)}.jsonl"


def _ndcgs(model: LinearModel, evalsets: dict[str, EvalSet]) -> dict[str, float]:
    return {name: ev.ndcg(model.weights) for name, ev in evalsets.items()}


def _parallel_map(fn, items, workers: int):
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _simulate_all(cfg, ds, policy) -> dict[tuple[float, int], ClickLog]:
    cells = [(float(g), int(s)) for g in cfg.gammas for s in cfg.seeds]
    logs = _parallel_map(lambda c: simulate_clicks(ds, policy, bias_config(cfg, c[0]), seed=c[1]), cells, cfg.workers)
    return dict(zip(cells, logs))


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(cfg: ExperimentConfig) -> dict:
    out = Path(cfg.out)
    (out / "logs").mkdir(parents=True, exist_ok=True)
    _dump_json(cfg.to_dict(), out / "config.json")
    ds = load_data(cfg)
    policy = logging_policy(cfg, ds)
    evalsets = {name: EvalSet(ds.split(name)) for name in SPLITS}
    rows = []
    for (gamma, seed), click_log in _simulate_all(cfg, ds, policy).items():
        write_log(click_log, out / "logs" / _log_name(gamma, seed))
        M, M_bar = log_stats(click_log)
        rows.append({"gamma": gamma, "seed": seed, "n": len(click_log), "M": M, "M_bar": M_bar, "ratio": M / M_bar})
    report = {
        "policy": policy.fingerprint(),
        "policy_ndcg": _ndcgs(policy, evalsets),
        "rows": rows,
    }
    _dump_json(report, out / "stats.json")
    return report


# ---------------------------------------------------------------------------
# train


def _cell_key(method, optimizer, batch, gamma, seed) -> str:
    return f"{method}_{optimizer}_b{batch}_g{float(gamma)!r}_s{seed}"


def curve_csv(result: TrainResult) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["t", "ndcg_valid", "ndcg_test"])
    for k, (t, _) in enumerate(result.checkpoints):
        writer.writerow([t, _fmt(result.curves["validation"][k]), _fmt(result.curves["test"][k])])
    return buf.getvalue()


def read_curve(path: str | Path) -> dict[str, list]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return {
        "t": [int(r["t"]) for r in rows],
        "validation": [float(r["ndcg_valid"]) for r in rows],
        "test": [float(r["ndcg_test"]) for r in rows],
    }


def _run_cell(cfg, ds, logs, gold_ndcg, evalsets, cell):
    method, optimizer, batch, gamma, seed = cell
    base = TrainConfig(
        method=method, optimizer=optimizer, batch_size=int(batch), T=int(cfg.T), seed=int(seed),
        eval_every=cfg.eval_every, apply_mbar_scaling=bool(cfg.apply_mbar_scaling),
        eta=float(cfg.eta) if cfg.eta != "grid" else 1.0,
    )
    click_log = logs[(float(gamma), int(seed))]
    try:
        if cfg.eta == "grid":
            found = grid_search_eta(click_log, ds, base, gold_ndcg["validation"], grid=cfg.eta_grid, evalsets=evalsets)
            return found.best, None
        return train(click_log, ds, base, gold_ndcg=gold_ndcg["validation"], evalsets=evalsets), None
    except (AllDivergentError, ValueError, RuntimeError) as exc:
        return None, f"{type(exc).__name__}: {exc}"


def _split_regrets(result: TrainResult, gold: dict[str, float]) -> dict[str, float]:
    if result.divergent:
        return {name: gold[name] for name in SPLITS}
    return {
        name: regret(list(zip([t for t, _ in result.checkpoints], result.curves[name])), gold[name])
        for name in SPLITS
    }


def cmd_train(cfg: ExperimentConfig) -> dict:
    out = Path(cfg.out)
    (out / "curves").mkdir(parents=True, exist_ok=True)
    _dump_json(cfg.to_dict(), out / "config.json")
    ds = load_data(cfg)
    evalsets = {name: EvalSet(ds.split(name)) for name in SPLITS}
    policy = logging_policy(cfg, ds)
    gold = gold_model(cfg, ds)
    gold_ndcg = _ndcgs(gold, evalsets)
    logs = _simulate_all(cfg, ds, policy)

    cells = [
        (m, o, int(b), float(g), int(s))
        for g in cfg.gammas for b in cfg.batch_sizes for m in cfg.methods
        for o in cfg.optimizers for s in cfg.seeds
    ]
    outcomes = _parallel_map(lambda c: _run_cell(cfg, ds, logs, gold_ndcg, evalsets, c), cells, cfg.workers)

    rows = []
    for cell, (result, error) in zip(cells, outcomes):
        method, optimizer, batch, gamma, seed = cell
        key = _cell_key(*cell)
        row = {"method": method, "optimizer": optimizer, "batch_size": batch, "gamma": gamma, "seed": seed}
        if error is not None:
            log.error("cell %s failed: %s", key, error)
            rows.append({**row, "status": "failed", "error": error})
            continue
        curve_path = Path("curves") / f"{key}.csv"
        (out / curve_path).write_text(curve_csv(result), encoding="utf-8")
        regrets = _split_regrets(result, gold_ndcg)
        rows.append({
            **row,
            "status": "divergent" if result.divergent else "ok",
            "eta": result.config.eta,
            "diverged_at": result.diverged_at,
            "regret_valid_x100": 100 * regrets["validation"],
            "regret_test_x100": 100 * regrets["test"],
            "final_ndcg_valid": result.curves["validation"][-1] if result.checkpoints else None,
            "final_ndcg_test": result.curves["test"][-1] if result.checkpoints else None,
            "curve": curve_path.as_posix(),
        })

    summary = {
        "gold_ndcg": gold_ndcg,
        "logging_policy_ndcg": _ndcgs(policy, evalsets),
        "cells": rows,
        "tables": _regret_tables(cfg, rows),
    }
    _dump_json(summary, out / "summary.json")
    return summary


def _regret_tables(cfg: ExperimentConfig, rows: list[dict]) -> list[dict]:
    """Mean regret x100 over seeds; rows = methods, columns = optimizers."""
    tables = []
    for gamma in [float(g) for g in cfg.gammas]:
        for batch in [int(b) for b in cfg.batch_sizes]:
            table = {"gamma": gamma, "batch_size": batch, "test": {}, "validation": {}}
            for split, col in (("test", "regret_test_x100"), ("validation", "regret_valid_x100")):
                for method in cfg.methods:
                    table[split][method] = {}
                    for opt in cfg.optimizers:
                        vals = [
                            r[col] for r in rows
                            if r["method"] == method and r["optimizer"] == opt
                            and r["gamma"] == gamma and r["batch_size"] == batch and col in r
                        ]
                        table[split][method][opt] = float(np.mean(vals)) if vals else None
            tables.append(table)
    return tables


def format_tables(summary: dict) -> str:
    lines = []
    for table in summary["tables"]:
        opts = list(next(iter(table["test"].values())).keys())
        lines.append(f"Average regret (x100, test)  gamma={table['gamma']}  batch={table['batch_size']}")
        lines.append("  " + "".join(f"{h:>16}" for h in ["method"] + opts))
        for method, cols in table["test"].items():
            vals = ["-" if cols[o] is None else f"{cols[o]:.3f}" for o in opts]
            lines.append("  " + "".join(f"{h:>16}" for h in [method] + vals))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# grid


def cmd_grid(cfg: ExperimentConfig) -> dict:
    """Per (method, optimizer, batch, gamma, seed): regret of every eta and the chosen one."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _dump_json(cfg.to_dict(), out / "config.json")
    ds = load_data(cfg)
    evalsets = {"validation": EvalSet(ds.validation)}
    policy = logging_policy(cfg, ds)
    gold = gold_model(cfg, ds)
    gold_valid = evalsets["validation"].ndcg(gold.weights)
    logs = _simulate_all(cfg, ds, policy)
    cells = [
        (m, o, int(b), float(g), int(s))
        for g in cfg.gammas for b in cfg.batch_sizes for m in cfg.methods
        for o in cfg.optimizers for s in cfg.seeds
    ]

    def run(cell):
        method, optimizer, batch, gamma, seed = cell
        base = TrainConfig(
            method=method, optimizer=optimizer, batch_size=batch, T=int(cfg.T), seed=seed,
            eval_every=cfg.eval_every, apply_mbar_scaling=bool(cfg.apply_mbar_scaling),
        )
        try:
            return grid_search_eta(logs[(gamma, seed)], ds, base, gold_valid, grid=cfg.eta_grid, evalsets=evalsets)
        except AllDivergentError as exc:
            return exc

    results = _parallel_map(run, cells, cfg.workers)
    reports = []
    all_divergent = []
    for cell, found in zip(cells, results):
        method, optimizer, batch, gamma, seed = cell
        row = {"method": method, "optimizer": optimizer, "batch_size": batch, "gamma": gamma, "seed": seed}
        if isinstance(found, AllDivergentError):
            all_divergent.append(_cell_key(*cell))
            etas = [{"eta": e, "regret": gold_valid, "divergent": True} for e in sorted(cfg.eta_grid)]
            reports.append({**row, "selected_eta": None, "selected_regret": None, "etas": etas})
            continue
        reports.append({
            **row,
            "selected_eta": found.best_eta,
            "selected_regret": found.best.regret,
            "etas": [{"eta": e, "regret": r, "divergent": d} for e, r, d in found.regrets],
        })
    report = {"gold_ndcg_validation": gold_valid, "all_divergent": all_divergent, "cells": reports}
    _dump_json(report, out / "grid.json")
    if all_divergent:
        raise AllDivergentError(f"all learning rates diverged for: {', '.join(all_divergent)}")
    return report


# ---------------------------------------------------------------------------
# toy


def cmd_toy(cfg: ExperimentConfig) -> dict:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    p = cfg.toy
    # problem_seed None: every seed draws its own problem as well as its samples
    problem_seed = p.get("problem_seed", 0)
    problem = None if problem_seed is None else toy.generate_toy(int(problem_seed))
    trajectories = toy.run_toy_comparison(
        problem, etas=[float(e) for e in p["etas"]], T=int(p["T"]), seeds=[int(s) for s in p["seeds"]]
    )
    (out / "trajectories.csv").write_text(toy.trajectories_csv(trajectories), encoding="utf-8")
    summary = {
        "problem_seed": problem_seed,
        "w_star": toy.W_STAR.tolist(),
        "M": None if problem is None else float(np.max(1.0 / problem.propensities)),
        "M_bar": None if problem is None else problem.m_bar,
        "largest_stable_eta": toy.largest_stable_eta(trajectories),
        "rows": toy.summarize(trajectories),
    }
    _dump_json(summary, out / "toy_summary.json")
    return summary


# ---------------------------------------------------------------------------
# stats


def log_report(click_log: ClickLog) -> dict:
    M, M_bar = log_stats(click_log)
    hist = inverse_propensity_histogram(click_log)
    return {
        "n": len(click_log),
        "gamma": click_log.gamma,
        "seed": click_log.seed,
        "policy": click_log.policy,
        "M": M,
        "M_bar": M_bar,
        "ratio": M / M_bar,
        "histogram": [{"bucket_low": 2.0**k, "bucket_high": 2.0 ** (k + 1), "count": c} for k, c in hist.items()],
    }


def format_log_report(report: dict) -> str:
    lines = [
        f"clicks={report['n']} gamma={report['gamma']} seed={report['seed']}",
        f"M={report['M']:.6g} M_bar={report['M_bar']:.6g} ratio={report['ratio']:.6g}",
        "1/p histogram:",
    ]
    for row in report["histogram"]:
        lines.append(f"  [{row['bucket_low']:g}, {row['bucket_high']:g}): {row['count']}")
    return "\n".join(lines)
