"""Benchmark harness: seeded trial sweeps over sizes, strategies, clusters.

A sweep is the cross product of (size setting) x (strategy) x (cluster
count) x (trial index).  Scenarios depend only on the size setting and the
trial seed, so every strategy and cluster count sees identical problems.
Results are written as one record per trial plus per-combination aggregates;
re-running against an existing output file skips completed trials.
"""
from __future__ import annotations

import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .engine import EngineConfig, run_transition
from .errors import GenerationError, SchemaError
from .scenario import (
    Scenario,
    box_from_density,
    compute_metrics,
    generate_random_scenario,
    sim_algo,
    sim_phys,
)

METRICS_FORMAT = 1
WORKERS_ENV = "SWARMPLAN_WORKERS"


@dataclass(frozen=True)
class SizeSetting:
    """Either a fixed box or a fixed agent density for a given swarm size."""

    n_agents: int
    density: float | None = None
    box: tuple | None = None

    def label(self) -> str:
        if self.density is not None:
            return f"n{self.n_agents}-d{self.density:g}"
        return f"n{self.n_agents}-box"


@dataclass(frozen=True)
class BenchPlan:
    """Full specification of one benchmark sweep."""

    trials: int
    sizes: tuple[SizeSetting, ...]
    strategies: tuple[str, ...] = ("soft_on_demand",)
    clusters: tuple[int, ...] = (1,)
    seed_base: int = 0
    phys_template: object = None
    algo_template: object = None
    scale_to_limits: bool = False


def trial_key(size: SizeSetting, strategy: str, clusters: int, trial: int) -> str:
    return f"{size.label()}|{strategy}|c{clusters}|t{trial}"


def _make_scenario(size: SizeSetting, seed: int, plan: BenchPlan) -> Scenario:
    kwargs = {}
    if plan.phys_template is not None:
        kwargs["phys"] = plan.phys_template
    if plan.algo_template is not None:
        kwargs["algo"] = plan.algo_template
    if size.density is not None:
        return generate_random_scenario(size.n_agents, density=size.density, seed=seed, **kwargs)
    return generate_random_scenario(size.n_agents, box=size.box, seed=seed, **kwargs)


def run_single_trial(size: SizeSetting, strategy: str, clusters: int, trial: int,
                     plan: BenchPlan) -> dict:
    """One seeded trial; generation failures become failed records, not crashes."""
    seed = plan.seed_base + trial
    record = {
        "key": trial_key(size, strategy, clusters, trial),
        "n_agents": size.n_agents,
        "density": size.density,
        "strategy": strategy,
        "clusters": clusters,
        "trial": trial,
        "seed": seed,
    }
    try:
        scenario = _make_scenario(size, seed, plan)
    except GenerationError as exc:
        record.update(success=False, failure_reason="generation_error", error=str(exc))
        return record
    config = EngineConfig(
        strategy=strategy,
        mode="sequential" if clusters == 1 else "clustered",
        clusters=clusters,
        rng_seed=seed,
        scale_to_limits=plan.scale_to_limits,
    )
    result = run_transition(scenario, config)
    metrics = compute_metrics(result, scenario)
    record.update(metrics.to_dict())
    record["kkt_max"] = float(max(
        (d.kkt_max.max() for d in result.diagnostics), default=0.0))
    record["fallbacks"] = int(sum(d.fallbacks.sum() for d in result.diagnostics))
    return record


def _aggregate(records: list[dict]) -> list[dict]:
    groups: dict[tuple, list[dict]] = {}
    for rec in records:
        groups.setdefault(
            (rec["n_agents"], rec.get("density"), rec["strategy"], rec["clusters"]), []
        ).append(rec)
    out = []
    for (n, density, strategy, clusters), recs in sorted(
            groups.items(), key=lambda kv: (kv[0][0], str(kv[0][1]), kv[0][2], kv[0][3])):
        walls = [r["wall_time_s"] for r in recs if r.get("wall_time_s") is not None]
        ratios = [r["distance_ratio"] for r in recs
                  if r.get("success") and r.get("distance_ratio") is not None]
        out.append({
            "n_agents": n,
            "density": density,
            "strategy": strategy,
            "clusters": clusters,
            "n_trials": len(recs),
            "success_rate": float(np.mean([bool(r.get("success")) for r in recs])),
            "wall_time_mean_s": float(np.mean(walls)) if walls else None,
            "wall_time_std_s": float(np.std(walls)) if walls else None,
            "distance_ratio_mean": float(np.mean(ratios)) if ratios else None,
        })
    return out


def load_report(path) -> dict:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}:{exc.lineno}: {exc.msg}") from exc
    if data.get("format") != METRICS_FORMAT:
        raise SchemaError(f"{path}: unsupported metrics format {data.get('format')!r}")
    return data


def default_workers() -> int:
    env = os.environ.get(WORKERS_ENV)
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def run_benchmark(plan: BenchPlan, out_path=None, workers: int | None = None,
                  progress=None) -> dict:
    """Execute the sweep, resuming from `out_path` when it already exists.

    Trials run across a process pool unless any combination uses clustered
    engines (which own their pools), in which case trials run serially.
    Individual trial failures are recorded, never raised.
    """
    existing: dict[str, dict] = {}
    if out_path is not None and os.path.exists(out_path):
        for rec in load_report(out_path).get("trials", []):
            existing[rec["key"]] = rec

    todo = []
    for size in plan.sizes:
        for strategy in plan.strategies:
            for clusters in plan.clusters:
                for trial in range(plan.trials):
                    if trial_key(size, strategy, clusters, trial) not in existing:
                        todo.append((size, strategy, clusters, trial))

    records = list(existing.values())
    workers = workers if workers is not None else default_workers()
    parallel_trials = workers > 1 and all(c == 1 for c in plan.clusters) and len(todo) > 1
    t0 = time.perf_counter()
    if parallel_trials:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(run_single_trial, *args, plan) for args in todo]
            for done, fut in enumerate(futures, 1):
                records.append(fut.result())
                if progress:
                    progress(done, len(todo))
    else:
        for done, args in enumerate(todo, 1):
            records.append(run_single_trial(*args, plan))
            if progress:
                progress(done, len(todo))

    records.sort(key=lambda r: r["key"])
    report = {
        "format": METRICS_FORMAT,
        "elapsed_s": time.perf_counter() - t0,
        "trials": records,
        "aggregates": _aggregate(records),
    }
    if out_path is not None:
        with open(out_path, "w") as fh:
            json.dump(report, fh, indent=2)
            fh.write("\n")
    return report
