"""Command-line front end: scenario generation, solving, sweeping, checking.

Exit codes: 0 success; 1 I/O error; 2 malformed input or generation failure;
3 planner or safety-check failure (outputs still written); 64 usage error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from .engine import STRATEGIES, EngineConfig, run_transition
from .errors import ConfigError, GenerationError, SchemaError, SwarmPlanError
from .postprocess import check_collisions
from .scenario import (
    apply_param_overrides,
    compute_metrics,
    dense_algo,
    generate_random_scenario,
    load_scenario,
    read_trajectory_csv,
    save_scenario,
    sim_algo,
    sim_phys,
    lab_algo,
    lab_phys,
    write_trajectory_csv,
)

EX_OK = 0
EX_IOERR = 1
EX_BADINPUT = 2
EX_PLANFAIL = 3
EX_USAGE = 64

_PRESET_BUILDERS = {
    "sim": (sim_phys, sim_algo),
    "dense": (sim_phys, dense_algo),
    "lab": (lab_phys, lab_algo),
}


class _Parser(argparse.ArgumentParser):
    """argparse with sysexits-style usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EX_USAGE)


def _strategy_name(flag: str) -> str:
    name = flag.replace("-", "_")
    if name not in STRATEGIES:
        raise SchemaError(f"unknown strategy {flag!r}")
    return name


def _parse_vec(text: str, name: str) -> tuple[float, ...]:
    try:
        parts = tuple(float(x) for x in text.split(","))
    except ValueError as exc:
        raise SchemaError(f"{name} must be comma-separated numbers: {text!r}") from exc
    if len(parts) != 3:
        raise SchemaError(f"{name} must have 3 components, got {len(parts)}")
    return parts


def _load_config_overrides(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    except OSError as exc:
        raise SchemaError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise SchemaError(f"{path}: config must be a JSON object")
    return data


def _preset_params(preset: str, box_min, box_max, overrides: dict):
    phys_fn, algo_fn = _PRESET_BUILDERS[preset]
    phys = phys_fn(box_min, box_max)
    algo = algo_fn()
    return apply_param_overrides(phys, algo, overrides)


def cmd_gen(args) -> int:
    if args.out is None:
        print("gen: an output path (-o/--out) is required", file=sys.stderr)
        return EX_USAGE
    if (args.density is None) == (args.box is None):
        print("gen: specify exactly one of --density or --box", file=sys.stderr)
        return EX_USAGE
    overrides = _load_config_overrides(args.config)
    if args.box is not None:
        dims = _parse_vec(args.box, "--box")
        box_min, box_max = np.zeros(3), np.asarray(dims, dtype=float)
    else:
        from .scenario import box_from_density
        box_min, box_max = box_from_density(args.n, args.density)
    phys, algo = _preset_params(args.preset, box_min, box_max, overrides)
    if args.r_min is not None:
        from dataclasses import replace
        phys = replace(phys, r_min=args.r_min)
    scenario = generate_random_scenario(
        args.n,
        box=(box_min, box_max),
        seed=args.seed,
        phys=phys,
        algo=algo,
        scenario_id=args.id or f"random-n{args.n}-s{args.seed}",
    )
    save_scenario(scenario, args.out)
    print(f"wrote {args.out}: {scenario.n_agents} agents in "
          f"{np.array2string(scenario.phys.p_max - scenario.phys.p_min, precision=3)} m box")
    return EX_OK


def cmd_solve(args) -> int:
    scenario = load_scenario(args.scenario)
    overrides = _load_config_overrides(args.config)
    if overrides:
        from dataclasses import replace
        phys, algo = apply_param_overrides(scenario.phys, scenario.algo, overrides)
        scenario = replace(scenario, phys=phys, algo=algo)
    config = EngineConfig(
        strategy=_strategy_name(args.strategy),
        mode="sequential" if args.clusters == 1 else "clustered",
        clusters=args.clusters,
        rng_seed=args.seed,
        scale_to_limits=args.scale,
    )
    result = run_transition(scenario, config)
    metrics = compute_metrics(result, scenario)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(args.scenario).stem
    csv_path = out_dir / f"{stem}_trajectory.csv"
    metrics_path = out_dir / f"{stem}_metrics.json"
    interp = result.interpolated
    write_trajectory_csv(csv_path, interp.t, interp.p, interp.v, interp.a)
    record = metrics.to_dict()
    record.update(
        scenario_id=scenario.id,
        strategy=config.strategy,
        clusters=config.clusters,
        n_steps=result.n_steps,
        gamma=result.gamma,
    )
    with open(metrics_path, "w") as fh:
        json.dump(record, fh, indent=2)
        fh.write("\n")

    status = "success" if result.success else f"FAILED ({result.failure_reason})"
    print(f"{scenario.id}: {status}; wrote {csv_path} and {metrics_path}")
    if not result.success:
        return EX_PLANFAIL
    return EX_OK


def cmd_bench(args) -> int:
    sizes = []
    n_list = [int(x) for x in args.n_sweep.split(",")] if args.n_sweep else [args.n]
    for n in n_list:
        if args.volume is not None:
            side = args.volume ** (1.0 / 3.0)
            sizes.append(bench_mod.SizeSetting(n_agents=n, box=((0, 0, 0), (side, side, side))))
        else:
            sizes.append(bench_mod.SizeSetting(n_agents=n, density=args.density))
    overrides = _load_config_overrides(args.config)
    phys_template = None
    algo_template = None
    if overrides or args.preset != "sim":
        # Templates carry everything except the box, which generation owns.
        phys, algo = _preset_params(args.preset, (0, 0, 0), (1, 1, 1), overrides)
        phys_template, algo_template = phys, algo
    plan = bench_mod.BenchPlan(
        trials=args.trials,
        sizes=tuple(sizes),
        strategies=tuple(_strategy_name(s) for s in args.strategies.split(",")),
        clusters=tuple(int(c) for c in args.clusters.split(",")),
        seed_base=args.seed_base,
        phys_template=phys_template,
        algo_template=algo_template,
        scale_to_limits=args.scale,
    )

    def progress(done, total):
        if args.verbose:
            print(f"\r{done}/{total} trials", end="", file=sys.stderr, flush=True)

    report = bench_mod.run_benchmark(plan, out_path=args.out, workers=args.workers,
                                     progress=progress)
    if args.verbose:
        print(file=sys.stderr)
    for agg in report["aggregates"]:
        wall = agg["wall_time_mean_s"]
        print(f"n={agg['n_agents']} {agg['strategy']} c={agg['clusters']}: "
              f"success {agg['success_rate']:.0%} over {agg['n_trials']} trials, "
              f"wall {wall:.3f}s" if wall is not None else "no timing")
    if args.out:
        print(f"wrote {args.out}")
    return EX_OK


def cmd_check(args) -> int:
    scenario = load_scenario(args.scenario)
    t, p, v, a = read_trajectory_csv(args.trajectory)
    if p.shape[0] != scenario.n_agents:
        raise SchemaError(
            f"{args.trajectory}: {p.shape[0]} agents, scenario has {scenario.n_agents}"
        )
    report = check_collisions(p, t, scenario.phys, scenario.algo.eps_check)
    goal_errors = np.linalg.norm(p[:, -1, :] - scenario.goals, axis=1)
    goals_ok = bool(np.all(goal_errors <= scenario.algo.goal_tol))
    if report.passed and goals_ok:
        min_txt = "n/a" if not np.isfinite(report.min_distance) else f"{report.min_distance:.4f} m"
        print(f"PASS: min scaled distance {min_txt} "
              f"(threshold {report.threshold:.4f} m), max goal error {goal_errors.max():.4f} m")
        return EX_OK
    if not report.passed:
        i, j = report.violation_pair
        print(f"FAIL: agents {i} and {j} at t={report.violation_time:.3f}s: "
              f"scaled distance {report.violation_distance:.4f} < {report.threshold:.4f}")
    if not goals_ok:
        worst = int(np.argmax(goal_errors))
        print(f"FAIL: agent {worst} ends {goal_errors[worst]:.4f} m from its goal "
              f"(tolerance {scenario.algo.goal_tol} m)")
    return EX_PLANFAIL


def build_parser() -> _Parser:
    parser = _Parser(prog="swarmplan",
                     description="Multiagent point-to-point trajectory planning")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a random scenario file")
    gen.add_argument("--n", type=int, required=True, help="number of agents")
    gen.add_argument("--density", type=float, help="agents per cubic meter (cube workspace)")
    gen.add_argument("--box", help="workspace dimensions, e.g. 2,2,1 (origin-anchored)")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--r-min", type=float, default=None, help="override collision radius")
    gen.add_argument("--preset", choices=sorted(_PRESET_BUILDERS), default="sim")
    gen.add_argument("--config", help="JSON file overriding physics/algo fields")
    gen.add_argument("--id", help="scenario id")
    gen.add_argument("-o", "--out", help="output scenario path")

    solve = sub.add_parser("solve", help="plan one transition")
    solve.add_argument("scenario", help="scenario JSON path")
    solve.add_argument("--strategy", default="soft-on-demand",
                       choices=[s.replace("_", "-") for s in STRATEGIES])
    solve.add_argument("--clusters", type=int, default=1,
                       help="1 = sequential, >1 = parallel clusters")
    solve.add_argument("--seed", type=int, default=0, help="engine tie-break seed")
    solve.add_argument("--scale", action="store_true",
                       help="retime the solution to the acceleration limit")
    solve.add_argument("--config", help="JSON file overriding physics/algo fields")
    solve.add_argument("--out-dir", default=".", help="directory for CSV and metrics")

    benchp = sub.add_parser("bench", help="run a benchmark sweep")
    benchp.add_argument("--trials", type=int, required=True)
    benchp.add_argument("--n", type=int, default=10, help="swarm size (without --n-sweep)")
    benchp.add_argument("--n-sweep", help="comma-separated swarm sizes")
    benchp.add_argument("--density", type=float, default=1.0,
                        help="agents per cubic meter for each size")
    benchp.add_argument("--volume", type=float, default=None,
                        help="fixed workspace volume in m^3 (overrides --density)")
    benchp.add_argument("--strategies", default="soft-on-demand")
    benchp.add_argument("--clusters", default="1")
    benchp.add_argument("--seed-base", type=int, default=0)
    benchp.add_argument("--preset", choices=sorted(_PRESET_BUILDERS), default="sim")
    benchp.add_argument("--config", help="JSON file overriding physics/algo fields")
    benchp.add_argument("--scale", action="store_true")
    benchp.add_argument("--workers", type=int, default=None,
                        help=f"trial parallelism (default ${bench_mod.WORKERS_ENV} or cores)")
    benchp.add_argument("--verbose", action="store_true")
    benchp.add_argument("-o", "--out", help="metrics JSON output (enables resume)")

    check = sub.add_parser("check", help="re-verify a stored trajectory")
    check.add_argument("trajectory", help="trajectory CSV path")
    check.add_argument("scenario", help="scenario JSON path")

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    handlers = {"gen": cmd_gen, "solve": cmd_solve, "bench": cmd_bench, "check": cmd_check}
    try:
        return handlers[args.command](args)
    except (SchemaError, GenerationError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EX_BADINPUT
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EX_IOERR
    except SwarmPlanError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EX_BADINPUT


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
