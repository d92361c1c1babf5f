"""Scenario definition, random generation, file formats, and run metrics.

File formats (all SI units):

* Scenario: JSON, ``"format": 1``, keys ``id, n_agents, seed, box, agents,
  physics, algo`` mirroring the Scenario fields.
* Trajectory: CSV with header ``agent_id,t,px,py,pz,vx,vy,vz,ax,ay,az``,
  one row per sample, 9 significant digits.
* Metrics: JSON with per-trial records plus an aggregate block.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .assembly import scaled_distance
from .errors import ConfigError, GenerationError, SchemaError
from .model import AlgoParams, PhysParams

SCENARIO_FORMAT = 1
CSV_HEADER = "agent_id,t,px,py,pz,vx,vy,vz,ax,ay,az"

# Upfront packing sanity bound: total collision-ellipsoid volume above this
# fraction of the workspace is hopeless for rejection sampling.
_PACKING_FRACTION_LIMIT = 0.35


@dataclass(frozen=True)
class Scenario:
    """One transition problem: N agents, workspace box, parameters."""

    id: str
    starts: np.ndarray  # (N, 3)
    goals: np.ndarray   # (N, 3)
    static: np.ndarray  # (N,) bool
    phys: PhysParams
    algo: AlgoParams
    seed: int | None = None

    def __post_init__(self):
        starts = np.atleast_2d(np.asarray(self.starts, dtype=float)).copy()
        goals = np.atleast_2d(np.asarray(self.goals, dtype=float)).copy()
        static = np.asarray(self.static, dtype=bool).copy()
        if starts.shape != goals.shape or starts.shape[1] != 3:
            raise ConfigError("starts and goals must both be (N, 3)")
        if static.shape != (starts.shape[0],):
            raise ConfigError("static flags must be length N")
        for name, pts in (("start", starts), ("goal", goals)):
            if np.any(pts < self.phys.p_min - 1e-9) or np.any(pts > self.phys.p_max + 1e-9):
                raise ConfigError(f"{name} positions must lie inside the workspace box")
            _require_separation(pts, self.phys, f"{name}s")
        if np.any(static) and not np.allclose(starts[static], goals[static], atol=1e-12):
            raise ConfigError("static agents must have p0 == pf")
        starts.flags.writeable = False
        goals.flags.writeable = False
        static.flags.writeable = False
        object.__setattr__(self, "starts", starts)
        object.__setattr__(self, "goals", goals)
        object.__setattr__(self, "static", static)

    @property
    def n_agents(self) -> int:
        return self.starts.shape[0]

    @property
    def straight_line_sum(self) -> float:
        return float(np.sum(np.linalg.norm(self.goals - self.starts, axis=1)))


@dataclass(frozen=True)
class RunMetrics:
    """Summary numbers for one transition run."""

    success: bool
    failure_reason: str | None
    transition_time: float | None
    wall_time: float
    travelled_distance: float
    straight_line_sum: float
    distance_ratio: float | None
    min_scaled_distance: float | None
    goal_errors: np.ndarray

    def to_dict(self) -> dict:
        return {
            "success": self.success,
            "failure_reason": self.failure_reason,
            "transition_time_s": self.transition_time,
            "wall_time_s": self.wall_time,
            "travelled_distance_m": self.travelled_distance,
            "straight_line_sum_m": self.straight_line_sum,
            "distance_ratio": self.distance_ratio,
            "min_scaled_distance_m": self.min_scaled_distance,
            "goal_errors_m": [float(e) for e in self.goal_errors],
        }


def _require_separation(points: np.ndarray, phys: PhysParams, label: str) -> None:
    n = points.shape[0]
    for i in range(n - 1):
        xi = scaled_distance(points[i] - points[i + 1:], phys)
        if np.any(xi < phys.r_min - 1e-9):
            j = i + 1 + int(np.argmax(xi < phys.r_min - 1e-9))
            raise ConfigError(
                f"{label} {i} and {j} violate the minimum scaled separation "
                f"({float(scaled_distance(points[i] - points[j], phys)):.4f} < {phys.r_min})"
            )


def sim_phys(box_min, box_max, **overrides) -> PhysParams:
    """Simulation preset: h=0.2 s, Ts=0.01 s, |a| <= 1 m/s^2, r_min=0.35 m, c=2."""
    base = dict(
        h=0.2, ts=0.01,
        a_min=(-1.0, -1.0, -1.0), a_max=(1.0, 1.0, 1.0),
        p_min=box_min, p_max=box_max,
        r_min=0.35, c_ellipsoid=2.0, n_degree=2,
    )
    base.update(overrides)
    return PhysParams(**base)


def lab_phys(box_min, box_max, **overrides) -> PhysParams:
    """Hardware preset: tighter collision radius, r_min=0.25 m."""
    merged = dict(r_min=0.25)
    merged.update(overrides)
    return sim_phys(box_min, box_max, **merged)


def sim_algo(**overrides) -> AlgoParams:
    """Simulation preset: K=15, kappa=1, eps_max=eps_check=0.05 m, T_max=20 s."""
    base = dict(
        horizon=15, kappa=1, eps_max=0.05, eps_check=0.05,
        neighbor_radius_factor=3.0, t_max=20.0, goal_tol=0.10,
        q_weight=100.0, r_weight=1.0, s_weight=10.0,
        rho_lin=5.0e3, zeta_quad=1.0e2,
    )
    base.update(overrides)
    return AlgoParams(**base)


def dense_algo(**overrides) -> AlgoParams:
    """High-density preset: two terminal error steps for more goal pull."""
    merged = dict(kappa=2)
    merged.update(overrides)
    return sim_algo(**merged)


def lab_algo(**overrides) -> AlgoParams:
    """Hardware preset: eps_check=0.03 m on top of the simulation defaults."""
    merged = dict(eps_check=0.03)
    merged.update(overrides)
    return sim_algo(**merged)


PRESETS = {
    "sim": (sim_phys, sim_algo),
    "dense": (sim_phys, dense_algo),
    "lab": (lab_phys, lab_algo),
}


def box_from_density(n_agents: int, density: float) -> tuple[np.ndarray, np.ndarray]:
    """Cube with volume n/density, anchored at the origin."""
    if density <= 0:
        raise ConfigError("density must be positive")
    side = (n_agents / density) ** (1.0 / 3.0)
    return np.zeros(3), np.full(3, side)


def _sample_separated(
    rng: np.random.Generator,
    n: int,
    phys: PhysParams,
    max_point_tries: int,
    label: str,
) -> np.ndarray:
    points = np.empty((n, 3))
    for i in range(n):
        for _ in range(max_point_tries):
            cand = rng.uniform(phys.p_min, phys.p_max)
            if i == 0 or np.all(scaled_distance(cand - points[:i], phys) >= phys.r_min):
                points[i] = cand
                break
        else:
            raise GenerationError(
                f"could not place {label} {i + 1}/{n} after {max_point_tries} tries"
            )
    return points


def generate_random_scenario(
    n_agents: int,
    box: tuple | None = None,
    density: float | None = None,
    seed: int = 0,
    phys: PhysParams | None = None,
    algo: AlgoParams | None = None,
    scenario_id: str | None = None,
    max_point_tries: int = 5000,
    max_restarts: int = 50,
) -> Scenario:
    """Rejection-sample a random transition inside a box or at a given density.

    Start and goal sets each satisfy the pairwise scaled-separation margin.
    Deterministic per seed.  Raises GenerationError when the requested
    packing is infeasible or the retry budget runs out.
    """
    if (box is None) == (density is None):
        raise ConfigError("specify exactly one of box or density")
    if density is not None:
        box_min, box_max = box_from_density(n_agents, density)
    else:
        box_min, box_max = (np.asarray(b, dtype=float) for b in box)
    if phys is None:
        phys = sim_phys(box_min, box_max)
    else:
        phys = replace(phys, p_min=box_min, p_max=box_max)
    if algo is None:
        algo = sim_algo()

    volume = float(np.prod(phys.p_max - phys.p_min))
    r = phys.r_min / 2.0
    ellipsoid_volume = (4.0 / 3.0) * np.pi * r * r * (phys.c_ellipsoid * r)
    if n_agents * ellipsoid_volume > _PACKING_FRACTION_LIMIT * volume:
        raise GenerationError(
            f"{n_agents} agents with r_min={phys.r_min} cannot pack into {volume:.3g} m^3"
        )

    rng = np.random.default_rng(seed)
    for _ in range(max_restarts):
        try:
            starts = _sample_separated(rng, n_agents, phys, max_point_tries, "start")
            goals = _sample_separated(rng, n_agents, phys, max_point_tries, "goal")
        except GenerationError:
            continue
        return Scenario(
            id=scenario_id or f"random-n{n_agents}-s{seed}",
            starts=starts,
            goals=goals,
            static=np.zeros(n_agents, dtype=bool),
            phys=phys,
            algo=algo,
            seed=seed,
        )
    raise GenerationError(
        f"generation failed after {max_restarts} restarts (n={n_agents}, box volume {volume:.3g})"
    )


# ---------------------------------------------------------------------------
# Serialization


def scenario_to_dict(scenario: Scenario) -> dict:
    phys, algo = scenario.phys, scenario.algo
    return {
        "format": SCENARIO_FORMAT,
        "id": scenario.id,
        "n_agents": scenario.n_agents,
        "seed": scenario.seed,
        "box": {"p_min": phys.p_min.tolist(), "p_max": phys.p_max.tolist()},
        "agents": [
            {
                "p0": scenario.starts[i].tolist(),
                "pf": scenario.goals[i].tolist(),
                "static": bool(scenario.static[i]),
            }
            for i in range(scenario.n_agents)
        ],
        "physics": {
            "h": phys.h,
            "ts": phys.ts,
            "a_min": phys.a_min.tolist(),
            "a_max": phys.a_max.tolist(),
            "r_min": phys.r_min,
            "c_ellipsoid": phys.c_ellipsoid,
            "n_degree": phys.n_degree,
        },
        "algo": {
            "horizon": algo.horizon,
            "kappa": algo.kappa,
            "eps_max": algo.eps_max,
            "eps_check": algo.eps_check,
            "neighbor_radius_factor": algo.neighbor_radius_factor,
            "t_max": algo.t_max,
            "goal_tol": algo.goal_tol,
            "q_weight": algo.q_weight.tolist(),
            "r_weight": algo.r_weight.tolist(),
            "s_weight": algo.s_weight.tolist(),
            "rho_lin": algo.rho_lin,
            "zeta_quad": algo.zeta_quad,
        },
    }


def scenario_from_dict(data: dict) -> Scenario:
    try:
        if data.get("format") != SCENARIO_FORMAT:
            raise SchemaError(f"unsupported scenario format {data.get('format')!r}")
        box = data["box"]
        phys = PhysParams(p_min=box["p_min"], p_max=box["p_max"], **data["physics"])
        algo = AlgoParams(**data["algo"])
        agents = data["agents"]
        if data.get("n_agents") != len(agents):
            raise SchemaError("n_agents does not match the agents list")
        starts = np.array([a["p0"] for a in agents], dtype=float)
        goals = np.array([a["pf"] for a in agents], dtype=float)
        static = np.array([bool(a.get("static", False)) for a in agents])
        return Scenario(
            id=str(data.get("id", "unnamed")),
            starts=starts,
            goals=goals,
            static=static,
            phys=phys,
            algo=algo,
            seed=data.get("seed"),
        )
    except SchemaError:
        raise
    except (KeyError, TypeError, ValueError, ConfigError) as exc:
        raise SchemaError(f"invalid scenario: {exc}") from exc


def save_scenario(scenario: Scenario, path) -> None:
    with open(path, "w") as fh:
        json.dump(scenario_to_dict(scenario), fh, indent=2)
        fh.write("\n")


def load_scenario(path) -> Scenario:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise SchemaError(f"{path}: top level must be a JSON object")
    return scenario_from_dict(data)


def apply_param_overrides(
    phys: PhysParams, algo: AlgoParams, overrides: dict
) -> tuple[PhysParams, AlgoParams]:
    """Apply a config-file override dict with optional physics/algo sections."""
    phys_over = dict(overrides.get("physics", {}))
    algo_over = dict(overrides.get("algo", {}))
    unknown = set(overrides) - {"physics", "algo"}
    if unknown:
        raise SchemaError(f"unknown config sections: {sorted(unknown)}")
    try:
        if phys_over:
            fields = {
                "h": phys.h, "ts": phys.ts, "a_min": phys.a_min, "a_max": phys.a_max,
                "p_min": phys.p_min, "p_max": phys.p_max, "r_min": phys.r_min,
                "c_ellipsoid": phys.c_ellipsoid, "n_degree": phys.n_degree,
            }
            bad = set(phys_over) - set(fields)
            if bad:
                raise SchemaError(f"unknown physics fields: {sorted(bad)}")
            fields.update(phys_over)
            phys = PhysParams(**fields)
        if algo_over:
            fields = {
                "horizon": algo.horizon, "kappa": algo.kappa, "eps_max": algo.eps_max,
                "eps_check": algo.eps_check,
                "neighbor_radius_factor": algo.neighbor_radius_factor,
                "t_max": algo.t_max, "goal_tol": algo.goal_tol,
                "q_weight": algo.q_weight, "r_weight": algo.r_weight,
                "s_weight": algo.s_weight, "rho_lin": algo.rho_lin,
                "zeta_quad": algo.zeta_quad,
            }
            bad = set(algo_over) - set(fields)
            if bad:
                raise SchemaError(f"unknown algo fields: {sorted(bad)}")
            fields.update(algo_over)
            algo = AlgoParams(**fields)
    except ConfigError as exc:
        raise SchemaError(f"invalid override: {exc}") from exc
    return phys, algo


# ---------------------------------------------------------------------------
# Trajectory CSV


def write_trajectory_csv(path, t: np.ndarray, p: np.ndarray, v: np.ndarray, a: np.ndarray) -> None:
    """One row per agent per sample, agent-major, 9 significant digits."""
    n_agents, n_samples = p.shape[0], p.shape[1]
    with open(path, "w") as fh:
        fh.write(CSV_HEADER + "\n")
        for i in range(n_agents):
            for s in range(n_samples):
                row = [str(i), f"{t[s]:.9g}"]
                row += [f"{x:.9g}" for x in p[i, s]]
                row += [f"{x:.9g}" for x in v[i, s]]
                row += [f"{x:.9g}" for x in a[i, s]]
                fh.write(",".join(row) + "\n")


def read_trajectory_csv(path) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Parse a trajectory CSV back into (t, p, v, a) arrays.

    Raises SchemaError (with the offending line number) on malformed input.
    """
    per_agent: dict[int, list] = {}
    with open(path) as fh:
        header = fh.readline().rstrip("\n")
        if header != CSV_HEADER:
            raise SchemaError(f"{path}:1: bad header {header!r}")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 11:
                raise SchemaError(f"{path}:{lineno}: expected 11 fields, got {len(parts)}")
            try:
                agent = int(parts[0])
                values = [float(x) for x in parts[1:]]
            except ValueError as exc:
                raise SchemaError(f"{path}:{lineno}: {exc}") from exc
            per_agent.setdefault(agent, []).append(values)
    if not per_agent:
        raise SchemaError(f"{path}: no samples")
    ids = sorted(per_agent)
    if ids != list(range(len(ids))):
        raise SchemaError(f"{path}: agent ids must be 0..N-1, got {ids}")
    counts = {len(rows) for rows in per_agent.values()}
    if len(counts) != 1:
        raise SchemaError(f"{path}: agents have differing sample counts {sorted(counts)}")
    data = np.array([per_agent[i] for i in ids])  # (N, S, 10)
    t = data[0, :, 0]
    if not np.allclose(data[:, :, 0], t[None, :], atol=1e-12):
        raise SchemaError(f"{path}: agents disagree on sample times")
    return t, data[:, :, 1:4], data[:, :, 4:7], data[:, :, 7:10]


# ---------------------------------------------------------------------------
# Metrics


def compute_metrics(result, scenario: Scenario) -> RunMetrics:
    """Distance, timing, and separation metrics for a TransitionResult."""
    straight = scenario.straight_line_sum
    interp = result.interpolated
    travelled = 0.0
    if interp is not None and interp.p.shape[1] > 1:
        travelled = float(np.sum(np.linalg.norm(np.diff(interp.p, axis=1), axis=2)))
    transition_time = None
    if result.success:
        goal_hit = np.linalg.norm(result.p - scenario.goals[:, None, :], axis=2) <= scenario.algo.goal_tol
        all_at_goal = np.all(goal_hit, axis=0)
        if np.any(all_at_goal):
            transition_time = float(result.t[int(np.argmax(all_at_goal))])
    ratio = travelled / straight if result.success and straight > 1e-12 else None
    goal_errors = np.linalg.norm(result.p[:, -1, :] - scenario.goals, axis=1)
    return RunMetrics(
        success=result.success,
        failure_reason=result.failure_reason,
        transition_time=transition_time,
        wall_time=result.wall_time,
        travelled_distance=travelled,
        straight_line_sum=straight,
        distance_ratio=ratio,
        min_scaled_distance=result.min_scaled_distance,
        goal_errors=goal_errors,
    )
