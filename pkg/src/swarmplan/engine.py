"""Synchronous distributed planning loop.

Each cycle, every agent independently solves a small QP against the fleet's
shared position predictions, applies the first input of the solution, and
publishes its refreshed prediction.  Collision constraints enter on demand:
only when the shared predictions expose a future violation, and only for the
first violating step.

Execution modes:

* sequential: agents solve in index order, refreshed predictions visible to
  later agents within the same cycle;
* clustered(C): agents are split round-robin into C clusters; clusters run
  concurrently on private snapshots (sequential refresh inside a cluster)
  and exchange predictions only at the end-of-cycle barrier, so results
  depend on the partition, never on scheduling.  Warm-start state travels
  with each agent rather than living in a worker, keeping runs bit-identical
  no matter how cluster tasks land on processes.
"""
from __future__ import annotations

import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor
from threadpoolctl import threadpool_limits

from . import assembly
from .assembly import CollisionEvent
from .errors import ConfigError
from .model import AgentState, build_prediction_matrices, init_all_predictions, rollout
from .postprocess import (
    CollisionCheckReport,
    InterpolatedTrajectory,
    check_collisions,
    interpolate,
    scale_trajectory,
)
from .qpsolver import solve_qp_raw

SOFT_ON_DEMAND = "soft_on_demand"
HARD_ON_DEMAND = "hard_on_demand"
HARD_FULL_HORIZON = "hard_full_horizon"
STRATEGIES = (SOFT_ON_DEMAND, HARD_ON_DEMAND, HARD_FULL_HORIZON)

_XI_PERTURB = 1e-9  # below this scaled distance the constraint normal is perturbed


@dataclass(frozen=True)
class EngineConfig:
    """Strategy, execution mode, and feasibility-escalation settings."""

    strategy: str = SOFT_ON_DEMAND
    mode: str = "sequential"  # "sequential" | "clustered"
    clusters: int = 1
    eps_growth: float = 2.0
    eps_max_retries: int = 10
    rng_seed: int = 0
    scale_to_limits: bool = False
    warm_start: bool = True
    workers: int | None = None  # processes for clustered mode; None = min(C, cores)

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if self.mode not in ("sequential", "clustered"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.clusters < 1:
            raise ConfigError("clusters must be >= 1")
        if self.eps_growth <= 1.0:
            raise ConfigError("eps_growth must be > 1")
        if self.eps_max_retries < 0:
            raise ConfigError("eps_max_retries must be >= 0")
        if self.rng_seed < 0:
            raise ConfigError("rng_seed must be >= 0")


@dataclass
class StepDiag:
    """Per-cycle diagnostics, one entry per agent."""

    n_collision_rows: np.ndarray
    eps_bound_used: np.ndarray
    retries: np.ndarray
    solve_time: np.ndarray
    kkt_max: np.ndarray
    fallbacks: np.ndarray


@dataclass
class TransitionResult:
    """Full outcome of one transition attempt."""

    success: bool
    failure_reason: str | None  # None | timeout | collision_check_failed | qp_unrecoverable
    t: np.ndarray               # (M+1,) discrete sample times (after optional scaling)
    p: np.ndarray               # (N, M+1, 3)
    v: np.ndarray               # (N, M+1, 3)
    a: np.ndarray               # (N, M, 3) applied inputs
    h_effective: float
    gamma: float
    interpolated: InterpolatedTrajectory | None
    collision_report: CollisionCheckReport | None
    min_scaled_distance: float | None
    diagnostics: list[StepDiag]
    wall_time: float

    @property
    def n_steps(self) -> int:
        return self.p.shape[1] - 1


@dataclass(frozen=True)
class PlanContext:
    """Immutable per-scenario data shared by every solve (picklable)."""

    phys: object
    algo: object
    mats: object
    goals: np.ndarray
    goal_stacks: np.ndarray   # (N, 3K) stacked goal positions
    static_mask: np.ndarray   # (N,) agents that are fixed obstacles
    H_plain: np.ndarray
    G_goal: np.ndarray
    G_smooth: np.ndarray
    A_plain: np.ndarray       # constant 12K x 3K physical-limit rows
    p_max_tile: np.ndarray
    p_min_tile: np.ndarray
    u_box_tile: np.ndarray    # concatenated (U_max, -U_min)
    strategy: str
    eps_growth: float
    eps_max_retries: int
    rng_seed: int
    warm_start: bool


class SolveCache:
    """Per-process Cholesky factors of the (constant) cost Hessians."""

    def __init__(self):
        self.chol_plain = None
        self.chol_aug: dict[int, object] = {}

    def factor_plain(self, ctx: PlanContext):
        if self.chol_plain is None:
            self.chol_plain = cho_factor(ctx.H_plain, lower=False)
        return self.chol_plain

    def factor_augmented(self, ctx: PlanContext, n_c: int):
        if n_c == 0:
            return self.factor_plain(ctx)
        if n_c not in self.chol_aug:
            dim = ctx.H_plain.shape[0]
            upper = np.zeros((dim + n_c, dim + n_c))
            upper[:dim, :dim] = self.factor_plain(ctx)[0]
            upper[dim:, dim:] = np.sqrt(2.0 * ctx.algo.zeta_quad) * np.eye(n_c)
            self.chol_aug[n_c] = (upper, False)
        return self.chol_aug[n_c]


@dataclass
class AgentRuntime:
    """Mutable per-agent planning state threaded through the cycles."""

    state: AgentState
    plan: np.ndarray          # (K, 3) most recent input plan
    warm: tuple | None = None  # (signature, active rows) from the last solve


def make_context(scenario, config: EngineConfig) -> PlanContext:
    mats = build_prediction_matrices(scenario.algo.horizon, scenario.phys.h)
    H_plain, G_goal, G_smooth = assembly.cost_terms(mats, scenario.algo)
    K = scenario.algo.horizon
    phys = scenario.phys
    return PlanContext(
        phys=phys,
        algo=scenario.algo,
        mats=mats,
        goals=scenario.goals.copy(),
        goal_stacks=np.hstack([scenario.goals] * K),
        static_mask=scenario.static.copy(),
        H_plain=H_plain,
        G_goal=G_goal,
        G_smooth=G_smooth,
        A_plain=assembly.physical_limit_rows(mats, phys),
        p_max_tile=np.tile(phys.p_max, K),
        p_min_tile=np.tile(phys.p_min, K),
        u_box_tile=np.concatenate([np.tile(phys.a_max, K), -np.tile(phys.a_min, K)]),
        strategy=config.strategy,
        eps_growth=config.eps_growth,
        eps_max_retries=config.eps_max_retries,
        rng_seed=config.rng_seed,
        warm_start=config.warm_start,
    )


def check_goal(positions, goals, goal_tol: float) -> bool:
    """True iff every agent is within goal_tol (closed ball) of its goal."""
    positions = np.asarray(positions, dtype=float)
    goals = np.asarray(goals, dtype=float)
    return bool(np.all(np.linalg.norm(positions - goals, axis=-1) <= goal_tol))


def _perturbed_event(event: CollisionEvent, ctx: PlanContext, k_t: int, agent_id: int) -> CollisionEvent:
    """Nudge coincident predictions by a seeded 1e-6 m offset so nu exists."""
    rng = np.random.default_rng(
        np.random.SeedSequence([ctx.rng_seed, k_t, agent_id, event.neighbor_id, event.k_c])
    )
    offset = rng.standard_normal(3)
    offset *= 1e-6 / np.linalg.norm(offset)
    own = event.own_pos + offset
    xi = float(assembly.scaled_distance(own - event.neighbor_pos, ctx.phys))
    return CollisionEvent(
        neighbor_id=event.neighbor_id, k_c=event.k_c, xi=xi,
        neighbor_pos=event.neighbor_pos, own_pos=own,
    )


def _sanitize_events(events, ctx: PlanContext, k_t: int, agent_id: int):
    return tuple(
        _perturbed_event(e, ctx, k_t, agent_id) if e.xi < _XI_PERTURB else e
        for e in events
    )


def _full_horizon_events(
    own_prediction: np.ndarray, all_predictions: np.ndarray, self_id: int, ctx: PlanContext
) -> tuple[CollisionEvent, ...]:
    """One event per neighbor per horizon step, for the full-horizon variant.

    Neighbors are the agents that come within the interaction radius anywhere
    along the shared predictions.
    """
    xi = assembly.scaled_distance(own_prediction[None, :, :] - all_predictions, ctx.phys)
    xi[self_id, :] = np.inf
    radius = ctx.algo.neighbor_radius_factor * ctx.phys.r_min
    neighbors = np.flatnonzero(np.min(xi, axis=1) < radius)
    K = ctx.algo.horizon
    events = []
    for j in neighbors:
        for k in range(K):
            events.append(
                CollisionEvent(
                    neighbor_id=int(j), k_c=k + 1, xi=float(xi[j, k]),
                    neighbor_pos=all_predictions[j, k].copy(),
                    own_pos=own_prediction[k].copy(),
                )
            )
    return tuple(events)


def _collision_block(events, p_free, ctx: PlanContext, n_relax: int):
    """Collision rows in <= form over (U, E); relaxation columns only if n_relax."""
    K = ctx.algo.horizon
    d = 3 * K + n_relax
    A = np.zeros((len(events), d))
    b = np.zeros(len(events))
    for idx, event in enumerate(events):
        mu, eps_coeff, rhs = assembly.linearize_collision_constraint(event, K, ctx.phys)
        block = slice(3 * (event.k_c - 1), 3 * event.k_c)
        nu = mu[block]
        A[idx, :3 * K] = -(nu @ ctx.mats.lam[block, :])
        if n_relax:
            A[idx, 3 * K + idx] = eps_coeff
        b[idx] = float(nu @ p_free[block]) - rhs
    return A, b


def _solve_agent(
    agent_id: int,
    runtime: AgentRuntime,
    all_predictions: np.ndarray,
    ctx: PlanContext,
    k_t: int,
    cache: SolveCache,
) -> tuple[np.ndarray | None, tuple | None, dict]:
    """Detect, build, solve (with escalation) for one agent.

    Returns ``(U, warm, diag)``; U is None when no feasible plan exists under
    the configured strategy.
    """
    phys, algo, mats = ctx.phys, ctx.algo, ctx.mats
    K = algo.horizon
    state = runtime.state
    own_prediction = all_predictions[agent_id]
    x0 = state.x
    p_free = mats.a0 @ x0
    f_plain = -(ctx.G_goal @ (ctx.goal_stacks[agent_id] - p_free)) \
        - ctx.G_smooth[:, :3] @ state.a_prev
    b_plain = np.concatenate([
        ctx.p_max_tile - p_free, p_free - ctx.p_min_tile, ctx.u_box_tile,
    ])
    diag = {"n_collision_rows": 0, "eps_bound_used": 0.0, "retries": 0,
            "kkt_max": 0.0, "status": "optimal"}

    def run(H, f, A, b, sig, n_c):
        warm = None
        if ctx.warm_start and runtime.warm is not None and runtime.warm[0] == sig:
            warm = runtime.warm[1]
        sol = solve_qp_raw(H, f, A, b, factor=cache.factor_augmented(ctx, n_c), warm_start=warm)
        if sol.status == "optimal":
            diag["kkt_max"] = max(diag["kkt_max"], max(sol.kkt_residuals))
            return sol, (sig, sol.active_rows)
        return sol, None

    if ctx.strategy == HARD_FULL_HORIZON:
        events = _sanitize_events(
            _full_horizon_events(own_prediction, all_predictions, agent_id, ctx),
            ctx, k_t, agent_id,
        )
    else:
        neighbors = assembly.detect_first_collision(
            own_prediction, all_predictions, agent_id, phys, algo
        )
        events = () if neighbors is None else _sanitize_events(
            neighbors.members, ctx, k_t, agent_id
        )
    diag["n_collision_rows"] = len(events)

    if not events:
        sol, warm = run(ctx.H_plain, f_plain, ctx.A_plain, b_plain, ("plain",), 0)
        if sol.status != "optimal":
            diag["status"] = sol.status
            return None, None, diag
        return sol.u_star.reshape(-1, 3), warm, diag

    if ctx.strategy in (HARD_ON_DEMAND, HARD_FULL_HORIZON):
        A_coll, b_coll = _collision_block(events, p_free, ctx, 0)
        A = np.vstack([ctx.A_plain, A_coll])
        b = np.concatenate([b_plain, b_coll])
        sol, warm = run(ctx.H_plain, f_plain, A, b, ("hard", len(events)), 0)
        if sol.status != "optimal":
            diag["status"] = sol.status
            return None, None, diag
        return sol.u_star.reshape(-1, 3), warm, diag

    # Soft on demand: bounded slacks, escalating the relaxation bound on
    # infeasibility; the bound resets to its configured value afterwards.
    n_c = len(events)
    d = 3 * K + n_c
    H = np.zeros((d, d))
    H[:3 * K, :3 * K] = ctx.H_plain
    H[3 * K:, 3 * K:] = 2.0 * algo.zeta_quad * np.eye(n_c)
    f = np.concatenate([f_plain, -algo.rho_lin * np.ones(n_c)])
    A_coll, b_coll = _collision_block(events, p_free, ctx, n_c)
    A_phys = np.hstack([ctx.A_plain, np.zeros((ctx.A_plain.shape[0], n_c))])
    A_rel = np.zeros((2 * n_c, d))
    for idx in range(n_c):
        A_rel[idx, 3 * K + idx] = 1.0
        A_rel[n_c + idx, 3 * K + idx] = -1.0
    A = np.vstack([A_phys, A_coll, A_rel])

    eps_bound = algo.eps_max
    for attempt in range(ctx.eps_max_retries + 1):
        b_rel = np.concatenate([np.zeros(n_c), np.full(n_c, eps_bound)])
        b = np.concatenate([b_plain, b_coll, b_rel])
        sol, warm = run(H, f, A, b, ("aug", n_c), n_c)
        if sol.status == "optimal":
            diag["eps_bound_used"] = eps_bound
            diag["retries"] = attempt
            return sol.u_star[:3 * K].reshape(-1, 3), warm, diag
        eps_bound *= ctx.eps_growth
    diag["status"] = "unrecoverable"
    diag["retries"] = ctx.eps_max_retries
    return None, None, diag


def build_and_solve_qp(
    agent_id: int,
    state: AgentState,
    all_predictions: np.ndarray,
    ctx: PlanContext,
    k_t: int = 0,
    cache: SolveCache | None = None,
) -> tuple[np.ndarray | None, dict]:
    """Standalone entry point for one agent's planning step."""
    runtime = AgentRuntime(state=state, plan=np.zeros((ctx.algo.horizon, 3)))
    u_seq, _, diag = _solve_agent(
        agent_id, runtime, np.asarray(all_predictions, dtype=float), ctx, k_t,
        cache if cache is not None else SolveCache(),
    )
    return u_seq, diag


@dataclass
class _AgentStep:
    """Outcome for one agent in one cycle (worker-safe)."""

    agent_id: int
    runtime: AgentRuntime
    positions: np.ndarray  # (K, 3) published prediction
    applied: np.ndarray    # (3,) input applied this cycle
    fallback: bool
    diag: dict


def _advance_agent(
    agent_id: int,
    runtime: AgentRuntime,
    predictions: np.ndarray,
    ctx: PlanContext,
    k_t: int,
    cache: SolveCache,
) -> _AgentStep:
    """Solve and step one agent; on QP failure follow the shifted old plan."""
    if ctx.static_mask[agent_id]:
        # Fixed obstacle: never re-plans, publishes a constant prediction.
        diag = {"n_collision_rows": 0, "eps_bound_used": 0.0, "retries": 0,
                "kkt_max": 0.0, "status": "optimal", "solve_time": 0.0}
        positions = np.tile(runtime.state.p, (ctx.algo.horizon, 1))
        return _AgentStep(agent_id, runtime, positions, np.zeros(3), False, diag)
    t0 = time.perf_counter()
    u_seq, warm, diag = _solve_agent(agent_id, runtime, predictions, ctx, k_t, cache)
    h = ctx.phys.h
    state = runtime.state
    if u_seq is not None:
        positions, velocities = rollout(state, u_seq, h)
        new_state = AgentState(p=positions[0], v=velocities[0], a_prev=u_seq[0])
        new_runtime = AgentRuntime(state=new_state, plan=u_seq, warm=warm)
        diag["solve_time"] = time.perf_counter() - t0
        return _AgentStep(agent_id, new_runtime, positions, u_seq[0], False, diag)
    # Keep the previous prediction shifted one step, holding its last
    # position, and apply the next input of the previous plan.
    plan = np.vstack([runtime.plan[1:], np.zeros(3)])
    applied = plan[0].copy() if plan.shape[0] else np.zeros(3)
    p_next = state.p + h * state.v + 0.5 * h * h * applied
    v_next = state.v + h * applied
    new_state = AgentState(p=p_next, v=v_next, a_prev=applied)
    rolled = np.vstack([predictions[agent_id][1:], predictions[agent_id][-1:]])
    diag["solve_time"] = time.perf_counter() - t0
    return _AgentStep(
        agent_id, AgentRuntime(state=new_state, plan=plan, warm=None),
        rolled, applied, True, diag,
    )


def _run_cluster(ctx, cache, k_t, runtimes, predictions, members) -> list[_AgentStep]:
    """Solve a cluster sequentially; members see each other's fresh predictions."""
    results = []
    for agent_id in members:
        step = _advance_agent(agent_id, runtimes[agent_id], predictions, ctx, k_t, cache)
        predictions[agent_id] = step.positions
        results.append(step)
    return results


_WORKER_CTX: PlanContext | None = None
_WORKER_CACHE: SolveCache | None = None
_WORKER_LIMITER = None


def _worker_init(ctx: PlanContext) -> None:
    global _WORKER_CTX, _WORKER_CACHE, _WORKER_LIMITER
    _WORKER_CTX = ctx
    _WORKER_CACHE = SolveCache()
    # The QPs are tiny; BLAS threading only adds contention across workers.
    _WORKER_LIMITER = threadpool_limits(limits=1)


def _worker_ping(i: int) -> int:
    return i


def _worker_run(k_t, runtimes, predictions, cluster_group) -> list[_AgentStep]:
    out = []
    for members in cluster_group:
        local = predictions.copy()
        out.extend(_run_cluster(_WORKER_CTX, _WORKER_CACHE, k_t, runtimes, local, members))
    return out


def cluster_partition(n_agents: int, clusters: int) -> list[list[int]]:
    """Round-robin agent assignment: cluster c gets agents i with i % C == c."""
    C = max(1, min(clusters, n_agents))
    return [list(range(c, n_agents, C)) for c in range(C)]


def run_clustered_step(
    ctx: PlanContext,
    k_t: int,
    runtimes: list[AgentRuntime],
    predictions: np.ndarray,
    partition: list[list[int]],
    pool: ProcessPoolExecutor | None = None,
    n_groups: int | None = None,
    cache: SolveCache | None = None,
) -> list[_AgentStep]:
    """One barrier-synchronized cycle over all clusters.

    Each cluster reads a private copy of the shared predictions; the caller
    publishes the merged updates.  With a pool, clusters are packed into
    n_groups tasks; results are identical for any grouping or scheduling.
    """
    if pool is None:
        cache = cache if cache is not None else SolveCache()
        results = []
        for members in partition:
            results.extend(_run_cluster(ctx, cache, k_t, runtimes, predictions.copy(), members))
        return results
    n_groups = n_groups or len(partition)
    groups = [partition[g::n_groups] for g in range(n_groups)]
    futures = [
        pool.submit(_worker_run, k_t, runtimes, predictions, group)
        for group in groups if group
    ]
    results = []
    for fut in futures:
        results.extend(fut.result())
    return results


def run_transition(scenario, config: EngineConfig | None = None) -> TransitionResult:
    """Run one full transition; never raises on planner failure.

    Loops solve cycles until every agent sits within goal_tol of its goal or
    the step budget ceil(t_max / h) runs out, then post-processes (optional
    time scaling, interpolation, safety collision check) and fills the
    result.  Timeout, safety-check failure, and unrecoverable QP failure are
    encoded in the result, not thrown.
    """
    config = config or EngineConfig()
    ctx = make_context(scenario, config)
    n_agents = scenario.n_agents
    h = scenario.phys.h
    goal_tol = scenario.algo.goal_tol
    k_max = scenario.algo.max_steps(h)
    K = scenario.algo.horizon

    predictions, states = init_all_predictions(scenario)
    runtimes = [AgentRuntime(state=s, plan=np.zeros((K, 3))) for s in states]

    pos_hist = [np.array([rt.state.p for rt in runtimes])]
    vel_hist = [np.array([rt.state.v for rt in runtimes])]
    acc_hist: list[np.ndarray] = []
    diagnostics: list[StepDiag] = []

    partition = None
    pool = None
    n_groups = None
    if config.mode == "clustered":
        partition = cluster_partition(n_agents, config.clusters)
        n_groups = config.workers or min(len(partition), os.cpu_count() or 1)
        if n_groups > 1:
            pool = ProcessPoolExecutor(
                max_workers=n_groups, initializer=_worker_init, initargs=(ctx,)
            )
            # Spin workers up before timing the loop.
            list(pool.map(_worker_ping, range(n_groups)))
    cache = SolveCache()

    failure_reason = None
    at_goal = check_goal(pos_hist[0], scenario.goals, goal_tol)
    limiter = threadpool_limits(limits=1)
    wall_start = time.perf_counter()
    try:
        k_t = 0
        while not at_goal and k_t < k_max:
            if config.mode == "sequential":
                results = _run_cluster(
                    ctx, cache, k_t, runtimes, predictions, list(range(n_agents))
                )
            else:
                results = run_clustered_step(
                    ctx, k_t, runtimes, predictions, partition, pool, n_groups, cache
                )
            by_agent = {step.agent_id: step for step in results}

            step_acc = np.empty((n_agents, 3))
            for i in range(n_agents):
                step = by_agent[i]
                runtimes[i] = step.runtime
                predictions[i] = step.positions
                step_acc[i] = step.applied
                if step.fallback and ctx.strategy == SOFT_ON_DEMAND:
                    failure_reason = "qp_unrecoverable"

            diagnostics.append(StepDiag(
                n_collision_rows=np.array([by_agent[i].diag["n_collision_rows"] for i in range(n_agents)]),
                eps_bound_used=np.array([by_agent[i].diag["eps_bound_used"] for i in range(n_agents)]),
                retries=np.array([by_agent[i].diag["retries"] for i in range(n_agents)]),
                solve_time=np.array([by_agent[i].diag["solve_time"] for i in range(n_agents)]),
                kkt_max=np.array([by_agent[i].diag["kkt_max"] for i in range(n_agents)]),
                fallbacks=np.array([by_agent[i].fallback for i in range(n_agents)]),
            ))
            pos_hist.append(np.array([rt.state.p for rt in runtimes]))
            vel_hist.append(np.array([rt.state.v for rt in runtimes]))
            acc_hist.append(step_acc)
            if failure_reason == "qp_unrecoverable":
                break
            k_t += 1
            at_goal = check_goal(pos_hist[-1], scenario.goals, goal_tol)
    finally:
        wall_time = time.perf_counter() - wall_start
        limiter.restore_original_limits()
        if pool is not None:
            pool.shutdown()

    p = np.transpose(np.array(pos_hist), (1, 0, 2))
    v = np.transpose(np.array(vel_hist), (1, 0, 2))
    a = (np.transpose(np.array(acc_hist), (1, 0, 2))
         if acc_hist else np.zeros((n_agents, 0, 3)))

    gamma = 1.0
    h_eff = h
    if failure_reason is None and not at_goal:
        failure_reason = "timeout"
    if at_goal and config.scale_to_limits:
        limit = float(min(np.min(scenario.phys.a_max), np.min(-scenario.phys.a_min)))
        p, v, a, h_eff, gamma = scale_trajectory(p, v, a, h, limit)

    interp = interpolate(p, v, a, h_eff, scenario.phys.ts)
    report = None
    min_dist = None
    if n_agents >= 2:
        report = check_collisions(interp.p, interp.t, scenario.phys, scenario.algo.eps_check)
        min_dist = report.min_distance
    success = bool(at_goal)
    if success and report is not None and not report.passed:
        success = False
        failure_reason = "collision_check_failed"

    return TransitionResult(
        success=success,
        failure_reason=None if success else failure_reason,
        t=np.arange(p.shape[1]) * h_eff,
        p=p, v=v, a=a,
        h_effective=h_eff,
        gamma=gamma,
        interpolated=interp,
        collision_report=report,
        min_scaled_distance=min_dist,
        diagnostics=diagnostics,
        wall_time=wall_time,
    )
