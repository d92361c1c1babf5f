"""Per-agent QP assembly: costs, physical limits, and collision constraints.

Two problem flavors are produced, both in the convention
``minimize 0.5 u' H u + f' u  subject to  A_in u <= b_in``:

* the plain problem over the 3K stacked inputs, with 12K inequality rows
  (workspace box through the prediction matrices, plus the input box);
* the augmented problem over 3K + n_c variables, where one bounded slack
  per colliding neighbor softens a linearized separation constraint
  (12K + 3 n_c rows in total).

The hard variants used for strategy comparisons reuse the same collision
rows without slack variables.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGeometryError
from .model import AlgoParams, PhysParams, PredictionMatrices

_XI_TINY = 1e-9


@dataclass(frozen=True)
class CollisionEvent:
    """First predicted collision with one neighbor.

    ``k_c`` is 1-based within the horizon; ``xi`` is the scaled distance at
    ``k_c``; both positions come from the previous planning cycle.
    """

    neighbor_id: int
    k_c: int
    xi: float
    neighbor_pos: np.ndarray
    own_pos: np.ndarray


@dataclass(frozen=True)
class NeighborSet:
    """All neighbors inside the interaction radius at the first collision step."""

    k_c: int
    members: tuple[CollisionEvent, ...]

    @property
    def n_c(self) -> int:
        return len(self.members)


@dataclass(frozen=True)
class QpProblem:
    """Dense QP data plus row labels for diagnostics and tests.

    ``row_labels`` maps each constraint family to its slice of rows:
    position bounds, input bounds, collision rows, relaxation bounds.
    """

    H: np.ndarray
    f: np.ndarray
    A_in: np.ndarray
    b_in: np.ndarray
    n_relax: int
    row_labels: dict

    @property
    def n_vars(self) -> int:
        return self.f.shape[0]

    @property
    def n_rows(self) -> int:
        return self.b_in.shape[0]


def scaled_distance(diff, phys: PhysParams) -> np.ndarray:
    """Ellipsoid-scaled n-norm ||Theta^-1 d||_n over the last axis."""
    diff = np.asarray(diff, dtype=float)
    scaled = diff / phys.theta_diag
    n = phys.n_degree
    if n == 2:
        return np.sqrt(np.sum(scaled * scaled, axis=-1))
    return np.sum(scaled**n, axis=-1) ** (1.0 / n)


def detect_first_collision(
    own_prediction: np.ndarray,
    all_predictions: np.ndarray,
    self_id: int,
    phys: PhysParams,
    algo: AlgoParams,
) -> NeighborSet | None:
    """Scan the shared predictions for the first step violating separation.

    Returns the neighbor set at the earliest violating horizon step, or None
    when every step keeps every pair at or above r_min.  Membership is the
    wider radius ``neighbor_radius_factor * r_min`` evaluated at that step.
    """
    own = np.asarray(own_prediction, dtype=float)
    others = np.asarray(all_predictions, dtype=float)
    xi = scaled_distance(own[None, :, :] - others, phys)  # (N, K)
    xi[self_id, :] = np.inf
    violating = xi < phys.r_min
    steps_hit = np.any(violating, axis=0)
    if not np.any(steps_hit):
        return None
    k_idx = int(np.argmax(steps_hit))  # first violating step, 0-based
    radius = algo.neighbor_radius_factor * phys.r_min
    members = []
    for j in np.flatnonzero(xi[:, k_idx] < radius):
        members.append(
            CollisionEvent(
                neighbor_id=int(j),
                k_c=k_idx + 1,
                xi=float(xi[j, k_idx]),
                neighbor_pos=others[j, k_idx].copy(),
                own_pos=own[k_idx].copy(),
            )
        )
    return NeighborSet(k_c=k_idx + 1, members=tuple(members))


def linearize_collision_constraint(
    event: CollisionEvent, horizon: int, phys: PhysParams
) -> tuple[np.ndarray, float, float]:
    """First-order expansion of the separation constraint about the event.

    Returns ``(mu, eps_coeff, rhs)`` encoding
    ``mu' Lambda U - eps_coeff * eps >= rhs - mu' A0 X0``:
    ``mu`` places the constraint normal at horizon block k_c, ``eps_coeff``
    multiplies the relaxation slack, and ``rhs`` is the expansion constant.
    The expansion of ``||Theta^-1 (p - p_j)||_n >= r_min + eps`` is scaled
    through by xi^(n-1), so the inequality is tight at the expansion point
    exactly when xi = r_min (with eps = 0).
    """
    if event.xi < _XI_TINY:
        raise DegenerateGeometryError(
            f"coincident predictions with neighbor {event.neighbor_id} at step {event.k_c}"
        )
    n = phys.n_degree
    diff = event.own_pos - event.neighbor_pos
    nu = (diff ** (n - 1)) / phys.theta_diag**n
    xi_pow = event.xi ** (n - 1)
    rhs = phys.r_min * xi_pow - event.xi**n + float(nu @ event.own_pos)
    mu = np.zeros(3 * horizon)
    mu[3 * (event.k_c - 1):3 * event.k_c] = nu
    return mu, xi_pow, rhs


def error_weight_blocks(algo: AlgoParams) -> np.ndarray:
    """Block-diagonal Q~: zero except Q on the last kappa horizon blocks."""
    K = algo.horizon
    q_tilde = np.zeros((3 * K, 3 * K))
    for k in range(K - algo.kappa, K):
        q_tilde[3 * k:3 * k + 3, 3 * k:3 * k + 3] = algo.q_weight
    return q_tilde


def cost_terms(mats: PredictionMatrices, algo: AlgoParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Input-space Hessian and the two gradient maps, reusable across steps.

    Returns ``(H_u, G_goal, G_smooth)`` with
    ``H_u = 2 (Lambda' Q~ Lambda + R~ + Delta' S~ Delta)``,
    ``G_goal = 2 Lambda' Q~`` and ``G_smooth = 2 Delta' S~`` so that
    ``f = -G_goal (P_d - A0 X0) - G_smooth U_prev``.
    """
    K = algo.horizon
    q_tilde = error_weight_blocks(algo)
    r_tilde = np.kron(np.eye(K), algo.r_weight)
    s_tilde = np.kron(np.eye(K), algo.s_weight)
    lam_q = mats.lam.T @ q_tilde
    delta_s = mats.delta.T @ s_tilde
    H_u = 2.0 * (lam_q @ mats.lam + r_tilde + delta_s @ mats.delta)
    H_u = 0.5 * (H_u + H_u.T)
    return H_u, 2.0 * lam_q, 2.0 * delta_s


def stacked_goal(p_d, horizon: int) -> np.ndarray:
    return np.tile(np.asarray(p_d, dtype=float), horizon)


def previous_input_vector(a_prev, horizon: int) -> np.ndarray:
    """U_prev: the previously applied input in block 0, zeros elsewhere."""
    u_star = np.zeros(3 * horizon)
    u_star[:3] = np.asarray(a_prev, dtype=float)
    return u_star


def build_cost(
    x0: np.ndarray,
    p_d: np.ndarray,
    a_prev: np.ndarray,
    mats: PredictionMatrices,
    algo: AlgoParams,
    n_relax: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Quadratic cost (H, f) for the plain (n_relax=0) or augmented problem.

    Constant terms of the goal-error and smoothness costs are dropped; the
    relaxation block carries the quadratic ``zeta`` penalty on H's diagonal
    and the linear ``-rho_lin`` pull toward zero slack in f.
    """
    K = algo.horizon
    H_u, g_goal, g_smooth = cost_terms(mats, algo)
    p_free = mats.a0 @ np.asarray(x0, dtype=float)
    f_u = -g_goal @ (stacked_goal(p_d, K) - p_free) - g_smooth @ previous_input_vector(a_prev, K)
    if n_relax == 0:
        return H_u, f_u
    d = 3 * K + n_relax
    H = np.zeros((d, d))
    H[:3 * K, :3 * K] = H_u
    H[3 * K:, 3 * K:] = 2.0 * algo.zeta_quad * np.eye(n_relax)
    f = np.concatenate([f_u, -algo.rho_lin * np.ones(n_relax)])
    return H, f


def physical_limit_rows(mats: PredictionMatrices, phys: PhysParams) -> np.ndarray:
    """The constant 12K x 3K coefficient block for workspace and input boxes."""
    K = mats.horizon
    eye = np.eye(3 * K)
    return np.vstack([mats.lam, -mats.lam, eye, -eye])


def physical_limit_bounds(x0: np.ndarray, mats: PredictionMatrices, phys: PhysParams) -> np.ndarray:
    """State-dependent right-hand side matching `physical_limit_rows`."""
    K = mats.horizon
    p_free = mats.a0 @ np.asarray(x0, dtype=float)
    p_max = np.tile(phys.p_max, K)
    p_min = np.tile(phys.p_min, K)
    u_max = np.tile(phys.a_max, K)
    u_min = np.tile(phys.a_min, K)
    return np.concatenate([p_max - p_free, p_free - p_min, u_max, -u_min])


def _base_labels(K: int) -> dict:
    return {
        "pos_upper": slice(0, 3 * K),
        "pos_lower": slice(3 * K, 6 * K),
        "input_upper": slice(6 * K, 9 * K),
        "input_lower": slice(9 * K, 12 * K),
    }


def build_plain_qp(
    x0: np.ndarray,
    p_d: np.ndarray,
    a_prev: np.ndarray,
    mats: PredictionMatrices,
    phys: PhysParams,
    algo: AlgoParams,
) -> QpProblem:
    """Collision-free problem: 3K variables, 12K physical-limit rows."""
    H, f = build_cost(x0, p_d, a_prev, mats, algo)
    A_in = physical_limit_rows(mats, phys)
    b_in = physical_limit_bounds(x0, mats, phys)
    return QpProblem(H=H, f=f, A_in=A_in, b_in=b_in, n_relax=0,
                     row_labels=_base_labels(mats.horizon))


def collision_row(
    event: CollisionEvent,
    x0: np.ndarray,
    mats: PredictionMatrices,
    phys: PhysParams,
) -> tuple[np.ndarray, float, float]:
    """One <=-form collision row in input space.

    Returns ``(coeffs, eps_coeff, bound)`` for
    ``coeffs @ U + eps_coeff * eps <= bound``.
    """
    mu, eps_coeff, rhs = linearize_collision_constraint(event, mats.horizon, phys)
    mu_lam = mu @ mats.lam
    bound = float(mu @ (mats.a0 @ np.asarray(x0, dtype=float))) - rhs
    return -mu_lam, eps_coeff, bound


def build_augmented_qp(
    x0: np.ndarray,
    p_d: np.ndarray,
    a_prev: np.ndarray,
    mats: PredictionMatrices,
    phys: PhysParams,
    algo: AlgoParams,
    neighbors: NeighborSet,
    eps_max: float,
) -> QpProblem:
    """Soft-constrained problem with one bounded slack per colliding neighbor.

    Variables are (U, E) with E in [-eps_max, 0]^n_c; rows stack the
    physical limits (zero-padded over E), the linearized collision rows,
    and the two slack bounds per neighbor: 12K + 3 n_c rows in total.
    """
    K = mats.horizon
    n_c = neighbors.n_c
    H, f = build_cost(x0, p_d, a_prev, mats, algo, n_relax=n_c)
    d = 3 * K + n_c

    A_phys = np.hstack([physical_limit_rows(mats, phys), np.zeros((12 * K, n_c))])
    b_phys = physical_limit_bounds(x0, mats, phys)

    A_coll = np.zeros((n_c, d))
    b_coll = np.zeros(n_c)
    for idx, event in enumerate(neighbors.members):
        coeffs, eps_coeff, bound = collision_row(event, x0, mats, phys)
        A_coll[idx, :3 * K] = coeffs
        A_coll[idx, 3 * K + idx] = eps_coeff
        b_coll[idx] = bound

    # -eps_max <= eps <= 0, one pair of rows per slack.
    A_rel = np.zeros((2 * n_c, d))
    b_rel = np.zeros(2 * n_c)
    for idx in range(n_c):
        A_rel[idx, 3 * K + idx] = 1.0
        A_rel[n_c + idx, 3 * K + idx] = -1.0
        b_rel[n_c + idx] = eps_max

    labels = _base_labels(K)
    labels["collision"] = slice(12 * K, 12 * K + n_c)
    labels["relax_upper"] = slice(12 * K + n_c, 12 * K + 2 * n_c)
    labels["relax_lower"] = slice(12 * K + 2 * n_c, 12 * K + 3 * n_c)
    return QpProblem(
        H=H,
        f=f,
        A_in=np.vstack([A_phys, A_coll, A_rel]),
        b_in=np.concatenate([b_phys, b_coll, b_rel]),
        n_relax=n_c,
        row_labels=labels,
    )


def build_hard_qp(
    x0: np.ndarray,
    p_d: np.ndarray,
    a_prev: np.ndarray,
    mats: PredictionMatrices,
    phys: PhysParams,
    algo: AlgoParams,
    events: tuple[CollisionEvent, ...],
) -> QpProblem:
    """Collision rows without relaxation slack, for the hard strategy variants."""
    K = mats.horizon
    H, f = build_cost(x0, p_d, a_prev, mats, algo)
    A_coll = np.zeros((len(events), 3 * K))
    b_coll = np.zeros(len(events))
    for idx, event in enumerate(events):
        coeffs, _, bound = collision_row(event, x0, mats, phys)
        A_coll[idx] = coeffs
        b_coll[idx] = bound
    labels = _base_labels(K)
    labels["collision"] = slice(12 * K, 12 * K + len(events))
    return QpProblem(
        H=H,
        f=f,
        A_in=np.vstack([physical_limit_rows(mats, phys), A_coll]),
        b_in=np.concatenate([physical_limit_bounds(x0, mats, phys), b_coll]),
        n_relax=0,
        row_labels=labels,
    )
