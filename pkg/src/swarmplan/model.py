"""Agent model, static parameters, and prediction-matrix builders.

Agents are unit masses with discrete double-integrator dynamics in R^3,
accelerations as inputs.  The planner works on stacked position predictions
over a horizon of K steps: ``P = A0 @ X0 + Lambda @ U`` where ``X0`` is the
current (position, velocity) state and ``U`` the stacked input sequence.

A prediction horizon is represented throughout the package as a ``(K, 3)``
float array of predicted positions for steps 1..K.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ModelDomainError


def _vec3(value, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if np.isscalar(value) or arr.ndim == 0:
        arr = np.full(3, float(arr))
    if arr.shape != (3,):
        raise ConfigError(f"{name} must be a 3-vector, got shape {arr.shape}")
    arr = arr.copy()
    arr.flags.writeable = False
    return arr


def _weight3(value, name: str) -> np.ndarray:
    """Accept a scalar (w * I) or a full 3x3 SPD matrix."""
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        arr = float(arr) * np.eye(3)
    if arr.shape != (3, 3):
        raise ConfigError(f"{name} must be a scalar or 3x3 matrix")
    if not np.allclose(arr, arr.T, atol=1e-12):
        raise ConfigError(f"{name} must be symmetric")
    if np.min(np.linalg.eigvalsh(arr)) <= 0:
        raise ConfigError(f"{name} must be positive definite")
    arr = arr.copy()
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class PhysParams:
    """Physical parameters: time steps, actuation/workspace limits, collision ellipsoid.

    The collision boundary between two agents is the scaled n-norm
    ``||Theta^-1 (p_i - p_j)||_n >= r_min`` with ``Theta = diag(1, 1, c)``,
    so the required vertical separation is ``c * r_min``.
    """

    h: float
    ts: float
    a_min: np.ndarray
    a_max: np.ndarray
    p_min: np.ndarray
    p_max: np.ndarray
    r_min: float
    c_ellipsoid: float = 2.0
    n_degree: int = 2

    def __post_init__(self):
        object.__setattr__(self, "a_min", _vec3(self.a_min, "a_min"))
        object.__setattr__(self, "a_max", _vec3(self.a_max, "a_max"))
        object.__setattr__(self, "p_min", _vec3(self.p_min, "p_min"))
        object.__setattr__(self, "p_max", _vec3(self.p_max, "p_max"))
        if not self.h > 0:
            raise ConfigError("h must be positive")
        if not (0 < self.ts <= self.h):
            raise ConfigError("ts must satisfy 0 < ts <= h")
        ratio = self.h / self.ts
        if abs(ratio - round(ratio)) > 1e-9:
            raise ConfigError("ts must divide h")
        if not np.all(self.a_min < self.a_max):
            raise ConfigError("a_min must be componentwise below a_max")
        if not np.all(self.p_min < self.p_max):
            raise ConfigError("p_min must be componentwise below p_max")
        if not self.r_min > 0:
            raise ConfigError("r_min must be positive")
        if self.c_ellipsoid < 1:
            raise ConfigError("c_ellipsoid must be >= 1")
        if self.n_degree < 2 or self.n_degree % 2 != 0:
            raise ConfigError("n_degree must be an even integer >= 2")

    @property
    def theta_diag(self) -> np.ndarray:
        """Diagonal of the ellipsoid scaling matrix Theta."""
        return np.array([1.0, 1.0, self.c_ellipsoid])

    @property
    def substeps(self) -> int:
        """Number of interpolation sub-steps per coarse step."""
        return int(round(self.h / self.ts))


@dataclass(frozen=True)
class AlgoParams:
    """Planner parameters: horizon, weights, relaxation bounds, termination."""

    horizon: int = 15
    kappa: int = 1
    eps_max: float = 0.05
    eps_check: float = 0.05
    neighbor_radius_factor: float = 3.0
    t_max: float = 20.0
    goal_tol: float = 0.10
    q_weight: np.ndarray = field(default=100.0)
    r_weight: np.ndarray = field(default=1.0)
    s_weight: np.ndarray = field(default=10.0)
    rho_lin: float = 1.0e3
    zeta_quad: float = 1.0e2

    def __post_init__(self):
        object.__setattr__(self, "q_weight", _weight3(self.q_weight, "q_weight"))
        object.__setattr__(self, "r_weight", _weight3(self.r_weight, "r_weight"))
        object.__setattr__(self, "s_weight", _weight3(self.s_weight, "s_weight"))
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if not (1 <= self.kappa <= self.horizon):
            raise ConfigError("kappa must satisfy 1 <= kappa <= horizon")
        if self.eps_max < 0:
            raise ConfigError("eps_max must be >= 0")
        if self.eps_check < self.eps_max:
            raise ConfigError("eps_check must be >= eps_max")
        if self.neighbor_radius_factor < 1:
            raise ConfigError("neighbor_radius_factor must be >= 1")
        if self.t_max <= 0:
            raise ConfigError("t_max must be positive")
        if self.goal_tol <= 0:
            raise ConfigError("goal_tol must be positive")
        if self.rho_lin <= 0 or self.zeta_quad <= 0:
            raise ConfigError("rho_lin and zeta_quad must be positive")

    def max_steps(self, h: float) -> int:
        """Step budget for one transition: ceil(t_max / h)."""
        k_max = math.ceil(self.t_max / h)
        if k_max < 1:
            raise ConfigError("t_max must allow at least one step")
        return k_max


@dataclass(frozen=True)
class AgentState:
    """Position, velocity, and the input applied at the previous step."""

    p: np.ndarray
    v: np.ndarray
    a_prev: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "p", _vec3(self.p, "p"))
        object.__setattr__(self, "v", _vec3(self.v, "v"))
        object.__setattr__(self, "a_prev", _vec3(self.a_prev, "a_prev"))
        for name in ("p", "v", "a_prev"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ModelDomainError(f"AgentState.{name} must be finite")

    @classmethod
    def at_rest(cls, p) -> "AgentState":
        return cls(p=p, v=np.zeros(3), a_prev=np.zeros(3))

    @property
    def x(self) -> np.ndarray:
        """Stacked (position, velocity) state of dimension 6."""
        return np.concatenate([self.p, self.v])


@dataclass(frozen=True)
class PredictionMatrices:
    """Dense matrices mapping input sequences to position predictions.

    ``lam`` is block-lower-triangular with block (r, c) equal to
    ``Psi A^(r-c) B``; ``a0`` propagates the initial state; ``delta`` is the
    first-difference operator on stacked input sequences.
    """

    horizon: int
    h: float
    lam: np.ndarray
    a0: np.ndarray
    delta: np.ndarray


def step_dynamics(state: AgentState, a, h: float) -> AgentState:
    """Advance one step of the discrete double integrator."""
    a = np.asarray(a, dtype=float)
    if a.shape != (3,):
        raise ModelDomainError(f"input must be a 3-vector, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ModelDomainError("input acceleration must be finite")
    if not (np.isfinite(h) and h > 0):
        raise ModelDomainError("h must be positive and finite")
    p_next = state.p + h * state.v + 0.5 * h * h * a
    v_next = state.v + h * a
    return AgentState(p=p_next, v=v_next, a_prev=a)


def rollout(state: AgentState, inputs: np.ndarray, h: float) -> tuple[np.ndarray, np.ndarray]:
    """Iterate the dynamics over an input sequence.

    Returns ``(positions, velocities)`` of shape (K, 3) for steps 1..K.
    """
    inputs = np.asarray(inputs, dtype=float)
    K = inputs.shape[0]
    positions = np.empty((K, 3))
    velocities = np.empty((K, 3))
    p, v = state.p.copy(), state.v.copy()
    for k in range(K):
        a = inputs[k]
        p = p + h * v + 0.5 * h * h * a
        v = v + h * a
        positions[k] = p
        velocities[k] = v
    return positions, velocities


def build_prediction_matrices(horizon: int, h: float) -> PredictionMatrices:
    """Build Lambda, A0, and Delta for a horizon of `horizon` steps."""
    if horizon < 1:
        raise ConfigError("horizon must be >= 1")
    if not h > 0:
        raise ConfigError("h must be positive")
    K = horizon
    eye3 = np.eye(3)
    A = np.block([[eye3, h * eye3], [np.zeros((3, 3)), eye3]])
    B = np.vstack([0.5 * h * h * eye3, h * eye3])
    psi = np.hstack([eye3, np.zeros((3, 3))])

    # Psi A^j B for j = 0..K-1 and Psi A^k for k = 1..K, via accumulated powers.
    a_pow = np.eye(6)
    psi_ajb = []
    a0_blocks = []
    for _ in range(K):
        psi_ajb.append(psi @ a_pow @ B)
        a_pow = A @ a_pow
        a0_blocks.append(psi @ a_pow)

    lam = np.zeros((3 * K, 3 * K))
    for r in range(K):
        for c in range(r + 1):
            lam[3 * r:3 * r + 3, 3 * c:3 * c + 3] = psi_ajb[r - c]
    a0 = np.vstack(a0_blocks)

    delta = np.eye(3 * K)
    for k in range(1, K):
        delta[3 * k:3 * k + 3, 3 * (k - 1):3 * k] = -eye3

    for m in (lam, a0, delta):
        m.flags.writeable = False
    return PredictionMatrices(horizon=K, h=h, lam=lam, a0=a0, delta=delta)


def line_prediction(p0, p_f, horizon: int, h: float, t_max: float) -> np.ndarray:
    """Seed prediction: K samples along the start-goal segment.

    The segment is traversed at the constant speed that covers it in t_max;
    samples clamp at the goal once reached.
    """
    p0 = np.asarray(p0, dtype=float)
    p_f = np.asarray(p_f, dtype=float)
    seg = p_f - p0
    length = float(np.linalg.norm(seg))
    steps = np.arange(1, horizon + 1) * h
    if length < 1e-12:
        return np.tile(p0, (horizon, 1))
    direction = seg / length
    dist = np.minimum(steps * (length / t_max), length)
    return p0[None, :] + dist[:, None] * direction[None, :]


def init_all_predictions(scenario) -> tuple[np.ndarray, list[AgentState]]:
    """Line predictions and at-rest initial states for every agent.

    Returns an (N, K, 3) prediction array and the list of initial states.
    """
    K = scenario.algo.horizon
    h = scenario.phys.h
    t_max = scenario.algo.t_max
    preds = np.empty((scenario.n_agents, K, 3))
    states = []
    for i in range(scenario.n_agents):
        preds[i] = line_prediction(scenario.starts[i], scenario.goals[i], K, h, t_max)
        states.append(AgentState.at_rest(scenario.starts[i]))
    return preds, states
