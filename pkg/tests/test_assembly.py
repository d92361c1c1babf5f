import numpy as np
import pytest

from swarmplan.assembly import (
    CollisionEvent,
    NeighborSet,
    build_augmented_qp,
    build_cost,
    build_hard_qp,
    build_plain_qp,
    detect_first_collision,
    error_weight_blocks,
    linearize_collision_constraint,
    scaled_distance,
)
from swarmplan.errors import DegenerateGeometryError
from swarmplan.model import (
    AgentState,
    AlgoParams,
    PhysParams,
    build_prediction_matrices,
    rollout,
)

PHYS = PhysParams(h=0.2, ts=0.01, a_min=-1, a_max=1,
                  p_min=(-5, -5, -5), p_max=(5, 5, 5),
                  r_min=0.35, c_ellipsoid=2.0, n_degree=2)
ALGO = AlgoParams(horizon=5, kappa=1)


def const_prediction(p, K=5):
    return np.tile(np.asarray(p, dtype=float), (K, 1))


class TestScaledDistance:
    def test_ellipsoid_norm(self):
        xi = scaled_distance(np.array([0.2, 0.0, 0.4]), PHYS)
        assert np.isclose(xi, np.hypot(0.2, 0.2))

    def test_vectorized(self):
        diffs = np.array([[1.0, 0, 0], [0, 0, 2.0]])
        assert np.allclose(scaled_distance(diffs, PHYS), [1.0, 1.0])


class TestDetectFirstCollision:
    def test_immediate_collision(self):
        preds = np.stack([const_prediction((0, 0, 0)), const_prediction((0.2, 0, 0.4))])
        ns = detect_first_collision(preds[0], preds, 0, PHYS, ALGO)
        assert ns is not None
        assert ns.k_c == 1
        assert len(ns.members) == 1
        assert ns.members[0].neighbor_id == 1
        assert np.isclose(ns.members[0].xi, 0.282842712474619)

    def test_far_apart_none(self):
        preds = np.stack([const_prediction((0, 0, 0)), const_prediction((10, 0, 0))])
        assert detect_first_collision(preds[0], preds, 0, PHYS, ALGO) is None

    def test_first_step_and_membership(self):
        # neighbor 1 violates at k=4, neighbor 2 at k=2; neighbor set is
        # evaluated at k_c=2 with the wider radius.
        K = 5
        own = const_prediction((0, 0, 0), K)
        n1 = const_prediction((5, 0, 0), K)
        n1[3] = [0.2, 0, 0]      # violates at k=4 (1-based)
        n2 = const_prediction((5, 0, 0), K)
        n2[1] = [0.0, 0.3, 0]    # violates at k=2
        preds = np.stack([own, n1, n2])
        ns = detect_first_collision(preds[0], preds, 0, PHYS, ALGO)
        assert ns.k_c == 2
        ids = [e.neighbor_id for e in ns.members]
        assert ids == [2]  # neighbor 1 sits 5 m away at k=2, outside 3*r_min

        # move neighbor 1 inside the interaction radius at k=2: both included
        n1[1] = [0.9, 0, 0]
        preds = np.stack([own, n1, n2])
        ns = detect_first_collision(preds[0], preds, 0, PHYS, ALGO)
        assert ns.k_c == 2
        assert [e.neighbor_id for e in ns.members] == [1, 2]
        assert all(e.xi < ALGO.neighbor_radius_factor * PHYS.r_min for e in ns.members)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            n, K = 5, 6
            preds = rng.uniform(-0.6, 0.6, size=(n, K, 3))
            ns = detect_first_collision(preds[0], preds, 0, PHYS, ALGO)
            # brute force double loop
            first = None
            for k in range(K):
                for j in range(1, n):
                    if scaled_distance(preds[0, k] - preds[j, k], PHYS) < PHYS.r_min:
                        first = k
                        break
                if first is not None:
                    break
            if first is None:
                assert ns is None
            else:
                assert ns.k_c == first + 1
                expect = [j for j in range(1, n)
                          if scaled_distance(preds[0, first] - preds[j, first], PHYS)
                          < ALGO.neighbor_radius_factor * PHYS.r_min]
                assert [e.neighbor_id for e in ns.members] == expect


class TestLinearization:
    def event(self, own=(0.2, 0.0, 0.4), neighbor=(0.0, 0.0, 0.0), k_c=1):
        own = np.asarray(own, dtype=float)
        neighbor = np.asarray(neighbor, dtype=float)
        xi = float(scaled_distance(own - neighbor, PHYS))
        return CollisionEvent(neighbor_id=1, k_c=k_c, xi=xi,
                              neighbor_pos=neighbor, own_pos=own)

    def test_normal_direction(self):
        mu, eps_coeff, _ = linearize_collision_constraint(self.event(), 5, PHYS)
        assert np.allclose(mu[:3], [0.2, 0.0, 0.1])
        assert np.isclose(eps_coeff, np.hypot(0.2, 0.2))

    def test_mu_placement(self):
        mu, _, _ = linearize_collision_constraint(self.event(k_c=3), 5, PHYS)
        nz = np.flatnonzero(mu)
        assert np.all(nz >= 6) and np.all(nz < 9)

    def test_tight_exactly_at_r_min(self):
        # at the expansion point with eps = 0 the inequality holds with
        # equality iff xi == r_min
        for direction in (np.array([1.0, 0, 0]), np.array([0.6, 0.8, 0]),
                          np.array([0, 0, 1.0])):
            own = PHYS.r_min * direction * PHYS.theta_diag
            ev = self.event(own=own)
            assert np.isclose(ev.xi, PHYS.r_min)
            mu, _, rhs = linearize_collision_constraint(ev, 5, PHYS)
            lhs = float(mu[:3] @ ev.own_pos)
            assert np.isclose(lhs, rhs, atol=1e-12)
        # strictly inside: violated at the expansion point
        ev = self.event(own=(0.2, 0, 0))
        mu, _, rhs = linearize_collision_constraint(ev, 5, PHYS)
        assert float(mu[:3] @ ev.own_pos) < rhs

    def test_moving_along_normal_increases_lhs(self):
        ev = self.event()
        mu, _, _ = linearize_collision_constraint(ev, 5, PHYS)
        nu = mu[:3]
        base = nu @ ev.own_pos
        assert nu @ (ev.own_pos + 0.01 * nu) > base

    def test_degenerate_rejected(self):
        with pytest.raises(DegenerateGeometryError):
            linearize_collision_constraint(self.event(own=(0, 0, 0)), 5, PHYS)

    def test_quartic_degree_tightness(self):
        phys4 = PhysParams(h=0.2, ts=0.01, a_min=-1, a_max=1,
                           p_min=(-5, -5, -5), p_max=(5, 5, 5),
                           r_min=0.35, c_ellipsoid=2.0, n_degree=4)
        direction = np.array([0.6, 0.8, 0.3])
        direction /= (np.sum((direction / phys4.theta_diag) ** 4)) ** 0.25
        own = phys4.r_min * direction
        xi = float(scaled_distance(own, phys4))
        assert np.isclose(xi, phys4.r_min)
        ev = CollisionEvent(neighbor_id=1, k_c=1, xi=xi,
                            neighbor_pos=np.zeros(3), own_pos=own)
        mu, eps_coeff, rhs = linearize_collision_constraint(ev, 3, phys4)
        assert np.isclose(float(mu[:3] @ own), rhs, atol=1e-12)
        assert np.isclose(eps_coeff, xi ** 3)


def cost_oracle(U, state, p_d, algo, h):
    """Scalar-loop evaluation of the three quadratic cost sums."""
    K = algo.horizon
    pos, _ = rollout(state, U, h)
    j_err = 0.0
    for k in range(K - algo.kappa, K):
        e = pos[k] - p_d
        j_err += e @ algo.q_weight @ e
    j_u = sum(u @ algo.r_weight @ u for u in U)
    prev = state.a_prev
    j_delta = 0.0
    for k in range(K):
        d = U[k] - prev
        j_delta += d @ algo.s_weight @ d
        prev = U[k]
    return j_err + j_u + j_delta


class TestCost:
    def test_kappa_blocks(self):
        q_tilde = error_weight_blocks(AlgoParams(horizon=4, kappa=1, q_weight=7.0))
        assert np.allclose(q_tilde[:9, :9], 0.0)
        assert np.allclose(q_tilde[9:, 9:], 7.0 * np.eye(3))
        q2 = error_weight_blocks(AlgoParams(horizon=4, kappa=2, q_weight=7.0))
        assert np.allclose(q2[:6, :6], 0.0)
        assert np.allclose(q2[6:, 6:], 7.0 * np.eye(6))

    def test_quadratic_form_matches_loop_oracle(self):
        rng = np.random.default_rng(3)
        for kappa in (1, 2):
            algo = AlgoParams(horizon=5, kappa=kappa, q_weight=13.0, r_weight=0.7,
                              s_weight=2.5)
            mats = build_prediction_matrices(algo.horizon, PHYS.h)
            state = AgentState(p=rng.normal(size=3), v=rng.normal(size=3),
                               a_prev=rng.normal(size=3))
            p_d = rng.normal(size=3)
            H, f = build_cost(state.x, p_d, state.a_prev, mats, algo)
            # constants dropped from (H, f): add them back for the comparison
            p_free = mats.a0 @ state.x
            q_tilde = error_weight_blocks(algo)
            goal_vec = np.tile(p_d, algo.horizon)
            const = (p_free - goal_vec) @ q_tilde @ (p_free - goal_vec)
            const += state.a_prev @ algo.s_weight @ state.a_prev
            for _ in range(5):
                U = rng.normal(size=(algo.horizon, 3))
                u = U.ravel()
                value = 0.5 * u @ H @ u + f @ u + const
                assert np.isclose(value, cost_oracle(U, state, p_d, algo, PHYS.h),
                                  rtol=1e-10, atol=1e-9)

    def test_stationary_at_goal(self):
        algo = AlgoParams(horizon=5)
        mats = build_prediction_matrices(algo.horizon, PHYS.h)
        p_goal = np.array([1.0, 2.0, 0.5])
        x0 = np.concatenate([p_goal, np.zeros(3)])
        H, f = build_cost(x0, p_goal, np.zeros(3), mats, algo)
        # U = 0 solves the unconstrained problem: gradient is zero
        assert np.allclose(f, 0.0, atol=1e-12)

    def test_relaxation_padding(self):
        algo = AlgoParams(horizon=4)
        mats = build_prediction_matrices(algo.horizon, PHYS.h)
        H, f = build_cost(np.zeros(6), np.ones(3), np.zeros(3), mats, algo, n_relax=2)
        d = 3 * 4 + 2
        assert H.shape == (d, d)
        assert np.allclose(H[-2:, -2:], 2.0 * algo.zeta_quad * np.eye(2))
        assert np.allclose(H[:12, -2:], 0.0)
        assert np.allclose(f[-2:], -algo.rho_lin)


def random_problem_inputs(rng, K=5):
    algo = AlgoParams(horizon=K)
    mats = build_prediction_matrices(K, PHYS.h)
    state = AgentState(p=rng.uniform(-1, 1, 3), v=rng.uniform(-0.5, 0.5, 3),
                       a_prev=rng.uniform(-0.5, 0.5, 3))
    p_d = rng.uniform(-1, 1, 3)
    return algo, mats, state, p_d


class TestQpShapes:
    def test_plain_dimensions(self):
        algo = AlgoParams(horizon=15)
        mats = build_prediction_matrices(15, PHYS.h)
        qp = build_plain_qp(np.zeros(6), np.ones(3), np.zeros(3), mats, PHYS, algo)
        assert qp.A_in.shape == (180, 45)
        assert qp.H.shape == (45, 45)
        assert qp.row_labels["input_lower"] == slice(135, 180)

    def test_augmented_dimensions(self):
        algo = AlgoParams(horizon=15)
        mats = build_prediction_matrices(15, PHYS.h)
        members = tuple(
            CollisionEvent(neighbor_id=j, k_c=2, xi=0.3,
                           neighbor_pos=np.array([0.3 * j, 0.1, 0.0]),
                           own_pos=np.zeros(3))
            for j in (1, 2)
        )
        ns = NeighborSet(k_c=2, members=members)
        qp = build_augmented_qp(np.zeros(6), np.ones(3), np.zeros(3), mats, PHYS,
                                algo, ns, eps_max=0.05)
        assert qp.A_in.shape == (186, 47)
        assert qp.n_relax == 2
        assert qp.row_labels["collision"] == slice(180, 182)
        assert qp.row_labels["relax_lower"] == slice(184, 186)
        # physical rows are zero-padded over the relaxation block
        assert np.allclose(qp.A_in[:180, 45:], 0.0)

    def test_feasible_interior_point(self):
        rng = np.random.default_rng(5)
        algo, mats, state, p_d = random_problem_inputs(rng)
        qp = build_plain_qp(state.x, p_d, state.a_prev, mats, PHYS, algo)
        assert np.all(qp.A_in @ np.zeros(qp.n_vars) <= qp.b_in + 1e-12)

    def test_h_positive_semidefinite(self):
        rng = np.random.default_rng(9)
        algo, mats, state, p_d = random_problem_inputs(rng)
        H, _ = build_cost(state.x, p_d, state.a_prev, mats, algo, n_relax=3)
        assert np.allclose(H, H.T, atol=1e-12)
        assert np.linalg.eigvalsh(H).min() >= -1e-9


class TestConstraintRowOracle:
    def test_rows_match_direct_inequalities(self):
        rng = np.random.default_rng(21)
        algo, mats, state, p_d = random_problem_inputs(rng)
        K = algo.horizon
        neighbor = rng.uniform(-0.5, 0.5, 3)
        own_prev = neighbor + np.array([0.2, 0.05, 0.1])
        xi = float(scaled_distance(own_prev - neighbor, PHYS))
        ns = NeighborSet(k_c=3, members=(
            CollisionEvent(neighbor_id=1, k_c=3, xi=xi, neighbor_pos=neighbor,
                           own_pos=own_prev),
        ))
        qp = build_augmented_qp(state.x, p_d, state.a_prev, mats, PHYS, algo,
                                ns, eps_max=0.05)
        U = rng.uniform(-1, 1, size=(K, 3))
        eps = np.array([-0.02])
        z = np.concatenate([U.ravel(), eps])
        vals = qp.A_in @ z - qp.b_in
        pos, _ = rollout(state, U, PHYS.h)

        # position box rows (Eq. of the workspace limits)
        for k in range(K):
            for c in range(3):
                assert abs(vals[3 * k + c] - (pos[k, c] - PHYS.p_max[c])) < 1e-10
                assert abs(vals[3 * K + 3 * k + c] - (PHYS.p_min[c] - pos[k, c])) < 1e-10
                assert abs(vals[6 * K + 3 * k + c] - (U[k, c] - PHYS.a_max[c])) < 1e-10
                assert abs(vals[9 * K + 3 * k + c] - (PHYS.a_min[c] - U[k, c])) < 1e-10

        # collision row: mu' P - eps*xi >= rho  <=>  -(nu @ p_kc) + eps*xi + rho <= 0
        n = PHYS.n_degree
        nu = (own_prev - neighbor) ** (n - 1) / PHYS.theta_diag ** n
        rho = PHYS.r_min * xi ** (n - 1) - xi ** n + nu @ own_prev
        direct = rho - nu @ pos[ns.k_c - 1] + eps[0] * xi ** (n - 1)
        assert abs(vals[12 * K] - direct) < 1e-10

        # relaxation bounds
        assert abs(vals[12 * K + 1] - eps[0]) < 1e-12            # eps <= 0
        assert abs(vals[12 * K + 2] - (-eps[0] - 0.05)) < 1e-12  # -eps <= eps_max

    def test_hard_qp_rows(self):
        rng = np.random.default_rng(2)
        algo, mats, state, p_d = random_problem_inputs(rng)
        ev = CollisionEvent(neighbor_id=1, k_c=2, xi=0.3,
                            neighbor_pos=np.zeros(3),
                            own_pos=np.array([0.3, 0.0, 0.0]))
        qp = build_hard_qp(state.x, p_d, state.a_prev, mats, PHYS, algo, (ev,))
        assert qp.A_in.shape == (12 * algo.horizon + 1, 3 * algo.horizon)
        assert qp.n_relax == 0
