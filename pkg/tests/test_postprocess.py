import numpy as np
import pytest

from swarmplan.assembly import scaled_distance
from swarmplan.model import AgentState, PhysParams, rollout
from swarmplan.postprocess import check_collisions, interpolate, scale_trajectory

PHYS = PhysParams(h=0.2, ts=0.01, a_min=-1, a_max=1,
                  p_min=(-10, -10, -10), p_max=(10, 10, 10),
                  r_min=0.35, c_ellipsoid=2.0, n_degree=2)


def make_trajectory(rng, n_agents=2, steps=12, h=0.2, accel_scale=0.25):
    a = accel_scale * rng.uniform(-1, 1, size=(n_agents, steps, 3))
    p = np.empty((n_agents, steps + 1, 3))
    v = np.empty((n_agents, steps + 1, 3))
    for i in range(n_agents):
        state = AgentState(p=rng.uniform(-1, 1, 3), v=np.zeros(3), a_prev=np.zeros(3))
        p[i, 0], v[i, 0] = state.p, state.v
        pos, vel = rollout(state, a[i], h)
        p[i, 1:], v[i, 1:] = pos, vel
    return p, v, a


class TestScaleTrajectory:
    def test_speed_up_to_limit(self):
        rng = np.random.default_rng(1)
        p, v, a = make_trajectory(rng, accel_scale=0.25)
        peak = np.abs(a).max()
        a = a * (0.25 / peak)  # exact peak 0.25
        v = v * (0.25 / peak)
        sp, sv, sa, h_s, gamma = scale_trajectory(p, v, a, 0.2, 1.0)
        assert np.isclose(gamma, 2.0)
        assert np.isclose(h_s, 0.1)
        assert np.array_equal(sp, p)                 # path unchanged
        assert np.allclose(sv, 2.0 * v)
        assert np.allclose(sa, 4.0 * a)
        assert np.isclose(np.abs(sa).max(), 1.0)     # peak hits the limit

    def test_already_at_limit_identity(self):
        rng = np.random.default_rng(2)
        p, v, a = make_trajectory(rng, accel_scale=1.0)
        a[0, 0, 0] = 1.0
        sp, sv, sa, h_s, gamma = scale_trajectory(p, v, a, 0.2, 1.0)
        assert gamma == 1.0 and h_s == 0.2
        assert np.array_equal(sa, a)

    def test_zero_acceleration_identity(self):
        p = np.zeros((1, 5, 3))
        v = np.zeros((1, 5, 3))
        a = np.zeros((1, 4, 3))
        _, _, _, h_s, gamma = scale_trajectory(p, v, a, 0.2, 1.0)
        assert gamma == 1.0 and h_s == 0.2

    def test_retimed_dynamics_still_consistent(self):
        # after scaling, the samples satisfy the double integrator at h/gamma
        rng = np.random.default_rng(3)
        p, v, a = make_trajectory(rng, accel_scale=0.3)
        sp, sv, sa, h_s, gamma = scale_trajectory(p, v, a, 0.2, 1.0)
        for i in range(p.shape[0]):
            for k in range(a.shape[1]):
                p_next = sp[i, k] + h_s * sv[i, k] + 0.5 * h_s * h_s * sa[i, k]
                v_next = sv[i, k] + h_s * sa[i, k]
                assert np.allclose(p_next, sp[i, k + 1], atol=1e-12)
                assert np.allclose(v_next, sv[i, k + 1], atol=1e-12)


class TestInterpolate:
    def test_sub_sample_count_and_grid_agreement(self):
        rng = np.random.default_rng(4)
        p, v, a = make_trajectory(rng, steps=7)
        traj = interpolate(p, v, a, 0.2, 0.01)
        assert traj.t.shape[0] == 7 * 20 + 1
        assert traj.t[0] == 0.0
        assert np.allclose(np.diff(traj.t), 0.01)
        for k in range(8):
            s = k * 20
            assert np.abs(traj.p[:, s, :] - p[:, k, :]).max() < 1e-9
            assert np.abs(traj.v[:, s, :] - v[:, k, :]).max() < 1e-9

    def test_matches_closed_form(self):
        rng = np.random.default_rng(5)
        p, v, a = make_trajectory(rng, steps=5)
        traj = interpolate(p, v, a, 0.2, 0.01)
        for s, t in enumerate(traj.t):
            k = min(int(t / 0.2 + 1e-9), 4)
            tau = t - 0.2 * k
            expect = p[:, k, :] + v[:, k, :] * tau + 0.5 * a[:, k, :] * tau * tau
            assert np.abs(traj.p[:, s, :] - expect).max() < 1e-12

    def test_velocity_piecewise_linear_continuous(self):
        p = np.zeros((1, 3, 3))
        v = np.zeros((1, 3, 3))
        a = np.full((1, 2, 3), 0.5)
        state = AgentState(p=np.zeros(3), v=np.zeros(3), a_prev=np.zeros(3))
        pos, vel = rollout(state, a[0], 0.2)
        p[0, 1:], v[0, 1:] = pos, vel
        traj = interpolate(p, v, a, 0.2, 0.05)
        dv = np.diff(traj.v[0, :, 0])
        assert np.allclose(dv, dv[0])  # constant slope across the interval seam

    def test_ts_equals_h_identity(self):
        rng = np.random.default_rng(6)
        p, v, a = make_trajectory(rng, steps=4)
        traj = interpolate(p, v, a, 0.2, 0.2)
        assert traj.t.shape[0] == 5
        assert np.abs(traj.p - p).max() < 1e-12
        assert np.abs(traj.v - v).max() < 1e-12

    def test_single_sample(self):
        p = np.zeros((2, 1, 3))
        v = np.zeros((2, 1, 3))
        a = np.zeros((2, 0, 3))
        traj = interpolate(p, v, a, 0.2, 0.01)
        assert traj.t.shape == (1,)
        assert traj.p.shape == (2, 1, 3)


class TestCheckCollisions:
    def test_far_apart_passes(self):
        t = np.arange(11) * 0.01
        p = np.zeros((2, 11, 3))
        p[1, :, 0] = 1.0
        report = check_collisions(p, t, PHYS, 0.05)
        assert report.passed
        assert np.isclose(report.min_distance, 1.0)

    def test_crossing_fails_with_earliest_sample(self):
        # two agents close linearly to scaled distance 0.29 with threshold 0.30
        samples = 101
        t = np.arange(samples) * 0.01
        gap = np.linspace(1.0, 0.29, samples)
        p = np.zeros((2, samples, 3))
        p[1, :, 0] = gap
        report = check_collisions(p, t, PHYS, 0.05)
        assert not report.passed
        first = int(np.argmax(gap < 0.30))
        assert report.violation_pair == (0, 1)
        assert np.isclose(report.violation_time, t[first])
        assert np.isclose(report.violation_distance, gap[first])
        assert np.isclose(report.min_distance, 0.29)

    def test_exact_threshold_passes(self):
        t = np.zeros(1)
        p = np.zeros((2, 1, 3))
        p[1, 0, 0] = PHYS.r_min - 0.05  # exactly r_min - eps_check
        report = check_collisions(p, t, PHYS, 0.05)
        assert report.passed

    def test_matches_brute_force(self):
        rng = np.random.default_rng(7)
        p = rng.uniform(0, 1.2, size=(5, 40, 3))
        t = np.arange(40) * 0.01
        report = check_collisions(p, t, PHYS, 0.05)
        thr = PHYS.r_min - 0.05
        min_d = np.inf
        first = None
        for s in range(40):
            for i in range(4):
                for j in range(i + 1, 5):
                    d = float(scaled_distance(p[i, s] - p[j, s], PHYS))
                    min_d = min(min_d, d)
                    if d < thr and first is None:
                        first = (i, j, s)
        assert np.isclose(report.min_distance, min_d)
        if first is None:
            assert report.passed
        else:
            assert not report.passed
            assert report.violation_pair == first[:2]
            assert np.isclose(report.violation_time, t[first[2]])

    def test_single_agent(self):
        report = check_collisions(np.zeros((1, 5, 3)), np.arange(5.0), PHYS, 0.05)
        assert report.passed
        assert report.min_distance == np.inf

    def test_vertical_scaling(self):
        # 0.5 m apart vertically: scaled distance 0.25 < 0.30 threshold
        t = np.zeros(1)
        p = np.zeros((2, 1, 3))
        p[1, 0, 2] = 0.5
        report = check_collisions(p, t, PHYS, 0.05)
        assert not report.passed
        assert np.isclose(report.violation_distance, 0.25)
