"""Trajectory post-processing: time scaling, interpolation, safety check.

Discrete trajectories come as ``p, v`` of shape (N, M+1, 3) sampled at step
``h`` and applied inputs ``a`` of shape (N, M, 3).  Interpolation holds each
acceleration constant inside its coarse interval and integrates the double
integrator exactly, so interpolated samples agree with the discrete
trajectory wherever the grids coincide.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .assembly import scaled_distance
from .model import PhysParams


@dataclass(frozen=True)
class InterpolatedTrajectory:
    """Uniformly sampled trajectories for all agents, spacing `ts`, t0 = 0."""

    t: np.ndarray  # (S,)
    p: np.ndarray  # (N, S, 3)
    v: np.ndarray  # (N, S, 3)
    a: np.ndarray  # (N, S, 3)
    ts: float


@dataclass(frozen=True)
class CollisionCheckReport:
    """Outcome of the pairwise safety scan over interpolated samples."""

    passed: bool
    min_distance: float          # smallest scaled distance seen (inf for N < 2)
    threshold: float
    violation_pair: tuple[int, int] | None = None
    violation_time: float | None = None
    violation_distance: float | None = None


def scale_trajectory(
    p: np.ndarray, v: np.ndarray, a: np.ndarray, h: float, a_limit_norm: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray, float, float]:
    """Uniformly retime the fleet so the peak acceleration component hits the limit.

    Speed-up only: with gamma = sqrt(limit / peak) > 1 the sample times become
    t/gamma (returned as a new step h/gamma), positions are unchanged,
    velocities scale by gamma and accelerations by gamma^2.  Trajectories at
    or above the limit, and all-zero input trajectories, pass through.

    Returns ``(p, v, a, h_scaled, gamma)``.
    """
    if a_limit_norm <= 0:
        raise ValueError("a_limit_norm must be positive")
    peak = float(np.max(np.abs(a))) if a.size else 0.0
    if peak <= 0.0:
        return p, v, a, h, 1.0
    gamma = float(np.sqrt(a_limit_norm / peak))
    if gamma <= 1.0:
        return p, v, a, h, 1.0
    return p, gamma * v, gamma * gamma * a, h / gamma, gamma


def interpolate(
    p: np.ndarray, v: np.ndarray, a: np.ndarray, h: float, ts: float
) -> InterpolatedTrajectory:
    """Resample at spacing `ts` with zero-order-hold acceleration.

    Within interval k the sample at t = k h + tau is
    ``p[k] + v[k] tau + a[k] tau^2 / 2``, which is exact for the model the
    trajectories were generated with.
    """
    p = np.asarray(p, dtype=float)
    v = np.asarray(v, dtype=float)
    a = np.asarray(a, dtype=float)
    n_agents, n_samples = p.shape[0], p.shape[1]
    n_steps = n_samples - 1
    duration = n_steps * h
    count = int(np.floor(duration / ts + 1e-9)) + 1
    t = np.arange(count) * ts
    if n_steps == 0:
        zero = np.zeros((n_agents, 1, 3))
        return InterpolatedTrajectory(t=np.zeros(1), p=p.copy(), v=v.copy(), a=zero, ts=ts)

    k = np.minimum((t / h + 1e-9).astype(int), n_steps - 1)
    tau = (t - k * h)[None, :, None]
    pk, vk, ak = p[:, k, :], v[:, k, :], a[:, k, :]
    p_out = pk + vk * tau + 0.5 * ak * tau * tau
    v_out = vk + ak * tau
    return InterpolatedTrajectory(t=t, p=p_out, v=v_out, a=ak.copy(), ts=ts)


def check_collisions(
    positions: np.ndarray,
    t: np.ndarray,
    phys: PhysParams,
    eps_check: float,
) -> CollisionCheckReport:
    """Verify pairwise scaled distances stay at or above r_min - eps_check.

    A brute-force scan over every pair and every sample; on failure the
    earliest violating sample (lowest pair index on ties) is reported.
    """
    n_agents = positions.shape[0]
    threshold = phys.r_min - eps_check
    if n_agents < 2:
        return CollisionCheckReport(passed=True, min_distance=np.inf, threshold=threshold)

    min_distance = np.inf
    first_sample = None
    first_pair = None
    for i in range(n_agents - 1):
        diff = positions[i, None, :, :] - positions[i + 1:, :, :]
        xi = scaled_distance(diff, phys)  # (n_agents - 1 - i, S)
        pair_min = float(xi.min())
        if pair_min < min_distance:
            min_distance = pair_min
        hits = np.argwhere(xi < threshold)
        if hits.size:
            rows = hits[:, 1]
            best = int(np.argmin(rows))
            sample = int(rows[best])
            j = int(hits[best, 0]) + i + 1
            if first_sample is None or sample < first_sample:
                first_sample = sample
                first_pair = (i, j)

    if first_sample is None:
        return CollisionCheckReport(passed=True, min_distance=min_distance, threshold=threshold)
    i, j = first_pair
    dist = float(scaled_distance(positions[i, first_sample] - positions[j, first_sample], phys))
    return CollisionCheckReport(
        passed=False,
        min_distance=min_distance,
        threshold=threshold,
        violation_pair=first_pair,
        violation_time=float(t[first_sample]),
        violation_distance=dist,
    )
