"""Dense convex QP solver: minimize 0.5 u'Hu + f'u subject to A_in u <= b_in.

A dual active-set method (Goldfarb-Idnani scheme): start at the
unconstrained minimum, repeatedly pull the most violated constraint into the
active set, taking primal steps that keep the current iterate optimal for
the active equalities and dual steps that drop blocking constraints.
Infeasibility surfaces as an unbounded dual ray.  Problems here are small
(tens of variables, a few hundred rows), so each step re-solves against a
cached Cholesky factor of H instead of maintaining factor updates.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, lu_factor, lu_solve

from .assembly import QpProblem
from .errors import SolverError

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 200


@dataclass
class QpSolution:
    """Solver output: iterate, status, duals, and post-hoc KKT residuals."""

    u_star: np.ndarray
    status: str  # "optimal" | "infeasible" | "max_iter"
    objective: float
    active_rows: tuple[int, ...]
    lam: np.ndarray
    kkt_residuals: tuple[float, float, float]  # stationarity, primal, complementarity
    iterations: int


def factorize(H: np.ndarray):
    """Cholesky factor of H, reusable across solves that share H."""
    H = np.asarray(H, dtype=float)
    if H.ndim != 2 or H.shape[0] != H.shape[1]:
        raise SolverError("H must be square")
    if not np.allclose(H, H.T, atol=1e-10 * (1 + np.abs(H).max())):
        raise SolverError("H must be symmetric")
    try:
        return cho_factor(H, lower=False)
    except LinAlgError as exc:
        raise SolverError("H must be positive definite") from exc


def kkt_residuals(H, f, A, b, u, lam) -> tuple[float, float, float]:
    """Stationarity, primal feasibility, and complementarity residuals."""
    stat = float(np.max(np.abs(H @ u + f + (A.T @ lam if A is not None else 0.0))))
    if A is None or A.shape[0] == 0:
        return stat, 0.0, 0.0
    slack = A @ u - b
    primal = float(np.max(np.clip(slack, 0.0, None), initial=0.0))
    comp = float(abs(lam @ slack))
    return stat, primal, comp


def verify_kkt(problem: QpProblem, solution: QpSolution, tol: float = DEFAULT_TOL) -> bool:
    """Independent optimality check on a reported solution."""
    stat, primal, comp = kkt_residuals(
        problem.H, problem.f, problem.A_in, problem.b_in, solution.u_star, solution.lam
    )
    return stat <= tol and primal <= tol and comp <= tol and bool(np.all(solution.lam >= -tol))


def solve_qp(
    problem: QpProblem,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    warm_start: tuple[int, ...] | None = None,
    factor=None,
) -> QpSolution:
    """Solve a QpProblem; see `solve_qp_raw` for the array-level interface."""
    return solve_qp_raw(
        problem.H, problem.f, problem.A_in, problem.b_in,
        tol=tol, max_iter=max_iter, warm_start=warm_start, factor=factor,
    )


def solve_qp_raw(
    H: np.ndarray,
    f: np.ndarray,
    A: np.ndarray | None = None,
    b: np.ndarray | None = None,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    warm_start: tuple[int, ...] | None = None,
    factor=None,
) -> QpSolution:
    """Dual active-set solve.

    ``warm_start`` seeds the active set (row indices) from a related solve;
    ``factor`` is a precomputed `factorize(H)` result.  Both are optional
    and never change the minimizer, only the path to it.
    """
    f = np.asarray(f, dtype=float)
    d = f.shape[0]
    chol = factor if factor is not None else factorize(H)
    H = np.asarray(H, dtype=float)

    if A is None or A.shape[0] == 0:
        x = -cho_solve(chol, f)
        x = x - cho_solve(chol, H @ x + f)  # one refinement step
        obj = float(0.5 * x @ (H @ x) + f @ x)
        res = kkt_residuals(H, f, None, None, x, np.zeros(0))
        return QpSolution(u_star=x, status="optimal", objective=obj,
                          active_rows=(), lam=np.zeros(0),
                          kkt_residuals=res, iterations=0)

    A_orig = np.asarray(A, dtype=float)
    b_orig = np.asarray(b, dtype=float)
    if A_orig.shape != (b_orig.shape[0], d):
        raise SolverError(
            f"inconsistent constraint dimensions {A_orig.shape} vs ({b_orig.shape[0]}, {d})"
        )
    # Row normalization: collision rows can be orders of magnitude smaller
    # than box rows; equilibrating keeps violation ranking and dependence
    # tests meaningful.  Duals are rescaled back on output.
    row_scale = np.linalg.norm(A_orig, axis=1)
    row_scale[row_scale == 0.0] = 1.0
    A = A_orig / row_scale[:, None]
    b = b_orig / row_scale

    def finish(x, active, lam_active, status, iters):
        lam_full = np.zeros(A.shape[0])
        for w, lw in zip(active, lam_active):
            lam_full[w] = lw
        lam_full /= row_scale  # back to the caller's row units
        obj = float(0.5 * x @ (H @ x) + f @ x)
        res = kkt_residuals(H, f, A_orig, b_orig, x, lam_full)
        return QpSolution(
            u_star=x, status=status, objective=obj,
            active_rows=tuple(sorted(active)), lam=lam_full,
            kkt_residuals=res, iterations=iters,
        )

    def subproblem(active):
        """Equality-constrained minimizer for the active rows; None if singular."""
        if not active:
            return -cho_solve(chol, f), np.zeros(0)
        N = A[active].T
        HinvN = cho_solve(chol, N)
        M = N.T @ HinvN
        try:
            lam = np.linalg.solve(M, -(N.T @ cho_solve(chol, f) + b[active]))
        except np.linalg.LinAlgError:
            return None
        x = -cho_solve(chol, f + N @ lam)
        return x, lam

    def polish(active):
        """Direct KKT solve with iterative refinement for clean residuals.

        Refinement drives the active-row slack to machine precision; duals can
        be large, so complementarity needs the slack itself to be tiny.
        """
        q = len(active)
        if q == 0:
            x = -cho_solve(chol, f)
            r = H @ x + f
            return x - cho_solve(chol, r), np.zeros(0)
        N = A[active]
        kkt = np.zeros((d + q, d + q))
        kkt[:d, :d] = H
        kkt[:d, d:] = N.T
        kkt[d:, :d] = N
        rhs = np.concatenate([-f, b[active]])
        try:
            lu = lu_factor(kkt)
        except LinAlgError:
            return None
        sol = lu_solve(lu, rhs)
        if not np.all(np.isfinite(sol)):
            return None
        for _ in range(3):
            resid = rhs - kkt @ sol
            if np.max(np.abs(resid)) < 1e-15 * max(1.0, float(np.max(np.abs(rhs)))):
                break
            sol = sol + lu_solve(lu, resid)
        return sol[:d], sol[d:]

    # Starting state: equality-minimizer over the warm-start rows with any
    # dual-infeasible rows dropped, falling back to the unconstrained minimum.
    active: list[int] = []
    lam_act = np.zeros(0)
    x = -cho_solve(chol, f)
    if warm_start:
        trial = [w for w in dict.fromkeys(int(w) for w in warm_start) if 0 <= w < A.shape[0]]
        while trial:
            sub = subproblem(trial)
            if sub is None:
                trial.pop()  # dependent rows: shrink until solvable
                continue
            x_t, lam_t = sub
            neg = int(np.argmin(lam_t)) if lam_t.size else -1
            if lam_t.size and lam_t[neg] < -tol:
                trial.pop(neg)
                continue
            active, lam_act, x = trial, np.clip(lam_t, 0.0, None), x_t
            break

    iters = 0
    while True:
        slack = A @ x - b
        if active:
            slack[active] = np.minimum(slack[active], 0.0)  # equalities: ignore roundoff
        p = int(np.argmax(slack))
        if slack[p] <= tol:
            # Polish: re-solve the final equality system for clean residuals.
            sub = polish(active)
            if sub is not None:
                x_p, lam_p = sub
                if (not lam_p.size or lam_p.min() >= -tol) and \
                        (not A.shape[0] or np.max(A @ x_p - b) <= 10 * tol):
                    x, lam_act = x_p, np.clip(lam_p, 0.0, None)
            return finish(x, active, lam_act, "optimal", iters)

        a_p = A[p]
        s_p = float(slack[p])
        lam_p = 0.0
        while True:
            iters += 1
            if iters > max_iter:
                return finish(x, active, lam_act, "max_iter", iters)
            Hinv_ap = cho_solve(chol, a_p)
            if active:
                N = A[active].T
                HinvN = cho_solve(chol, N)
                M = N.T @ HinvN
                try:
                    r = np.linalg.solve(M, N.T @ Hinv_ap)
                except np.linalg.LinAlgError:
                    r = np.linalg.lstsq(M, N.T @ Hinv_ap, rcond=None)[0]
                z = Hinv_ap - HinvN @ r
            else:
                r = np.zeros(0)
                z = Hinv_ap
            kappa = float(a_p @ z)
            dep_tol = 1e-11 * max(1.0, float(a_p @ Hinv_ap))
            full_step = s_p / kappa if kappa > dep_tol else np.inf

            blocking = np.inf
            drop_idx = -1
            for idx, (lw, rw) in enumerate(zip(lam_act, r)):
                if rw > 1e-12:
                    t_w = lw / rw
                    if t_w < blocking - 1e-15:
                        blocking, drop_idx = t_w, idx

            if not np.isfinite(full_step) and not np.isfinite(blocking):
                return finish(x, active, lam_act, "infeasible", iters)

            t = min(full_step, blocking)
            if np.isfinite(full_step):
                x = x - t * z
                s_p -= t * kappa
            lam_act = lam_act - t * r
            lam_p += t
            if t == full_step and full_step <= blocking:
                active = active + [p]
                lam_act = np.append(lam_act, lam_p)
                break
            # Dual step: drop the blocking row and retry the same candidate.
            active = active[:drop_idx] + active[drop_idx + 1:]
            lam_act = np.delete(lam_act, drop_idx)
