"""Convex QP in the operator-splitting standard form ``min 1/2 x'Px + q'x, l <= Ax <= u``.

Production solves go through OSQP (ADMM with warm starting and solution
polishing). :func:`solve_by_enumeration` is an independent dense active-set
enumeration used as a test oracle on small instances.

Dual sign convention for both routes: ``P x + q + A' y = 0``, with ``y <= 0``
on active lower bounds and ``y >= 0`` on active upper bounds.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass

import numpy as np
import osqp
import scipy.sparse as sp
import scipy.sparse.linalg as spla

SOLVED = "solved"
MAX_ITERATIONS = "max_iterations"
INFEASIBLE = "infeasible"

_STATUS = {
    osqp.SolverStatus.OSQP_SOLVED: SOLVED,
    osqp.SolverStatus.OSQP_PRIMAL_INFEASIBLE: INFEASIBLE,
    osqp.SolverStatus.OSQP_PRIMAL_INFEASIBLE_INACCURATE: INFEASIBLE,
    osqp.SolverStatus.OSQP_DUAL_INFEASIBLE: INFEASIBLE,
    osqp.SolverStatus.OSQP_DUAL_INFEASIBLE_INACCURATE: INFEASIBLE,
}


@dataclass
class QuadraticProgram:
    P: sp.csc_matrix
    q: np.ndarray
    A: sp.csc_matrix
    l: np.ndarray
    u: np.ndarray
    P_upper: sp.csc_matrix | None = None  # upper triangle of P, if already at hand

    @property
    def shape(self) -> tuple[int, int]:
        return self.A.shape

    def kkt_residuals(self, x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
        """Infinity norms of the primal violation and the stationarity residual."""
        Ax = self.A @ x
        prim = np.max(np.abs(Ax - np.clip(Ax, self.l, self.u)), initial=0.0)
        dual = np.max(np.abs(self.P @ x + self.q + self.A.T @ y), initial=0.0)
        return float(prim), float(dual)


@dataclass
class QpResult:
    x: np.ndarray
    y: np.ndarray
    status: str
    iterations: int
    solve_time: float


def _pattern(matrix: sp.csc_matrix) -> tuple:
    return matrix.shape, matrix.indptr.tobytes(), matrix.indices.tobytes()


class OsqpWorkspace:
    """One OSQP solver reused across programs that share a sparsity pattern.

    Setting up OSQP dominates the cost of a small solve, so consecutive
    programs with identical ``P`` and ``A`` patterns only update the numeric
    data and refactor. A new pattern falls back to a fresh setup.
    """

    def __init__(self):
        self._solver = None
        self._key = None

    def solve(self, prog: QuadraticProgram, x0=None, y0=None, eps_abs=1e-8, eps_rel=1e-8, max_iter=20000) -> QpResult:
        t0 = time.perf_counter()
        m, n = prog.shape
        if m == 0:
            x = spla.spsolve(prog.P.tocsc(), -prog.q) if n else np.zeros(0)
            return QpResult(np.atleast_1d(x), np.zeros(0), SOLVED, 0, time.perf_counter() - t0)
        P_upper = prog.P_upper if prog.P_upper is not None else sp.triu(prog.P, format="csc")
        key = (_pattern(P_upper), _pattern(prog.A), eps_abs, eps_rel, max_iter)
        if key == self._key:
            self._solver.update(q=prog.q, l=prog.l, u=prog.u, Px=P_upper.data, Ax=prog.A.data)
        else:
            # naming the backend skips osqp's per-instance probe of optional backends
            self._solver = osqp.OSQP(algebra="builtin")
            self._solver.setup(
                P_upper, prog.q, prog.A, prog.l, prog.u, verbose=False, eps_abs=eps_abs, eps_rel=eps_rel,
                max_iter=max_iter, polishing=True, warm_starting=True,
            )
            self._key = key
        # a reused solver would otherwise start from its previous iterate
        self._solver.warm_start(x=np.zeros(n) if x0 is None else x0, y=np.zeros(m) if y0 is None else y0)
        res = self._solver.solve(raise_error=False)
        status = _STATUS.get(res.info.status_val, MAX_ITERATIONS)
        if status == INFEASIBLE:
            self._key = None  # leave no infeasibility certificate behind as a start point
        x = np.zeros(n) if res.x is None or status == INFEASIBLE else np.asarray(res.x, dtype=float).copy()
        y = np.zeros(m) if res.y is None or status == INFEASIBLE else np.asarray(res.y, dtype=float).copy()
        return QpResult(x, y, status, int(res.info.iter), time.perf_counter() - t0)


def solve_osqp(
    prog: QuadraticProgram,
    x0: np.ndarray | None = None,
    y0: np.ndarray | None = None,
    eps_abs: float = 1e-8,
    eps_rel: float = 1e-8,
    max_iter: int = 20000,
) -> QpResult:
    """Solve one program with a fresh OSQP instance."""
    return OsqpWorkspace().solve(prog, x0, y0, eps_abs, eps_rel, max_iter)


def solve_by_enumeration(prog: QuadraticProgram, tol: float = 1e-9) -> QpResult:
    """Dense oracle: try every active set of the inequality rows.

    Equality rows (``l == u``) are always active. For each candidate set the
    KKT system is solved directly; the first candidate that is primal feasible
    with correctly signed multipliers is the unique optimum of a strictly
    convex QP. Exponential in the number of inequality rows, so only for tests.
    """
    t0 = time.perf_counter()
    P = prog.P.toarray()
    A = prog.A.toarray()
    l, u = np.asarray(prog.l, float), np.asarray(prog.u, float)
    m, n = A.shape
    eq = np.nonzero(l == u)[0]
    ineq = [i for i in range(m) if l[i] != u[i]]
    # each inequality row is inactive, at its lower bound, or at its upper bound
    options = [[0] + ([-1] if np.isfinite(l[i]) else []) + ([1] if np.isfinite(u[i]) else []) for i in ineq]
    count = 0
    for choice in itertools.product(*options):
        count += 1
        act, bound = list(eq), list(l[eq])
        for i, c in zip(ineq, choice):
            if c:
                act.append(i)
                bound.append(l[i] if c == -1 else u[i])
        rhs_b = np.array(bound)
        Aa = A[act]
        K = np.block([[P, Aa.T], [Aa, np.zeros((len(act), len(act)))]])
        rhs = np.concatenate([-prog.q, rhs_b])
        try:
            sol = np.linalg.solve(K, rhs)
        except np.linalg.LinAlgError:
            continue
        x = sol[:n]
        y = np.zeros(m)
        y[act] = sol[n:]
        Ax = A @ x
        scale = 1.0 + np.max(np.abs(rhs), initial=0.0)
        if np.any(Ax < l - tol * scale) or np.any(Ax > u + tol * scale):
            continue
        sign_ok = all(
            (c == -1 and y[i] <= tol * scale) or (c == 1 and y[i] >= -tol * scale) or c == 0
            for i, c in zip(ineq, choice)
        )
        if sign_ok:
            return QpResult(x, y, SOLVED, count, time.perf_counter() - t0)
    return QpResult(np.zeros(n), np.zeros(m), INFEASIBLE, count, time.perf_counter() - t0)
