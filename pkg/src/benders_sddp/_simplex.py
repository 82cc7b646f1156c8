"""Dense bounded revised simplex.

Each row gets a logical column so that ``A x + s = rhs`` with sense-dependent
bounds on ``s``.  Phase 1 adds one signed artificial per row and minimises
their sum; phase 2 freezes the artificials at zero.  Pricing is Dantzig with
lowest-index ties, falling back to Bland's rule after a run of degenerate
pivots.  Meant for desk-scale cross-checks, not speed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .exceptions import NumericalError

_PIVOT_TOL = 1e-9
_DEGENERATE_RUN = 50


@dataclass(frozen=True)
class SimplexBasis:
    """Basic column indices plus the bound each nonbasic column sits at.

    ``at_upper[j]`` is True for a nonbasic column resting at its upper bound.
    Indices refer to the ``[x, s]`` column layout (artificials never appear).
    """

    basic: tuple
    at_upper: tuple


class _Tableau:
    def __init__(self, M, rhs, cost, lb, ub):
        self.M = M
        self.rhs = rhs
        self.cost = cost
        self.lb = lb
        self.ub = ub
        self.m, self.n = M.shape

    def nonbasic_value(self, j, upper):
        if upper and np.isfinite(self.ub[j]):
            return self.ub[j]
        if np.isfinite(self.lb[j]):
            return self.lb[j]
        if np.isfinite(self.ub[j]):
            return self.ub[j]
        return 0.0

    def run(self, basic, x, eligible, feas_tol, opt_tol, cap):
        m = self.m
        M, cost, lb, ub = self.M, self.cost, self.lb, self.ub
        basic = list(basic)
        is_basic = np.zeros(self.n, bool)
        is_basic[basic] = True
        degenerate = 0
        for _ in range(cap):
            B = M[:, basic]
            lu = lu_factor(B, check_finite=False)
            nb = ~is_basic
            resid = self.rhs - M[:, nb] @ x[nb]
            xb = lu_solve(lu, resid, check_finite=False)
            xb += lu_solve(lu, resid - B @ xb, check_finite=False)
            x[basic] = xb
            y = lu_solve(lu, cost[basic], trans=1, check_finite=False)
            d = cost - M.T @ y

            scale = 1.0 + np.abs(cost)
            cand = np.flatnonzero(nb & eligible)
            dc = d[cand]
            xc = x[cand]
            can_up = (dc < -opt_tol * scale[cand]) & (xc < ub[cand] - feas_tol)
            can_down = (dc > opt_tol * scale[cand]) & (xc > lb[cand] + feas_tol)
            attractive = cand[can_up | can_down]
            if attractive.size == 0:
                return basic, x, y, is_basic
            if degenerate >= _DEGENERATE_RUN:
                enter = int(attractive[0])
            else:
                score = np.abs(d[attractive])
                enter = int(attractive[np.argmax(score)])
            direction = 1.0 if d[enter] < 0 else -1.0

            w = lu_solve(lu, M[:, enter], check_finite=False)
            step = ub[enter] - lb[enter]
            leave_pos = -1
            leave_to_upper = False
            move = direction * w
            best = np.inf
            for i in range(m):
                if abs(w[i]) <= _PIVOT_TOL:
                    continue
                bi = basic[i]
                if move[i] > 0:
                    if not np.isfinite(lb[bi]):
                        continue
                    ratio = max(xb[i] - lb[bi], 0.0) / move[i]
                    to_upper = False
                else:
                    if not np.isfinite(ub[bi]):
                        continue
                    ratio = max(ub[bi] - xb[i], 0.0) / -move[i]
                    to_upper = True
                if ratio < best - 1e-12 or (
                    ratio <= best + 1e-12 and leave_pos >= 0 and bi < basic[leave_pos]
                ):
                    best = ratio
                    leave_pos = i
                    leave_to_upper = to_upper
            if step <= best:
                if not np.isfinite(step):
                    return None
                x[enter] = ub[enter] if direction > 0 else lb[enter]
                degenerate = 0 if step > feas_tol else degenerate + 1
                continue
            if not np.isfinite(best):
                return None
            x[enter] = x[enter] + direction * best
            leaving = basic[leave_pos]
            x[leaving] = ub[leaving] if leave_to_upper else lb[leaving]
            basic[leave_pos] = enter
            is_basic[enter] = True
            is_basic[leaving] = False
            degenerate = degenerate + 1 if best <= feas_tol else 0
        raise NumericalError(f"simplex iteration cap {cap} reached")


def _standardize(problem):
    A = problem.A.toarray()
    m, n = A.shape
    slack_lb = np.where(problem.senses == ">", -np.inf, 0.0)
    slack_ub = np.where(problem.senses == "<", np.inf, 0.0)
    M = np.hstack([A, np.eye(m)])
    lb = np.concatenate([problem.lb, slack_lb])
    ub = np.concatenate([problem.ub, slack_ub])
    cost = np.concatenate([problem.c, np.zeros(m)])
    return M, lb, ub, cost


def _try_warm(problem, basis, M, lb, ub, cost, feas_tol, opt_tol, cap):
    m, total = M.shape
    if len(basis.basic) != m or len(basis.at_upper) != total:
        return None
    tab = _Tableau(M, problem.rhs, cost, lb, ub)
    x = np.array([tab.nonbasic_value(j, basis.at_upper[j]) for j in range(total)])
    basic = list(basis.basic)
    try:
        lu = lu_factor(M[:, basic], check_finite=False)
    except (ValueError, np.linalg.LinAlgError):
        return None
    if not np.all(np.isfinite(lu[0])) or np.min(np.abs(np.diag(lu[0]))) < 1e-11:
        return None
    nb = np.ones(total, bool)
    nb[basic] = False
    xb = lu_solve(lu, problem.rhs - M[:, nb] @ x[nb])
    if np.any(xb < lb[basic] - feas_tol) or np.any(xb > ub[basic] + feas_tol):
        return None
    x[basic] = xb
    return tab.run(basic, x, np.ones(total, bool), feas_tol, opt_tol, cap)


def solve_simplex(problem, warm_start=None, feas_tol=1e-8, opt_tol=1e-7):
    from .lp import INFEASIBLE, OPTIMAL, UNBOUNDED, LpSolution

    M, lb, ub, cost = _standardize(problem)
    m, total = M.shape
    cap = 50 * (m + total) + 1000

    if warm_start is not None:
        out = _try_warm(problem, warm_start, M, lb, ub, cost, feas_tol, opt_tol, cap)
        if out is not None:
            return _finish(problem, out, total, LpSolution, OPTIMAL)

    # phase 1: artificials absorb the residual of the all-nonbasic start
    tab0 = _Tableau(M, problem.rhs, cost, lb, ub)
    x0 = np.array([tab0.nonbasic_value(j, False) for j in range(total)])
    resid = problem.rhs - M @ x0
    sign = np.where(resid >= 0, 1.0, -1.0)
    M1 = np.hstack([M, np.diag(sign)])
    lb1 = np.concatenate([lb, np.zeros(m)])
    ub1 = np.concatenate([ub, np.full(m, np.inf)])
    cost1 = np.concatenate([np.zeros(total), np.ones(m)])
    x1 = np.concatenate([x0, np.abs(resid)])
    basic = list(range(total, total + m))
    eligible = np.ones(total + m, bool)
    tab1 = _Tableau(M1, problem.rhs, cost1, lb1, ub1)
    out = tab1.run(basic, x1, eligible, feas_tol, opt_tol, cap)
    if out is None:
        raise NumericalError("phase 1 reported unbounded")
    basic, x1, _, _ = out
    infeas = float(np.sum(x1[total:]))
    if infeas > feas_tol * (1.0 + np.max(np.abs(problem.rhs), initial=0.0)):
        return LpSolution(INFEASIBLE)

    # phase 2: artificials pinned to zero and never re-enter
    ub1[total:] = 0.0
    x1[total:] = np.where(np.isin(np.arange(total, total + m), basic), x1[total:], 0.0)
    cost2 = np.concatenate([cost, np.zeros(m)])
    eligible[total:] = False
    tab2 = _Tableau(M1, problem.rhs, cost2, lb1, ub1)
    out = tab2.run(basic, x1, eligible, feas_tol, opt_tol, cap)
    if out is None:
        return LpSolution(UNBOUNDED)
    return _finish(problem, out, total, LpSolution, OPTIMAL)


def _finish(problem, out, total, LpSolution, OPTIMAL):
    basic, x, y, is_basic = out
    n = problem.n_cols
    xs = x[:n].copy()
    objective = float(problem.c @ xs)
    at_upper = tuple(
        bool((not is_basic[j]) and np.isfinite(x[j]) and x[j] == _upper_of(problem, j) and x[j] != _lower_of(problem, j))
        for j in range(total)
    )
    basis = None
    if all(b < total for b in basic):
        basis = SimplexBasis(tuple(int(b) for b in basic), at_upper)
    return LpSolution(OPTIMAL, objective, xs, np.asarray(y, float).copy(), basis)


def _upper_of(problem, j):
    n = problem.n_cols
    if j < n:
        return problem.ub[j]
    return np.inf if problem.senses[j - n] == "<" else 0.0


def _lower_of(problem, j):
    n = problem.n_cols
    if j < n:
        return problem.lb[j]
    return -np.inf if problem.senses[j - n] == ">" else 0.0
