"""Linear programs: data model, backends, duals and sensitivities.

Every LP in the package is ``min c'x`` subject to ``A x (<=|=|>=) rhs`` and
``lb <= x <= ub``.  Row duals follow one convention regardless of backend:
``duals[i]`` is the derivative of the optimal objective with respect to
``rhs[i]``.  For a minimisation this makes duals of ``<=`` rows non-positive
and duals of ``>=`` rows non-negative.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import highspy
import numpy as np
from scipy import sparse

from .exceptions import NumericalError

FEAS_TOL = 1e-8
OPT_TOL = 1e-7

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"

_SENSES = ("<", "=", ">")


@dataclass(frozen=True)
class LpProblem:
    c: np.ndarray
    A: sparse.csr_matrix
    senses: np.ndarray
    rhs: np.ndarray
    lb: np.ndarray
    ub: np.ndarray

    def __post_init__(self):
        n = self.c.shape[0]
        m = self.rhs.shape[0]
        if self.A.shape != (m, n):
            raise ValueError(f"constraint matrix is {self.A.shape}, expected {(m, n)}")
        if self.senses.shape[0] != m:
            raise ValueError("one sense per row required")
        if self.lb.shape[0] != n or self.ub.shape[0] != n:
            raise ValueError("one bound pair per column required")
        if not set(np.unique(self.senses)) <= set(_SENSES):
            raise ValueError(f"row senses must be in {_SENSES}")
        for name in ("c", "rhs"):
            if np.isnan(getattr(self, name)).any():
                raise ValueError(f"NaN in {name}")
        if np.isnan(self.A.data).any() or np.isnan(self.lb).any() or np.isnan(self.ub).any():
            raise ValueError("NaN in matrix or bounds")
        if np.any(self.lb > self.ub):
            raise ValueError("lower bound above upper bound")

    @property
    def n_rows(self):
        return self.rhs.shape[0]

    @property
    def n_cols(self):
        return self.c.shape[0]


@dataclass
class LpSolution:
    status: str
    objective: float = np.nan
    x: np.ndarray | None = None
    duals: np.ndarray | None = None
    basis: object = None

    @property
    def optimal(self):
        return self.status == OPTIMAL


class LpBuilder:
    """Incremental assembly of an :class:`LpProblem` from COO triplets."""

    def __init__(self):
        self._c = []
        self._lb = []
        self._ub = []
        self._n = 0
        self._rows = []
        self._cols = []
        self._vals = []
        self._senses = []
        self._rhs = []

    @property
    def n_cols(self):
        return self._n

    @property
    def n_rows(self):
        return len(self._rhs)

    def add_vars(self, count, cost=0.0, lb=0.0, ub=np.inf):
        """Append ``count`` columns and return their indices."""
        start = self._n
        self._c.append(np.broadcast_to(np.asarray(cost, float), (count,)).copy())
        self._lb.append(np.broadcast_to(np.asarray(lb, float), (count,)).copy())
        self._ub.append(np.broadcast_to(np.asarray(ub, float), (count,)).copy())
        self._n += count
        return np.arange(start, start + count)

    def add_rows(self, rows, cols, vals, senses, rhs):
        """Append a block of rows.

        ``rows`` are local (0-based within the block); the returned array
        holds their global indices.
        """
        rhs = np.atleast_1d(np.asarray(rhs, float))
        start = len(self._rhs)
        count = rhs.shape[0]
        self._rows.append(np.asarray(rows, int) + start)
        self._cols.append(np.asarray(cols, int))
        self._vals.append(np.asarray(vals, float))
        if isinstance(senses, str):
            senses = [senses] * count
        self._senses.extend(senses)
        self._rhs.extend(rhs.tolist())
        return np.arange(start, start + count)

    def add_matrix_rows(self, M, col_index, sense, rhs):
        """Append ``M @ x[col_index] (sense) rhs`` for a sparse or dense ``M``."""
        M = sparse.coo_matrix(M)
        col_index = np.asarray(col_index, int)
        return self.add_rows(M.row, col_index[M.col], M.data, sense, rhs)

    def build(self):
        n = self._n
        m = len(self._rhs)
        if self._rows:
            rows = np.concatenate(self._rows)
            cols = np.concatenate(self._cols)
            vals = np.concatenate(self._vals)
        else:
            rows = cols = np.zeros(0, int)
            vals = np.zeros(0)
        A = sparse.csr_matrix((vals, (rows, cols)), shape=(m, n))
        cat = lambda parts: np.concatenate(parts) if parts else np.zeros(0)
        return LpProblem(
            c=cat(self._c),
            A=A,
            senses=np.array(self._senses, dtype="<U1").reshape(m),
            rhs=np.array(self._rhs, float),
            lb=cat(self._lb),
            ub=cat(self._ub),
        )


def _highs_model(problem):
    lp = highspy.HighsLp()
    lp.num_col_ = problem.n_cols
    lp.num_row_ = problem.n_rows
    lp.col_cost_ = problem.c
    lp.col_lower_ = problem.lb
    lp.col_upper_ = problem.ub
    inf = highspy.kHighsInf
    lp.row_lower_ = np.where(problem.senses == "<", -inf, problem.rhs)
    lp.row_upper_ = np.where(problem.senses == ">", inf, problem.rhs)
    A = problem.A.tocsc()
    lp.a_matrix_.format_ = highspy.MatrixFormat.kColwise
    lp.a_matrix_.start_ = A.indptr
    lp.a_matrix_.index_ = A.indices
    lp.a_matrix_.value_ = A.data
    return lp


def _highs_run(problem, feas_tol, presolve):
    h = highspy.Highs()
    h.setOptionValue("output_flag", False)
    h.setOptionValue("presolve", "on" if presolve else "off")
    h.setOptionValue("primal_feasibility_tolerance", min(feas_tol, 1e-9))
    h.setOptionValue("dual_feasibility_tolerance", 1e-9)
    h.passModel(_highs_model(problem))
    h.run()
    return h, h.getModelStatus()


def _solve_highs(problem, feas_tol):
    MS = highspy.HighsModelStatus
    h, status = _highs_run(problem, feas_tol, presolve=False)
    if status == MS.kUnboundedOrInfeasible:
        # the simplex alone cannot tell; presolve settles it
        h, status = _highs_run(problem, feas_tol, presolve=True)
    if status == MS.kInfeasible:
        return LpSolution(INFEASIBLE)
    if status in (MS.kUnbounded, MS.kUnboundedOrInfeasible):
        return LpSolution(UNBOUNDED)
    if status != MS.kOptimal:
        raise NumericalError(f"HiGHS stopped with status {h.modelStatusToString(status)}")
    sol = h.getSolution()
    return LpSolution(
        OPTIMAL,
        float(h.getInfo().objective_function_value),
        np.array(sol.col_value, float),
        np.array(sol.row_dual, float),
    )


def _bounds(senses, rhs):
    inf = highspy.kHighsInf
    senses = np.asarray(senses)
    rhs = np.asarray(rhs, float)
    return np.where(senses == "<", -inf, rhs), np.where(senses == ">", inf, rhs)


def _i32(a):
    return np.ascontiguousarray(a, dtype=np.int32)


class PersistentLp:
    """A HiGHS model kept alive between solves.

    Rows and columns are appended, bounds changed in place, and each
    :meth:`solve` restarts the simplex from the previous basis.  Used for
    stage problems that are re-solved many times with small changes.
    """

    def __init__(self, problem, feas_tol=FEAS_TOL):
        self.feas_tol = feas_tol
        h = highspy.Highs()
        h.setOptionValue("output_flag", False)
        h.setOptionValue("presolve", "off")
        h.setOptionValue("primal_feasibility_tolerance", min(feas_tol, 1e-9))
        h.setOptionValue("dual_feasibility_tolerance", 1e-9)
        h.passModel(_highs_model(problem))
        self.h = h
        self.n_rows = problem.n_rows
        self.n_cols = problem.n_cols

    def set_rhs(self, rows, senses, rhs):
        lo, up = _bounds(senses, rhs)
        rows = _i32(rows)
        if rows.size:
            self.h.changeRowsBounds(rows.size, rows, lo, up)

    def relax_rows(self, rows):
        rows = _i32(rows)
        inf = highspy.kHighsInf
        if rows.size:
            self.h.changeRowsBounds(rows.size, rows, np.full(rows.size, -inf), np.full(rows.size, inf))

    def set_col_bounds(self, cols, lb, ub):
        cols = _i32(cols)
        if cols.size:
            self.h.changeColsBounds(cols.size, cols, np.asarray(lb, float), np.asarray(ub, float))

    def add_rows(self, M, senses, rhs):
        """Append rows ``M @ x (senses) rhs``; returns their indices."""
        M = sparse.csr_matrix(M)
        count = M.shape[0]
        if isinstance(senses, str):
            senses = [senses] * count
        lo, up = _bounds(senses, rhs)
        self.h.addRows(count, lo, up, M.nnz, _i32(M.indptr[:-1]), _i32(M.indices), M.data.astype(float))
        start = self.n_rows
        self.n_rows += count
        return np.arange(start, self.n_rows)

    def add_cols(self, cost, lb, ub, M):
        """Append columns with entries ``M`` (rows x new columns) in existing rows."""
        M = sparse.csc_matrix(M)
        count = M.shape[1]
        self.h.addCols(count, np.asarray(cost, float), np.asarray(lb, float), np.asarray(ub, float),
                       M.nnz, _i32(M.indptr[:-1]), _i32(M.indices), M.data.astype(float))
        start = self.n_cols
        self.n_cols += count
        return np.arange(start, self.n_cols)

    def solve(self):
        MS = highspy.HighsModelStatus
        h = self.h
        h.run()
        status = h.getModelStatus()
        if status != MS.kOptimal or h.getInfo().max_primal_infeasibility > 100 * self.feas_tol:
            # start over without the old basis; presolve separates infeasible from unbounded
            h.clearSolver()
            h.setOptionValue("presolve", "on")
            h.run()
            h.setOptionValue("presolve", "off")
            status = h.getModelStatus()
        if status == MS.kInfeasible:
            return LpSolution(INFEASIBLE)
        if status in (MS.kUnbounded, MS.kUnboundedOrInfeasible):
            return LpSolution(UNBOUNDED)
        if status != MS.kOptimal:
            raise NumericalError(f"HiGHS stopped with status {h.modelStatusToString(status)}")
        if h.getInfo().max_primal_infeasibility > 100 * self.feas_tol:
            raise NumericalError(f"primal infeasibility {h.getInfo().max_primal_infeasibility:.3e}")
        sol = h.getSolution()
        return LpSolution(
            OPTIMAL,
            float(h.getInfo().objective_function_value),
            np.array(sol.col_value, float),
            np.array(sol.row_dual, float),
        )


def solve_lp(problem, warm_start=None, backend="highs", feas_tol=FEAS_TOL, opt_tol=OPT_TOL):
    """Solve ``problem`` and return an :class:`LpSolution`.

    Infeasible and unbounded problems are reported through ``status``;
    :class:`NumericalError` is raised only when an optimal point cannot be
    certified within ``feas_tol``.

    Parameters
    ----------
    problem : LpProblem
    warm_start : optional
        A basis returned in a previous ``LpSolution.basis``.  Only the
        built-in simplex backend uses it.
    backend : {"highs", "simplex"}
    """
    if backend == "highs":
        sol = _solve_highs(problem, feas_tol)
    elif backend == "simplex":
        from ._simplex import solve_simplex

        sol = solve_simplex(problem, warm_start=warm_start, feas_tol=feas_tol, opt_tol=opt_tol)
    else:
        raise ValueError(f"unknown LP backend {backend!r}")
    if sol.optimal:
        residual = primal_residual(problem, sol.x)
        if residual > feas_tol * 100:
            raise NumericalError(f"primal residual {residual:.3e} exceeds tolerance")
    return sol


def primal_residual(problem, x):
    """Largest violation of rows and bounds at ``x``, scaled by ``1 + |rhs|``."""
    ax = problem.A @ x
    scale = 1.0 + np.abs(problem.rhs)
    viol = np.zeros_like(ax)
    le = problem.senses == "<"
    ge = problem.senses == ">"
    eq = problem.senses == "="
    viol[le] = np.maximum(ax[le] - problem.rhs[le], 0.0)
    viol[ge] = np.maximum(problem.rhs[ge] - ax[ge], 0.0)
    viol[eq] = np.abs(ax[eq] - problem.rhs[eq])
    worst = float(np.max(viol / scale, initial=0.0))
    bound_viol = np.maximum(problem.lb - x, 0.0) + np.maximum(x - problem.ub, 0.0)
    return max(worst, float(np.max(bound_viol / (1.0 + np.abs(x)), initial=0.0)))


def dual_objective(problem, duals):
    """Lagrangian dual value for ``duals``; ``-inf`` if reduced costs are unsupported by bounds."""
    d = problem.c - problem.A.T @ duals
    total = float(problem.rhs @ duals)
    for dj, l, u in zip(d, problem.lb, problem.ub):
        if dj > 0:
            total += dj * l
        elif dj < 0:
            total += dj * u
    return total


def duality_gap(problem, sol):
    """Absolute primal-dual objective gap of an optimal solution.

    Reduced-cost noise at infinite bounds is ignored (clipped to zero) so the
    check measures objective agreement rather than dual feasibility.
    """
    d = problem.c - problem.A.T @ sol.duals
    d = np.where((d > 0) & np.isneginf(problem.lb), 0.0, d)
    d = np.where((d < 0) & np.isposinf(problem.ub), 0.0, d)
    dual = float(problem.rhs @ sol.duals)
    dual += float(np.sum(np.where(d > 0, d * np.where(np.isfinite(problem.lb), problem.lb, 0.0), 0.0)))
    dual += float(np.sum(np.where(d < 0, d * np.where(np.isfinite(problem.ub), problem.ub, 0.0), 0.0)))
    return abs(sol.objective - dual)


def value_sensitivity(solution, rhs_dependence):
    """Subgradient of the optimal value w.r.t. a parameter entering the rhs.

    Parameters
    ----------
    solution : LpSolution
        Must be optimal.
    rhs_dependence : array_like or sparse matrix, shape (n_rows, n_params)
        Jacobian of the right-hand side with respect to the parameter.

    Returns
    -------
    ndarray, shape (n_params,)
        ``s`` with ``value(p + dp) >= value(p) + s @ dp``.
    """
    if not solution.optimal:
        raise ValueError(f"sensitivity requested for a {solution.status} solution")
    J = rhs_dependence
    if sparse.issparse(J):
        return np.asarray(J.T @ solution.duals).ravel()
    return np.asarray(J, float).T @ solution.duals


@dataclass
class _MpsNames:
    rows: list = field(default_factory=list)
    cols: list = field(default_factory=list)


def write_mps(problem, target):
    """Write ``problem`` in free-format MPS to a path or text stream."""
    names = _MpsNames(
        rows=[f"R{i}" for i in range(problem.n_rows)],
        cols=[f"C{j}" for j in range(problem.n_cols)],
    )
    out = io.StringIO()
    out.write("NAME benders_sddp\nROWS\n N OBJ\n")
    kind = {"<": "L", ">": "G", "=": "E"}
    for name, s in zip(names.rows, problem.senses):
        out.write(f" {kind[s]} {name}\n")
    out.write("COLUMNS\n")
    A = problem.A.tocsc()
    for j, cname in enumerate(names.cols):
        if problem.c[j] != 0:
            out.write(f" {cname} OBJ {problem.c[j]!r}\n")
        for p in range(A.indptr[j], A.indptr[j + 1]):
            out.write(f" {cname} {names.rows[A.indices[p]]} {A.data[p]!r}\n")
    out.write("RHS\n")
    for name, r in zip(names.rows, problem.rhs):
        if r != 0:
            out.write(f" RHS {name} {r!r}\n")
    out.write("BOUNDS\n")
    for cname, l, u in zip(names.cols, problem.lb, problem.ub):
        if np.isneginf(l) and np.isposinf(u):
            out.write(f" FR BND {cname}\n")
            continue
        if l == u:
            out.write(f" FX BND {cname} {l!r}\n")
            continue
        if np.isneginf(l):
            out.write(f" MI BND {cname}\n")
        elif l != 0:
            out.write(f" LO BND {cname} {l!r}\n")
        if np.isfinite(u):
            out.write(f" UP BND {cname} {u!r}\n")
    out.write("ENDATA\n")
    text = out.getvalue()
    if hasattr(target, "write"):
        target.write(text)
    else:
        with open(target, "w", encoding="utf-8") as fh:
            fh.write(text)
    return text
