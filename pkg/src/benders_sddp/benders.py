"""Adaptive Benders decomposition over the relaxed master problem.

Each iteration solves the cutting-plane master, asks the oracles for bounds
at every node's new point, and solves exactly (to ``delta``) only the node
with the largest weighted bound gap, repeating until an exact solve
improves on its oracle's lower value.  One cut per node then goes back to
the master.
"""

from __future__ import annotations

import json
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from .envelopes import ENHANCED, EnvelopeStore
from .exceptions import CapExceededError, MasterInfeasibleError, MissingCutError, ToleranceGuardError
from .lp import INFEASIBLE, UNBOUNDED, LpBuilder, solve_lp
from .oracle import OracleStore
from .sddp import run_sddp
from .utils.trace import TraceWriter

TRACE_COLUMNS = ("w", "L", "U", "chosen", "exact_solves", "wall_ms")
IMPROVE_TOL = 1e-9


@dataclass
class Cut:
    theta: float
    slope: np.ndarray
    anchor: np.ndarray


@dataclass
class BendersResult:
    x: np.ndarray
    lower_bound: float
    upper_bound: float
    node_lower: np.ndarray
    node_upper: np.ndarray
    n_iter: int
    n_exact: int
    trace: list = field(default_factory=list)
    converged: bool = True

    @property
    def gap(self):
        return self.upper_bound - self.lower_bound

    def to_dict(self):
        return {
            "x": self.x.tolist(),
            "lower_bound": self.lower_bound,
            "upper_bound": self.upper_bound,
            "node_lower": self.node_lower.tolist(),
            "node_upper": [None if not np.isfinite(v) else v for v in self.node_upper],
            "iterations": self.n_iter,
            "exact_solves": self.n_exact,
            "converged": self.converged,
        }

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def solve_rmp(instance, cuts):
    """Solve the relaxed master problem.

    Parameters
    ----------
    cuts : list of list of Cut
        Per node; nodes with zero probability may have none.

    Returns
    -------
    x : ndarray
    beta : ndarray
        Recourse estimate per node (0 for zero-probability nodes).
    objective : float
    """
    lp = LpBuilder()
    n = instance.n_master
    xc = lp.add_vars(n, cost=instance.cost, lb=instance.lower, ub=instance.upper)
    if instance.rhs.size:
        lp.add_matrix_rows(instance.constraints, xc, "<", instance.rhs)
    beta_cols = {}
    for i, node in enumerate(instance.nodes):
        if node.probability <= 0:
            continue
        if not cuts[i]:
            raise MissingCutError(f"node {i} has no cut; the relaxed master is unbounded")
        b = lp.add_vars(1, cost=node.probability, lb=-np.inf)[0]
        beta_cols[i] = b
        idx = xc[node.x_indices]
        for cut in cuts[i]:
            # beta - slope . x_i >= theta - slope . anchor
            k = idx.size
            lp.add_rows(np.zeros(k + 1, int), np.concatenate([[b], idx]),
                        np.concatenate([[1.0], -cut.slope]), ">",
                        [cut.theta - float(cut.slope @ cut.anchor)])
    sol = solve_lp(lp.build())
    if sol.status == INFEASIBLE:
        raise MasterInfeasibleError("relaxed master problem is infeasible")
    if sol.status == UNBOUNDED:
        raise MissingCutError("relaxed master problem is unbounded")
    beta = np.zeros(len(instance.nodes))
    for i, c in beta_cols.items():
        beta[i] = sol.x[c]
    return sol.x[:n].copy(), beta, float(sol.objective)


class SddpEvaluator:
    """Exact subproblem solves by enhanced SDDP, one cut store per template.

    Lower cuts are parameterised in x, so the store of a template keeps
    paying off at every later master point.
    """

    def __init__(self, iteration_cap=10_000, workers=1, share_cuts=True):
        self.iteration_cap = iteration_cap
        self.workers = workers
        self.share_cuts = share_cuts
        self._stores = {}
        self.last_result = None

    def __call__(self, name, template, x, delta):
        store = self._stores.get(name) if self.share_cuts else None
        if store is None:
            store = EnvelopeStore.for_template(template, ENHANCED)
            self._stores[name] = store
        res = run_sddp(template, x, delta, ENHANCED, self.iteration_cap, store, self.workers)
        self.last_result = res
        return res.lower_bound, res.upper_bound, res.subgradient


def _seed_point(instance, name):
    t = instance.recourse[name]
    rows = [i for i, n in enumerate(instance.nodes) if n.recourse == name]
    lo = np.array([instance.lower[instance.nodes[i].x_indices] for i in rows])
    hi = np.array([instance.upper[instance.nodes[i].x_indices] for i in rows])
    return np.where(t.monotone > 0, hi.max(axis=0), lo.min(axis=0))


def run_benders(instance, epsilon, delta=None, evaluator=None, max_iter=500, workers=1,
                trace_path=None, trace_comments=(), callback=None):
    """Adaptive Benders loop to an ``epsilon``-optimal master decision.

    Parameters
    ----------
    instance : Instance
    epsilon : float
        Target gap between the master bounds.
    delta : float, optional
        Accuracy of exact subproblem solves.  Defaults to
        ``epsilon / (4 * sum(pi_i))``.  Must satisfy
        ``epsilon > 2 * delta * sum(pi_i)``.
    evaluator : callable, optional
        ``evaluator(name, template, x, delta) -> (lower, upper, slope)``.
        Defaults to :class:`SddpEvaluator`.
    max_iter : int
        Cap on master iterations.
    """
    mass = instance.probability_mass()
    if delta is None:
        delta = epsilon / (4.0 * max(mass, 1e-300))
    if not epsilon > 0 or not delta > 0:
        raise ToleranceGuardError("epsilon and delta must be positive")
    if not instance.epsilon_admissible(epsilon, delta):
        raise ToleranceGuardError(
            f"epsilon = {epsilon:.6g} must exceed 2 * delta * sum(pi) = {2 * delta * mass:.6g}"
        )
    evaluator = evaluator or SddpEvaluator(workers=workers)
    nodes = instance.nodes
    probs = np.array([n.probability for n in nodes])
    names = sorted({n.recourse for n in nodes})
    stores = {
        nm: OracleStore(instance.recourse[nm].monotone, delta) for nm in names
    }
    start = time.perf_counter()
    n_exact = 0

    def exact(name, x):
        nonlocal n_exact
        lo, up, slope = evaluator(name, instance.recourse[name], x, delta)
        n_exact += 1
        stores[name].add(x, lo, up, slope)
        return lo

    cuts = [[] for _ in nodes]
    for nm in names:
        x0 = _seed_point(instance, nm)
        exact(nm, x0)
    for i, node in enumerate(nodes):
        rec = stores[node.recourse].records[0]
        cuts[i].append(Cut(rec.lower, rec.slope, rec.x))

    def query(i, xw):
        st = stores[nodes[i].recourse]
        xi = instance.node_x(i, xw)
        lo, slope = st.lower(xi)
        return lo, slope, st.upper(xi)

    def query_all(xw, which=None):
        which = range(len(nodes)) if which is None else which
        which = list(which)
        if workers > 1 and len(which) > 1:
            with ThreadPoolExecutor(workers) as pool:
                res = list(pool.map(lambda i: query(i, xw), which))
        else:
            res = [query(i, xw) for i in which]
        return dict(zip(which, res))

    writer = TraceWriter(trace_path, TRACE_COLUMNS, trace_comments) if trace_path else None
    L, U = -np.inf, np.inf
    x_best = instance.lower.copy()
    node_lo = np.full(len(nodes), np.nan)
    node_up = np.full(len(nodes), np.inf)
    trace = []
    try:
        for w in range(1, max_iter + 1):
            xw, _, rmp_obj = solve_rmp(instance, cuts)
            L = max(L, rmp_obj)
            f = float(instance.cost @ xw)
            q = query_all(xw)
            lo = np.array([q[i][0] for i in range(len(nodes))])
            up = np.array([q[i][2] for i in range(len(nodes))])
            chosen = []
            u_now = f + float(probs @ up) if np.all(np.isfinite(up[probs > 0])) else np.inf
            if min(U, u_now) - L > epsilon:
                done = set()
                while True:
                    gaps = probs * (up - lo)
                    cand = [
                        i for i in range(len(nodes))
                        if i not in done and probs[i] > 0
                        and not stores[nodes[i].recourse].has_point(instance.node_x(i, xw))
                    ]
                    if not cand:
                        break
                    i_hat = max(cand, key=lambda i: (gaps[i], -i))
                    if not gaps[i_hat] > 0:
                        break
                    name = nodes[i_hat].recourse
                    exact_lo = exact(name, instance.node_x(i_hat, xw))
                    done.add(i_hat)
                    chosen.append(i_hat)
                    improved = exact_lo > lo[i_hat] + IMPROVE_TOL * (1.0 + abs(lo[i_hat]))
                    same = [i for i in range(len(nodes)) if nodes[i].recourse == name]
                    for i, (l_, _, u_) in query_all(xw, same).items():
                        lo[i], up[i] = l_, u_
                    if improved:
                        break
                q = query_all(xw)
            for i in range(len(nodes)):
                l_, slope, u_ = q[i]
                lo[i], up[i] = l_, u_
                if probs[i] > 0:
                    cuts[i].append(Cut(l_, slope, instance.node_x(i, xw)))
            if np.all(np.isfinite(up[probs > 0])):
                u_now = f + float(probs[probs > 0] @ up[probs > 0])
                if u_now < U:
                    U = u_now
                    x_best = xw.copy()
                    node_lo, node_up = lo.copy(), up.copy()
            if L > U + 1e-7 * (1.0 + abs(U)):
                warnings.warn(f"master bounds crossed: L={L:.10g} > U={U:.10g}")
            row = {
                "w": w,
                "L": L,
                "U": U,
                "chosen": ";".join(str(i) for i in chosen),
                "exact_solves": n_exact,
                "wall_ms": (time.perf_counter() - start) * 1e3,
            }
            trace.append(row)
            if writer:
                writer.write(row)
            if callback:
                callback(row)
            if U - L <= epsilon:
                return BendersResult(x_best, L, U, node_lo, node_up, w, n_exact, trace)
    finally:
        if writer:
            writer.close()
    partial = BendersResult(x_best, L, U, node_lo, node_up, max_iter, n_exact, trace, converged=False)
    raise CapExceededError(f"Benders stopped after {max_iter} iterations with gap {U - L:.6g}", partial)


class AdaptiveBenders(BaseEstimator):
    """Estimator wrapper around :func:`run_benders`.

    Parameters
    ----------
    epsilon : float
    delta : float or None
        Defaults to ``epsilon / (4 * sum(pi_i))``.
    evaluator : callable or None
    max_iter : int
    sddp_iteration_cap : int
        Used by the default evaluator.
    workers : int
    trace_path : str or None
    """

    def __init__(self, epsilon=1e-3, delta=None, evaluator=None, max_iter=500,
                 sddp_iteration_cap=10_000, workers=1, trace_path=None):
        self.epsilon = epsilon
        self.delta = delta
        self.evaluator = evaluator
        self.max_iter = max_iter
        self.sddp_iteration_cap = sddp_iteration_cap
        self.workers = workers
        self.trace_path = trace_path

    def fit(self, instance, y=None):
        evaluator = self.evaluator or SddpEvaluator(self.sddp_iteration_cap, self.workers)
        res = run_benders(instance, self.epsilon, self.delta, evaluator, self.max_iter,
                          self.workers, self.trace_path)
        self.result_ = res
        self.x_ = res.x
        self.lower_bound_ = res.lower_bound
        self.upper_bound_ = res.upper_bound
        self.n_iter_ = res.n_iter
        self.trace_ = res.trace
        return self

    def predict(self, instance=None):
        """Return the incumbent master decision."""
        return self.x_
