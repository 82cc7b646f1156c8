"""SDDP with deterministic bounds for one recourse subproblem at a fixed x.

Two variants share the driver:

* ``basic``: stores per (stage, predecessor, state); cuts carry only the
  slope in the previous decision and the backward pass refreshes the
  visited path.
* ``enhanced``: stores per (stage, state) shared by all predecessors; cuts
  are parameterised in x, the previous decision and the scenario bundle,
  and the backward pass refreshes every state at each depth.

The forward pass is gap driven.  From each solved stage it follows the
(scenario, successor) pair with the largest upper-minus-lower cost-to-go
gap and stops once that gap drops to ``delta * (D - d + 1) / (D - 1)``.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from .envelopes import BASIC, ENHANCED, EnvelopeStore, LowerCut, UpperPoint
from .exceptions import CapExceededError, NotFittedError
from .stage import solve_lower_stage, solve_upper_stage, solve_upper_stage_fixed
from .utils.trace import TraceWriter

TRACE_COLUMNS = ("k", "theta_lb", "theta_ub", "depth", "wall_ms")


@dataclass
class TrajectoryStep:
    stage: int
    state: int
    pred: int
    scenario: int
    y: np.ndarray


@dataclass
class SddpResult:
    lower_bound: float
    upper_bound: float
    subgradient: np.ndarray | None
    n_iter: int
    trace: list = field(default_factory=list)
    first_stage_lb: np.ndarray | None = None
    first_stage_ub: np.ndarray | None = None
    converged: bool = True

    @property
    def gap(self):
        return self.upper_bound - self.lower_bound


def path_threshold(delta, n_stages, d):
    """Gap threshold for descending into stage ``d``."""
    return delta * (n_stages - d + 1) / (n_stages - 1)


def select_max_gap(upper, lower):
    """Index ``(w, n)`` of the largest finite-or-infinite gap, lowest indices on ties.

    NaN entries (absent successors) are skipped.  Returns ``(None, -inf)``
    when every entry is NaN.
    """
    gap = upper - lower
    gap = np.where(np.isnan(gap), -np.inf, gap)
    if gap.size == 0 or np.all(np.isneginf(gap)):
        return None, -np.inf
    flat = int(np.argmax(gap))  # row-major: lowest scenario, then lowest state
    w, n = np.unravel_index(flat, gap.shape)
    return (int(w), int(n)), float(gap[w, n])


class _Run:
    """Mutable state of one SDDP solve."""

    def __init__(self, template, store, x, delta, mode, workers):
        self.t = template
        self.store = store
        self.x = np.asarray(x, float)
        self.delta = float(delta)
        self.mode = mode
        self.workers = workers
        tree = template.tree
        self.D = template.n_stages
        self.p1 = np.asarray(tree.initial_probs, float)
        self.active = np.flatnonzero(self.p1 > 0)
        self.lb1 = np.array([store.floor(1, m) for m in range(tree.n_states)], float)
        self.ub1 = np.full(tree.n_states, np.inf)
        self.lam1 = np.zeros((tree.n_states, template.n_x))

    # bounds -------------------------------------------------------------------

    def update_first_stage(self, m, low, up):
        if low.theta > self.lb1[m]:
            self.lb1[m] = low.theta
            if low.lam is not None:
                self.lam1[m] = low.lam
        if up.theta < self.ub1[m]:
            self.ub1[m] = up.theta

    def bounds(self):
        a = self.active
        lb = float(self.p1[a] @ self.lb1[a])
        ub = float(self.p1[a] @ self.ub1[a]) if np.all(np.isfinite(self.ub1[a])) else np.inf
        lam = self.p1[a] @ self.lam1[a] if self.mode == ENHANCED else None
        return lb, ub, lam

    # passes -------------------------------------------------------------------

    def first_state(self):
        gap = self.ub1[self.active] - self.lb1[self.active]
        return int(self.active[int(np.argmax(gap))])

    def forward(self):
        """Return the trajectory and the stop depth."""
        t, x, tree = self.t, self.x, self.t.tree
        m = self.first_state()
        low = solve_lower_stage(t, self.store, 1, m, 0, x, None, tree.b(1, 0, m))
        path = [TrajectoryStep(1, m, 0, -1, low.y)]
        for d in range(2, self.D + 1):
            prev = path[-1]
            upper = solve_upper_stage_fixed(t, self.store, d - 1, prev.state, x, prev.y)
            choice, gap = select_max_gap(upper, low.values)
            if choice is None or not gap > path_threshold(self.delta, self.D, d):
                return path, d - 1
            w, n = choice
            low = solve_lower_stage(
                t, self.store, d, n, prev.state, x, prev.y[w], tree.b(d, prev.state, n)
            )
            path.append(TrajectoryStep(d, n, prev.state, w, low.y))
        return path, self.D

    def _paired(self, d, m, l, y_prev):
        bundle = self.t.tree.b(d, l, m)
        low = solve_lower_stage(self.t, self.store, d, m, l, self.x, y_prev, bundle)
        up = solve_upper_stage(self.t, self.store, d, m, l, self.x, y_prev, bundle)
        return m, low, up, bundle

    def _insert(self, d, l, m, low, up, y_prev, bundle):
        store = self.store
        y_prev = self.t.stages[d - 1].link(y_prev)
        if self.mode == ENHANCED:
            b = bundle.ravel()
            cut = LowerCut(
                low.theta, low.sigma, y_prev.copy(), lam=low.lam, nu=low.nu,
                anchor_x=self.x.copy(), anchor_b=b.copy(), cross=low.cross,
            )
            store.add_lower_cut(d, m, cut)
            if np.isfinite(up.theta):
                store.add_upper_point(d, m, UpperPoint(up.theta, y_prev.copy(), b.copy()), x=self.x)
        else:
            store.add_lower_cut(d, m, LowerCut(low.theta, low.sigma, y_prev.copy()), pred=l)
            if np.isfinite(up.theta):
                store.add_upper_point(d, m, UpperPoint(up.theta, y_prev.copy()), x=self.x, pred=l)

    def backward(self, path, d_hat):
        """Refresh stores from ``d_hat`` down to 2, then the first stage.

        Returns the gap of the paired solve at ``d_hat`` on the trajectory.
        """
        paired_gap = None
        n_states = self.t.tree.n_states
        for d in range(d_hat, 1, -1):
            step = path[d - 1]
            prev = path[d - 2]
            l = prev.state
            y_prev = prev.y[step.scenario]
            states = range(n_states) if self.mode == ENHANCED else [step.state]
            results = self._map(lambda m: self._paired(d, m, l, y_prev), states)
            for m, low, up, bundle in results:
                if d == d_hat and m == step.state:
                    paired_gap = up.theta - low.theta
                self._insert(d, l, m, low, up, y_prev, bundle)
        tree = self.t.tree
        states = self.active if self.mode == ENHANCED else [path[0].state]
        results = self._map(lambda m: self._paired(1, m, 0, None), states)
        for m, low, up, _ in results:
            if d_hat == 1 and m == path[0].state:
                paired_gap = up.theta - low.theta
            self.update_first_stage(m, low, up)
        return paired_gap

    def _map(self, fn, items):
        items = list(items)
        if self.workers > 1 and len(items) > 1:
            with ThreadPoolExecutor(self.workers) as pool:
                return list(pool.map(fn, items))
        return [fn(i) for i in items]


def run_sddp(template, x, delta, mode=ENHANCED, iteration_cap=10_000, store=None,
             workers=1, trace_path=None, trace_comments=(), callback=None):
    """Solve ``g(x)`` for one recourse template to within ``delta``.

    Parameters
    ----------
    template : RecourseTemplate
    x : array_like of shape (n_x,)
    delta : float
        Target gap between the returned bounds.
    store : EnvelopeStore, optional
        Reused for warm starts.  Lower cuts carry over between master points;
        upper points only between calls at the same ``x``.
    callback : callable, optional
        Called with each trace row.

    Returns
    -------
    SddpResult
        ``lower_bound <= g(x) <= upper_bound``; in enhanced mode
        ``subgradient`` is a valid slope for ``g`` at ``x``.

    Raises
    ------
    CapExceededError
        If ``iteration_cap`` iterations pass without closing the gap.
    """
    if not delta > 0:
        raise ValueError("delta must be positive")
    if mode not in (BASIC, ENHANCED):
        raise ValueError(f"unknown mode {mode!r}")
    if store is None:
        store = EnvelopeStore.for_template(template, mode)
    elif store.mode != mode:
        raise ValueError("store mode does not match the requested mode")
    run = _Run(template, store, x, delta, mode, max(1, int(workers)))
    writer = TraceWriter(trace_path, TRACE_COLUMNS, trace_comments) if trace_path else None
    trace = []
    start = time.perf_counter()
    try:
        for k in range(1, iteration_cap + 1):
            path, d_hat = run.forward()
            paired_gap = run.backward(path, d_hat)
            lb, ub, lam = run.bounds()
            row = {
                "k": k,
                "theta_lb": lb,
                "theta_ub": ub,
                "depth": d_hat,
                "wall_ms": (time.perf_counter() - start) * 1e3,
                "paired_gap": paired_gap,
                "paired_threshold": delta * (run.D - d_hat) / (run.D - 1),
                "path": [(s.stage, s.state, s.scenario) for s in path],
            }
            trace.append(row)
            if writer:
                writer.write(row)
            if callback:
                callback(row)
            if ub - lb <= delta:
                return SddpResult(lb, ub, lam, k, trace, run.lb1.copy(), run.ub1.copy())
    finally:
        if writer:
            writer.close()
    lb, ub, lam = run.bounds()
    partial = SddpResult(lb, ub, lam, iteration_cap, trace, run.lb1.copy(), run.ub1.copy(), converged=False)
    raise CapExceededError(
        f"SDDP stopped after {iteration_cap} iterations with gap {ub - lb:.6g} > {delta:.6g}", partial
    )


class SDDP(BaseEstimator):
    """Estimator wrapper around :func:`run_sddp`.

    Parameters
    ----------
    delta : float
        Target gap.
    mode : {"enhanced", "basic"}
    iteration_cap : int
    warm_start : bool
        Keep the envelope store between calls to :meth:`fit`.
    workers : int
        Threads used for the per-state solves of a backward depth.
    trace_path : str or None
        CSV trace destination, rewritten on each fit.

    Attributes
    ----------
    lower_bound_, upper_bound_ : float
    subgradient_ : ndarray or None
    n_iter_ : int
    trace_ : list of dict
    store_ : EnvelopeStore
    """

    def __init__(self, delta=1e-4, mode=ENHANCED, iteration_cap=10_000, warm_start=False,
                 workers=1, trace_path=None):
        self.delta = delta
        self.mode = mode
        self.iteration_cap = iteration_cap
        self.warm_start = warm_start
        self.workers = workers
        self.trace_path = trace_path

    def fit(self, template, x):
        store = getattr(self, "store_", None) if self.warm_start else None
        if store is not None and store.mode != self.mode:
            store = None
        if store is None:
            store = EnvelopeStore.for_template(template, self.mode)
        self.store_ = store
        res = run_sddp(template, x, self.delta, self.mode, self.iteration_cap, store,
                       self.workers, self.trace_path)
        self.result_ = res
        self.lower_bound_ = res.lower_bound
        self.upper_bound_ = res.upper_bound
        self.subgradient_ = res.subgradient
        self.n_iter_ = res.n_iter
        self.trace_ = res.trace
        return self

    def bounds(self):
        if not hasattr(self, "result_"):
            raise NotFittedError("call fit before reading bounds")
        return self.lower_bound_, self.upper_bound_
