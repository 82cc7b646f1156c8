"""Lower (cut) and upper (point) envelopes of stage value functions.

A store approximates ``V_d^m(x, y_prev, b)``, the cost-to-go of stage ``d``
in state ``m`` as a function of the master point ``x``, the previous-stage
decision ``y_prev`` and the flattened scenario bundle ``b`` of shape
``W * n_b``.

Lower cuts are anchored at ``(x_s, y_s, b_s)`` and evaluate to::

    theta + lam·dx + sigma·dy + nu·db + dxᵀ Q db

The last term is exact for the bilinear ``xᵀ B b`` right-hand side; without
it a cut taken at one master point can overestimate at another when ``b``
also moves.  When ``dx = 0`` the cut is the plain affine form.

Upper points carry ``(theta, y_s, b_s)`` and are filed under the master
point they were computed at.  A point is reused at another master point
only when the stage data certify that every stage value can only be lower
there (see :func:`stagewise_directions`).
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

from .exceptions import LipschitzViolationError
from .lp import LpBuilder, solve_lp

BASIC = "basic"
ENHANCED = "enhanced"

NORM_TOL = 1e-9


@dataclass(frozen=True)
class LowerCut:
    theta: float
    sigma: np.ndarray
    anchor_y: np.ndarray
    lam: np.ndarray | None = None
    nu: np.ndarray | None = None
    anchor_x: np.ndarray | None = None
    anchor_b: np.ndarray | None = None
    cross: np.ndarray | None = None

    def value(self, y, x=None, b=None):
        v = self.theta + float(self.sigma @ (np.asarray(y) - self.anchor_y))
        dx = None
        if self.lam is not None and x is not None:
            dx = np.asarray(x) - self.anchor_x
            v += float(self.lam @ dx)
        if self.nu is not None and b is not None:
            db = np.asarray(b) - self.anchor_b
            v += float(self.nu @ db)
            if dx is not None and self.cross is not None:
                v += float(dx @ self.cross @ db)
        return v

    def to_dict(self):
        out = {"theta": self.theta, "sigma": self.sigma.tolist(), "anchor_y": self.anchor_y.tolist()}
        for name in ("lam", "nu", "anchor_x", "anchor_b", "cross"):
            val = getattr(self, name)
            if val is not None:
                out[name] = np.asarray(val).tolist()
        return out

    @classmethod
    def from_dict(cls, d):
        arr = lambda k: None if k not in d else np.asarray(d[k], float)
        return cls(
            float(d["theta"]), arr("sigma"), arr("anchor_y"),
            arr("lam"), arr("nu"), arr("anchor_x"), arr("anchor_b"), arr("cross"),
        )


@dataclass(frozen=True)
class UpperPoint:
    theta: float
    anchor_y: np.ndarray
    anchor_b: np.ndarray | None = None

    def __post_init__(self):
        if not np.isfinite(self.theta):
            raise ValueError("upper points need a finite value")

    def to_dict(self):
        out = {"theta": self.theta, "anchor_y": self.anchor_y.tolist()}
        if self.anchor_b is not None:
            out["anchor_b"] = self.anchor_b.tolist()
        return out

    @classmethod
    def from_dict(cls, d):
        b = d.get("anchor_b")
        return cls(float(d["theta"]), np.asarray(d["anchor_y"], float), None if b is None else np.asarray(b, float))


@dataclass(frozen=True)
class CutArrays:
    """Stacked snapshot of the cuts in one store."""

    theta: np.ndarray
    sigma: np.ndarray
    anchor_y: np.ndarray
    lam: np.ndarray | None
    nu: np.ndarray | None
    anchor_x: np.ndarray | None
    anchor_b: np.ndarray | None
    cross: np.ndarray | None

    def __len__(self):
        return self.theta.shape[0]

    def offsets(self, x=None, b=None):
        """Per-cut intercept and x-slope once ``x`` and ``b`` are fixed.

        Returns ``(alpha, x_slope)`` such that cut ``s`` reads
        ``alpha[s] + sigma[s]·y`` and its x-derivative is ``x_slope[s]``.
        """
        alpha = self.theta - np.einsum("ij,ij->i", self.sigma, self.anchor_y)
        x_slope = None
        if self.lam is not None and x is not None:
            dx = np.asarray(x) - self.anchor_x
            alpha = alpha + np.einsum("ij,ij->i", self.lam, dx)
            x_slope = self.lam.copy()
        if self.nu is not None and b is not None:
            db = np.asarray(b) - self.anchor_b
            alpha = alpha + np.einsum("ij,ij->i", self.nu, db)
            if self.cross is not None and x is not None:
                qdb = np.einsum("ijk,ik->ij", self.cross, db)
                alpha = alpha + np.einsum("ij,ij->i", dx, qdb)
                x_slope = x_slope + qdb
        return alpha, x_slope


@dataclass(frozen=True)
class PointArrays:
    theta: np.ndarray
    anchor_y: np.ndarray
    anchor_b: np.ndarray | None

    def __len__(self):
        return self.theta.shape[0]


def _stack(items, attr):
    vals = [getattr(c, attr) for c in items]
    if any(v is None for v in vals):
        return None
    return np.array(vals, float)


FREE = 2


def stagewise_directions(template):
    """How every stage value can move as each master component grows.

    Derived from signs alone: raising ``x_j`` shifts the rhs of a row by
    ``v * b_k`` per coupling entry.  ``-1`` means no row ever gets tighter,
    so all stage values are nonincreasing in ``x_j``; ``+1`` means no row
    ever gets looser; ``0`` means the signs do not settle it (equality rows
    or mixed signs); ``FREE`` means ``x_j`` never enters.
    """
    effects = [set() for _ in range(template.n_x)]
    for d, st in enumerate(template.stages, start=1):
        if not st.coupling.size:
            continue
        senses = np.asarray(st.senses) if st.senses is not None else np.full(st.n_rows, "<")
        R = template.tree.realizations[d - 1]
        bvals = R.reshape(-1, R.shape[-1])
        for r, j, k, v in st.coupling:
            shift = np.sign(v * bvals[:, int(k)])
            shift = set(shift[shift != 0].tolist())
            sense = senses[int(r)]
            if sense == "=":
                effects[int(j)].update({-1.0, 1.0} if shift else set())
            elif sense == "<":
                effects[int(j)].update(-s for s in shift)
            else:
                effects[int(j)].update(shift)
    out = np.zeros(template.n_x, int)
    for j, e in enumerate(effects):
        out[j] = FREE if not e else (int(e.pop()) if len(e) == 1 else 0)
    return out


def _dominates(x, xs, directions):
    """Rows of ``xs`` at which every stage value is at least its value at ``x``."""
    d = directions
    ok = np.ones(xs.shape[0], bool)
    ok &= np.all((d != -1) | (x >= xs), axis=1)
    ok &= np.all((d != 1) | (x <= xs), axis=1)
    ok &= np.all((d != 0) | (x == xs), axis=1)
    return ok


def _x_key(x):
    if x is None:
        return None
    return np.ascontiguousarray(np.asarray(x, float)).tobytes()


class EnvelopeStore:
    """Cut and point stores for every (stage, state) of one recourse template.

    Parameters
    ----------
    mode : {"basic", "enhanced"}
        Enhanced stores are keyed by ``(d, m)`` and shared by all
        predecessors; basic stores are keyed by ``(d, l, m)``.
    M_y, M_b : float
        Lipschitz constants in the L1 norm.
    value_lb : ndarray of shape (D, m)
        Floor returned by the lower envelope, also when it holds no cuts.
    directions : ndarray of int, optional
        Output of :func:`stagewise_directions`.  When given, a query at ``x``
        also sees the points filed under master points that ``x`` dominates.
    """

    def __init__(self, mode, M_y, M_b, value_lb, directions=None):
        if mode not in (BASIC, ENHANCED):
            raise ValueError(f"mode must be 'basic' or 'enhanced', got {mode!r}")
        self.mode = mode
        self.M_y = float(M_y)
        self.M_b = float(M_b)
        self.value_lb = np.asarray(value_lb, float)
        self._cuts = {}
        self.directions = None if directions is None else np.asarray(directions, int)
        self._points = {}
        self._x_of = {}
        self._point_version = {}
        self._cut_cache = {}
        self._point_cache = {}
        self._lock = threading.Lock()
        # live stage LP models, filled by the stage module
        self.lp_cache = {}

    @classmethod
    def for_template(cls, template, mode=ENHANCED, share_points=True):
        directions = stagewise_directions(template) if share_points else None
        return cls(mode, template.M_y, template.M_b, template.stage_value_lb, directions)

    def key(self, stage, state, pred=None):
        if self.mode == ENHANCED:
            return (int(stage), int(state))
        if pred is None:
            raise ValueError("basic stores need the predecessor state")
        return (int(stage), int(pred), int(state))

    # insertion -------------------------------------------------------------

    def add_lower_cut(self, stage, state, cut, pred=None):
        n_sigma = float(np.abs(cut.sigma).sum())
        if n_sigma > self.M_y + NORM_TOL * (1.0 + self.M_y):
            raise LipschitzViolationError(
                f"stage {stage} state {state}: |sigma|_1 = {n_sigma:.6g} exceeds M_y = {self.M_y:.6g}"
            )
        if cut.nu is not None:
            n_nu = float(np.abs(cut.nu).sum())
            if n_nu > self.M_b + NORM_TOL * (1.0 + self.M_b):
                raise LipschitzViolationError(
                    f"stage {stage} state {state}: |nu|_1 = {n_nu:.6g} exceeds M_b = {self.M_b:.6g}"
                )
        k = self.key(stage, state, pred)
        with self._lock:
            self._cuts.setdefault(k, []).append(cut)
            self._cut_cache.pop(k, None)

    def add_upper_point(self, stage, state, point, x=None, pred=None):
        k = self.key(stage, state, pred)
        xk = _x_key(x)
        with self._lock:
            self._points.setdefault(k, {}).setdefault(xk, []).append(point)
            if xk is not None:
                self._x_of[xk] = np.asarray(x, float).copy()
            self._point_version[k] = self._point_version.get(k, 0) + 1

    def clear_points(self):
        with self._lock:
            self._points.clear()
            self._x_of.clear()
            self._point_cache.clear()
            self._point_version.clear()

    # snapshots ----------------------------------------------------------------

    def cuts(self, stage, state, pred=None):
        k = self.key(stage, state, pred)
        with self._lock:
            snap = self._cut_cache.get(k)
            if snap is None:
                items = self._cuts.get(k)
                if not items:
                    return None
                snap = CutArrays(
                    theta=np.array([c.theta for c in items], float),
                    sigma=_stack(items, "sigma"),
                    anchor_y=_stack(items, "anchor_y"),
                    lam=_stack(items, "lam"),
                    nu=_stack(items, "nu"),
                    anchor_x=_stack(items, "anchor_x"),
                    anchor_b=_stack(items, "anchor_b"),
                    cross=_stack(items, "cross"),
                )
                self._cut_cache[k] = snap
            return snap

    def points(self, stage, state, x=None, pred=None):
        """Points valid at ``x``: those filed under it and, with directions, under points it dominates."""
        k = self.key(stage, state, pred)
        xk = _x_key(x)
        with self._lock:
            version = self._point_version.get(k, 0)
            hit = self._point_cache.get((xk, k))
            if hit is not None and hit[0] == version:
                return hit[1]
            by_x = self._points.get(k, {})
            items = []
            if self.directions is not None and xk is not None:
                others = [key for key in by_x if key is not None and key != xk]
                if others:
                    xs = np.array([self._x_of[key] for key in others])
                    ok = _dominates(np.asarray(x, float), xs, self.directions)
                    for key, good in zip(others, ok):
                        if good:
                            items.extend(by_x[key])
            # own points last, so a snapshot grows at the end while x is fixed
            items.extend(by_x.get(xk, ()))
            snap = None
            if items:
                snap = PointArrays(
                    theta=np.array([p.theta for p in items], float),
                    anchor_y=_stack(items, "anchor_y"),
                    anchor_b=_stack(items, "anchor_b"),
                )
            if len(self._point_cache) > 4096:
                self._point_cache.clear()
            self._point_cache[(xk, k)] = (version, snap)
            return snap

    def n_cuts(self):
        return sum(len(v) for v in self._cuts.values())

    def n_points(self):
        return sum(len(v) for by_x in self._points.values() for v in by_x.values())

    # evaluation ---------------------------------------------------------------

    def floor(self, stage, state):
        return float(self.value_lb[stage - 1, state])

    def eval_lower(self, stage, state, y, x=None, b=None, pred=None):
        """Max over stored cuts at ``(x, y, b)``, floored at the stage lower bound."""
        lb = self.floor(stage, state)
        snap = self.cuts(stage, state, pred)
        if snap is None:
            return lb
        alpha, _ = snap.offsets(x if snap.lam is not None else None, b if snap.nu is not None else None)
        return max(lb, float(np.max(alpha + snap.sigma @ np.asarray(y, float))))

    def eval_upper(self, stage, state, y, b=None, x=None, pred=None):
        """Lipschitz convex-combination bound; ``inf`` for an empty store."""
        snap = self.points(stage, state, x, pred)
        if snap is None:
            return np.inf
        return upper_envelope_value(snap, y, b, self.M_y, self.M_b)

    # persistence -----------------------------------------------------------------

    def to_dict(self):
        with self._lock:
            return {
                "mode": self.mode,
                "M_y": self.M_y,
                "M_b": self.M_b,
                "value_lb": self.value_lb.tolist(),
                "cuts": [{"key": list(k), "items": [c.to_dict() for c in v]} for k, v in self._cuts.items()],
            }

    @classmethod
    def from_dict(cls, d):
        store = cls(d["mode"], d["M_y"], d["M_b"], np.asarray(d["value_lb"], float))
        for entry in d["cuts"]:
            k = tuple(entry["key"])
            store._cuts[k] = [LowerCut.from_dict(c) for c in entry["items"]]
        return store


def upper_envelope_value(points, y, b, M_y, M_b):
    """Solve the convex-combination envelope problem at one query point."""
    y = np.asarray(y, float)
    use_b = points.anchor_b is not None and b is not None
    if len(points) == 1:
        v = points.theta[0] + M_y * np.abs(points.anchor_y[0] - y).sum()
        if use_b:
            v += M_b * np.abs(points.anchor_b[0] - np.asarray(b, float)).sum()
        return float(v)
    k = len(points)
    lp = LpBuilder()
    mu = lp.add_vars(k, cost=points.theta, lb=0.0)
    ny = y.size
    gp = lp.add_vars(ny, cost=M_y, lb=0.0)
    gm = lp.add_vars(ny, cost=M_y, lb=0.0)
    _add_match_rows(lp, points.anchor_y, mu, gp, gm, y)
    if use_b:
        b = np.asarray(b, float)
        nb = b.size
        zp = lp.add_vars(nb, cost=M_b, lb=0.0)
        zm = lp.add_vars(nb, cost=M_b, lb=0.0)
        _add_match_rows(lp, points.anchor_b, mu, zp, zm, b)
    lp.add_rows(np.zeros(k, int), mu, np.ones(k), "=", [1.0])
    sol = solve_lp(lp.build())
    return float(sol.objective)


def _add_match_rows(lp, anchors, mu, plus, minus, target):
    """Rows ``sum_s mu_s anchors[s] - plus + minus = target``."""
    k, n = anchors.shape
    r, c = np.nonzero(anchors.T)
    rows = np.concatenate([r, np.arange(n), np.arange(n)])
    cols = np.concatenate([mu[c], plus, minus])
    vals = np.concatenate([anchors.T[r, c], -np.ones(n), np.ones(n)])
    lp.add_rows(rows, cols, vals, "=", target)
