"""Bounds for a recourse value at unsolved master points from solved ones.

The store keeps ``(x_s, lower_s, upper_s, slope_s)`` for every exact solve.
The lower oracle is the best of the stored cuts, valid by convexity.  The
upper oracle combines stored upper bounds over points that dominate the
query in the monotone direction declared for each component:

* ``-1``: the value is nonincreasing in the component, so a combination
  with ``sum mu_s x_s <= x`` is admissible;
* ``+1``: nondecreasing, requiring ``sum mu_s x_s >= x``;
* ``0``: no monotonicity, requiring equality.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

from .exceptions import EmptyStoreError
from .lp import LpBuilder, solve_lp

RECORD_TOL = 1e-9


@dataclass(frozen=True)
class OracleRecord:
    x: np.ndarray
    lower: float
    upper: float
    slope: np.ndarray


class OracleStore:
    """Exact solves of one recourse template, queried at new points.

    Parameters
    ----------
    monotone : array_like of {-1, 0, 1}
        Monotone direction per component of the template's x.
    delta : float, optional
        If given, records whose bound gap exceeds ``delta`` are rejected.
    """

    def __init__(self, monotone, delta=None):
        self.monotone = np.asarray(monotone, int)
        self.delta = delta
        self._records = []
        self._lock = threading.Lock()
        self._arrays = None

    def __len__(self):
        return len(self._records)

    @property
    def records(self):
        return list(self._records)

    def add(self, x, lower, upper, slope):
        x = np.asarray(x, float).copy()
        slope = np.asarray(slope, float).copy()
        if x.shape != self.monotone.shape or slope.shape != x.shape:
            raise ValueError("record dimensions do not match the store")
        if upper < lower - 1e-7 * (1 + abs(lower)):
            raise ValueError(f"record has upper bound {upper} below lower bound {lower}")
        if self.delta is not None and upper - lower > self.delta + RECORD_TOL:
            raise ValueError(f"record gap {upper - lower:.3g} exceeds delta {self.delta:.3g}")
        rec = OracleRecord(x, float(lower), float(upper), slope)
        with self._lock:
            self._records.append(rec)
            self._arrays = None
        return rec

    def _snapshot(self):
        with self._lock:
            if not self._records:
                raise EmptyStoreError("oracle store has no records")
            if self._arrays is None:
                r = self._records
                self._arrays = (
                    np.array([a.x for a in r]),
                    np.array([a.lower for a in r]),
                    np.array([a.upper for a in r]),
                    np.array([a.slope for a in r]),
                )
            return self._arrays

    def has_point(self, x):
        x = np.asarray(x, float)
        return any(np.array_equal(r.x, x) for r in self._records)

    def lower(self, x):
        """Best stored cut at ``x`` and its slope (lowest index on ties)."""
        X, lo, _, S = self._snapshot()
        vals = lo + np.einsum("ij,ij->i", S, np.asarray(x, float)[None, :] - X)
        s = int(np.argmax(vals))
        return float(vals[s]), S[s].copy()

    def upper(self, x):
        """Cheapest dominating convex combination, ``inf`` if none exists."""
        X, _, up, _ = self._snapshot()
        x = np.asarray(x, float)
        k, n = X.shape
        if k == 1:
            ok = np.all(
                np.where(self.monotone < 0, X[0] <= x, np.where(self.monotone > 0, X[0] >= x, X[0] == x))
            )
            return float(up[0]) if ok else np.inf
        lp = LpBuilder()
        mu = lp.add_vars(k, cost=up, lb=0.0)
        senses = np.where(self.monotone < 0, "<", np.where(self.monotone > 0, ">", "="))
        r, c = np.nonzero(X.T)
        lp.add_rows(r, mu[c], X.T[r, c], list(senses), x)
        lp.add_rows(np.zeros(k, int), mu, np.ones(k), "=", [1.0])
        sol = solve_lp(lp.build())
        if not sol.optimal:
            return np.inf
        return float(sol.objective)

    def to_dict(self):
        return {
            "monotone": self.monotone.tolist(),
            "delta": self.delta,
            "records": [
                {"x": r.x.tolist(), "lower": r.lower, "upper": r.upper, "slope": r.slope.tolist()}
                for r in self._records
            ],
        }

    @classmethod
    def from_dict(cls, d):
        store = cls(d["monotone"], d.get("delta"))
        for r in d["records"]:
            store.add(r["x"], r["lower"], r["upper"], r["slope"])
        return store


def oracle_lower(store, x):
    return store.lower(x)


def oracle_upper(store, x):
    return store.upper(x)
