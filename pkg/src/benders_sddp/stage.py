"""Stage problems over all scenario copies of one (stage, predecessor, state).

Each problem holds one copy ``y^w`` of the stage decision per scenario of the
bundle, the stage rows of every copy, the optional shared rows linking
copies, and a cost-to-go term per (scenario, successor state).  The lower
problem bounds those terms with the successor cut stores, the upper problem
with the successor point stores.

A stage only sees its predecessor through ``C_d y_{d-1}`` on the rows where
``C_d`` is nonzero (the *linked state*).  Envelopes are kept in that space,
which is usually far smaller than the decision vector.

Stages are 1-based, states and scenarios 0-based.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .envelopes import BASIC, upper_envelope_value
from .exceptions import RecourseInfeasibleError
from .lp import INFEASIBLE, LpBuilder, PersistentLp


@dataclass
class StageResult:
    """Outcome of one stage solve.

    ``values[w, n]`` is the cost-to-go estimate of successor ``n`` after
    scenario copy ``w`` (NaN where the successor has zero probability).
    Subgradients are only set by the lower problem: ``sigma`` w.r.t. the
    linked state, ``lam`` w.r.t. the master point, ``nu`` w.r.t. the
    flattened bundle and ``cross`` the mixed x-b coefficients.
    ``sigma_y`` is ``sigma`` pulled back to the full previous decision.
    """

    theta: float
    y: np.ndarray | None
    values: np.ndarray | None
    sigma: np.ndarray | None = None
    lam: np.ndarray | None = None
    nu: np.ndarray | None = None
    cross: np.ndarray | None = None
    sigma_y: np.ndarray | None = None


@dataclass
class _Skeleton:
    """Everything about a stage LP that does not depend on x, y_prev or cuts."""

    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray
    senses: list
    const_rhs: np.ndarray
    n_stage_rows: int
    cost: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    C: sparse.csr_matrix | None
    link_rows: np.ndarray
    C_link: sparse.csr_matrix | None


def _skeleton(template, d):
    cache = template.__dict__.setdefault("_stage_skeletons", {})
    sk = cache.get(d)
    if sk is not None:
        return sk
    st = template.stages[d - 1]
    W = template.tree.n_scenarios
    nr, ny = st.A.shape
    blockA = sparse.kron(sparse.identity(W, format="csr"), st.A, format="coo")
    senses = list(st.senses) if st.senses is not None else ["<"] * nr
    senses = senses * W
    rhs0 = np.zeros(nr) if st.rhs is None else st.rhs
    const_rhs = np.tile(rhs0, W)
    rows, cols, vals = [blockA.row], [blockA.col], [blockA.data]
    if st.shared is not None:
        S, ssen, srhs = st.shared
        S = S.tocoo()
        rows.append(S.row + W * nr)
        cols.append(S.col)
        vals.append(S.data)
        senses = senses + [str(s) for s in ssen]
        const_rhs = np.concatenate([const_rhs, srhs])
    C = None
    link_rows = np.zeros(0, int)
    C_link = None
    if d > 1 and st.C is not None and st.C.nnz:
        C = st.C.tocsr()
        link_rows = st.link_rows
        C_link = C[link_rows]
    sk = _Skeleton(
        rows=np.concatenate(rows),
        cols=np.concatenate(cols),
        vals=np.concatenate(vals),
        senses=senses,
        const_rhs=const_rhs,
        n_stage_rows=W * nr,
        cost=np.tile(st.cost, W) / W,
        lb=np.tile(st.y_lower, W),
        ub=np.tile(st.y_upper, W),
        C=C,
        link_rows=link_rows,
        C_link=C_link,
    )
    cache[d] = sk
    return sk


def _stage_rhs(template, d, x, y_prev, bundle, sk):
    st = template.stages[d - 1]
    W = template.tree.n_scenarios
    nr = st.n_rows
    rhs = sk.const_rhs.copy()
    prev = sk.C @ y_prev if sk.C is not None else 0.0
    for w in range(W):
        rhs[w * nr:(w + 1) * nr] += st.coupling_rhs(x, bundle[w]) + prev
    return rhs


def linked_state(template, d, y_prev):
    """``C_d y_prev`` on the linked rows of stage ``d``."""
    if d == 1 or y_prev is None:
        return np.zeros(0)
    return template.stages[d - 1].link(y_prev)


def _next_link(template, d):
    """Linking matrix of stage ``d + 1`` as a dense array (rows x n_y of stage d)."""
    if d >= template.n_stages:
        return None
    sk = _skeleton(template, d + 1)
    if sk.C_link is None:
        return np.zeros((0, template.stages[d - 1].n_y))
    return sk.C_link.toarray()


def _successors(template, d, m):
    if d >= template.n_stages:
        return np.zeros(0, int), np.zeros(0)
    P = template.tree.transition_probs[d - 1][m]
    succ = np.flatnonzero(P > 0)
    return succ, P[succ]


def _where(d, l, m):
    return f"stage {d}, predecessor {'-' if d == 1 else l}, state {m}"


def _check(sol, d, l, m, what):
    if sol.status == INFEASIBLE:
        raise RecourseInfeasibleError(
            f"{what} problem infeasible at {_where(d, l, m)}: relatively complete recourse violated"
        )
    if not sol.optimal:
        raise RecourseInfeasibleError(f"{what} problem {sol.status} at {_where(d, l, m)}")
    return sol


def _models(store, template, kind, d, m):
    """Per-thread cache of live stage models on the store."""
    key = (kind, id(template), d, m, threading.get_ident())
    return store.lp_cache, key


def _lower_values(cuts, floor, alpha, links):
    """Exact cut-max at each scenario copy's linked state."""
    if cuts is None:
        return np.full(links.shape[0], floor)
    return np.maximum(floor, np.max(alpha[None, :] + links @ cuts.sigma.T, axis=1))


class _LowerModel:
    """Stage rows plus one cost-to-go column per (copy, successor); cut rows only grow."""

    def __init__(self, template, store, d, m):
        sk = _skeleton(template, d)
        W = template.tree.n_scenarios
        lp = LpBuilder()
        lp.add_vars(sk.cost.size, cost=sk.cost, lb=sk.lb, ub=sk.ub)
        lp.add_rows(sk.rows, sk.cols, sk.vals, sk.senses, np.zeros(len(sk.senses)))
        self.succ, self.probs = _successors(template, d, m)
        self.theta_cols = [lp.add_vars(W, cost=p / W, lb=store.floor(d + 1, n))
                           for n, p in zip(self.succ, self.probs)]
        self.lp = PersistentLp(lp.build())
        self.stage_rows = np.arange(len(sk.senses))
        self.senses = np.asarray(sk.senses)
        self.cut_rows = [np.zeros((W, 0), int) for _ in self.succ]
        self.n_y = template.stages[d - 1].n_y
        self.W = W

    def sync(self, j, cuts, C_next):
        """Append rows for cuts added since the last call; False if the store shrank."""
        k = 0 if cuts is None else len(cuts)
        k0 = self.cut_rows[j].shape[1]
        if k < k0:
            return False
        if k == k0:
            return True
        W, ny = self.W, self.n_y
        G = cuts.sigma[k0:] @ C_next
        kn = k - k0
        r_g, c_g = np.nonzero(G)
        rows, cols, vals = [], [], []
        for w in range(W):
            # theta^{wn} - sigma_s . C y^w >= alpha_s
            base = w * kn
            rows += [base + np.arange(kn), base + r_g]
            cols += [np.full(kn, self.theta_cols[j][w]), w * ny + c_g]
            vals += [np.ones(kn), -G[r_g, c_g]]
        M = sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                              shape=(W * kn, self.lp.n_cols))
        ids = self.lp.add_rows(M, ">", np.zeros(W * kn)).reshape(W, kn)
        self.cut_rows[j] = np.hstack([self.cut_rows[j], ids])
        return True


def solve_lower_stage(template, store, d, m, l, x, y_prev, bundle):
    """Cut-based lower bound for stage ``d`` at state ``m`` reached from ``l``.

    ``bundle`` is the realisation array of shape ``(W, n_b)`` for this arc.
    """
    x = np.asarray(x, float)
    bundle = np.asarray(bundle, float)
    st = template.stages[d - 1]
    W = template.tree.n_scenarios
    nr, ny = st.A.shape
    sk = _skeleton(template, d)
    enhanced = store.mode != BASIC
    tree = template.tree
    C_next = _next_link(template, d)

    cache, key = _models(store, template, "lower", d, m)
    model = cache.get(key)
    snaps = [store.cuts(d + 1, n, pred=m) for n in _successors(template, d, m)[0]]
    if model is None or not all(model.sync(j, c, C_next) for j, c in enumerate(snaps)):
        model = cache[key] = _LowerModel(template, store, d, m)
        for j, c in enumerate(snaps):
            model.sync(j, c, C_next)
    lp = model.lp
    lp.set_rhs(model.stage_rows, model.senses, _stage_rhs(template, d, x, y_prev, bundle, sk))
    offsets = []
    for j, (n, cuts) in enumerate(zip(model.succ, snaps)):
        if cuts is None:
            offsets.append(None)
            continue
        b_next = tree.b(d + 1, m, n).ravel()
        alpha, x_slope = cuts.offsets(x if enhanced else None, b_next if enhanced else None)
        ids = model.cut_rows[j]
        lp.set_rhs(ids.ravel(), np.full(ids.size, ">"), np.tile(alpha, W))
        offsets.append((alpha, x_slope))

    sol = _check(lp.solve(), d, l, m, "lower")
    ys = sol.x[: W * ny].reshape(W, ny)
    pi_stage = sol.duals[: W * nr].reshape(W, nr)

    values = np.full((W, tree.n_states), np.nan)
    if model.succ.size:
        links = ys @ C_next.T
        for n, cuts, offs in zip(model.succ, snaps, offsets):
            values[:, n] = _lower_values(cuts, store.floor(d + 1, n), None if offs is None else offs[0], links)

    sigma = np.zeros(sk.link_rows.size)
    sigma_y = np.zeros(0) if d == 1 else np.zeros(template.stages[d - 2].n_y)
    if sk.C_link is not None:
        sigma = pi_stage[:, sk.link_rows].sum(axis=0)
        sigma_y = np.asarray(sk.C_link.T @ sigma).ravel()

    lam = nu = cross = None
    if enhanced:
        n_x = template.n_x
        n_b = bundle.shape[1]
        lam = np.zeros(n_x)
        nu = np.zeros(W * n_b)
        cross = np.zeros((n_x, W * n_b))
        Jb = st.jac_b(x, n_b)
        for w in range(W):
            lam += st.jac_x(bundle[w], n_x).T @ pi_stage[w]
            nu[w * n_b:(w + 1) * n_b] = Jb.T @ pi_stage[w]
            if st.coupling.size:
                rows, xj, bk, v = st._unpack()
                np.add.at(cross, (xj, w * n_b + bk), v * pi_stage[w, rows])
        for j, offs in enumerate(offsets):
            if offs is None:
                continue
            pi_cut = sol.duals[model.cut_rows[j]].sum(axis=0)
            lam += offs[1].T @ pi_cut

    return StageResult(float(sol.objective), ys, values, sigma, lam, nu, cross, sigma_y)


def _extends(old, new):
    if new is old:
        return True
    k = len(old)
    if len(new) < k or (old.anchor_b is None) != (new.anchor_b is None):
        return False
    same = np.array_equal(old.theta, new.theta[:k]) and np.array_equal(old.anchor_y, new.anchor_y[:k])
    return same and (old.anchor_b is None or np.array_equal(old.anchor_b, new.anchor_b[:k]))


class _UpperModel:
    """Stage rows plus a convex-combination block per (copy, successor).

    Point columns are appended while the successor stores only grow.  With
    the decision columns fixed and the stage rows relaxed the same model gives
    the envelope value of every block at a trial decision.
    """

    def __init__(self, template, store, d, m, snaps):
        sk = _skeleton(template, d)
        tree = template.tree
        W = tree.n_scenarios
        ny = template.stages[d - 1].n_y
        lp = LpBuilder()
        lp.add_vars(sk.cost.size, cost=sk.cost, lb=sk.lb, ub=sk.ub)
        lp.add_rows(sk.rows, sk.cols, sk.vals, sk.senses, np.zeros(len(sk.senses)))
        self.succ, self.probs = _successors(template, d, m)
        enhanced = store.mode != BASIC
        M_y, M_b = store.M_y, store.M_b
        C_next = _next_link(template, d)
        nl = 0 if C_next is None else C_next.shape[0]
        rc, cc = np.nonzero(C_next) if nl else (np.zeros(0, int), np.zeros(0, int))
        self.blocks = []
        for n, p, pts in zip(self.succ, self.probs, snaps):
            b_next = tree.b(d + 1, m, n).ravel()
            weight = p / W
            use_b = enhanced and pts.anchor_b is not None
            for w in range(W):
                gp = lp.add_vars(nl, cost=weight * M_y, lb=0.0)
                gm = lp.add_vars(nl, cost=weight * M_y, lb=0.0)
                # sum_s mu_s yhat_s - g+ + g- - C y^w = 0
                rows = np.concatenate([np.arange(nl), np.arange(nl), rc])
                cols = np.concatenate([gp, gm, w * ny + cc])
                vals = np.concatenate([-np.ones(nl), np.ones(nl), -C_next[rc, cc]])
                match = lp.add_rows(rows, cols, vals, "=", np.zeros(nl))
                slack = [(gp, M_y), (gm, M_y)]
                b_rows = None
                if use_b:
                    nb = b_next.size
                    zp = lp.add_vars(nb, cost=weight * M_b, lb=0.0)
                    zm = lp.add_vars(nb, cost=weight * M_b, lb=0.0)
                    rows = np.concatenate([np.arange(nb), np.arange(nb)])
                    cols = np.concatenate([zp, zm])
                    vals = np.concatenate([-np.ones(nb), np.ones(nb)])
                    b_rows = lp.add_rows(rows, cols, vals, "=", b_next)
                    slack += [(zp, M_b), (zm, M_b)]
                conv = lp.add_rows(np.zeros(0, int), np.zeros(0, int), np.zeros(0), "=", [1.0])
                self.blocks.append(dict(n=n, j=len(self.blocks) // W, w=w, weight=weight, match=match, b_rows=b_rows,
                                        conv=int(conv[0]), slack=slack, mu=np.zeros(0, int)))
        self.lp = PersistentLp(lp.build())
        self.stage_rows = np.arange(len(sk.senses))
        self.senses = np.asarray(sk.senses)
        self.y_cols = np.arange(sk.cost.size)
        self.y_lb, self.y_ub = sk.lb, sk.ub
        self.fixed = False
        self.snaps = [None] * len(snaps)
        self.sync(snaps)

    def sync(self, snaps):
        """Append point columns; False if some store no longer extends the old one."""
        if not all(old is None or _extends(old, new) for old, new in zip(self.snaps, snaps)):
            return False
        rows, cidx, vals, costs, owners = [], [], [], [], []
        n_new = 0
        for blk in self.blocks:
            new, old = snaps[blk["j"]], self.snaps[blk["j"]]
            k0 = 0 if old is None else len(old)
            kn = len(new) - k0
            if kn == 0:
                continue
            cols = n_new + np.arange(kn)
            r, c = np.nonzero(new.anchor_y[k0:].T)
            rows += [blk["match"][r]]
            cidx += [cols[c]]
            vals += [new.anchor_y[k0:].T[r, c]]
            if blk["b_rows"] is not None:
                r, c = np.nonzero(new.anchor_b[k0:].T)
                rows += [blk["b_rows"][r]]
                cidx += [cols[c]]
                vals += [new.anchor_b[k0:].T[r, c]]
            rows += [np.full(kn, blk["conv"])]
            cidx += [cols]
            vals += [np.ones(kn)]
            costs += [blk["weight"] * new.theta[k0:]]
            owners.append((blk, kn))
            n_new += kn
        if n_new:
            M = sparse.csc_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cidx))),
                                  shape=(self.lp.n_rows, n_new))
            ids = self.lp.add_cols(np.concatenate(costs), np.zeros(n_new), np.full(n_new, np.inf), M)
            start = 0
            for blk, kn in owners:
                blk["mu"] = np.concatenate([blk["mu"], ids[start:start + kn]])
                start += kn
        self.snaps = list(snaps)
        return True

    def block_values(self, sol, n_states):
        """Unweighted envelope value of every (copy, successor) block."""
        values = np.full((self.blocks[-1]["w"] + 1, n_states), np.nan)
        for blk in self.blocks:
            v = self.snaps[blk["j"]].theta @ sol.x[blk["mu"]]
            for cols, M in blk["slack"]:
                v += M * sol.x[cols].sum()
            values[blk["w"], blk["n"]] = v
        return values


def _upper_model(template, store, d, m, x):
    """Live upper model of ``(d, m)``, or None if a successor store is empty."""
    snaps = []
    for n in _successors(template, d, m)[0]:
        pts = store.points(d + 1, n, x=x, pred=m)
        if pts is None:
            return None
        snaps.append(pts)
    cache, key = _models(store, template, "upper", d, m)
    model = cache.get(key)
    if model is None or not model.sync(snaps):
        model = cache[key] = _UpperModel(template, store, d, m, snaps)
    return model


def solve_upper_stage(template, store, d, m, l, x, y_prev, bundle):
    """Point-based upper bound; ``theta`` is ``inf`` if a successor store is empty.

    ``values`` is left unset; :func:`solve_upper_stage_fixed` gives the
    per-successor terms at any decision.
    """
    x = np.asarray(x, float)
    bundle = np.asarray(bundle, float)
    W = template.tree.n_scenarios
    ny = template.stages[d - 1].n_y
    model = _upper_model(template, store, d, m, x)
    if model is None:
        return StageResult(np.inf, None, None)
    lp = model.lp
    if model.fixed:
        lp.set_col_bounds(model.y_cols, model.y_lb, model.y_ub)
        model.fixed = False
    sk = _skeleton(template, d)
    lp.set_rhs(model.stage_rows, model.senses, _stage_rhs(template, d, x, y_prev, bundle, sk))
    sol = _check(lp.solve(), d, l, m, "upper")
    ys = sol.x[: W * ny].reshape(W, ny)
    return StageResult(float(sol.objective), ys, None)


def solve_upper_stage_fixed(template, store, d, m, x, y_trial):
    """Upper cost-to-go per (scenario copy, successor) with the decision fixed.

    Returns an array of shape ``(W, n_states)``; absent successors are NaN and
    successors with an empty point store are ``inf``.
    """
    tree = template.tree
    W = tree.n_scenarios
    values = np.full((W, tree.n_states), np.nan)
    succ, _ = _successors(template, d, m)
    if succ.size == 0:
        return values
    x = np.asarray(x, float)
    model = _upper_model(template, store, d, m, x)
    if model is not None:
        y = np.asarray(y_trial, float).ravel()
        lp = model.lp
        lp.relax_rows(model.stage_rows)
        lp.set_col_bounds(model.y_cols, y, y)
        model.fixed = True
        sol = _check(lp.solve(), d, "-", m, "upper envelope")
        return model.block_values(sol, tree.n_states)
    # some successor has no points yet: evaluate the others one block at a time
    enhanced = store.mode != BASIC
    links = np.asarray(y_trial) @ _next_link(template, d).T
    for n in succ:
        pts = store.points(d + 1, n, x=x, pred=m)
        if pts is None:
            values[:, n] = np.inf
            continue
        b_next = tree.b(d + 1, m, n).ravel() if enhanced else None
        for w in range(W):
            values[w, n] = upper_envelope_value(pts, links[w], b_next, store.M_y, store.M_b)
    return values


def stage_cost(template, d, ys):
    """Expected immediate cost of the copies ``ys`` (shape ``(W, n_y)``)."""
    st = template.stages[d - 1]
    return float(np.mean(ys @ st.cost))
