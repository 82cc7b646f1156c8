"""Deterministic-equivalent LPs built by unfolding the folded tree.

Only meant for validating the decomposition on small instances: the LP
grows with ``(states * scenarios) ** stages``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import RecourseInfeasibleError
from .lp import INFEASIBLE, LpBuilder, solve_lp, write_mps
from .model import Instance

DEFAULT_CAP = 200_000


class SizeCapError(ValueError):
    """The unfolded problem would exceed the variable cap."""


@dataclass
class TreeNode:
    stage: int
    state: int
    pred: int
    parent: int
    parent_copy: int
    probability: float
    path: tuple


def unfold(template):
    """All stage nodes in breadth-first order.

    Node probability is the product of initial, transition and uniform
    scenario probabilities along its path.  Each node holds one decision
    copy per scenario of its bundle.
    """
    tree = template.tree
    W = tree.n_scenarios
    nodes = [
        TreeNode(1, m, 0, -1, -1, float(tree.initial_probs[m]), (m,))
        for m in range(tree.n_states)
        if tree.initial_probs[m] > 0
    ]
    head = 0
    while head < len(nodes):
        node = nodes[head]
        if node.stage < template.n_stages:
            P = tree.transition_probs[node.stage - 1][node.state]
            for w in range(W):
                for n in np.flatnonzero(P > 0):
                    nodes.append(
                        TreeNode(
                            node.stage + 1, int(n), node.state, head, w,
                            node.probability * P[n] / W, node.path + (w, int(n)),
                        )
                    )
        head += 1
    return nodes


def count_variables(template):
    tree = template.tree
    W = tree.n_scenarios
    count = 0
    # number of nodes per state at each stage
    per_state = {m: 1 for m in range(tree.n_states) if tree.initial_probs[m] > 0}
    for d in range(1, template.n_stages + 1):
        count += sum(per_state.values()) * W * template.stages[d - 1].n_y
        if d == template.n_stages:
            break
        nxt = {}
        P = tree.transition_probs[d - 1]
        for m, c in per_state.items():
            for n in np.flatnonzero(P[m] > 0):
                nxt[int(n)] = nxt.get(int(n), 0) + c * W
        per_state = nxt
    return count


def _add_recourse(lp, template, weight, x_value=None, x_cols=None, cap=DEFAULT_CAP, nodes=None):
    """Append the unfolded recourse of one node to ``lp``.

    Exactly one of ``x_value`` (fixed master point) or ``x_cols`` (master
    columns already in ``lp``) is given.  ``nodes`` restricts the tree to a
    parent-closed subset (parents listed first, ``parent`` indexing the subset).
    """
    if count_variables(template) > cap:
        raise SizeCapError(
            f"unfolded recourse needs {count_variables(template)} variables, cap is {cap}"
        )
    tree = template.tree
    W = tree.n_scenarios
    if nodes is None:
        nodes = unfold(template)
    cols = []
    for node in nodes:
        st = template.stages[node.stage - 1]
        nr, ny = st.A.shape
        y = lp.add_vars(W * ny, cost=np.tile(st.cost, W) * node.probability / W * weight,
                        lb=np.tile(st.y_lower, W), ub=np.tile(st.y_upper, W))
        cols.append(y)
        bundle = tree.b(node.stage, node.pred, node.state)
        senses = list(st.senses) if st.senses is not None else ["<"] * nr
        const = np.zeros(nr) if st.rhs is None else st.rhs
        for w in range(W):
            A = st.A.tocoo()
            rows = [A.row]
            cc = [y[w * ny + A.col]]
            vals = [A.data]
            rhs = const.copy()
            if node.parent >= 0 and st.C is not None and st.C.nnz:
                C = st.C.tocoo()
                prev_ny = template.stages[node.stage - 2].n_y
                py = cols[node.parent][node.parent_copy * prev_ny + C.col]
                rows.append(C.row)
                cc.append(py)
                vals.append(-C.data)
            if x_value is not None:
                rhs = rhs + st.coupling_rhs(np.asarray(x_value, float), bundle[w])
            elif st.coupling.size:
                J = st.jac_x(bundle[w], template.n_x)
                r, c = np.nonzero(J)
                rows.append(r)
                cc.append(np.asarray(x_cols)[c])
                vals.append(-J[r, c])
            lp.add_rows(np.concatenate(rows), np.concatenate(cc), np.concatenate(vals), senses, rhs)
        if st.shared is not None:
            S, ssen, srhs = st.shared
            S = S.tocoo()
            lp.add_rows(S.row, y[S.col], S.data, [str(s) for s in ssen], srhs)
    return nodes, cols


def _describe(path):
    states = path[0::2]
    scenarios = path[1::2]
    return f"states {list(states)} via scenarios {list(scenarios)}"


def infeasible_path(template, x, max_nodes=2000):
    """Shortest root-to-node path whose own chain of stage problems is infeasible at ``x``.

    Returns the path as ``(m_1, w_1, m_2, ...)``, or None if every chain up to
    ``max_nodes`` nodes is feasible on its own (the conflict then involves
    sibling branches).
    """
    nodes = unfold(template)
    for node in nodes[:max_nodes]:
        chain = [node]
        while chain[-1].parent >= 0:
            chain.append(nodes[chain[-1].parent])
        chain.reverse()
        local = [TreeNode(c.stage, c.state, c.pred, i - 1, c.parent_copy, 1.0, c.path)
                 for i, c in enumerate(chain)]
        lp = LpBuilder()
        _add_recourse(lp, template, 0.0, x_value=x, nodes=local)
        if solve_lp(lp.build()).status == INFEASIBLE:
            return node.path
    return None


def extform_problem(template, x, cap=DEFAULT_CAP):
    lp = LpBuilder()
    _add_recourse(lp, template, 1.0, x_value=x, cap=cap)
    return lp.build()


def extform_value(template, x, cap=DEFAULT_CAP, mps_path=None):
    """Exact recourse value ``g(x)`` of one template.

    ``template`` may also be an :class:`Instance` paired with a node index
    passed as ``x=(node, x_full)``.
    """
    if isinstance(template, Instance):
        node, x_full = x
        x = template.node_x(node, x_full)
        template = template.template(node)
    problem = extform_problem(template, x, cap)
    if mps_path:
        write_mps(problem, mps_path)
    sol = solve_lp(problem)
    if sol.status == INFEASIBLE:
        path = infeasible_path(template, x)
        where = "no single path is infeasible on its own" if path is None else _describe(path)
        raise RecourseInfeasibleError(f"deterministic equivalent infeasible at the given x: {where}")
    if not sol.optimal:
        raise RecourseInfeasibleError(f"deterministic equivalent {sol.status}")
    return float(sol.objective)


def extform_full(instance, cap=DEFAULT_CAP, mps_path=None):
    """Optimal value and master decision of the whole problem in one LP."""
    lp = LpBuilder()
    n = instance.n_master
    xc = lp.add_vars(n, cost=instance.cost, lb=instance.lower, ub=instance.upper)
    if instance.rhs.size:
        lp.add_matrix_rows(instance.constraints, xc, "<", instance.rhs)
    total = 0
    for i, node in enumerate(instance.nodes):
        t = instance.template(i)
        total += count_variables(t)
        if total > cap:
            raise SizeCapError(f"unfolded master problem exceeds cap of {cap} variables")
        if node.probability == 0:
            continue
        _add_recourse(lp, t, node.probability, x_cols=xc[node.x_indices], cap=cap)
    problem = lp.build()
    if mps_path:
        write_mps(problem, mps_path)
    sol = solve_lp(problem)
    if sol.status == INFEASIBLE:
        raise RecourseInfeasibleError("full deterministic equivalent infeasible")
    if not sol.optimal:
        raise RecourseInfeasibleError(f"full deterministic equivalent {sol.status}")
    return float(sol.objective), sol.x[:n].copy()
