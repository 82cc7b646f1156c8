import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import sparse

from benders_sddp.casegen import random_template
from benders_sddp.exceptions import RecourseInfeasibleError
from benders_sddp.extform import (SizeCapError, count_variables, extform_full, extform_value, infeasible_path,
                                  unfold)
from benders_sddp.lp import LpBuilder, solve_lp
from benders_sddp.model import FoldedTree, Instance, NodeSpec, RecourseTemplate, validate_instance
from benders_sddp.sddp import run_sddp

from conftest import chain_template


def test_additive_chain():
    t = chain_template([1.0, 2.0, 3.0], [1.0, 1.0, 1.0])
    assert extform_value(t, np.zeros(1)) == pytest.approx(6.0)


def test_two_stage_matches_direct_lp():
    t = random_template(np.random.default_rng(2), 2, 1, 1)
    x = np.array([0.5, 1.5])
    s1, s2 = t.stages
    b1, b2 = t.tree.b(1, 0, 0)[0], t.tree.b(2, 0, 0)[0]
    lp = LpBuilder()
    y1 = lp.add_vars(s1.n_y, cost=s1.cost, lb=s1.y_lower, ub=s1.y_upper)
    y2 = lp.add_vars(s2.n_y, cost=s2.cost, lb=s2.y_lower, ub=s2.y_upper)
    A1 = s1.A.tocoo()
    lp.add_rows(A1.row, y1[A1.col], A1.data, "<", s1.rhs + s1.coupling_rhs(x, b1))
    A2 = s2.A.tocoo()
    C = s2.C.tocoo()
    lp.add_rows(np.concatenate([A2.row, C.row]), np.concatenate([y2[A2.col], y1[C.col]]),
                np.concatenate([A2.data, -C.data]), "<", s2.rhs + s2.coupling_rhs(x, b2))
    direct = solve_lp(lp.build()).objective
    assert extform_value(t, x) == pytest.approx(direct, abs=1e-9)


def test_leaf_probabilities_sum_to_one():
    t = random_template(np.random.default_rng(3), 3, 2, 2)
    leaves = [n for n in unfold(t) if n.stage == 3]
    assert sum(n.probability for n in leaves) == pytest.approx(1.0, abs=1e-9)


def test_size_cap():
    t = random_template(np.random.default_rng(3), 3, 2, 2)
    assert count_variables(t) > 10
    with pytest.raises(SizeCapError):
        extform_value(t, np.ones(2), cap=10)


def test_within_converged_sddp_bounds():
    for seed in range(3):
        t = random_template(np.random.default_rng(seed), 3, 2, 2)
        x = np.array([0.8, 0.6])
        res = run_sddp(t, x, 1e-4)
        g = extform_value(t, x)
        assert res.lower_bound - 1e-7 <= g <= res.upper_bound + 1e-7


def relabel(t, perm):
    """Same tree with state ``perm[m]`` renamed to ``m``."""
    tree = t.tree
    reals = [tree.realizations[0][:, perm]]
    reals += [r[perm][:, perm] for r in tree.realizations[1:]]
    relabeled = FoldedTree(
        tree.n_states, tree.n_scenarios, tree.initial_probs[perm],
        [P[perm][:, perm] for P in tree.transition_probs], reals,
    )
    return RecourseTemplate(t.n_x, t.stages, relabeled, t.M_y, t.M_b)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_relabeling_invariance(seed):
    rng = np.random.default_rng(seed)
    t = random_template(rng, 3, 3, 1)
    x = rng.uniform(0, 2, 2)
    perm = rng.permutation(3)
    assert extform_value(relabel(t, perm), x) == pytest.approx(extform_value(t, x), abs=1e-9)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_convex_in_x(seed):
    rng = np.random.default_rng(seed)
    t = random_template(rng, 2, 2, 2)
    a, b = rng.uniform(0, 2, 2), rng.uniform(0, 2, 2)
    mid = extform_value(t, (a + b) / 2)
    assert mid <= (extform_value(t, a) + extform_value(t, b)) / 2 + 1e-8


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), j=st.integers(0, 1))
def test_nonincreasing_in_x(seed, j):
    rng = np.random.default_rng(seed)
    t = random_template(rng, 2, 2, 2)
    assert np.all(t.monotone == -1)
    x = rng.uniform(0, 1.5, 2)
    up = x.copy()
    up[j] += 0.5
    assert extform_value(t, up) <= extform_value(t, x) + 1e-8


def _pinned(template, x, cost):
    return validate_instance(
        Instance(
            cost=np.asarray(cost, float),
            lower=np.asarray(x, float),
            upper=np.asarray(x, float),
            constraints=sparse.csr_matrix((0, len(x))),
            rhs=np.zeros(0),
            nodes=[NodeSpec(0.7, np.arange(len(x)), "g")],
            recourse={"g": template},
        )
    )


def test_forced_master_point():
    t = random_template(np.random.default_rng(9), 3, 2, 2)
    x = np.array([0.4, 1.1])
    opt, xs = extform_full(_pinned(t, x, [1.0, 2.0]))
    assert xs == pytest.approx(x)
    assert opt == pytest.approx(1.0 * 0.4 + 2.0 * 1.1 + 0.7 * extform_value(t, x), abs=1e-8)


def test_constant_recourse():
    # nothing to buy: the recourse value is zero whatever x is
    t = chain_template([1.0, 1.0], [0.0, 0.0])
    inst = validate_instance(
        Instance(
            cost=np.array([0.5]), lower=np.zeros(1), upper=np.ones(1),
            constraints=sparse.csr_matrix((0, 1)), rhs=np.zeros(0),
            nodes=[NodeSpec(1.0, np.arange(1), "g")], recourse={"g": t},
        )
    )
    opt, xs = extform_full(inst)
    assert opt == pytest.approx(0.0)
    assert xs == pytest.approx([0.0])


def test_mps_dump(tmp_path):
    t = chain_template([1.0, 2.0], [1.0, 1.0])
    path = tmp_path / "eq.mps"
    extform_value(t, np.zeros(1), mps_path=str(path))
    assert "ROWS" in path.read_text()


def test_infeasibility_names_the_path():
    # stage 2 demand exceeds the purchase bound
    t = chain_template([1.0, 1.0, 1.0], [1.0, 200.0, 1.0])
    assert infeasible_path(t, np.zeros(1)) == (0, 0, 0)
    with pytest.raises(RecourseInfeasibleError, match=r"states \[0, 0\] via scenarios \[0\]"):
        extform_value(t, np.zeros(1))
