import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from benders_sddp.casegen import random_template
from benders_sddp.envelopes import BASIC, ENHANCED, EnvelopeStore, LowerCut, UpperPoint
from benders_sddp.exceptions import CapExceededError
from benders_sddp.extform import extform_value
from benders_sddp.sddp import run_sddp
from benders_sddp.stage import (
    linked_state,
    solve_lower_stage,
    solve_upper_stage,
    solve_upper_stage_fixed,
)

from conftest import chain_template


def chain():
    # g(x) = max(2 - x, 0) + max(3 - x, 0)
    return chain_template([1.0, 1.0], [2.0, 3.0])


def test_terminal_stage_is_plain_lp():
    t = chain()
    s = EnvelopeStore.for_template(t)
    x = np.array([1.0])
    low = solve_lower_stage(t, s, 2, 0, 0, x, np.zeros(1), t.tree.b(2, 0, 0))
    assert low.theta == pytest.approx(2.0)
    # the row reads -y <= -3 + x * b1, so raising b1 or x by one unit frees x or b1 units
    assert low.nu == pytest.approx([0.0, -1.0])
    assert low.lam == pytest.approx([-1.0])


def test_empty_successor_stores_give_myopic_cost():
    t = chain()
    s = EnvelopeStore.for_template(t)
    low = solve_lower_stage(t, s, 1, 0, 0, np.zeros(1), None, t.tree.b(1, 0, 0))
    assert low.theta == pytest.approx(2.0)
    assert low.values[0, 0] == 0.0


def test_upper_matches_lower_at_last_stage():
    t = chain()
    s = EnvelopeStore.for_template(t)
    x = np.array([0.5])
    args = (t, s, 2, 0, 0, x, np.zeros(1), t.tree.b(2, 0, 0))
    assert solve_upper_stage(*args).theta == pytest.approx(solve_lower_stage(*args).theta, abs=1e-9)


def test_empty_successor_point_store_is_infinite():
    t = chain()
    s = EnvelopeStore.for_template(t)
    up = solve_upper_stage(t, s, 1, 0, 0, np.zeros(1), None, t.tree.b(1, 0, 0))
    assert up.theta == np.inf


def _three_stage(seed=3, mode=ENHANCED):
    t = random_template(np.random.default_rng(seed), 3, 2, 2)
    return t, EnvelopeStore.for_template(t, mode)


def test_single_point_upper_is_lipschitz_extrapolation():
    t, s = _three_stage()
    x = np.array([0.7, 1.1])
    b3 = t.tree.b(3, 0, 1).ravel()
    nl = t.stages[2].link_rows.size
    for n in range(2):
        s.add_upper_point(3, n, UpperPoint(4.0, np.full(nl, 0.3), b3 + 0.1), x=x)
    low = solve_lower_stage(t, s, 2, 0, 0, x, np.zeros(t.stages[0].n_y), t.tree.b(2, 0, 0))
    fixed = solve_upper_stage_fixed(t, s, 2, 0, x, low.y)
    succ = t.tree.successors(2, 0)
    for w in range(t.tree.n_scenarios):
        yhat = linked_state(t, 3, low.y[w])
        for n in succ:
            b_next = t.tree.b(3, 0, n).ravel()
            manual = 4.0 + t.M_y * np.abs(yhat - 0.3).sum() + t.M_b * np.abs(b_next - b3 - 0.1).sum()
            assert fixed[w, n] == pytest.approx(manual, rel=1e-9)


def test_upper_stage_composes_with_envelope():
    # with one point per successor the upper problem is the stage cost plus the
    # extrapolated envelope, minimised over y; at the optimum the pieces add up
    t, s = _three_stage()
    x = np.array([0.7, 1.1])
    nl = t.stages[2].link_rows.size
    for n in range(2):
        s.add_upper_point(3, n, UpperPoint(2.0 + n, np.zeros(nl), t.tree.b(3, 0, n).ravel()), x=x)
    bundle = t.tree.b(2, 0, 0)
    y_prev = np.zeros(t.stages[0].n_y)
    up = solve_upper_stage(t, s, 2, 0, 0, x, y_prev, bundle)
    fixed = solve_upper_stage_fixed(t, s, 2, 0, x, up.y)
    P = t.tree.transition_probs[1][0]
    cost = np.mean(up.y @ t.stages[1].cost)
    succ = np.flatnonzero(P > 0)
    expected = cost + np.mean([P[succ] @ fixed[w, succ] for w in range(t.tree.n_scenarios)])
    assert up.theta == pytest.approx(expected, rel=1e-8, abs=1e-8)


def _warm(t, mode, x, cap=3):
    s = EnvelopeStore.for_template(t, mode)
    try:
        run_sddp(t, x, 1e-9, mode, iteration_cap=cap, store=s)
    except CapExceededError:
        pass
    return s


def test_fixed_upper_dominates_lower_values():
    t, _ = _three_stage()
    x = np.array([0.4, 1.5])
    s = _warm(t, ENHANCED, x)
    for d in (1, 2):
        for m in range(2):
            y_prev = None if d == 1 else np.zeros(t.stages[0].n_y)
            low = solve_lower_stage(t, s, d, m, 0, x, y_prev, t.tree.b(d, 0, m))
            fixed = solve_upper_stage_fixed(t, s, d, m, x, low.y)
            ok = ~np.isnan(low.values)
            assert np.all(fixed[ok] >= low.values[ok] - 1e-7)


def test_fixing_at_upper_optimum_reproduces_its_values():
    t, _ = _three_stage()
    x = np.array([0.4, 1.5])
    s = _warm(t, ENHANCED, x, cap=4)
    y_prev = np.zeros(t.stages[0].n_y)
    bundle = t.tree.b(2, 0, 1)
    up = solve_upper_stage(t, s, 2, 1, 0, x, y_prev, bundle)
    fixed = solve_upper_stage_fixed(t, s, 2, 1, x, up.y)
    cost = np.mean(up.y @ t.stages[1].cost)
    P = t.tree.transition_probs[1][1]
    succ = np.flatnonzero(P > 0)
    tail = np.mean([P[succ] @ fixed[w, succ] for w in range(t.tree.n_scenarios)])
    assert cost + tail == pytest.approx(up.theta, rel=1e-7, abs=1e-7)


@pytest.mark.parametrize("seed", range(6))
def test_paired_gap_bounded_by_largest_successor_gap(seed):
    t = random_template(np.random.default_rng(100 + seed), 3, 2, 2)
    x = np.random.default_rng(seed).uniform(0, 2, 2)
    s = _warm(t, ENHANCED, x, cap=2)
    for d in (1, 2):
        for l in range(1 if d == 1 else 2):
            for m in range(2):
                y_prev = None if d == 1 else np.full(t.stages[0].n_y, 0.5)
                bundle = t.tree.b(d, l, m)
                low = solve_lower_stage(t, s, d, m, l, x, y_prev, bundle)
                up = solve_upper_stage(t, s, d, m, l, x, y_prev, bundle)
                if not np.isfinite(up.theta):
                    continue
                fixed = solve_upper_stage_fixed(t, s, d, m, x, low.y)
                gaps = fixed - low.values
                worst = np.nanmax(gaps) if np.any(~np.isnan(gaps)) else 0.0
                assert up.theta - low.theta <= worst + 1e-7


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), which=st.sampled_from(["x", "y", "b", "all"]))
def test_lower_stage_subgradients(seed, which):
    rng = np.random.default_rng(seed)
    t = random_template(rng, 3, 1, 2)
    x = rng.uniform(0, 2, 2)
    s = _warm(t, ENHANCED, x, cap=2)
    y_prev = rng.uniform(0, 1, t.stages[0].n_y)
    bundle = t.tree.b(2, 0, 0)
    base = solve_lower_stage(t, s, 2, 0, 0, x, y_prev, bundle)
    dx = rng.normal(0, 0.3, 2) if which in ("x", "all") else np.zeros(2)
    dy = rng.normal(0, 0.3, y_prev.size) if which in ("y", "all") else np.zeros(y_prev.size)
    db = rng.normal(0, 0.3, bundle.shape) if which in ("b", "all") else np.zeros(bundle.shape)
    moved = solve_lower_stage(t, s, 2, 0, 0, x + dx, y_prev + dy, bundle + db)
    db = db.ravel()
    predicted = base.theta + base.lam @ dx + base.sigma_y @ dy + base.nu @ db + dx @ base.cross @ db
    assert moved.theta >= predicted - 1e-7


def test_basic_and_enhanced_agree_on_equivalent_cuts():
    t, _ = _three_stage(seed=8)
    x = np.array([1.2, 0.3])
    nl = t.stages[1].link_rows.size
    basic = EnvelopeStore.for_template(t, BASIC)
    enh = EnvelopeStore.for_template(t, ENHANCED)
    rng = np.random.default_rng(1)
    for n in range(2):
        b2 = t.tree.b(2, 0, n).ravel()
        for _ in range(3):
            theta, sig, anchor = rng.uniform(0, 3), rng.uniform(-1, 1, nl), rng.uniform(0, 1, nl)
            lam, nu = rng.uniform(-1, 1, 2), rng.uniform(-1, 1, b2.size)
            cross = rng.uniform(-1, 1, (2, b2.size))
            enh.add_lower_cut(2, n, LowerCut(theta, sig, anchor, lam, nu, x.copy(), b2.copy(), cross))
            for pred in range(2):
                # same cut once x and this predecessor's bundle are fixed
                shift = nu @ (t.tree.b(2, pred, n).ravel() - b2)
                basic.add_lower_cut(2, n, LowerCut(theta + shift, sig, anchor), pred=pred)
    for m in range(2):
        bundle = t.tree.b(1, 0, m)
        a = solve_lower_stage(t, basic, 1, m, 0, x, None, bundle)
        b = solve_lower_stage(t, enh, 1, m, 0, x, None, bundle)
        assert a.theta == pytest.approx(b.theta, abs=1e-9)


def test_lower_stage_bounds_and_closes_on_two_stage_instances():
    for seed in range(5):
        t = random_template(np.random.default_rng(seed), 2, 1, 2)
        x = np.array([0.5, 1.0])
        V = extform_value(t, x)
        s = EnvelopeStore.for_template(t)
        first = solve_lower_stage(t, s, 1, 0, 0, x, None, t.tree.b(1, 0, 0))
        assert first.theta <= V + 1e-7
        res = run_sddp(t, x, 1e-8, store=s)
        assert res.upper_bound - res.lower_bound <= 1e-7
        assert res.lower_bound <= V + 1e-7 <= res.upper_bound + 2e-7
