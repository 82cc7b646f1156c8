import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from benders_sddp.envelopes import (
    BASIC,
    ENHANCED,
    EnvelopeStore,
    LowerCut,
    UpperPoint,
)
from benders_sddp.exceptions import LipschitzViolationError


def store(mode=ENHANCED, M_y=10.0, M_b=10.0, lb=0.0):
    return EnvelopeStore(mode, M_y, M_b, np.full((3, 2), lb))


def test_constant_cut():
    s = store()
    s.add_lower_cut(2, 0, LowerCut(5.0, np.zeros(1), np.zeros(1)))
    for y in (-3.0, 0.0, 7.5):
        assert s.eval_lower(2, 0, [y]) == pytest.approx(5.0)


def test_max_of_two_cuts():
    s = store()
    s.add_lower_cut(2, 0, LowerCut(0.0, np.array([1.0]), np.array([0.0])))
    s.add_lower_cut(2, 0, LowerCut(1.0, np.array([-1.0]), np.array([1.0])))
    assert s.eval_lower(2, 0, [0.5]) == pytest.approx(1.5)


def test_empty_store_returns_floor():
    assert store(lb=0.0).eval_lower(2, 1, [1.0]) == 0.0
    assert store(lb=-4.0).eval_lower(2, 1, [1.0]) == -4.0
    assert store().eval_upper(2, 1, [1.0]) == np.inf


def test_single_point_extrapolates():
    s = store(M_y=2.0)
    s.add_upper_point(2, 0, UpperPoint(10.0, np.array([0.0])))
    assert s.eval_upper(2, 0, [1.0]) == pytest.approx(12.0)


def test_interpolation_beats_extrapolation():
    s = store(M_y=10.0)
    s.add_upper_point(2, 0, UpperPoint(4.0, np.array([0.0])))
    s.add_upper_point(2, 0, UpperPoint(8.0, np.array([2.0])))
    assert s.eval_upper(2, 0, [1.0]) == pytest.approx(6.0)
    assert s.eval_upper(2, 0, [0.0]) <= 4.0 + 1e-12


def test_steep_cut_is_rejected():
    s = store(M_y=1.5)
    with pytest.raises(LipschitzViolationError):
        s.add_lower_cut(2, 0, LowerCut(0.0, np.array([3.0]), np.zeros(1)))


def test_duplicate_cut_changes_nothing():
    s = store()
    cut = LowerCut(1.0, np.array([0.5, -0.5]), np.zeros(2))
    s.add_lower_cut(2, 0, cut)
    before = s.eval_lower(2, 0, [0.3, 0.9])
    s.add_lower_cut(2, 0, cut)
    assert s.eval_lower(2, 0, [0.3, 0.9]) == before


def test_cut_at_anchor_is_attained():
    s = store()
    s.add_lower_cut(2, 0, LowerCut(3.0, np.array([1.0]), np.array([2.0])))
    assert s.eval_lower(2, 0, [2.0]) >= 3.0


def test_enhanced_store_is_shared_by_predecessors():
    s = store(ENHANCED)
    s.add_lower_cut(2, 1, LowerCut(2.0, np.zeros(1), np.zeros(1)))
    assert s.cuts(2, 1, pred=0) is s.cuts(2, 1, pred=1)
    b = store(BASIC)
    b.add_lower_cut(2, 1, LowerCut(2.0, np.zeros(1), np.zeros(1)), pred=0)
    assert b.cuts(2, 1, pred=1) is None
    with pytest.raises(ValueError):
        b.add_lower_cut(2, 1, LowerCut(2.0, np.zeros(1), np.zeros(1)))


def test_points_are_filed_per_master_point():
    s = store()
    s.add_upper_point(2, 0, UpperPoint(1.0, np.zeros(1)), x=np.array([1.0]))
    assert s.eval_upper(2, 0, [0.0], x=np.array([1.0])) == pytest.approx(1.0)
    assert s.eval_upper(2, 0, [0.0], x=np.array([2.0])) == np.inf


def test_cross_term_is_exact_for_bilinear_rhs():
    # value  x * b  at anchor (x, b) = (1, 2): lam = b, nu = x, cross = 1
    cut = LowerCut(2.0, np.zeros(0), np.zeros(0), lam=np.array([2.0]), nu=np.array([1.0]),
                   anchor_x=np.array([1.0]), anchor_b=np.array([2.0]), cross=np.array([[1.0]]))
    for x, b in [(0.5, 3.0), (2.0, -1.0), (1.0, 2.0)]:
        assert cut.value(np.zeros(0), np.array([x]), np.array([b])) == pytest.approx(x * b)


def test_json_round_trip():
    s = store()
    s.add_lower_cut(2, 0, LowerCut(1.0, np.array([0.5]), np.array([1.0]), lam=np.array([0.1, 0.2]),
                                   nu=np.array([0.3]), anchor_x=np.zeros(2), anchor_b=np.ones(1),
                                   cross=np.ones((2, 1))))
    again = EnvelopeStore.from_dict(json.loads(json.dumps(s.to_dict())))
    q = dict(y=[0.7], x=np.array([0.3, -0.1]), b=np.array([1.4]))
    assert again.eval_lower(2, 0, **q) == s.eval_lower(2, 0, **q)


# random envelopes --------------------------------------------------------------

def _random_cut(rng, ny, nb, nx, M_y, M_b, x0):
    sigma = rng.normal(size=ny)
    sigma *= rng.uniform(0, M_y) / max(np.abs(sigma).sum(), 1e-12)
    nu = rng.normal(size=nb)
    nu *= rng.uniform(0, M_b) / max(np.abs(nu).sum(), 1e-12)
    return LowerCut(rng.normal(), sigma, rng.normal(size=ny), lam=rng.normal(size=nx), nu=nu,
                    anchor_x=x0, anchor_b=rng.normal(size=nb), cross=rng.normal(size=(nx, nb)))


def _random_point(rng, ny, nb):
    return UpperPoint(rng.normal(), rng.normal(size=ny), rng.normal(size=nb))


@given(st.integers(0, 2**31 - 1))
def test_lower_envelope_lipschitz_bracket(seed):
    rng = np.random.default_rng(seed)
    ny, nb, nx = rng.integers(1, 4, size=3)
    M_y, M_b = rng.uniform(0.5, 5, size=2)
    x0 = rng.normal(size=nx)
    s = EnvelopeStore(ENHANCED, M_y, M_b, np.full((2, 1), -1e9))
    cuts = [_random_cut(rng, ny, nb, nx, M_y, M_b, x0) for _ in range(rng.integers(1, 6))]
    for c in cuts:
        s.add_lower_cut(2, 0, c)
    y, b = rng.normal(size=ny), rng.normal(size=nb)
    v = s.eval_lower(2, 0, y, x0, b)
    for c in cuts:
        bound = c.theta - M_y * np.abs(y - c.anchor_y).sum() - M_b * np.abs(b - c.anchor_b).sum()
        assert v >= bound - 1e-9


@given(st.integers(0, 2**31 - 1))
def test_upper_envelope_lipschitz_bracket(seed):
    rng = np.random.default_rng(seed)
    ny, nb = rng.integers(1, 4, size=2)
    M_y, M_b = rng.uniform(0.5, 5, size=2)
    s = EnvelopeStore(ENHANCED, M_y, M_b, np.zeros((2, 1)))
    pts = [_random_point(rng, ny, nb) for _ in range(rng.integers(1, 6))]
    for p in pts:
        s.add_upper_point(2, 0, p)
    y, b = rng.normal(size=ny), rng.normal(size=nb)
    v = s.eval_upper(2, 0, y, b)
    for p in pts:
        assert v <= p.theta + M_y * np.abs(y - p.anchor_y).sum() + M_b * np.abs(b - p.anchor_b).sum() + 1e-9


@given(st.integers(0, 2**31 - 1))
def test_insertions_only_tighten(seed):
    rng = np.random.default_rng(seed)
    ny, nb, nx = 2, 2, 1
    x0 = np.zeros(nx)
    s = EnvelopeStore(ENHANCED, 3.0, 3.0, np.full((2, 1), -1e9))
    y, b = rng.normal(size=ny), rng.normal(size=nb)
    lo, up = -np.inf, np.inf
    for _ in range(5):
        s.add_lower_cut(2, 0, _random_cut(rng, ny, nb, nx, 3.0, 3.0, x0))
        s.add_upper_point(2, 0, _random_point(rng, ny, nb))
        lo_new, up_new = s.eval_lower(2, 0, y, x0, b), s.eval_upper(2, 0, y, b)
        assert lo_new >= lo - 1e-12 and up_new <= up + 1e-12
        lo, up = lo_new, up_new


@given(st.integers(0, 2**31 - 1))
def test_envelopes_convex_with_x_fixed(seed):
    rng = np.random.default_rng(seed)
    ny, nb, nx = 2, 2, 2
    s = EnvelopeStore(ENHANCED, 3.0, 3.0, np.full((2, 1), -1e9))
    for _ in range(4):
        s.add_lower_cut(2, 0, _random_cut(rng, ny, nb, nx, 3.0, 3.0, rng.normal(size=nx)))
        s.add_upper_point(2, 0, _random_point(rng, ny, nb))
    x = rng.normal(size=nx)
    (ya, yc), (ba, bc) = rng.normal(size=(2, ny)), rng.normal(size=(2, nb))
    for f in (lambda y, b: s.eval_lower(2, 0, y, x, b), lambda y, b: s.eval_upper(2, 0, y, b)):
        mid = f((ya + yc) / 2, (ba + bc) / 2)
        assert mid <= (f(ya, ba) + f(yc, bc)) / 2 + 1e-9


@given(st.integers(0, 2**31 - 1))
def test_lower_envelope_convex_with_b_fixed(seed):
    rng = np.random.default_rng(seed)
    s = EnvelopeStore(ENHANCED, 3.0, 3.0, np.full((2, 1), -1e9))
    for _ in range(4):
        s.add_lower_cut(2, 0, _random_cut(rng, 2, 2, 2, 3.0, 3.0, rng.normal(size=2)))
    b = rng.normal(size=2)
    (xa, xc), (ya, yc) = rng.normal(size=(2, 2)), rng.normal(size=(2, 2))
    f = lambda x, y: s.eval_lower(2, 0, y, x, b)
    assert f((xa + xc) / 2, (ya + yc) / 2) <= (f(xa, ya) + f(xc, yc)) / 2 + 1e-9


def test_points_shared_with_dominating_master_points():
    s = EnvelopeStore(ENHANCED, 10.0, 10.0, np.zeros((3, 2)), directions=np.array([-1, 1, 0, 2]))
    s.add_upper_point(2, 0, UpperPoint(1.0, np.zeros(1)), x=np.array([1.0, 1.0, 1.0, 1.0]))
    at = lambda *x: s.eval_upper(2, 0, [0.0], x=np.array(x, float))
    assert at(2.0, 0.5, 1.0, -7.0) == pytest.approx(1.0)
    assert at(0.5, 1.0, 1.0, 1.0) == np.inf   # less of a loosening component
    assert at(1.0, 1.5, 1.0, 1.0) == np.inf   # more of a tightening component
    assert at(1.0, 1.0, 1.2, 1.0) == np.inf   # undetermined component must match


def test_stagewise_directions_from_signs():
    from benders_sddp.envelopes import FREE, stagewise_directions
    from conftest import chain_template

    t = chain_template([1.0, 1.0], [2.0, 3.0])
    # -y <= -dem + x * b1 with b1 = 1: more x loosens the row
    assert stagewise_directions(t).tolist() == [-1]
    t.stages[0].coupling[:, 3] = -1.0
    assert stagewise_directions(t).tolist() == [0]
    t.stages[0].coupling[:, 3] = 1.0
    t.stages[0].senses[:] = ">"
    assert stagewise_directions(t).tolist() == [0]
    t.stages[1].senses[:] = ">"
    assert stagewise_directions(t).tolist() == [1]
    for st_ in t.stages:
        st_.coupling[:, 2] = 0  # b0 is always zero
    assert stagewise_directions(t).tolist() == [FREE]
