import numpy as np
import pytest
from hypothesis import given, strategies as st

from benders_sddp.casegen import random_template
from benders_sddp.exceptions import EmptyStoreError
from benders_sddp.extform import extform_value
from benders_sddp.oracle import OracleStore, oracle_lower, oracle_upper
from benders_sddp.sddp import run_sddp


def test_single_cut_is_evaluated():
    s = OracleStore([-1])
    s.add([1.0], 3.0, 3.0, [-1.0])
    value, slope = oracle_lower(s, [2.0])
    assert value == pytest.approx(2.0)
    assert slope.tolist() == [-1.0]


def test_own_cut_attained_at_its_point():
    s = OracleStore([-1, -1])
    s.add([1.0, 0.0], 3.0, 3.5, [-1.0, 0.5])
    s.add([0.0, 2.0], 1.0, 1.0, [2.0, -2.0])
    assert oracle_lower(s, [1.0, 0.0])[0] >= 3.0


def test_between_two_cuts_takes_the_max():
    s = OracleStore([-1])
    s.add([0.0], 4.0, 4.0, [-2.0])
    s.add([2.0], 1.0, 1.0, [-0.5])
    # at 1: first cut 2.0, second 1.5
    assert oracle_lower(s, [1.0])[0] == pytest.approx(2.0)


def test_upper_uses_dominated_records():
    s = OracleStore([-1, -1])
    s.add([1.0, 1.0], 9.0, 10.0, [0.0, 0.0])
    assert oracle_upper(s, [2.0, 2.0]) == pytest.approx(10.0)
    assert oracle_upper(s, [0.0, 0.0]) == np.inf


def test_dominated_combinations():
    s = OracleStore([-1, -1])
    s.add([0.0, 0.0], 8.0, 8.0, [0.0, 0.0])
    s.add([2.0, 2.0], 4.0, 4.0, [0.0, 0.0])
    # the even mix lands exactly on (1, 1), so convexity allows 6
    assert oracle_upper(s, [1.0, 1.0]) == pytest.approx(6.0)
    # only the first record is dominated here
    assert oracle_upper(s, [0.0, 3.0]) == pytest.approx(8.0)
    assert oracle_upper(s, [1.0, 0.5]) == pytest.approx(7.0)


def test_mixed_directions():
    s = OracleStore([-1, 1, 0])
    s.add([1.0, 2.0, 0.5], 5.0, 5.0, np.zeros(3))
    assert oracle_upper(s, [1.5, 1.0, 0.5]) == pytest.approx(5.0)
    assert oracle_upper(s, [1.5, 3.0, 0.5]) == np.inf
    assert oracle_upper(s, [1.5, 1.0, 0.6]) == np.inf


def test_empty_store_errors():
    with pytest.raises(EmptyStoreError):
        oracle_lower(OracleStore([-1]), [0.0])


def test_gap_larger_than_delta_rejected():
    s = OracleStore([-1], delta=0.1)
    with pytest.raises(ValueError):
        s.add([0.0], 1.0, 1.5, [0.0])


def test_serialisation_round_trip():
    s = OracleStore([-1, 1])
    s.add([0.0, 1.0], 1.0, 1.2, [0.3, -0.2])
    s.add([1.0, 0.0], 0.5, 0.5, [0.1, 0.1])
    t = OracleStore.from_dict(s.to_dict())
    for q in ([0.5, 0.5], [2.0, -1.0]):
        assert oracle_lower(t, q)[0] == oracle_lower(s, q)[0]
        assert oracle_upper(t, q) == oracle_upper(s, q)


@given(st.integers(0, 2**31 - 1))
def test_adding_records_only_tightens(seed):
    rng = np.random.default_rng(seed)
    s = OracleStore([-1, -1])
    q = rng.uniform(0, 2, 2)
    lo, up = -np.inf, np.inf
    for _ in range(5):
        x = rng.uniform(0, 2, 2)
        v = float(rng.uniform(0, 5))
        s.add(x, v, v + rng.uniform(0, 0.1), rng.uniform(-2, 0, 2))
        lo_new, up_new = oracle_lower(s, q)[0], oracle_upper(s, q)
        assert lo_new >= lo - 1e-12 and up_new <= up + 1e-12
        lo, up = lo_new, up_new


def test_brackets_true_value_on_random_recourse():
    rng = np.random.default_rng(2024)
    t = random_template(rng, 2, 2, 2)
    s = OracleStore(t.monotone)
    for _ in range(6):
        x = rng.uniform(0, 2, t.n_x)
        g = extform_value(t, x)
        res = run_sddp(t, x, 1e-6 * (1 + abs(g)))
        s.add(x, res.lower_bound, res.upper_bound, res.subgradient)
    for _ in range(50):
        x = rng.uniform(0, 2, t.n_x)
        g = extform_value(t, x)
        tol = 1e-7 * (1 + abs(g))
        assert oracle_lower(s, x)[0] <= g + tol
        assert oracle_upper(s, x) >= g - tol
