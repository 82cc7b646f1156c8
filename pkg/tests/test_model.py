import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from benders_sddp.casegen import random_instance
from benders_sddp.exceptions import (
    DimensionMismatchError,
    LipschitzConstantError,
    ParseError,
    ProbabilitySumError,
    StageCountError,
    UnboundedVariableError,
)
from benders_sddp.model import (
    instance_from_dict,
    instance_hash,
    instance_to_dict,
    load_instance,
    save_instance,
    validate_instance,
)


def _dict(seed=0, **kw):
    return instance_to_dict(random_instance(seed, **kw))


def test_well_formed_minimal_instance_is_accepted():
    inst = instance_from_dict(_dict(0, n_stages=2, n_states=1, n_scenarios=1))
    assert inst.validated
    t = next(iter(inst.recourse.values()))
    assert t.n_stages == 2 and t.tree.n_states == 1


def test_initial_probabilities_must_sum_to_one():
    d = _dict(1, n_states=2)
    d["recourse"]["r0"]["tree"]["initial_probs"] = [0.6, 0.5]
    with pytest.raises(ProbabilitySumError):
        instance_from_dict(d)


def test_single_stage_is_rejected():
    d = _dict(2, n_stages=2)
    tj = d["recourse"]["r0"]
    tj["stages"] = tj["stages"][:1]
    tj["tree"]["transition_probs"] = []
    tj["tree"]["realizations"] = tj["tree"]["realizations"][:1]
    tj.pop("stage_value_lb", None)
    with pytest.raises(StageCountError):
        instance_from_dict(d)


def test_missing_key_is_named():
    d = _dict(3)
    del d["recourse"]["r0"]["M_y"]
    with pytest.raises(ParseError, match="M_y"):
        instance_from_dict(d)


def test_bad_json_reports_position(tmp_path):
    p = tmp_path / "broken.json"
    p.write_text('{"master": {"cost": [1, 2],}\n')
    with pytest.raises(ParseError, match="line 1"):
        load_instance(p)


def test_nonpositive_lipschitz_constant():
    d = _dict(4)
    d["recourse"]["r0"]["M_b"] = 0.0
    with pytest.raises(LipschitzConstantError):
        instance_from_dict(d)


def test_unbounded_stage_variable():
    d = _dict(5)
    d["recourse"]["r0"]["stages"][0]["y_upper"][0] = 1e400
    with pytest.raises(UnboundedVariableError):
        instance_from_dict(d)


def test_node_index_mismatch():
    d = _dict(6)
    d["nodes"][0]["x_indices"] = [0]
    with pytest.raises(DimensionMismatchError):
        instance_from_dict(d)


def test_fixture_file_loads(fixtures_dir):
    inst = load_instance(fixtures_dir / "tiny.json")
    t = next(iter(inst.recourse.values()))
    assert t.n_stages == 2 and t.tree.n_states == 1


def test_generated_power_file_shape(tmp_path):
    from benders_sddp.casegen import PowerConfig, generate_instance

    path = save_instance(generate_instance(PowerConfig(hours_per_stage=2)), tmp_path / "power.json")
    inst = load_instance(path)
    t = next(iter(inst.recourse.values()))
    assert (t.n_stages, t.tree.n_states, t.tree.n_scenarios) == (7, 5, 3)


def _flatten(obj):
    if isinstance(obj, dict):
        for k in sorted(obj):
            yield from _flatten(obj[k])
    elif isinstance(obj, list):
        for v in obj:
            yield from _flatten(v)
    elif isinstance(obj, (int, float)):
        yield float(obj)


@given(st.integers(0, 5000), st.integers(2, 3), st.integers(1, 2), st.integers(1, 2))
def test_round_trip_preserves_numbers(seed, D, m, W):
    inst = random_instance(seed, n_stages=D, n_states=m, n_scenarios=W)
    text = json.dumps(instance_to_dict(inst))
    again = instance_from_dict(json.loads(text))
    a = list(_flatten(instance_to_dict(inst)))
    b = list(_flatten(instance_to_dict(again)))
    assert len(a) == len(b)
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)
    assert instance_hash(inst) == instance_hash(again)


@given(st.integers(0, 5000))
def test_validation_is_idempotent(seed):
    inst = random_instance(seed)
    h = instance_hash(inst)
    validate_instance(inst)
    validate_instance(inst)
    assert instance_hash(inst) == h


def test_save_and_load(tmp_path):
    inst = random_instance(11, n_stages=3, n_states=2, n_scenarios=2)
    path = save_instance(inst, tmp_path / "i.json")
    assert instance_hash(load_instance(path)) == instance_hash(inst)
