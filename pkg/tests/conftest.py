import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings
from scipy import sparse

from benders_sddp.model import FoldedTree, RecourseTemplate, StageData, validate_template

settings.register_profile("ci", max_examples=40, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "ci"))

FIXTURES = Path(__file__).parent / "fixtures"


def chain_template(costs, demands, M_y=10.0, M_b=10.0):
    """Deterministic chain with ``g(x) = sum_d costs[d] * max(demands[d] - x, 0)``.

    One state and one scenario.  Stage ``d`` buys ``y >= demands[d] - x``,
    written as ``-y <= -demands[d] + x * b[1]`` with the bundle ``[0, 1]``.
    """
    stages, reals = [], []
    for c, dem in zip(costs, demands):
        stages.append(
            StageData(
                A=sparse.csr_matrix(np.array([[-1.0]])),
                cost=np.array([float(c)]),
                coupling=np.array([[0, 0, 1, 1.0]]),
                y_lower=np.zeros(1),
                y_upper=np.array([100.0]),
                senses=np.array(["<"]),
                rhs=np.array([-float(dem)]),
            )
        )
        reals.append(np.array([[[[0.0, 1.0]]]]))
    tree = FoldedTree(1, 1, np.ones(1), [np.ones((1, 1)) for _ in costs[1:]], reals)
    return validate_template(RecourseTemplate(1, stages, tree, M_y, M_b))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def fixtures_dir():
    return FIXTURES


# acceptance reporting ----------------------------------------------------------

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion checked by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call" and not (rep.when == "setup" and rep.outcome != "passed"):
        return
    n = mark.args[0]
    detail = dict(item.user_properties).get("detail", "")
    status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
    _CRITERIA[n] = (status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {status}  {detail}".rstrip())
