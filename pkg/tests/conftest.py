import numpy as np
import pytest

from aptmle.data_model import TrialDataset

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, text): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, text = mark.args
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        detail = dict(item.user_properties).get("detail", "")
        prev = _CRITERIA.get(n, (True, text, []))
        _CRITERIA[n] = (prev[0] and rep.passed, text, prev[2] + ([detail] if detail else []))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, text, details = _CRITERIA[n]
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {text}"
        if details:
            line += "  [" + "; ".join(details) + "]"
        tr.write_line(line)


def random_trial(rng, n=60, p=3, binary=True, effect=0.5, prognostic=1.0, clusters=None):
    """Small simulated trial with complete randomization (at least 2 per arm)."""
    W = rng.normal(size=(n, p))
    arm = np.zeros(n, dtype=int)
    arm[rng.permutation(n)[: n // 2]] = 1
    lp = -0.2 + effect * arm + prognostic * W[:, 0]
    if binary:
        y = (rng.random(n) < 1 / (1 + np.exp(-lp))).astype(float)
    else:
        y = lp + rng.uniform(-1, 1, n)
    return TrialDataset.from_arrays(arm, y, W, cluster_ids=clusters)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
