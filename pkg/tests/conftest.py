import numpy as np
import pytest

from kidney_pivot.config import load_config
from kidney_pivot.experiments import _template_for
from kidney_pivot.kinematics import load_chain
from kidney_pivot.worldsim import make_synthetic_patient


@pytest.fixture(scope="session")
def chain():
    return load_chain()


@pytest.fixture(scope="session")
def patient0():
    return make_synthetic_patient(0)


@pytest.fixture(scope="session")
def template_and_tree():
    """The 20-subject synthetic template used by the studies."""
    return _template_for(load_config())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------------------
# acceptance report: one PASS/FAIL line per criterion at the end of the run

_CRITERIA = {}


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records one check of acceptance criterion ``n``."""

    def record(n, ok, detail):
        _CRITERIA.setdefault(n, []).append((bool(ok), detail))
        print(f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        parts = _CRITERIA[n]
        verdict = "PASS" if all(ok for ok, _ in parts) else "FAIL"
        terminalreporter.write_line(f"criterion {n}: {verdict}  " + "; ".join(d for _, d in parts))
