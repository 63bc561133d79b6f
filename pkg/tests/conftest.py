import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)



_ACCEPTANCE = []


@pytest.fixture
def report(request, capsys):
    """Print one acceptance line immediately and again in the terminal summary."""

    def emit(number, passed, detail):
        line = f"CRITERION {number}: {'PASS' if passed else 'FAIL'} - {detail}"
        _ACCEPTANCE.append(line)
        with capsys.disabled():
            print("\n" + line)
        return passed

    return emit


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
