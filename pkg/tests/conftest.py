import numpy as np
import pytest

from samforge import phantoms
from samforge.shape import build_shape_model


@pytest.fixture(scope="session")
def small_phantoms():
    return phantoms.generate(phantoms.PhantomSpec(seed=3, n_scans=80, sex="F"))


@pytest.fixture(scope="session")
def small_shape_model(small_phantoms):
    return build_shape_model(small_phantoms.point_sets, "F")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Records one pass/fail line per acceptance criterion for the terminal summary."""
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, [])

    def record(criterion: int, checks: dict, elapsed: float):
        ok = all(checks.values())
        detail = "; ".join(f"{'ok' if passed else 'FAILED'} {name}" for name, passed in checks.items())
        line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'} ({elapsed:.1f} s) {detail}"
        lines.append((criterion, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
