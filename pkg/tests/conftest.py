import pytest

from mixfed.config import ExperimentConfig

# criterion number -> (title, passed, detail); filled by test_acceptance
ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


@pytest.fixture
def small_cfg():
    """A federation that trains in well under a second."""
    return ExperimentConfig(N=4, T=3, per_class=50, input_dim=16, d=8, seed=7)


def param_bytes(params):
    return [p.value.tobytes() for p in params]


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  [{n:2d}] {title}: {detail}")
