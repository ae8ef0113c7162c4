import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "otlab",
    max_examples=25,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
    derandomize=True,
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "otlab"))


@pytest.fixture(scope="session")
def sinusoidal_pair():
    """64^2 smooth instance (f = 0.5, delta = 0.05) with its entropic map."""
    from otlab.pipeline import solve_map
    from otlab.synth import synth_density

    r0 = synth_density("sinusoidal", {"delta": 0.05, "frequency": 0.5}, 64)
    r1 = synth_density("sinusoidal", {"delta": -0.05, "frequency": 0.5}, 64)
    T, _ = solve_map(r0, r1, "entropic")
    return r0, r1, T


@pytest.fixture(scope="session")
def uniform_identity():
    from otlab.synth import synth_density
    from otlab.transport import map_from_function

    r = synth_density("uniform", n=64)
    return r, r, map_from_function(r, lambda x: np.array(x, dtype=float))


ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_KEY] = []


@pytest.fixture
def acceptance(request):
    """``report(n, ok, detail)`` records one PASS/FAIL line for criterion ``n``."""

    def report(n, ok, detail):
        line = f"CRITERION {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config.stash[ACCEPTANCE_KEY].append(line)
        print(line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
