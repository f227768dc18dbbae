import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def sphere():
    from nbavatar.synth import make_scene

    return make_scene("sphere", subdiv=2)


@pytest.fixture(scope="session")
def tiny_dataset():
    """Three frames, four cameras at 32x32; camera 3 held out."""
    from nbavatar.synth import make_dataset

    return make_dataset("sphere", subdiv=1, frames=3, n_cams=4, width=32, height=32, seed=0)


# ---------------------------------------------------------------- acceptance report

_REPORT_KEY = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def acceptance_report(request):
    """Criterion number -> verdict line, printed again at the end of the session."""
    return request.config.stash.setdefault(_REPORT_KEY, {})


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    report = config.stash.get(_REPORT_KEY, None)
    if not report:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(report):
        terminalreporter.write_line(report[key])
