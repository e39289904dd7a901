import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_primitive(rng, K=8, o=None, tau=None, eta=None):
    """Activated primitive with random (valid) parameters."""
    from drksplat.kernel import DrkPrimitive, angle_activation, quat_to_rotation_batch

    q = rng.normal(size=(1, 4))
    return DrkPrimitive(
        mu=rng.normal(size=3),
        R=quat_to_rotation_batch(q)[0],
        s=rng.uniform(0.3, 2.0, K),
        theta=angle_activation(rng.normal(size=K) * 2),
        eta=float(rng.uniform(0.01, 0.99)) if eta is None else eta,
        tau=float(rng.uniform(-0.09, 0.98)) if tau is None else tau,
        o=float(rng.uniform(0.05, 1.0)) if o is None else o,
        sh=np.zeros((1, 3)))


# ---------------------------------------------------------------------------
# acceptance summary: one line per criterion, failing if any of its tests fail

_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and not rep.failed):
        return
    ok, names = _CRITERIA.get(mark.args[0], (True, []))
    _CRITERIA[mark.args[0]] = (ok and rep.passed, names + [item.name])


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, names = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  "
                                    f"({', '.join(dict.fromkeys(names))})")
