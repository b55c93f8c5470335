import numpy as np
import pytest

from orbitarm import dynamics, geometry as geo


@pytest.fixture(scope="session")
def model():
    return dynamics.load_model()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_state(model, rng, batch=None, omega_scale=0.1):
    shape = () if batch is None else (batch,)
    lim = model.q_limits
    return dynamics.SystemState(
        base_attitude=geo.quat_normalize(rng.standard_normal(shape + (4,))),
        base_omega=omega_scale * rng.standard_normal(shape + (3,)),
        base_position=rng.standard_normal(shape + (3,)),
        q=rng.uniform(-lim, lim, shape + (6,)),
        qdot=rng.uniform(-2, 2, shape + (6,)),
    )


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("tests.test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 13):
        terminalreporter.write_line(mod.RESULTS.get(n, f"ACCEPTANCE {n:>2} NOT RUN"))
