import numpy as np
import pytest

from trajode.codec import CodecConfig
from trajode.dynamics import OdeConfig, SolverConfig
from trajode.training import ModelSpec


def tiny_spec(backbone="ode", variational=False, augment_mode="evolving", steps=3, d=4,
              method="rk4"):
    codec = CodecConfig(height=4, width=4, group_length=4, spatial_dim=3, latent_dim=d,
                        spatial_hidden=5, temporal_hidden=6, variational=variational)
    ode = OdeConfig(latent_dim=d, augment_dim=1, hidden=5)
    return ModelSpec(codec, ode, SolverConfig(steps, method, augment_mode), backbone, 4)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_RESULTS = []


def record_criterion(number, title, passed, detail):
    ACCEPTANCE_RESULTS.append((number, title, bool(passed), detail))
    print(f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(ACCEPTANCE_RESULTS, key=lambda r: r[0]):
        terminalreporter.write_line(
            f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title}: {detail}")
