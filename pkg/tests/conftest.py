import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from arlmm.model import MixedModelData, PriorPhi, VarianceComponents, build_marginal_variance

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_blocks(rng, sizes, d):
    return tuple(rng.uniform(0.0, 1.0, size=(k, d)) for k in sizes)


def random_data(rng, n, p, m=1, d=2):
    base, extra = divmod(n, m)
    sizes = tuple(base + (1 if i < extra else 0) for i in range(m))
    x = rng.standard_normal((n, p))
    y = rng.standard_normal(n) + rng.normal()
    return MixedModelData(x, random_blocks(rng, sizes, d), y, sizes)


def random_spd(rng, n, shift=0.5):
    a = rng.standard_normal((n, n))
    return a @ a.T / n + shift * np.eye(n)


def random_vc(rng, d, sigma2=None):
    k = rng.standard_normal((d, d))
    return VarianceComponents(rng.uniform(0.2, 2.0) if sigma2 is None else sigma2,
                              h=k.T @ k / d + 0.1 * np.eye(d))


def marginal(rng, data):
    return build_marginal_variance(random_vc(rng, data.d), data.z_blocks)


def rel_err(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(autouse=True)
def _quiet_clamp():
    from arlmm.sketch import SketchClampWarning

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SketchClampWarning)
        yield


def iso(tau, p):
    return PriorPhi.isotropic(tau, p)


ACCEPTANCE_LINES = []


def acceptance_line(label, passed, detail):
    line = f"{'PASS' if passed else 'FAIL'} criterion {label}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
