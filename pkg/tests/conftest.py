import numpy as np
import pytest

from unlearn_lab.datasets import gen_blobs
from unlearn_lab.models import ModelSpec, init_params


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def logistic_spec():
    return ModelSpec.logistic(4, 3, l2=1e-2)


@pytest.fixture
def mlp_spec():
    return ModelSpec.mlp(3, [5], 2, "tanh", l2=1e-3)


@pytest.fixture
def small_blobs():
    return gen_blobs(60, 4, 3, 0.5, seed=7)


def random_theta(spec, seed, scale=1.0):
    return init_params(spec, seed) * scale + 0.1 * np.random.default_rng(seed + 1000).standard_normal(spec.n_params)


ACCEPTANCE_LINES = []


@pytest.fixture
def report():
    """Record one PASS/FAIL line for an acceptance criterion."""

    def _report(number, title, passed, detail):
        line = f"{'PASS' if passed else 'FAIL'} criterion {number:>2} {title}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
