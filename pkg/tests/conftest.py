import sys
import numpy as np
import pytest
from hypothesis import settings

from gplar.kernels import KernelSpec, TimeGrid, build_gram

settings.register_profile("ci", deadline=None, max_examples=60, derandomize=True)
settings.load_profile("ci")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def rbf_gram(L: int, lengthscale: float = 0.3, variance: float = 1.0, **kw):
    return build_gram(KernelSpec.from_constrained("rbf", lengthscale, variance, **kw), TimeGrid.default(L))


def random_pd(rng, n: int, cond: float = 10.0) -> np.ndarray:
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    eig = np.geomspace(1.0, cond, n)
    A = (Q * eig) @ Q.T
    return 0.5 * (A + A.T)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.format_line(num))
