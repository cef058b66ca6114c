import numpy as np
import pytest

from leakseg import autodiff as ad


def central_difference(fn, arrays, index, eps=1e-5):
    """Numerical gradient of scalar ``fn(*arrays)`` w.r.t. ``arrays[index]``."""
    x = np.array(arrays[index], dtype=np.float64)
    g = np.zeros_like(x)
    for pos in np.ndindex(x.shape):
        args_p = list(arrays)
        args_m = list(arrays)
        xp, xm = x.copy(), x.copy()
        xp[pos] += eps
        xm[pos] -= eps
        args_p[index], args_m[index] = xp, xm
        g[pos] = (fn(*args_p) - fn(*args_m)) / (2 * eps)
    return g


def relative_error(analytic, numeric, floor=1e-8):
    """Max relative error; entries that agree to ``floor`` absolutely count as 0."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    if not analytic.size:
        return 0.0
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    rel = np.where(diff <= floor, 0.0, diff / np.where(scale > 0, scale, 1.0))
    return float(rel.max())


def check_gradients(build, arrays, eps=1e-5):
    """Max relative error between backprop and central differences.

    ``build`` maps leaf Tensors to a scalar Tensor.
    """
    leaves = [ad.Tensor(a, requires_grad=True) for a in arrays]
    analytic = ad.grad(build(*leaves), leaves)

    def value(*xs):
        return build(*[ad.Tensor(x) for x in xs]).item()

    return max(relative_error(a, central_difference(value, arrays, i, eps)) for i, a in enumerate(analytic))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion that ran."""
    try:
        from tests.test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
