import numpy as np
import pytest

from ltcfnet import core
from ltcfnet.gradcheck import gradcheck, leaf


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def f64():
    """Run the test body with float64 tensors (finite-difference checks)."""
    with core.check_mode():
        yield


@pytest.fixture
def check_grad(f64):
    """Assert the analytic gradient of ``fn(*arrays)`` matches central differences."""

    def run(fn, *arrays, n_samples=24, skip=None, min_pass=0.95, seed=0):
        inputs = [leaf(a) for a in arrays]
        report = gradcheck(fn, inputs, n_samples=n_samples, rng=np.random.default_rng(seed), skip=skip)
        assert report.ok(min_pass), (
            f"pass rate {report.pass_rate:.3f}, worst {report.worst:.3g}, failures {report.failures[:4]}")
        return report

    return run


@pytest.fixture
def check_module(f64):
    """Finite-difference check of a module w.r.t. its input and every parameter.

    ``loss_fn(module, x)`` must return a scalar tensor.
    """
    from ltcfnet.model import cast

    def run(module, x, loss_fn, n_samples=8, min_pass=0.95, seed=0):
        cast(module, np.float64)
        xt = leaf(x)
        params = module.parameters()
        report = gradcheck(lambda a, *_: loss_fn(module, a), [xt] + params,
                           n_samples=n_samples, rng=np.random.default_rng(seed))
        assert report.ok(min_pass), (
            f"pass rate {report.pass_rate:.3f} over {report.checked}, worst {report.worst:.3g}, "
            f"failures {report.failures[:4]}")
        return report

    return run


ACCEPTANCE_LINES = {}


@pytest.fixture
def report_criterion():
    """Record one summary line for an acceptance criterion."""

    def record(number, ok, detail):
        ACCEPTANCE_LINES[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
