import numpy as np
import pytest

from ctattn import autodiff as ad


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-12))


def check_grads(fn, params, tol=1e-5, h=1e-5) -> float:
    """Worst relative error between tape gradients and central differences."""
    loss = fn()
    grads = ad.grad(loss, params)
    worst = 0.0
    for p, g in zip(params, grads):
        worst = max(worst, rel_err(g, ad.numerical_grad(fn, p, h)))
    assert worst < tol, worst
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    """Print one pass/fail line per acceptance criterion that ran."""
    module = __import__("sys").modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in module.summary_lines():
        terminalreporter.write_line(line)
