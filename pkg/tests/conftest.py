import numpy as np
import pytest

from finepim import tensor as T


def numeric_grad(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar function ``f`` at ``x`` (x is perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        hi = f()
        x[i] = old - eps
        lo = f()
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Largest elementwise relative error over entries where either side exceeds ``floor``."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    mask = (np.abs(a) > floor) | (np.abs(n) > floor)
    if not mask.any():
        return 0.0
    return float(np.max(np.abs(a - n)[mask] / np.maximum(np.abs(a), np.abs(n))[mask]))


def check_grads(build, inputs: list[T.Tensor], eps: float = 1e-5) -> float:
    """Worst relative error between tape gradients and central differences for ``build(*inputs)``."""
    for t in inputs:
        t.grad = None
    T.backward(build(*inputs))
    worst = 0.0
    for t in inputs:
        def f():
            with T.no_grad():
                return build(*inputs).item()
        num = numeric_grad(f, t.data, eps)
        grad = np.zeros_like(t.data) if t.grad is None else t.grad
        worst = max(worst, max_rel_error(grad, num))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, filled by test_acceptance.py
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
