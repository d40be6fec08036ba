import numpy as np
import pytest

from cisrnet.core import Tensor, backward

FD_STEP = 1e-5
GRAD_RTOL = 1e-4


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def numeric_grad(f, arrays, step=FD_STEP):
    """Central finite differences of scalar ``f(*arrays)`` w.r.t. each array (mutated in place)."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            orig = arr[i]
            arr[i] = orig + step
            fp = f(*arrays)
            arr[i] = orig - step
            fm = f(*arrays)
            arr[i] = orig
            g[i] = (fp - fm) / (2 * step)
        grads.append(g)
    return grads


def check_grads(build, arrays, step=FD_STEP):
    """Compare autograd and finite differences for ``loss = build(*tensors)``.

    Returns the worst relative error over all inputs.
    """
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    loss = build(*tensors)
    backward(loss)
    auto = [t.grad for t in tensors]

    def f(*arrs):
        return build(*[Tensor(a) for a in arrs]).item()

    num = numeric_grad(f, [a.copy() for a in arrays], step)
    return max(rel_err(a, n) for a, n in zip(auto, num))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: list[str] = []


def verdict(number: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
    print(line)
    ACCEPTANCE.append(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
