import numpy as np
import pytest

from mtuda import synth
from mtuda.tensor import Tensor, parameter


def numeric_grad(f, x, h=1e-5):
    """Central differences of scalar ``f()`` w.r.t. array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    return float(np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(a)) + np.max(np.abs(b))))


def check_grads(build, arrays, seed=0, h=1e-5):
    """Compare autodiff gradients of ``sum(build(*params) * R)`` with finite differences.

    A fixed random projection ``R`` makes the scalar depend on every output
    entry with a distinct weight.
    """
    rng = np.random.default_rng(seed)
    params = [parameter(a) for a in arrays]
    out = build(*params)
    proj = rng.standard_normal(out.shape)
    loss = (out * Tensor(proj)).sum()
    loss.backward()
    worst = 0.0
    for p in params:

        def f(p=p):
            return float(np.sum(build(*[Tensor(q.data) for q in params]).data * proj))

        num = numeric_grad(f, p.data, h)
        worst = max(worst, rel_err(p.grad, num))
    return worst


@pytest.fixture(scope="session")
def tiny_domains():
    """Small 32x32 source/target sets shared by the trainer tests."""
    s = synth.preset("synth")
    src = synth.generate_dataset(s, 12, 11, 32, 32, labeled=True)
    t1 = synth.generate_dataset(synth.appearance_only(synth.preset("euro"), s), 8, 12, 32, 32)
    t2 = synth.generate_dataset(synth.appearance_only(synth.preset("india"), s), 8, 13, 32, 32)
    t3 = synth.generate_dataset(synth.appearance_only(synth.preset("world"), s), 8, 14, 32, 32)
    return src, [t1, t2, t3]


# acceptance bookkeeping ----------------------------------------------------------

_ACCEPTANCE: dict = {}


class _Criterion:
    def __init__(self, number, title):
        self.number, self.title, self.detail = number, title, ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        if exc_type is not None and not self.detail:
            self.detail = f"{exc_type.__name__}: {exc}".splitlines()[0]
        _ACCEPTANCE[self.number] = f"criterion {self.number:>2} {status}  {self.title}" + (
            f"  ({self.detail})" if self.detail else ""
        )
        return False


@pytest.fixture
def criterion():
    """``with criterion(n, title) as c:`` records one pass/fail line for the summary."""
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
