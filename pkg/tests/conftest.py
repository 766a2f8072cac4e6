import numpy as np
import pytest

from gmn.data import Dataset

# lines recorded by the acceptance checks, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def central_diff(f, x, eps=1e-5):
    """Central differences of scalar ``f`` w.r.t. array ``x`` (perturbed in place).

    Also returns a mask of coordinates where the one-sided slopes disagree, i.e.
    where a kink (rectifier, hinge, mining switch) lies within ``eps``.
    """
    grad = np.zeros_like(x)
    kink = np.zeros(x.shape, dtype=bool)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        f0 = f()
        x[i] = orig + eps
        fp = f()
        x[i] = orig - eps
        fm = f()
        x[i] = orig
        grad[i] = (fp - fm) / (2 * eps)
        fwd, bwd = (fp - f0) / eps, (f0 - fm) / eps
        kink[i] = abs(fwd - bwd) > 1e-3 * max(1.0, abs(fwd) + abs(bwd))
    return grad, kink


def rel_err(a, b, mask=None):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if mask is not None:
        a, b = a[~mask], b[~mask]
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / denom)


def make_dataset(emb, ids, domains=None, cams=None, role="train"):
    emb = np.asarray(emb, dtype=float)
    n = len(emb)
    return Dataset(emb, ids, np.zeros(n, int) if domains is None else domains,
                   np.arange(n) if cams is None else cams, np.arange(n), role)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
