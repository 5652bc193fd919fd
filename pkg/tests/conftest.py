import numpy as np
import pytest

from binfreeze import tensor as T
from binfreeze.data import Dataset, Split


def central_diff(f, x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Numerical gradient of scalar ``f`` at float64 ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f(x)
        flat[i] = old - h
        down = f(x)
        flat[i] = old
        gf[i] = (up - down) / (2 * h)
    return g


def max_rel_err(a, b, floor=1e-6):
    """Entrywise relative error; entries far below the gradient's scale are
    compared against 1e-3 of its largest magnitude (difference quotients carry
    O(h^2) truncation error that swamps near-zero entries)."""
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    floor = max(floor, 1e-3 * float(np.max(np.abs(b), initial=0.0)))
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def f64(x, grad=True):
    return T.Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad, dtype=np.float64)


def toy_dataset(n_train=64, n_test=32, shape=(1, 4, 4), classes=4, seed=0):
    """Linearly separable-ish toy images: class k brightens pixel block k."""
    rng = np.random.default_rng(seed)

    def make(n):
        y = np.arange(n) % classes
        x = rng.random((n,) + shape).astype(np.float32) * 0.3
        flat = x.reshape(n, -1)
        span = flat.shape[1] // classes
        for i, k in enumerate(y):
            flat[i, k * span : (k + 1) * span] += 0.7
        return Split(x, y.astype(np.int64), classes)

    tr, te = make(n_train), make(n_test)
    mean = tuple(float(tr.images[:, c].mean()) for c in range(shape[0]))
    std = tuple(float(tr.images[:, c].std()) for c in range(shape[0]))
    return Dataset(tr, te, mean, std, "toy")


@pytest.fixture
def toy():
    return toy_dataset()


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS):
            terminalreporter.write_line(line)
