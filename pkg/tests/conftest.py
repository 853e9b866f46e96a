"""Shared finite-difference helpers."""

import numpy as np
import pytest

from psagan.tensor import Tensor, no_grad

FD_STEP = 1e-5


def rel_err(a, b, floor=1e-12):
    a, b = np.asarray(a, dtype=np.float64).ravel(), np.asarray(b, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / scale)


def _coords(shape, max_coords, rng):
    n = int(np.prod(shape))
    flat = np.arange(n) if max_coords is None or n <= max_coords else rng.choice(n, max_coords, replace=False)
    return [np.unravel_index(i, shape) for i in flat]


def numeric_grad(f, array, coords, eps=FD_STEP):
    """Central differences of the scalar ``f()`` w.r.t. ``array`` (perturbed in place)."""
    out = []
    for idx in coords:
        old = array[idx]
        array[idx] = old + eps
        hi = f()
        array[idx] = old - eps
        lo = f()
        array[idx] = old
        out.append((hi - lo) / (2 * eps))
    return np.array(out)


def check_fn_grads(fn, arrays, max_coords=None, seed=0):
    """Max relative error between autodiff and FD for ``fn(*tensors) -> scalar``.

    ``arrays`` are float64 numpy arrays; each becomes a differentiable input.
    """
    rng = np.random.default_rng(seed)
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    fn(*ts).backward()
    pairs = []

    def f():
        with no_grad():
            return fn(*[Tensor(x) for x in arrays]).item()

    for t, a in zip(ts, arrays):
        coords = _coords(a.shape, max_coords, rng)
        ana = np.array([t.grad[c] if t.grad is not None else 0.0 for c in coords])
        pairs.append((ana, numeric_grad(f, a, coords)))
    return _worst(pairs)


def check_module_grads(loss_fn, params, max_coords=None, seed=0):
    """Max relative error over ``params`` (Parameters with float64 data) of ``loss_fn()``."""
    rng = np.random.default_rng(seed)
    for p in params:
        p.grad = None
    loss_fn().backward()

    def f():
        with no_grad():
            return loss_fn().item()

    pairs = []
    for p in params:
        coords = _coords(p.data.shape, max_coords, rng)
        ana = np.array([p.grad[c] if p.grad is not None else 0.0 for c in coords])
        pairs.append((ana, numeric_grad(f, p.data, coords)))
    return _worst(pairs)


def _worst(pairs):
    # a parameter whose true gradient vanishes (e.g. a bias a softmax cancels) is
    # compared against the overall gradient scale instead of its own roundoff
    total = np.sqrt(sum(np.sum(a * a) for a, _ in pairs))
    return max(rel_err(a, n, floor=max(1e-3 * total, 1e-8)) for a, n in pairs)


def projected(out, seed=1):
    """Scalar <out, R> with a fixed random R; avoids symmetric cancellation."""
    r = np.random.default_rng(seed).standard_normal(out.shape)
    return (out * Tensor(r)).sum()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance report ---------------------------------------------------------------
ACCEPTANCE = {}


def record(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
