import numpy as np
import pytest
from hypothesis import given, strategies as st

from psagan.layers import Parameter
from psagan.optim import (SUPER_RESOLVER_RATES, TRANSLATOR_RATES, Adam, TturSchedule, adam_step, ttur_rates)


def test_zero_gradient_is_fixed_point():
    p = Parameter(np.array([1.0, -2.0]))
    opt = Adam([p], lr=0.1)
    adam_step([p], [np.zeros(2)], opt)
    assert np.array_equal(p.data, [1.0, -2.0])


def test_first_step_by_hand():
    p = Parameter(np.array([0.0]))
    opt = Adam([p], lr=0.1, betas=(0.9, 0.999))
    adam_step([p], [np.array([1.0])], opt)
    m_hat, v_hat = 0.1 / 0.1, 0.001 / 0.001
    assert p.data[0] == pytest.approx(-0.1 * m_hat / (np.sqrt(v_hat) + 1e-8), abs=1e-15)


def test_decoupled_weight_decay():
    p = Parameter(np.array([2.0]))
    opt = Adam([p], lr=0.1, weight_decay=0.5)
    adam_step([p], [np.zeros(1)], opt)
    assert p.data[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)


def test_missing_gradients_raise():
    p = Parameter(np.zeros(2))
    opt = Adam([p])
    with pytest.raises(ValueError):
        adam_step([p], None, opt)
    with pytest.raises(ValueError):
        adam_step([p], [None], opt)
    with pytest.raises(RuntimeError):
        opt.step()


def _trajectory(seed):
    rng = np.random.default_rng(seed)
    p = Parameter(rng.standard_normal(5))
    opt = Adam([p], lr=0.05)
    out = []
    for _ in range(20):
        adam_step([p], [2 * p.data + rng.standard_normal(5) * 0.1], opt)
        out.append(p.data.copy())
    return np.array(out)


def test_deterministic_trajectory():
    assert np.array_equal(_trajectory(3), _trajectory(3))


def test_descends_convex_quadratic():
    rng = np.random.default_rng(4)
    a = rng.standard_normal((6, 6))
    q = a @ a.T + np.eye(6)
    p = Parameter(rng.standard_normal(6))
    f = lambda x: 0.5 * x @ q @ x  # noqa: E731
    start = f(p.data)
    opt = Adam([p])
    for _ in range(100):
        adam_step([p], [q @ p.data], opt)
    assert f(p.data) < start
    assert opt.t == 100


def test_translator_schedule_examples():
    s = TturSchedule(*TRANSLATOR_RATES, switch_epoch=15, decay_factor=0.5, decay_every=10)
    assert ttur_rates(0, s) == (0.005, 0.001)
    assert ttur_rates(15, s) == (0.001, 0.005)
    assert ttur_rates(25, s) == pytest.approx((0.0005, 0.0025))
    assert SUPER_RESOLVER_RATES == (0.003, 0.001)
    with pytest.raises(ValueError):
        ttur_rates(-1, s)


@given(switch=st.integers(1, 40), every=st.integers(1, 12), factor=st.floats(0.1, 0.9))
def test_schedule_swaps_once_and_decays(switch, every, factor):
    s = TturSchedule(0.004, 0.001, switch, factor, every)
    rates = [ttur_rates(e, s) for e in range(switch + 4 * every)]
    assert all(r == (0.004, 0.001) for r in rates[:switch])
    assert rates[switch] == (0.001, 0.004)
    after = np.array(rates[switch:])
    assert np.all(np.diff(after, axis=0) <= 0)
    changes = np.flatnonzero(np.any(np.diff(after, axis=0) != 0, axis=1))
    assert len(changes) == 3
