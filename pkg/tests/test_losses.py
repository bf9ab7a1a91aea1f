import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from odegrad.losses import LossSpec, MinMaxScaling, loss_and_grad_seed, terminal_loss


def test_mae_example():
    loss = terminal_loss("mae", 1.0, np.array([1.0, 3.0]))
    value, seeds = loss_and_grad_seed(loss, [np.array([1.0, 2.0])])
    assert value == 0.5
    assert np.array_equal(seeds[0], [0.0, -0.5])


def test_mse_scalar_example():
    loss = terminal_loss("mse", 1.0, np.array([0.0]))
    value, seeds = loss_and_grad_seed(loss, [np.array([2.0])])
    assert value == 4.0
    assert seeds[0][0] == 4.0


def test_zero_loss_zero_seeds():
    obs = np.array([0.1, -0.2, 0.3])
    loss = terminal_loss("mae", 2.0, obs)
    value, seeds = loss_and_grad_seed(loss, [obs.copy()])
    assert value == 0.0
    assert np.array_equal(seeds[0], np.zeros(3))


def test_mae_subgradient_at_zero_residual_is_zero():
    loss = terminal_loss("mae", 1.0, np.array([1.0, 2.0]))
    _, seeds = loss_and_grad_seed(loss, [np.array([1.0, 5.0])])
    assert seeds[0][0] == 0.0


def test_multi_observation_mean():
    loss = LossSpec("mse", (0.5, 1.0), (np.array([0.0]), np.array([0.0])))
    value, seeds = loss_and_grad_seed(loss, [np.array([1.0]), np.array([3.0])])
    assert value == (1.0 + 9.0) / 2
    assert np.allclose([seeds[0][0], seeds[1][0]], [1.0, 3.0])


def test_minmax_basic():
    s = MinMaxScaling(lo=np.array([0.0]), hi=np.array([4.0]))
    out = [s.apply(np.array([v]))[0] for v in (0.0, 2.0, 4.0)]
    assert out == [0.0, 0.5, 1.0]


def test_minmax_degenerate_passthrough():
    s = MinMaxScaling(lo=np.array([2.0, 0.0]), hi=np.array([2.0, 1.0]))
    v = np.array([2.0, 0.5])
    assert np.array_equal(s.apply(v), np.array([2.0, 0.5]))
    assert s.degenerate[0] and not s.degenerate[1]


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=3, max_size=6))
def test_minmax_roundtrip(vals):
    x = np.array(vals)
    s = MinMaxScaling(lo=x.min() * np.ones(1), hi=x.max() * np.ones(1))
    span = max(1.0, float(x.max() - x.min()), float(np.max(np.abs(x))))
    for v in x:
        u = np.array([v])
        back = s.invert(s.apply(u))
        # 1e-15 relative to the component's data range
        assert np.max(np.abs(back - u)) <= 1e-15 * span


def test_scaled_loss_chain_rule_matches_fd():
    scaling = MinMaxScaling(lo=np.array([0.0, -1.0]), hi=np.array([2.0, 3.0]))
    obs_scaled = scaling.apply(np.array([1.5, 0.5]))
    loss = LossSpec("mse", (1.0,), (obs_scaled,), scaling=scaling)

    def value_at(pred):
        v, _ = loss_and_grad_seed(loss, [pred])
        return v

    pred = np.array([0.7, 1.2])
    _, seeds = loss_and_grad_seed(loss, [pred])
    eps = 1e-7
    for i in range(2):
        e = np.zeros(2)
        e[i] = eps
        fd = (value_at(pred + e) - value_at(pred - e)) / (2 * eps)
        assert abs(seeds[0][i] - fd) <= 1e-7 * max(1.0, abs(fd))


def test_loss_spec_validation():
    with pytest.raises(ValueError):
        LossSpec("huber", (1.0,), (np.zeros(2),))
    with pytest.raises(ValueError):
        LossSpec("mae", (1.0, 0.5), (np.zeros(2), np.zeros(2)))
    with pytest.raises(ValueError):
        LossSpec("mae", (0.5, 1.0), (np.zeros(2), np.zeros(3)))
    with pytest.raises(ValueError):
        loss_and_grad_seed(terminal_loss("mae", 1.0, np.zeros(2)), [])
