import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from odegrad.nn import (
    MlpModel,
    MlpSpec,
    init_model,
    jvp_input,
    mlp_forward,
    mlp_spec,
    model_from_json,
    model_to_json,
    vjp_input,
    vjp_params,
)


def identity_model():
    # single linear layer, weight I, bias 0
    spec = MlpSpec((2, 2), activation="identity")
    theta = np.concatenate([np.eye(2).ravel(), np.zeros(2)])
    return MlpModel(spec, theta)


def random_model(seed=42, n=3, width=8, depth=1, act="tanh"):
    return init_model(mlp_spec(n, width, depth, act), seed=seed)


def test_identity_forward():
    m = identity_model()
    f, _ = mlp_forward(m, np.array([1.0, 2.0]))
    assert np.array_equal(f, np.array([1.0, 2.0]))


def test_robertson_surrogate_spec():
    # five hidden layers, gelu, autonomous, N=3
    spec = mlp_spec(3, 64, 5, "gelu")
    assert len(spec.layer_widths) == 7
    assert spec.layer_widths[0] == spec.layer_widths[-1] == 3
    widths = spec.layer_widths
    expected = sum(widths[i + 1] * widths[i] + widths[i + 1] for i in range(6))
    assert spec.n_params == expected
    model = init_model(spec, seed=0)
    f, _ = mlp_forward(model, np.zeros(3))
    assert f.shape == (3,)


def straight_line_forward(model, u, t=0.0):
    """Independent re-evaluation of the affine/activation chain."""
    ws = model.spec.layer_widths
    x = np.concatenate([u, [t]]) if model.spec.time_input else np.asarray(u, float)
    off = 0
    for l in range(len(ws) - 1):
        nin, nout = ws[l], ws[l + 1]
        w = model.theta[off:off + nout * nin].reshape(nout, nin)
        b = model.theta[off + nout * nin:off + nout * nin + nout]
        z = w @ x + b
        if l < len(ws) - 2:
            if model.spec.activation == "tanh":
                x = np.tanh(z)
            elif model.spec.activation == "relu":
                x = np.maximum(z, 0.0)
            elif model.spec.activation == "gelu":
                from math import erf, sqrt

                x = np.array([0.5 * v * (1 + erf(v / sqrt(2.0))) for v in z])
            else:
                x = z
        else:
            x = z
        off += nout * nin + nout
    return x


def test_forward_matches_straight_line_oracle():
    m = random_model(seed=42)
    u = np.array([0.3, -0.7, 1.1])
    f, _ = mlp_forward(m, u)
    ref = straight_line_forward(m, u)
    assert np.max(np.abs(f - ref)) <= 1e-14


@pytest.mark.parametrize("act", ["relu", "tanh", "gelu", "identity"])
def test_forward_all_activations(act):
    m = random_model(seed=1, act=act)
    u = np.array([0.2, 0.4, -0.3])
    f, _ = mlp_forward(m, u)
    ref = straight_line_forward(m, u)
    assert np.max(np.abs(f - ref)) <= 1e-14


def test_forward_rejects_bad_input():
    m = identity_model()
    with pytest.raises(ValueError):
        mlp_forward(m, np.array([1.0, 2.0, 3.0]))
    with pytest.raises(ValueError):
        mlp_forward(m, np.array([np.nan, 0.0]))


def test_vjp_input_identity_model():
    m = identity_model()
    _, cache = mlp_forward(m, np.array([1.0, 2.0]))
    out = vjp_input(m, cache, np.array([3.0, 4.0]))
    assert np.array_equal(out, np.array([3.0, 4.0]))
    assert np.array_equal(vjp_input(m, cache, np.zeros(2)), np.zeros(2))


def test_vjp_input_matches_finite_differences():
    m = random_model(seed=3)
    u = np.array([0.1, -0.5, 0.7])
    v = np.array([1.3, -0.2, 0.8])
    _, cache = mlp_forward(m, u)
    g = vjp_input(m, cache, v)
    eps = 1e-6
    for i in range(3):
        e = np.zeros(3)
        e[i] = eps
        fp, _ = mlp_forward(m, u + e)
        fm, _ = mlp_forward(m, u - e)
        fd = v @ (fp - fm) / (2 * eps)
        assert abs(g[i] - fd) <= 1e-6 * max(1.0, abs(fd))


def test_vjp_params_zero_and_linear_case():
    m = identity_model()
    _, cache = mlp_forward(m, np.array([1.0, 2.0]))
    assert np.array_equal(vjp_params(m, cache, np.zeros(2)), np.zeros(m.n_params))
    # single linear layer f = W u + b: dW = v u^T, db = v
    u = np.array([1.5, -2.0])
    v = np.array([0.7, 0.3])
    _, cache = mlp_forward(m, u)
    g = vjp_params(m, cache, v)
    expect = np.concatenate([np.outer(v, u).ravel(), v])
    assert np.max(np.abs(g - expect)) <= 1e-14


def test_vjp_params_matches_finite_differences():
    m = random_model(seed=5)
    u = np.array([0.4, 0.2, -0.6])
    v = np.array([-0.3, 1.1, 0.5])
    _, cache = mlp_forward(m, u)
    g = vjp_params(m, cache, v)
    eps = 1e-6
    rng = np.random.default_rng(0)
    for i in rng.choice(m.n_params, size=25, replace=False):
        e = np.zeros(m.n_params)
        e[i] = eps
        fp, _ = mlp_forward(MlpModel(m.spec, m.theta + e), u)
        fm, _ = mlp_forward(MlpModel(m.spec, m.theta - e), u)
        fd = v @ (fp - fm) / (2 * eps)
        assert abs(g[i] - fd) <= 1e-6 * max(1.0, abs(fd))


def test_jvp_identity_and_finite_differences():
    m = identity_model()
    _, cache = mlp_forward(m, np.array([0.0, 0.0]))
    assert np.array_equal(jvp_input(m, cache, np.array([1.0, 0.0])), np.array([1.0, 0.0]))

    m = random_model(seed=7)
    u = np.array([0.3, 0.9, -0.1])
    w = np.array([0.5, -0.4, 0.2])
    _, cache = mlp_forward(m, u)
    jw = jvp_input(m, cache, w)
    eps = 1e-6
    fp, _ = mlp_forward(m, u + eps * w)
    fm, _ = mlp_forward(m, u - eps * w)
    fd = (fp - fm) / (2 * eps)
    assert np.max(np.abs(jw - fd)) <= 1e-6 * max(1.0, np.max(np.abs(fd)))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), act=st.sampled_from(["tanh", "gelu", "relu"]))
def test_adjoint_identity_property(seed, act):
    rng = np.random.default_rng(seed)
    m = random_model(seed=seed, act=act)
    u = rng.uniform(-1, 1, 3)
    v = rng.uniform(-1, 1, 3)
    w = rng.uniform(-1, 1, 3)
    _, cache = mlp_forward(m, u)
    lhs = v @ jvp_input(m, cache, w)
    rhs = vjp_input(m, cache, v) @ w
    assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs))


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_vjp_linearity_property(seed):
    rng = np.random.default_rng(seed)
    m = random_model(seed=seed % 17)
    u = rng.uniform(-1, 1, 3)
    v1 = rng.uniform(-1, 1, 3)
    v2 = rng.uniform(-1, 1, 3)
    a, b = rng.uniform(-2, 2, 2)
    _, cache = mlp_forward(m, u)
    lhs = vjp_input(m, cache, a * v1 + b * v2)
    rhs = a * vjp_input(m, cache, v1) + b * vjp_input(m, cache, v2)
    assert np.max(np.abs(lhs - rhs)) <= 1e-12


@pytest.mark.parametrize("act", ["gelu", "tanh", "relu"])
def test_activation_derivatives_match_finite_differences(act):
    from odegrad.kernels import _act, _act_prime
    from odegrad.nn import ACTIVATION_IDS

    act_id = ACTIVATION_IDS[act]
    xs = np.linspace(-3, 3, 41)
    if act == "relu":
        xs = xs[np.abs(xs) > 1e-3]  # away from the kink
    eps = 1e-6
    d = _act_prime(xs, act_id)
    fd = (_act(xs + eps, act_id) - _act(xs - eps, act_id)) / (2 * eps)
    rel = np.abs(d - fd) / np.maximum(np.abs(fd), 1.0)
    assert np.max(rel) <= 1e-7


def test_relu_subgradient_at_zero_is_zero():
    from odegrad.kernels import _act_prime

    assert _act_prime(np.array([0.0]), 1)[0] == 0.0


def test_forward_is_deterministic():
    m = random_model(seed=11, act="gelu")
    u = np.array([0.25, -0.75, 0.5])
    f1, _ = mlp_forward(m, u)
    f2, _ = mlp_forward(m, u)
    assert np.array_equal(f1, f2)


def test_json_roundtrip_is_value_exact():
    m = random_model(seed=13, act="gelu")
    doc = model_to_json(m)
    m2 = model_from_json(doc)
    assert m2.spec == m.spec
    assert np.array_equal(m2.theta, m.theta)
    parsed = json.loads(doc)
    assert set(parsed) == {"spec", "theta"}


def test_time_input_flag():
    spec = mlp_spec(2, 4, 1, "tanh", time_input=True)
    assert spec.layer_widths[0] == 3
    m = init_model(spec, seed=0)
    f0, _ = mlp_forward(m, np.array([0.1, 0.2]), t=0.0)
    f1, _ = mlp_forward(m, np.array([0.1, 0.2]), t=1.0)
    assert not np.array_equal(f0, f1)


def test_spec_validation():
    with pytest.raises(ValueError):
        MlpSpec((3,))
    with pytest.raises(ValueError):
        MlpSpec((3, 0, 3))
    with pytest.raises(ValueError):
        MlpSpec((4, 8, 3))  # input width inconsistent without time_input
    with pytest.raises(ValueError):
        MlpSpec((3, 8, 3), activation="swish")
