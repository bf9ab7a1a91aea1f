"""Multilayer-perceptron vector field with analytic VJP/JVP.

The network maps the ODE state ``u`` (optionally augmented with the scalar
time ``t``) to ``du/dt``.  Hidden layers use the configured activation, the
output layer is linear.  Parameters live in a single flat vector so the
whole model is one point in R^Np for the optimizer and the adjoint.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .kernels import (
    mlp_forward_kernel,
    mlp_jvp_kernel,
    mlp_vjp_input_kernel,
    mlp_vjp_kernel,
)

ACTIVATION_IDS = {"identity": 0, "relu": 1, "tanh": 2, "gelu": 3}


def as_state(x, n=None) -> np.ndarray:
    """Validate and convert to a finite float64 vector."""
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"expected a 1-d vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("vector contains non-finite entries")
    if n is not None and v.shape[0] != n:
        raise ValueError(f"expected length {n}, got {v.shape[0]}")
    return v


@dataclass(frozen=True)
class MlpSpec:
    """Architecture: layer widths, hidden activation, optional time input."""

    layer_widths: tuple
    activation: str = "gelu"
    time_input: bool = False

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise ValueError("need at least input and output layer widths")
        if any(w <= 0 for w in widths):
            raise ValueError("layer widths must be positive")
        if self.activation not in ACTIVATION_IDS:
            raise ValueError(f"unknown activation {self.activation!r}")
        expected_in = widths[-1] + (1 if self.time_input else 0)
        if widths[0] != expected_in:
            raise ValueError(
                f"input width {widths[0]} inconsistent with state dim "
                f"{widths[-1]} and time_input={self.time_input}"
            )

    @property
    def state_dim(self) -> int:
        return self.layer_widths[-1]

    @property
    def n_params(self) -> int:
        ws = self.layer_widths
        return sum(ws[l + 1] * ws[l] + ws[l + 1] for l in range(len(ws) - 1))

    @property
    def act_id(self) -> int:
        return ACTIVATION_IDS[self.activation]

    def widths_array(self) -> np.ndarray:
        return np.asarray(self.layer_widths, dtype=np.int64)


def mlp_spec(state_dim, hidden, depth, activation="gelu", time_input=False) -> MlpSpec:
    """Spec with `depth` hidden layers of width `hidden`."""
    widths = (state_dim + (1 if time_input else 0),) + (hidden,) * depth + (state_dim,)
    return MlpSpec(widths, activation, time_input)


@dataclass
class MlpModel:
    spec: MlpSpec
    theta: np.ndarray

    def __post_init__(self):
        self.theta = as_state(self.theta, self.spec.n_params)

    @property
    def n(self) -> int:
        return self.spec.state_dim

    @property
    def n_params(self) -> int:
        return self.spec.n_params


def init_model(spec: MlpSpec, seed=0) -> MlpModel:
    """Uniform init in [-sqrt(1/fan_in), +sqrt(1/fan_in)] per layer, seeded."""
    rng = np.random.default_rng(seed)
    parts = []
    ws = spec.layer_widths
    for l in range(len(ws) - 1):
        nin, nout = ws[l], ws[l + 1]
        bound = np.sqrt(1.0 / nin)
        parts.append(rng.uniform(-bound, bound, size=nout * nin))
        parts.append(rng.uniform(-bound, bound, size=nout))
    return MlpModel(spec, np.concatenate(parts))


@dataclass
class ForwardCache:
    """Intermediates of one forward evaluation; valid only for its (u, t)."""

    u: np.ndarray
    t: float
    acts: np.ndarray
    pre: np.ndarray
    n_params: int


def _input_vector(spec: MlpSpec, u: np.ndarray, t: float) -> np.ndarray:
    if spec.time_input:
        return np.concatenate([u, [float(t)]])
    return u


def mlp_forward(model: MlpModel, u, t=0.0):
    """Evaluate f(u, theta, t); returns (value, cache for vjp/jvp)."""
    u = as_state(u, model.n)
    x0 = _input_vector(model.spec, u, t)
    out, acts, pre = mlp_forward_kernel(
        model.spec.widths_array(), model.theta, x0, model.spec.act_id
    )
    cache = ForwardCache(u=u, t=float(t), acts=acts, pre=pre, n_params=model.n_params)
    return out, cache


def vjp_input(model: MlpModel, cache: ForwardCache, v) -> np.ndarray:
    """(df/du)^T v at the cached point."""
    v = as_state(v, model.n)
    _check_cache(model, cache)
    d = mlp_vjp_input_kernel(
        model.spec.widths_array(), model.theta, cache.acts, cache.pre, v, model.spec.act_id
    )
    return d[: model.n]


def vjp_params(model: MlpModel, cache: ForwardCache, v) -> np.ndarray:
    """(df/dtheta)^T v at the cached point."""
    v = as_state(v, model.n)
    _check_cache(model, cache)
    _, dtheta = mlp_vjp_kernel(
        model.spec.widths_array(), model.theta, cache.acts, cache.pre, v, model.spec.act_id
    )
    return dtheta


def vjp_pair(model: MlpModel, cache: ForwardCache, v):
    """Both (df/du)^T v and (df/dtheta)^T v from one backward pass."""
    v = as_state(v, model.n)
    _check_cache(model, cache)
    d, dtheta = mlp_vjp_kernel(
        model.spec.widths_array(), model.theta, cache.acts, cache.pre, v, model.spec.act_id
    )
    return d[: model.n], dtheta


def jvp_input(model: MlpModel, cache: ForwardCache, w) -> np.ndarray:
    """(df/du) w at the cached point (time component held fixed)."""
    w = as_state(w, model.n)
    _check_cache(model, cache)
    if model.spec.time_input:
        s0 = np.concatenate([w, [0.0]])
    else:
        s0 = w
    return mlp_jvp_kernel(
        model.spec.widths_array(), model.theta, cache.pre, s0, model.spec.act_id
    )


def _check_cache(model: MlpModel, cache: ForwardCache):
    if cache.n_params != model.n_params:
        raise ValueError("cache does not belong to this model")


def model_to_json(model: MlpModel) -> str:
    doc = {
        "spec": {
            "layer_widths": list(model.spec.layer_widths),
            "activation": model.spec.activation,
            "time_input": model.spec.time_input,
        },
        "theta": [float(x) for x in model.theta],
    }
    return json.dumps(doc)


def model_from_json(text: str) -> MlpModel:
    doc = json.loads(text)
    spec = MlpSpec(
        tuple(doc["spec"]["layer_widths"]),
        doc["spec"]["activation"],
        bool(doc["spec"]["time_input"]),
    )
    return MlpModel(spec, np.asarray(doc["theta"], dtype=np.float64))


def save_model(model: MlpModel, path):
    with open(path, "w") as fh:
        fh.write(model_to_json(model))


def load_model(path) -> MlpModel:
    with open(path) as fh:
        return model_from_json(fh.read())
