"""Observation losses and min-max scaling shared by the adjoint and training."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class MinMaxScaling:
    """Per-component affine map u' = (u - lo) / (hi - lo).

    Components with hi == lo pass through unchanged (degenerate flag kept
    per component so the inverse and the gradient chain rule stay exact).
    """

    lo: np.ndarray
    hi: np.ndarray

    @property
    def degenerate(self) -> np.ndarray:
        return self.hi <= self.lo

    @property
    def span(self) -> np.ndarray:
        return np.where(self.degenerate, 1.0, self.hi - self.lo)

    def apply(self, u: np.ndarray) -> np.ndarray:
        return np.where(self.degenerate, u, (u - self.lo) / self.span)

    def invert(self, v: np.ndarray) -> np.ndarray:
        return np.where(self.degenerate, v, v * self.span + self.lo)

    def chain(self, seed_scaled: np.ndarray) -> np.ndarray:
        """Map dL/du' back to dL/du through the constant diagonal scaling."""
        return np.where(self.degenerate, seed_scaled, seed_scaled / self.span)


@dataclass(frozen=True)
class LossSpec:
    """MAE/MSE over observations at fixed times (K=1 at t_F is terminal loss).

    When `scaling` is set, raw-space predictions are compared against the
    (already scaled) observations in scaled space and the gradient seeds are
    mapped back through the scaling.
    """

    kind: str
    times: tuple
    values: tuple
    scaling: MinMaxScaling = None

    def __post_init__(self):
        if self.kind not in {"mae", "mse"}:
            raise ValueError(f"unknown loss kind {self.kind!r}")
        ts = tuple(float(t) for t in self.times)
        vals = tuple(np.asarray(v, dtype=np.float64) for v in self.values)
        if len(ts) != len(vals) or not ts:
            raise ValueError("need one observation vector per time")
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("observation times must be strictly increasing")
        n = vals[0].shape[0]
        if any(v.shape != (n,) for v in vals):
            raise ValueError("all observations must share the state dimension")
        object.__setattr__(self, "times", ts)
        object.__setattr__(self, "values", vals)

    @property
    def n_obs(self) -> int:
        return len(self.times)


def terminal_loss(kind, t_final, observed, scaling=None) -> LossSpec:
    return LossSpec(kind, (t_final,), (observed,), scaling)


def loss_and_grad_seed(loss: LossSpec, predictions):
    """Loss value plus per-observation dL/du seeds (raw prediction space).

    The loss is the mean of the elementwise residuals over all observations
    and components; MAE subgradient at zero residual is 0.
    """
    if len(predictions) != loss.n_obs:
        raise ValueError("one prediction per observation required")
    k = loss.n_obs
    n = loss.values[0].shape[0]
    denom = float(k * n)
    total = 0.0
    seeds = []
    for pred, obs in zip(predictions, loss.values):
        pred = np.asarray(pred, dtype=np.float64)
        if loss.scaling is not None:
            pred_c = loss.scaling.apply(pred)
        else:
            pred_c = pred
        r = pred_c - obs
        if loss.kind == "mae":
            total += float(np.sum(np.abs(r)))
            seed = np.sign(r) / denom
        else:
            total += float(np.sum(r * r))
            seed = 2.0 * r / denom
        if loss.scaling is not None:
            seed = loss.scaling.chain(seed)
        seeds.append(seed)
    return total / denom, seeds
