"""Optimizer, data pipeline, and the stiff-learning training loop.

The reference problem is the three-species Robertson reaction system:
fast/slow scales spanning several decades make it a classic stress test for
explicit integrators and the motivation for the implicit path.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .adjoint import GradientExplosionError, grad
from .checkpointing import CheckpointPolicy
from .integrators import (
    AdaptiveController,
    CallableField,
    FixedGridController,
    IntegrationError,
    MlpField,
    NfeCounters,
    integrate,
)
from .linalg import SolverConfig
from .losses import LossSpec, MinMaxScaling, loss_and_grad_seed  # noqa: F401 (re-export)
from .nn import MlpModel
from .tableaux import Scheme, tableau_catalog

K1, K2, K3 = 0.04, 3.0e7, 1.0e4


def robertson_rhs(u):
    """Reaction rates of the Robertson system (components sum to zero)."""
    u = np.asarray(u, dtype=np.float64)
    if u.shape != (3,):
        raise ValueError("Robertson state has three species")
    r12 = K1 * u[0]
    r2 = K2 * u[1] * u[1]
    r23 = K3 * u[1] * u[2]
    return np.array([-r12 + r23, r12 - r2 - r23, r2])


def _robertson_jac(u):
    return np.array([
        [-K1, K3 * u[2], K3 * u[1]],
        [K1, -2.0 * K2 * u[1] - K3 * u[2], -K3 * u[1]],
        [0.0, 2.0 * K2 * u[1], 0.0],
    ])


def robertson_field() -> CallableField:
    return CallableField(
        f=lambda u, t: robertson_rhs(u),
        jvp=lambda u, t, w: _robertson_jac(u) @ w,
        vjp_u=lambda u, t, v: _robertson_jac(u).T @ v,
    )


@dataclass
class Dataset:
    times: np.ndarray
    observations: list
    scaling: MinMaxScaling = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("sample times must be strictly increasing")
        n = self.observations[0].shape[0]
        if len(self.observations) != len(self.times):
            raise ValueError("one observation per time required")
        if any(o.shape != (n,) for o in self.observations):
            raise ValueError("inconsistent observation dimensions")

    def matrix(self) -> np.ndarray:
        return np.stack(self.observations)


def geometric_grid(times, n_sub) -> np.ndarray:
    """Geometric substeps inside each (log-spaced) observation interval."""
    pieces = [np.array([times[0]])]
    for a, b in zip(times[:-1], times[1:]):
        pieces.append(np.geomspace(a, b, n_sub + 1)[1:])
    grid = np.concatenate(pieces)
    # pin the observation times exactly onto the grid (geomspace endpoints
    # are exact, interior points may carry rounding)
    return grid


def generate_robertson_dataset(n_points=40, span=(1e-5, 100.0), n_sub=52,
                               newton_tol=1e-12) -> Dataset:
    """Reference trajectory from [1,0,0], sampled log-uniformly over `span`.

    Integrated with Crank-Nicolson over `n_sub` geometric substeps per
    sampling interval (>= 2000 total at the defaults).
    """
    if n_points < 2:
        raise ValueError("need at least the two endpoint samples")
    t_lo, t_hi = span
    if not (0.0 < t_lo < t_hi):
        raise ValueError("need 0 < t_lo < t_hi")
    times = np.geomspace(t_lo, t_hi, n_points)
    grid = geometric_grid(times, n_sub)
    cfg = SolverConfig(newton_tol=newton_tol)
    scheme = tableau_catalog("cn")
    fld = robertson_field()
    u = np.array([1.0, 0.0, 0.0])
    obs = [u.copy()]
    counters = NfeCounters()
    collected = {}

    def sink(rec):
        tb = rec.t + rec.h
        collected[rec.n] = (tb, rec.u_next.copy())

    integrate(scheme, fld, u, float(times[0]), float(times[-1]),
              FixedGridController(tuple(grid)), sink=sink, counters=counters,
              solver_cfg=cfg)
    bt = grid[1:]
    for k in range(1, n_points):
        tk = times[k]
        j = int(np.argmin(np.abs(bt - tk)))
        if abs(bt[j] - tk) > 1e-9 * tk:
            raise RuntimeError("sample time missing from the integration grid")
        obs.append(collected[j][1])
    return Dataset(times=times, observations=obs)


def minmax_normalize(dataset: Dataset) -> Dataset:
    """Scale each component to [0, 1] over the trajectory; keeps the record
    needed for inversion and for the gradient chain rule."""
    mat = dataset.matrix()
    scaling = MinMaxScaling(lo=mat.min(axis=0), hi=mat.max(axis=0))
    scaled = [scaling.apply(row) for row in dataset.observations]
    return Dataset(times=dataset.times.copy(), observations=scaled, scaling=scaling)


def write_dataset_csv(dataset: Dataset, path):
    n = dataset.observations[0].shape[0]
    header = "t," + ",".join(f"u{i+1}" for i in range(n))
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for t, row in zip(dataset.times, dataset.observations):
            cells = [f"{t:.17g}"] + [f"{x:.17g}" for x in row]
            fh.write(",".join(cells) + "\n")


def read_dataset_csv(path) -> Dataset:
    rows = np.loadtxt(path, delimiter=",", skiprows=1)
    return Dataset(times=rows[:, 0], observations=[r for r in rows[:, 1:]])


@dataclass
class AdamWConfig:
    lr: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @staticmethod
    def zeros(n_params) -> "OptimizerState":
        return OptimizerState(m=np.zeros(n_params), v=np.zeros(n_params))


def adamw_step(theta, g, state: OptimizerState, cfg: AdamWConfig):
    """One decoupled-weight-decay Adam update; returns (theta', state')."""
    g = np.asarray(g, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise GradientExplosionError("non-finite gradient passed to the optimizer")
    if g.shape != state.m.shape:
        raise ValueError("gradient/state length mismatch")
    t = state.step + 1
    theta = theta * (1.0 - cfg.lr * cfg.weight_decay)
    m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * g
    v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * g * g
    m_hat = m / (1.0 - cfg.beta1 ** t)
    v_hat = v / (1.0 - cfg.beta2 ** t)
    theta = theta - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
    return theta, OptimizerState(m=m, v=v, step=t)


@dataclass
class TrainConfig:
    epochs: int = 2000
    optimizer: AdamWConfig = field(default_factory=AdamWConfig)
    policy: CheckpointPolicy = field(default_factory=lambda: CheckpointPolicy("store_all"))
    n_sub: int = 4                     # fixed substeps per observation interval
    abstol: float = 1e-6               # adaptive (dopri5) tolerances
    reltol: float = 1e-6
    solver: SolverConfig = field(default_factory=SolverConfig)
    explosion_threshold: float = 1e6
    # stop as soon as per-epoch NFE-F exceeds `nfe_stop_factor` times the
    # mean of the first `nfe_baseline_epochs` epochs (None = never)
    nfe_stop_factor: float = None
    nfe_baseline_epochs: int = 100
    loss_kind: str = "mae"


@dataclass
class TrainingRecord:
    config: dict
    loss: list
    grad_norm: list
    nfe_forward: list
    nfe_backward: list
    seconds: list
    aborted: str = ""                  # "", "gradient_explosion", "solver_failure"
    abort_epoch: int = -1
    nfe_blowup_epoch: int = -1
    final_theta: np.ndarray = None

    def as_dict(self):
        return {
            "config": self.config,
            "loss": self.loss,
            "grad_norm": self.grad_norm,
            "nfe_forward": self.nfe_forward,
            "nfe_backward": self.nfe_backward,
            "seconds": self.seconds,
            "aborted": self.aborted,
            "abort_epoch": self.abort_epoch,
            "nfe_blowup_epoch": self.nfe_blowup_epoch,
        }


def train(model: MlpModel, scheme: Scheme, dataset: Dataset,
          cfg: TrainConfig = None, log_every=0) -> tuple:
    """Full-batch training of the neural ODE on the dataset trajectory.

    The state starts at the first observation; the loss averages over the
    remaining ones.  Returns (trained model, TrainingRecord).
    """
    cfg = cfg or TrainConfig()
    times = dataset.times
    u0 = dataset.observations[0].copy()
    loss_spec = LossSpec(cfg.loss_kind, tuple(times[1:]),
                         tuple(dataset.observations[1:]))
    if scheme.kind == "theta" or scheme.tableau.b_emb is None:
        ctrl = FixedGridController(tuple(geometric_grid(times, cfg.n_sub)))
        adaptive = False
    else:
        ctrl = AdaptiveController(abstol=cfg.abstol, reltol=cfg.reltol,
                                  h_init=min(1e-3, (times[1] - times[0]) / 4),
                                  max_steps=200_000)
        adaptive = True
    policy = cfg.policy
    if adaptive and policy.kind == "revolve":
        policy = CheckpointPolicy("store_all")

    theta = model.theta.copy()
    opt = OptimizerState.zeros(model.n_params)
    rec = TrainingRecord(config={
        "scheme": scheme.name, "epochs": cfg.epochs, "lr": cfg.optimizer.lr,
        "weight_decay": cfg.optimizer.weight_decay, "n_sub": cfg.n_sub,
        "policy": policy.kind, "loss": cfg.loss_kind,
        "abstol": cfg.abstol, "reltol": cfg.reltol,
    }, loss=[], grad_norm=[], nfe_forward=[], nfe_backward=[], seconds=[])

    if cfg.epochs == 0:
        # evaluate the initial loss only; parameters untouched
        from .adjoint import loss_value

        counters = NfeCounters()
        value = loss_value(MlpField(model), scheme, loss_spec, u0,
                           float(times[0]), float(times[-1]), ctrl,
                           cfg.solver, counters)
        rec.loss.append(value)
        rec.nfe_forward.append(counters.nfe_forward)
        rec.nfe_backward.append(counters.nfe_backward)
        rec.final_theta = theta
        return MlpModel(model.spec, theta), rec

    for epoch in range(cfg.epochs):
        tic = time.perf_counter()
        cur = MlpModel(model.spec, theta)
        counters = NfeCounters()
        try:
            res = grad(MlpField(cur), scheme, loss_spec, u0, float(times[0]),
                       float(times[-1]), ctrl, policy, cfg.solver, counters)
            gnorm = float(np.linalg.norm(res.dtheta))
        except GradientExplosionError:
            rec.aborted = "gradient_explosion"
            rec.abort_epoch = epoch
            rec.nfe_forward.append(counters.nfe_forward)
            rec.nfe_backward.append(counters.nfe_backward)
            rec.loss.append(float("nan"))
            rec.grad_norm.append(float("inf"))
            rec.seconds.append(time.perf_counter() - tic)
            break
        except IntegrationError as err:
            rec.aborted = f"solver_failure: {err}"
            rec.abort_epoch = epoch
            rec.nfe_forward.append(counters.nfe_forward)
            rec.nfe_backward.append(counters.nfe_backward)
            rec.loss.append(float("nan"))
            rec.grad_norm.append(float("nan"))
            rec.seconds.append(time.perf_counter() - tic)
            break
        rec.loss.append(res.loss)
        rec.grad_norm.append(gnorm)
        rec.nfe_forward.append(counters.nfe_forward)
        rec.nfe_backward.append(counters.nfe_backward)
        rec.seconds.append(time.perf_counter() - tic)
        if log_every and epoch % log_every == 0:
            print(f"epoch {epoch:5d}  loss {res.loss:.6e}  |g| {gnorm:.3e}  "
                  f"nfe {counters.nfe_forward}")
        if not np.isfinite(gnorm) or gnorm > cfg.explosion_threshold:
            rec.aborted = "gradient_explosion"
            rec.abort_epoch = epoch
            break
        if cfg.nfe_stop_factor is not None and epoch >= cfg.nfe_baseline_epochs:
            base = float(np.mean(rec.nfe_forward[: cfg.nfe_baseline_epochs]))
            if counters.nfe_forward >= cfg.nfe_stop_factor * base:
                rec.nfe_blowup_epoch = epoch
                break
        theta, opt = adamw_step(theta, res.dtheta, opt, cfg.optimizer)

    rec.final_theta = theta
    return MlpModel(model.spec, theta), rec
