"""Time-stepping engines: explicit Runge-Kutta and implicit theta methods.

A `Field` bundles the vector-field evaluation with its linearizations so the
implicit Newton solve (JVP) and the discrete adjoint (VJP) stay matrix-free.
Accepted steps are delivered to a sink as `StepRecord`s, the unit of
checkpointing: re-running a step from its record is bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import ConvergenceError, SolverConfig, newton_solve
from .nn import MlpModel, jvp_input, mlp_forward, vjp_input, vjp_pair
from .tableaux import Scheme


class IntegrationError(RuntimeError):
    pass


class StiffnessError(IntegrationError):
    """Adaptive step size underflow: explicit method hit a stability wall."""


@dataclass
class NfeCounters:
    nfe_forward: int = 0
    nfe_backward: int = 0
    steps_accepted: int = 0
    steps_rejected: int = 0
    steps_recomputed: int = 0

    def as_dict(self):
        return {
            "nfe_forward": self.nfe_forward,
            "nfe_backward": self.nfe_backward,
            "steps_accepted": self.steps_accepted,
            "steps_rejected": self.steps_rejected,
            "steps_recomputed": self.steps_recomputed,
        }

    def add(self, other: "NfeCounters"):
        self.nfe_forward += other.nfe_forward
        self.nfe_backward += other.nfe_backward
        self.steps_accepted += other.steps_accepted
        self.steps_rejected += other.steps_rejected
        self.steps_recomputed += other.steps_recomputed


class Field:
    """Vector field with matrix-free linearizations.

    eval(u, t) -> f; jvp(u, t, w) -> (df/du) w; vjp(u, t, v) -> ((df/du)^T v,
    (df/dtheta)^T v).  Evaluations are counted on the supplied counters.
    """

    n_params = 0

    def eval(self, u, t, counters: NfeCounters):
        raise NotImplementedError

    def jvp(self, u, t, w, counters: NfeCounters):
        raise NotImplementedError

    def vjp(self, u, t, v, counters: NfeCounters):
        raise NotImplementedError

    def vjp_u(self, u, t, v, counters: NfeCounters):
        """State-only transpose product; default discards the parameter part."""
        return self.vjp(u, t, v, counters)[0]


class MlpField(Field):
    """The neural-network right-hand side f(u, theta, t)."""

    def __init__(self, model: MlpModel):
        self.model = model
        self.n_params = model.n_params

    def eval(self, u, t, counters):
        counters.nfe_forward += 1
        f, _ = mlp_forward(self.model, u, t)
        return f

    def jvp(self, u, t, w, counters):
        # one linearization pass; counted like a forward evaluation
        counters.nfe_forward += 1
        _, cache = mlp_forward(self.model, u, t)
        return jvp_input(self.model, cache, w)

    def vjp(self, u, t, v, counters):
        counters.nfe_backward += 1
        _, cache = mlp_forward(self.model, u, t)
        return vjp_pair(self.model, cache, v)

    def vjp_u(self, u, t, v, counters):
        counters.nfe_backward += 1
        _, cache = mlp_forward(self.model, u, t)
        return vjp_input(self.model, cache, v)


class CallableField(Field):
    """Adapter for analytic test problems: f plus optional closed-form
    Jacobian products and parameter sensitivities."""

    def __init__(self, f, jvp=None, vjp_u=None, vjp_theta=None, n_params=0):
        self._f = f
        self._jvp = jvp
        self._vjp_u = vjp_u
        self._vjp_theta = vjp_theta
        self.n_params = n_params

    def eval(self, u, t, counters):
        counters.nfe_forward += 1
        return np.asarray(self._f(u, t), dtype=np.float64)

    def jvp(self, u, t, w, counters):
        if self._jvp is None:
            raise IntegrationError("field has no JVP; implicit schemes need one")
        counters.nfe_forward += 1
        return np.asarray(self._jvp(u, t, w), dtype=np.float64)

    def vjp(self, u, t, v, counters):
        if self._vjp_u is None:
            raise IntegrationError("field has no VJP; the adjoint needs one")
        counters.nfe_backward += 1
        du = np.asarray(self._vjp_u(u, t, v), dtype=np.float64)
        if self._vjp_theta is None:
            dth = np.zeros(self.n_params)
        else:
            dth = np.asarray(self._vjp_theta(u, t, v), dtype=np.float64)
        return du, dth

    def vjp_u(self, u, t, v, counters):
        if self._vjp_u is None:
            raise IntegrationError("field has no VJP; the adjoint needs one")
        counters.nfe_backward += 1
        return np.asarray(self._vjp_u(u, t, v), dtype=np.float64)


@dataclass
class StepRecord:
    """One accepted step: everything the adjoint needs to reverse it."""

    n: int
    t: float
    h: float
    u: np.ndarray                 # state at step start
    stages: list                  # stage states U_i at which f was evaluated
    u_next: np.ndarray
    accepted: bool = True


@dataclass(frozen=True)
class FixedController:
    n_steps: int

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("fixed mode requires at least one step")


@dataclass(frozen=True)
class FixedGridController:
    """Fixed stepping through an explicit ascending array of times."""

    times: tuple

    def __post_init__(self):
        ts = tuple(float(t) for t in self.times)
        object.__setattr__(self, "times", ts)
        if len(ts) < 2 or any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("times must be strictly increasing, length >= 2")


@dataclass(frozen=True)
class AdaptiveController:
    abstol: float = 1e-6
    reltol: float = 1e-6
    h_init: float = 1e-3
    h_min: float = 1e-14
    h_max: float = np.inf
    safety: float = 0.9
    max_steps: int = 1_000_000

    def __post_init__(self):
        if self.abstol <= 0 or self.reltol <= 0:
            raise ValueError("tolerances must be positive")
        if not (self.h_min <= self.h_init <= self.h_max):
            raise ValueError("need h_min <= h_init <= h_max")


def explicit_rk_step(tab, field: Field, u, t, h, counters, k_first=None):
    """One explicit RK step; returns (StepRecord, k_last for FSAL reuse)."""
    if h <= 0:
        raise ValueError("step size must be positive")
    s = tab.stages
    stages = []
    ks = []
    for i in range(s):
        ui = u.copy()
        for j in range(i):
            aij = tab.a[i, j]
            if aij != 0.0:
                ui = ui + (h * aij) * ks[j]
        stages.append(ui)
        if i == 0 and k_first is not None:
            ks.append(k_first)
        else:
            ks.append(field.eval(ui, t + tab.c[i] * h, counters))
    u_next = u.copy()
    for i in range(s):
        bi = tab.b[i]
        if bi != 0.0:
            u_next = u_next + (h * bi) * ks[i]
    if not np.all(np.isfinite(u_next)):
        raise IntegrationError(f"state overflowed at t={t} (h={h})")
    rec = StepRecord(n=-1, t=t, h=h, u=u, stages=stages, u_next=u_next)
    return rec, (ks[-1] if tab.fsal else None), ks


def theta_step(theta, field: Field, u, t, h, cfg: SolverConfig, counters):
    """One theta-method step (theta=1 BE, theta=1/2 CN) via Newton-GMRES."""
    if h <= 0:
        raise ValueError("step size must be positive")
    f0 = field.eval(u, t, counters)
    base = u + h * (1.0 - theta) * f0
    t1 = t + h

    def residual(x):
        return x - base - (h * theta) * field.eval(x, t1, counters)

    def apply_jac(x, w):
        return w - (h * theta) * field.jvp(x, t1, w, counters)

    try:
        u_next, _ = newton_solve(residual, apply_jac, u, cfg)
    except ConvergenceError as err:
        raise IntegrationError(f"implicit step at t={t} failed: {err}") from err
    rec = StepRecord(n=-1, t=t, h=h, u=u, stages=[u.copy(), u_next.copy()], u_next=u_next)
    return rec


def _wrms(err, u_old, u_new, ctrl: AdaptiveController):
    scale = ctrl.abstol + ctrl.reltol * np.maximum(np.abs(u_old), np.abs(u_new))
    return float(np.sqrt(np.mean((err / scale) ** 2)))


def integrate(scheme: Scheme, field: Field, u0, t0, tF, ctrl, sink=None,
              counters=None, solver_cfg=None):
    """Drive the stepper from t0 to tF; returns (uF, counters).

    Every accepted StepRecord is delivered to the sink in order (rejected
    trials are counted, never delivered).
    """
    if tF <= t0:
        raise ValueError("tF must exceed t0")
    u = np.asarray(u0, dtype=np.float64).copy()
    counters = counters if counters is not None else NfeCounters()
    solver_cfg = solver_cfg or SolverConfig()
    n = 0

    def emit(rec):
        nonlocal n
        rec.n = n
        n += 1
        counters.steps_accepted += 1
        if sink is not None:
            sink(rec)

    if isinstance(ctrl, (FixedController, FixedGridController)):
        if isinstance(ctrl, FixedController):
            ts = np.linspace(t0, tF, ctrl.n_steps + 1)
        else:
            ts = np.asarray(ctrl.times)
            if abs(ts[0] - t0) > 1e-12 * max(1.0, abs(t0)) or abs(ts[-1] - tF) > 1e-12 * max(1.0, abs(tF)):
                raise ValueError("time grid must span [t0, tF]")
        k_carry = None
        for i in range(len(ts) - 1):
            t, h = ts[i], ts[i + 1] - ts[i]
            if scheme.kind == "rk":
                rec, k_carry, _ = explicit_rk_step(
                    scheme.tableau, field, u, t, h, counters, k_first=k_carry
                )
            else:
                rec = theta_step(scheme.theta, field, u, t, h, solver_cfg, counters)
            u = rec.u_next
            emit(rec)
        return u, counters

    if not isinstance(ctrl, AdaptiveController):
        raise TypeError(f"unknown controller {ctrl!r}")
    if scheme.kind != "rk" or scheme.tableau.b_emb is None:
        raise IntegrationError("adaptive mode needs an embedded explicit scheme")

    tab = scheme.tableau
    p = tab.order
    alpha = 0.7 / p
    beta = 0.4 / p
    h = min(ctrl.h_init, tF - t0)
    t = t0
    err_prev = 1.0
    k_carry = None
    taken = 0
    while t < tF - 1e-14 * max(1.0, abs(tF)):
        if taken >= ctrl.max_steps:
            raise StiffnessError(
                f"adaptive integration exceeded {ctrl.max_steps} steps at t={t}"
            )
        h = min(h, tF - t)
        try:
            rec, k_last, ks = explicit_rk_step(tab, field, u, t, h, counters,
                                               k_first=k_carry)
        except IntegrationError:
            # overflow inside a trial step: treat as a rejection and shrink
            counters.steps_rejected += 1
            k_carry = None
            if h <= ctrl.h_min * (1 + 1e-12):
                raise StiffnessError(f"step size underflow at t={t}: stiffness suspected")
            h = max(h * 0.2, ctrl.h_min)
            taken += 1
            continue
        err_vec = np.zeros_like(u)
        for i in range(tab.stages):
            d = tab.b[i] - tab.b_emb[i]
            if d != 0.0:
                err_vec = err_vec + (h * d) * ks[i]
        enorm = max(_wrms(err_vec, u, rec.u_next, ctrl), 1e-10)
        taken += 1
        if enorm <= 1.0:
            u = rec.u_next
            t = t + h
            emit(rec)
            k_carry = k_last
            # PI controller: exponents (0.7/p, -0.4/p), safety 0.9, clamp [0.2, 5]
            factor = ctrl.safety * enorm ** (-alpha) * err_prev ** beta
            err_prev = enorm
        else:
            counters.steps_rejected += 1
            k_carry = ks[0]  # same (u, t): the first stage value stays valid
            if h <= ctrl.h_min * (1 + 1e-12):
                raise StiffnessError(f"step size underflow at t={t}: stiffness suspected")
            factor = min(ctrl.safety * enorm ** (-alpha), 1.0)
        factor = min(5.0, max(0.2, factor))
        h = min(max(h * factor, ctrl.h_min), ctrl.h_max)
    return u, counters


def replay_step(scheme: Scheme, field: Field, solver_cfg: SolverConfig):
    """Closure recomputing a step from (u, t, h); used by checkpoint restores.

    Replay is bit-identical to the original forward computation because the
    steppers are deterministic functions of (u, t, h).
    """
    solver_cfg = solver_cfg or SolverConfig()

    def _replay(u, t, h, counters):
        counters.steps_recomputed += 1
        if scheme.kind == "rk":
            rec, _, _ = explicit_rk_step(scheme.tableau, field, u, t, h, counters)
        else:
            rec = theta_step(scheme.theta, field, u, t, h, solver_cfg, counters)
        return rec

    return _replay
