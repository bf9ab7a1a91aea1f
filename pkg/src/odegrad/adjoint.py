"""Discrete adjoint reverse steps, the gradient orchestration, and a
continuous-adjoint baseline.

Each reverse step is the exact transpose of the corresponding forward step
map, so the assembled gradient is the derivative of the discretized loss up
to solver tolerances and rounding.  The reverse sweep walks checkpointed
records from the last step to the first, adding observation seeds at the
step boundaries where they live.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .checkpointing import CheckpointPolicy, CheckpointStore
from .integrators import (
    AdaptiveController,
    Field,
    FixedController,
    FixedGridController,
    NfeCounters,
    StepRecord,
    integrate,
    replay_step,
)
from .linalg import SolverConfig, gmres
from .losses import LossSpec, loss_and_grad_seed
from .tableaux import Scheme


class GradientExplosionError(RuntimeError):
    """Adjoint state became non-finite during the reverse sweep."""


@dataclass
class AdjointState:
    lam: np.ndarray    # dL/du_n, length N
    mu: np.ndarray     # accumulated dL/dtheta, length Np

    def check_finite(self):
        if not (np.all(np.isfinite(self.lam)) and np.all(np.isfinite(self.mu))):
            raise GradientExplosionError("non-finite adjoint state in reverse sweep")


def adjoint_terminal(dphi_du, dphi_dtheta) -> AdjointState:
    """Terminal condition: lambda_N = (dL/du_N)^T, mu_N = (dL/dtheta)^T."""
    return AdjointState(
        lam=np.asarray(dphi_du, dtype=np.float64).copy(),
        mu=np.asarray(dphi_dtheta, dtype=np.float64).copy(),
    )


def euler_adjoint_step(field: Field, rec: StepRecord, adj: AdjointState,
                       counters: NfeCounters) -> AdjointState:
    """lambda_n = lambda_{n+1} + h (df/du(u_n))^T lambda_{n+1} (Jacobian at
    the step's start state), mu accumulating the parameter product."""
    if not rec.stages:
        raise ValueError("step record carries no stage data; recompute it first")
    jtv, ptv = field.vjp(rec.stages[0], rec.t, adj.lam, counters)
    out = AdjointState(adj.lam + rec.h * jtv, adj.mu + rec.h * ptv)
    out.check_finite()
    return out


def rk_adjoint_step(tab, field: Field, rec: StepRecord, adj: AdjointState,
                    counters: NfeCounters) -> AdjointState:
    """Transpose of one explicit RK step.

    Stage cotangents run in reverse stage order:
        w_i = b_i lambda_{n+1} + sum_{j>i} a_{ji} Lam_j,   Lam_i = h J(U_i)^T w_i
    then lambda_n = lambda_{n+1} + sum_i Lam_i and mu gains h sum_i P(U_i)^T w_i.
    Exactly s VJP pairs per step.
    """
    s = tab.stages
    if len(rec.stages) != s:
        raise ValueError(f"record has {len(rec.stages)} stages, tableau wants {s}")
    lam_stage = [None] * s
    lam = adj.lam.copy()
    mu = adj.mu.copy()
    for i in reversed(range(s)):
        w = tab.b[i] * adj.lam
        for j in range(i + 1, s):
            aji = tab.a[j, i]
            if aji != 0.0:
                w = w + aji * lam_stage[j]
        jtv, ptv = field.vjp(rec.stages[i], rec.t + tab.c[i] * rec.h, w, counters)
        lam_stage[i] = rec.h * jtv
        lam += lam_stage[i]
        mu += rec.h * ptv
    out = AdjointState(lam, mu)
    out.check_finite()
    return out


def theta_adjoint_step(theta, field: Field, rec: StepRecord, adj: AdjointState,
                       cfg: SolverConfig, counters: NfeCounters) -> AdjointState:
    """Transpose of one converged theta-method step.

    Solves (I - h theta J(u_{n+1})^T) lam_s = lambda_{n+1} with GMRES on the
    transposed operator, then
        lambda_n = lam_s + h (1-theta) J(u_n)^T lam_s
        mu_n     = mu_{n+1} + h [theta P(u_{n+1})^T + (1-theta) P(u_n)^T] lam_s.
    """
    if len(rec.stages) != 2:
        raise ValueError("theta step record must hold both endpoint states")
    u0, u1 = rec.stages
    t1 = rec.t + rec.h
    h = rec.h

    def apply_at(v):
        return v - (h * theta) * field.vjp_u(u1, t1, v, counters)

    lam_s, _ = gmres(apply_at, adj.lam, cfg)
    _, ptv1 = field.vjp(u1, t1, lam_s, counters)
    mu = adj.mu + (h * theta) * ptv1
    if theta < 1.0:
        jtv0, ptv0 = field.vjp(u0, rec.t, lam_s, counters)
        lam = lam_s + h * (1.0 - theta) * jtv0
        mu = mu + h * (1.0 - theta) * ptv0
    else:
        lam = lam_s
    out = AdjointState(lam, mu)
    out.check_finite()
    return out


def adjoint_step(scheme: Scheme, field: Field, rec: StepRecord, adj: AdjointState,
                 cfg: SolverConfig, counters: NfeCounters) -> AdjointState:
    if scheme.kind == "rk":
        return rk_adjoint_step(scheme.tableau, field, rec, adj, counters)
    return theta_adjoint_step(scheme.theta, field, rec, adj, cfg, counters)


def inject_observation(adj: AdjointState, seed) -> AdjointState:
    """Add an observation's dL/du seed to lambda at its boundary."""
    out = AdjointState(adj.lam + seed, adj.mu)
    out.check_finite()
    return out


@dataclass
class ForwardSolution:
    store: CheckpointStore
    boundary_times: list
    obs_states: list          # state at each requested observation time
    u_final: np.ndarray


def forward_pass(field, scheme, u0, t0, tF, ctrl, policy, solver_cfg, counters,
                 obs_times=()) -> ForwardSolution:
    """Run the forward solve, filling a CheckpointStore and capturing the
    states at the requested observation times.

    Fixed controllers run as one sweep over their grid; the adaptive
    controller integrates each observation interval separately so the
    boundaries are hit exactly.
    """
    u0 = np.asarray(u0, dtype=np.float64)
    obs_times = list(obs_times)
    if isinstance(ctrl, AdaptiveController):
        if policy.kind == "revolve":
            raise ValueError("revolve checkpointing needs fixed stepping")
        store = CheckpointStore(policy, n_steps=None, u0=u0)
        boundary_times = [t0]
        state = {"offset": 0}

        def sink(rec):
            rec.n = state["offset"] + rec.n
            boundary_times.append(rec.t + rec.h)
            store.on_step(rec)

        pts = [t0] + [tk for tk in obs_times if tk > t0]
        if abs(pts[-1] - tF) > 1e-12 * max(1.0, abs(tF)):
            pts.append(tF)
        u = u0
        obs_states = [u0.copy()] if obs_times and obs_times[0] == t0 else []
        for a, b in zip(pts, pts[1:]):
            u, _ = integrate(scheme, field, u, a, b, ctrl, sink=sink,
                             counters=counters, solver_cfg=solver_cfg)
            state["offset"] = len(boundary_times) - 1
            if any(abs(b - tk) <= 1e-9 * max(1.0, abs(tk)) for tk in obs_times):
                obs_states.append(u.copy())
        store.finalize()
        return ForwardSolution(store, boundary_times, obs_states, u)

    if isinstance(ctrl, FixedController):
        boundary_times = list(np.linspace(t0, tF, ctrl.n_steps + 1))
    elif isinstance(ctrl, FixedGridController):
        boundary_times = list(ctrl.times)
    else:
        raise TypeError(f"unknown controller {ctrl!r}")
    obs_idx = _match_boundaries(obs_times, boundary_times)
    n_steps = len(boundary_times) - 1
    store = CheckpointStore(policy, n_steps=n_steps, u0=u0)
    capture = {}
    want = set(obs_idx)

    def sink(rec):
        if rec.n + 1 in want:
            capture[rec.n + 1] = rec.u_next.copy()
        store.on_step(rec)

    u, _ = integrate(scheme, field, u0, t0, tF, ctrl, sink=sink,
                     counters=counters, solver_cfg=solver_cfg)
    store.finalize()
    capture[0] = u0.copy()
    obs_states = [capture[j] for j in obs_idx]
    return ForwardSolution(store, boundary_times, obs_states, u)


def _match_boundaries(times, boundary_times):
    bt = np.asarray(boundary_times)
    idx = []
    for tk in times:
        j = int(np.argmin(np.abs(bt - tk)))
        if abs(bt[j] - tk) > 1e-9 * max(1.0, abs(tk)):
            raise ValueError(f"time {tk} does not align with a step boundary")
        idx.append(j)
    return idx


@dataclass
class GradResult:
    dtheta: np.ndarray
    du0: np.ndarray
    loss: float
    counters: NfeCounters
    predictions: list
    u_final: np.ndarray
    store_counters: object = None


def backward_sweep(field: Field, scheme: Scheme, fwd: ForwardSolution,
                   terminal: AdjointState, injections, solver_cfg, counters):
    """Reverse all steps, applying boundary injections; returns lambda_0, mu_0.

    `injections` maps boundary index -> dL/du seed.  The terminal state is
    taken at the last boundary before the sweep starts.
    """
    adj = AdjointState(terminal.lam.copy(), terminal.mu.copy())
    adj.check_finite()
    replay = replay_step(scheme, field, solver_cfg)
    for rec in fwd.store.reverse_records(replay, counters):
        seed = injections.get(rec.n + 1)
        if seed is not None:
            adj = inject_observation(adj, seed)
        adj = adjoint_step(scheme, field, rec, adj, solver_cfg, counters)
    seed = injections.get(0)
    if seed is not None:
        adj = inject_observation(adj, seed)
    return adj


def grad(field: Field, scheme: Scheme, loss: LossSpec, u0, t0, tF, ctrl,
         policy=CheckpointPolicy("store_all"), solver_cfg=None,
         counters=None) -> GradResult:
    """Loss, dL/dtheta and dL/du0 by forward solve + discrete adjoint sweep."""
    solver_cfg = solver_cfg or SolverConfig()
    counters = counters if counters is not None else NfeCounters()
    if loss.times[-1] > tF + 1e-9 * max(1.0, abs(tF)):
        raise ValueError("observations extend past the final time")
    fwd = forward_pass(field, scheme, u0, t0, tF, ctrl, policy, solver_cfg,
                       counters, obs_times=loss.times)
    value, seeds = loss_and_grad_seed(loss, fwd.obs_states)
    obs_idx = _match_boundaries(loss.times, fwd.boundary_times)
    injections = {}
    for j, seed in zip(obs_idx, seeds):
        injections[j] = injections.get(j, 0.0) + seed
    terminal = AdjointState(np.zeros_like(np.asarray(u0, dtype=np.float64)),
                            np.zeros(field.n_params))
    adj = backward_sweep(field, scheme, fwd, terminal, injections,
                         solver_cfg, counters)
    return GradResult(
        dtheta=adj.mu, du0=adj.lam, loss=value, counters=counters,
        predictions=fwd.obs_states, u_final=fwd.u_final,
        store_counters=fwd.store.counters,
    )


def loss_value(field: Field, scheme: Scheme, loss: LossSpec, u0, t0, tF, ctrl,
               solver_cfg=None, counters=None) -> float:
    """Forward-only loss evaluation (the workhorse of the FD oracle)."""
    solver_cfg = solver_cfg or SolverConfig()
    counters = counters if counters is not None else NfeCounters()
    fwd = forward_pass(field, scheme, u0, t0, tF, ctrl,
                       CheckpointPolicy("store_solutions"), solver_cfg,
                       counters, obs_times=loss.times)
    value, _ = loss_and_grad_seed(loss, fwd.obs_states)
    return value


# -- continuous adjoint baseline ------------------------------------------

class _AugmentedReverseField(Field):
    """Reverse-time augmented system (u, lambda, mu) for the continuous
    adjoint: integrates du/dt = f, dlam/dt = -J^T lam, dmu/dt = -P^T lam
    backward by the substitution tau = tF - t."""

    def __init__(self, field: Field, n, t_f):
        self.inner = field
        self.n = n
        self.t_f = t_f
        self.n_params = 0

    def eval(self, y, tau, counters):
        t = self.t_f - tau
        u = y[: self.n]
        lam = y[self.n: 2 * self.n]
        jtv, ptv = self.inner.vjp(u, t, lam, counters)
        f = self.inner.eval(u, t, counters)
        # d/dtau = -d/dt
        return np.concatenate([-f, jtv, ptv])


def continuous_adjoint_solve(field: Field, scheme: Scheme, dphi_du, u_final,
                             t0, tF, n_steps, counters=None):
    """Vanilla continuous adjoint: reconstruct u backward while integrating
    the adjoint ODE with the same explicit scheme; terminal-loss case.

    Returns (grad_u0 = lambda(t0), grad_theta = integral of P^T lambda).
    """
    if scheme.kind != "rk":
        raise ValueError("the continuous-adjoint baseline supports explicit schemes")
    counters = counters if counters is not None else NfeCounters()
    n = len(u_final)
    aug = _AugmentedReverseField(field, n, tF)
    y0 = np.concatenate([u_final, np.asarray(dphi_du, dtype=np.float64),
                         np.zeros(field.n_params)])
    yF, _ = integrate(scheme, aug, y0, 0.0, tF - t0, FixedController(n_steps),
                      counters=counters)
    lam0 = yF[n: 2 * n]
    mu0 = yF[2 * n:]
    return lam0, mu0, counters


def local_adjoint_discrepancy(field: Field, u, t, h, lam_next):
    """One-Euler-step discrepancy between continuous and discrete adjoints.

    Discrete evaluates the Jacobian transpose at u_n, continuous at u_{n+1}
    (forward-Euler rows of the two propagation rules); assuming equal
    incoming adjoints the gap is O(h^2) for nonlinear fields and zero for
    linear ones.
    """
    counters = NfeCounters()
    lam_next = np.asarray(lam_next, dtype=np.float64)
    f0 = field.eval(u, t, counters)
    u1 = u + h * f0
    jtv_disc, _ = field.vjp(u, t, lam_next, counters)
    jtv_cont, _ = field.vjp(u1, t + h, lam_next, counters)
    lam_disc = lam_next + h * jtv_disc
    lam_cont = lam_next + h * jtv_cont
    return float(np.linalg.norm(lam_cont - lam_disc)), lam_disc, lam_cont


def fd_gradient(fn, x, eps=1e-5):
    """Central finite differences of a scalar function over a vector."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.shape[0]):
        e = np.zeros_like(x)
        e[i] = eps
        g[i] = (fn(x + e) - fn(x - e)) / (2.0 * eps)
    return g


def rel_error(approx, reference):
    """Infinity-norm relative error against a reference vector."""
    a = np.asarray(approx, dtype=np.float64)
    r = np.asarray(reference, dtype=np.float64)
    scale = max(float(np.max(np.abs(r))), 1e-300)
    return float(np.max(np.abs(a - r)) / scale)
