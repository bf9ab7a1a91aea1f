"""Matrix-free solvers: restarted GMRES and Newton iteration.

Both operate on linear-operator callables, so implicit steps and their
transposed adjoint systems never form a Jacobian matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ConvergenceError(RuntimeError):
    """Iterative solver failed; carries the last residual norm."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


@dataclass(frozen=True)
class SolverConfig:
    newton_tol: float = 1e-10
    newton_maxit: int = 50
    gmres_tol: float = 1e-12
    gmres_maxit: int = 200
    gmres_restart: int = 30

    def __post_init__(self):
        if not (0.0 < self.newton_tol < 1.0 and 0.0 < self.gmres_tol < 1.0):
            raise ValueError("tolerances must lie in (0, 1)")
        if min(self.newton_maxit, self.gmres_maxit, self.gmres_restart) < 1:
            raise ValueError("iteration caps must be >= 1")


def gmres(apply_a, rhs, cfg: SolverConfig, x0=None):
    """Solve A x = rhs with restarted GMRES(m); returns (x, total iterations).

    Stops when ||A x - rhs||_2 <= gmres_tol * ||rhs||_2.
    """
    rhs = np.asarray(rhs, dtype=np.float64)
    n = rhs.shape[0]
    x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=np.float64).copy()
    bnorm = np.linalg.norm(rhs)
    if bnorm == 0.0:
        return np.zeros(n), 0
    tol = cfg.gmres_tol * bnorm
    m = min(cfg.gmres_restart, n)
    total = 0
    while True:
        r = rhs - apply_a(x)
        beta = np.linalg.norm(r)
        if beta <= tol:
            return x, total
        if total >= cfg.gmres_maxit:
            break
        # Arnoldi (modified Gram-Schmidt) with Givens rotations on the fly
        q = np.zeros((m + 1, n))
        h = np.zeros((m + 1, m))
        q[0] = r / beta
        cs = np.zeros(m)
        sn = np.zeros(m)
        g = np.zeros(m + 1)
        g[0] = beta
        k_used = 0
        breakdown = False
        for k in range(m):
            if total >= cfg.gmres_maxit:
                break
            w = apply_a(q[k])
            total += 1
            for i in range(k + 1):
                h[i, k] = w @ q[i]
                w = w - h[i, k] * q[i]
            h[k + 1, k] = np.linalg.norm(w)
            if h[k + 1, k] > 1e-300:
                q[k + 1] = w / h[k + 1, k]
            else:
                breakdown = True  # solution lies in the current Krylov space
            for i in range(k):
                tmp = cs[i] * h[i, k] + sn[i] * h[i + 1, k]
                h[i + 1, k] = -sn[i] * h[i, k] + cs[i] * h[i + 1, k]
                h[i, k] = tmp
            denom = np.hypot(h[k, k], h[k + 1, k])
            if denom == 0.0:
                cs[k], sn[k] = 1.0, 0.0
            else:
                cs[k], sn[k] = h[k, k] / denom, h[k + 1, k] / denom
            h[k, k] = cs[k] * h[k, k] + sn[k] * h[k + 1, k]
            h[k + 1, k] = 0.0
            g[k + 1] = -sn[k] * g[k]
            g[k] = cs[k] * g[k]
            k_used = k + 1
            if abs(g[k_used]) <= tol or breakdown:
                break
        if k_used == 0:
            break
        try:
            y = np.linalg.solve(h[:k_used, :k_used], g[:k_used])
        except np.linalg.LinAlgError as err:
            raise ConvergenceError(
                f"GMRES breakdown: singular reduced system ({err})",
                residual=float(abs(g[k_used])),
            ) from err
        x = x + q[:k_used].T @ y
    r = rhs - apply_a(x)
    resid = np.linalg.norm(r)
    if resid <= tol:
        return x, total
    raise ConvergenceError(
        f"GMRES did not converge in {total} iterations (residual {resid:.3e})",
        residual=resid,
    )


def newton_solve(residual, apply_jacobian, u0, cfg: SolverConfig):
    """Newton iteration with GMRES inner solves.

    `residual(u)` returns F(u); `apply_jacobian(u, w)` returns J(u) w,
    re-linearized at each iterate.  Returns (u, iterations) once
    ||F(u)||_2 <= newton_tol.
    """
    u = np.asarray(u0, dtype=np.float64).copy()
    r = residual(u)
    rnorm = np.linalg.norm(r)
    for it in range(cfg.newton_maxit):
        if rnorm <= cfg.newton_tol:
            return u, it
        if not np.all(np.isfinite(r)):
            raise ConvergenceError("Newton residual is non-finite", residual=rnorm)
        delta, _ = gmres(lambda w: apply_jacobian(u, w), -r, cfg)
        u = u + delta
        r = residual(u)
        rnorm = np.linalg.norm(r)
    if rnorm <= cfg.newton_tol:
        return u, cfg.newton_maxit
    raise ConvergenceError(
        f"Newton did not converge in {cfg.newton_maxit} iterations "
        f"(residual {rnorm:.3e})",
        residual=rnorm,
    )
