"""Hot numeric kernels for the MLP vector field.

Every gradient step runs these kernels thousands of times on tiny matrices,
so call overhead dominates.  With numba available the kernels are compiled
with ``@njit`` around tight scalar loops; set ``ODEGRAD_NO_NUMBA=1`` to
select the pure-numpy fallback, which swaps the loop helpers for vectorized
equivalents.  ``benchmarks/bench_kernels.py`` compares the two paths.

Layout conventions shared with :mod:`odegrad.nn`:
  * ``widths``: int64 array ``[w0, w1, ..., wL]`` (L affine layers).
  * ``theta``: flat float64 parameter vector, per layer ``W`` (row-major,
    shape ``w_out x w_in``) followed by ``b`` (length ``w_out``).
  * ``acts``: flat buffer of the inputs to each affine layer
    (length ``sum(widths[:-1])``).
  * ``pre``: flat buffer of pre-activations (length ``sum(widths[1:])``).
  * ``act_id``: 0 identity, 1 relu, 2 tanh, 3 gelu.
"""

import math
import os

import numpy as np

_env = os.environ.get("ODEGRAD_NO_NUMBA", "").strip().lower()
NUMBA_DISABLED = _env in {"1", "true", "yes", "on"}

if not NUMBA_DISABLED:
    try:
        from numba import njit as _njit

        NUMBA_ENABLED = True
    except ImportError:  # pragma: no cover - numba is a declared dependency
        NUMBA_ENABLED = False
else:
    NUMBA_ENABLED = False

_SQRT1_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


if NUMBA_ENABLED:
    def _jit(func):
        return _njit(cache=True, fastmath=False)(func)

    @_jit
    def _act(z, act_id):
        out = np.empty_like(z)
        for i in range(z.shape[0]):
            x = z[i]
            if act_id == 0:
                out[i] = x
            elif act_id == 1:
                out[i] = x if x > 0.0 else 0.0
            elif act_id == 2:
                out[i] = math.tanh(x)
            else:
                # exact GELU: 0.5*x*(1+erf(x/sqrt(2)))
                out[i] = 0.5 * x * (1.0 + math.erf(x * _SQRT1_2))
        return out

    @_jit
    def _act_prime(z, act_id):
        out = np.empty_like(z)
        for i in range(z.shape[0]):
            x = z[i]
            if act_id == 0:
                out[i] = 1.0
            elif act_id == 1:
                # subgradient at 0 fixed to 0 for determinism
                out[i] = 1.0 if x > 0.0 else 0.0
            elif act_id == 2:
                t = math.tanh(x)
                out[i] = 1.0 - t * t
            else:
                out[i] = (0.5 * (1.0 + math.erf(x * _SQRT1_2))
                          + x * _INV_SQRT_2PI * math.exp(-0.5 * x * x))
        return out

    @_jit
    def _outer_into(buf, base, d, x):
        nin = x.shape[0]
        for i in range(d.shape[0]):
            di = d[i]
            row = base + i * nin
            for j in range(nin):
                buf[row + j] = di * x[j]
else:
    def _jit(func):
        return func

    try:
        from scipy.special import erf as _erf_vec  # vectorized exact erf
    except ImportError:  # pragma: no cover
        def _erf_vec(z):
            return np.array([math.erf(x) for x in z])

    def _act(z, act_id):
        if act_id == 0:
            return z.copy()
        if act_id == 1:
            return np.maximum(z, 0.0)
        if act_id == 2:
            return np.tanh(z)
        return 0.5 * z * (1.0 + _erf_vec(z * _SQRT1_2))

    def _act_prime(z, act_id):
        if act_id == 0:
            return np.ones_like(z)
        if act_id == 1:
            return (z > 0.0).astype(np.float64)
        if act_id == 2:
            t = np.tanh(z)
            return 1.0 - t * t
        return (0.5 * (1.0 + _erf_vec(z * _SQRT1_2))
                + z * _INV_SQRT_2PI * np.exp(-0.5 * z * z))

    def _outer_into(buf, base, d, x):
        nin = x.shape[0]
        buf[base:base + d.shape[0] * nin] = np.outer(d, x).ravel()


@_jit
def mlp_forward_kernel(widths, theta, x0, act_id):
    """One forward pass; returns (output, acts, pre) with full caches."""
    n_layers = widths.shape[0] - 1
    n_acts = 0
    n_pre = 0
    for l in range(n_layers):
        n_acts += widths[l]
        n_pre += widths[l + 1]
    acts = np.empty(n_acts)
    pre = np.empty(n_pre)
    a = x0.copy()
    off = 0
    ai = 0
    pi = 0
    for l in range(n_layers):
        nin = widths[l]
        nout = widths[l + 1]
        acts[ai:ai + nin] = a
        w = theta[off:off + nout * nin].reshape(nout, nin)
        b = theta[off + nout * nin:off + nout * nin + nout]
        z = np.dot(w, a) + b
        pre[pi:pi + nout] = z
        if l < n_layers - 1:
            a = _act(z, act_id)
        else:
            a = z
        off += nout * nin + nout
        ai += nin
        pi += nout
    return a, acts, pre


@_jit
def mlp_vjp_kernel(widths, theta, acts, pre, v, act_id):
    """Reverse pass: returns (d_input, d_theta) for cotangent v on the output."""
    n_layers = widths.shape[0] - 1
    offs = np.empty(n_layers + 1, np.int64)
    aoffs = np.empty(n_layers + 1, np.int64)
    poffs = np.empty(n_layers + 1, np.int64)
    offs[0] = 0
    aoffs[0] = 0
    poffs[0] = 0
    for l in range(n_layers):
        offs[l + 1] = offs[l] + widths[l + 1] * widths[l] + widths[l + 1]
        aoffs[l + 1] = aoffs[l] + widths[l]
        poffs[l + 1] = poffs[l] + widths[l + 1]
    dtheta = np.zeros(theta.shape[0])
    d = v.copy()
    for l in range(n_layers - 1, -1, -1):
        nin = widths[l]
        nout = widths[l + 1]
        if l < n_layers - 1:
            d = d * _act_prime(pre[poffs[l]:poffs[l] + nout], act_id)
        x = acts[aoffs[l]:aoffs[l] + nin]
        base = offs[l]
        # dW = outer(d, x), db = d
        _outer_into(dtheta, base, d, x)
        dtheta[base + nout * nin:base + nout * nin + nout] = d
        w = theta[base:base + nout * nin].reshape(nout, nin)
        d = np.dot(d, w)  # row-vector product == W^T d, keeps arrays contiguous
    return d, dtheta


@_jit
def mlp_vjp_input_kernel(widths, theta, acts, pre, v, act_id):
    """Reverse pass w.r.t. the input only (skips the d_theta accumulation);
    the cheap operator inside transposed GMRES solves."""
    n_layers = widths.shape[0] - 1
    offs = np.empty(n_layers + 1, np.int64)
    poffs = np.empty(n_layers + 1, np.int64)
    offs[0] = 0
    poffs[0] = 0
    for l in range(n_layers):
        offs[l + 1] = offs[l] + widths[l + 1] * widths[l] + widths[l + 1]
        poffs[l + 1] = poffs[l] + widths[l + 1]
    d = v.copy()
    for l in range(n_layers - 1, -1, -1):
        nin = widths[l]
        nout = widths[l + 1]
        if l < n_layers - 1:
            d = d * _act_prime(pre[poffs[l]:poffs[l] + nout], act_id)
        w = theta[offs[l]:offs[l] + nout * nin].reshape(nout, nin)
        d = np.dot(d, w)
    return d


@_jit
def mlp_jvp_kernel(widths, theta, pre, s0, act_id):
    """Forward-mode pass through the cached linearization: returns (df/dx) s0."""
    n_layers = widths.shape[0] - 1
    s = s0.copy()
    off = 0
    pi = 0
    for l in range(n_layers):
        nin = widths[l]
        nout = widths[l + 1]
        w = theta[off:off + nout * nin].reshape(nout, nin)
        s = np.dot(w, s)
        if l < n_layers - 1:
            s = s * _act_prime(pre[pi:pi + nout], act_id)
        off += nout * nin + nout
        pi += nout
    return s


def warmup():
    """Trigger JIT compilation on a tiny model (no-op on the numpy path)."""
    widths = np.array([2, 3, 2], dtype=np.int64)
    rng = np.random.default_rng(0)
    theta = rng.standard_normal(2 * 3 + 3 + 3 * 2 + 2)
    x = rng.standard_normal(2)
    for act_id in (0, 1, 2, 3):
        out, acts, pre = mlp_forward_kernel(widths, theta, x, act_id)
        mlp_vjp_kernel(widths, theta, acts, pre, out, act_id)
        mlp_vjp_input_kernel(widths, theta, acts, pre, out, act_id)
        mlp_jvp_kernel(widths, theta, pre, x, act_id)
