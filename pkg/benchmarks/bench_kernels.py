"""Benchmark the MLP kernels and one full gradient step: numba vs numpy.

Run directly for the active path; without arguments it also re-launches
itself under ODEGRAD_NO_NUMBA=1 to print the side-by-side comparison.

    python benchmarks/bench_kernels.py
"""

import json
import os
import subprocess
import sys
import time

import numpy as np

from odegrad import kernels
from odegrad.adjoint import grad
from odegrad.checkpointing import CheckpointPolicy
from odegrad.integrators import FixedGridController, MlpField
from odegrad.losses import LossSpec
from odegrad.nn import init_model, mlp_forward, mlp_spec, vjp_pair
from odegrad.tableaux import tableau_catalog
from odegrad.training import generate_robertson_dataset, geometric_grid, minmax_normalize


def bench_kernels(n_calls=20_000):
    model = init_model(mlp_spec(3, 64, 5, "gelu"), seed=0)
    u = np.array([0.5, 0.2, 0.1])
    v = np.array([1.0, -1.0, 0.5])
    # trigger any JIT compilation before timing
    _, cache = mlp_forward(model, u)
    vjp_pair(model, cache, v)

    tic = time.perf_counter()
    for _ in range(n_calls):
        f, cache = mlp_forward(model, u)
    t_fwd = (time.perf_counter() - tic) / n_calls

    _, cache = mlp_forward(model, u)
    tic = time.perf_counter()
    for _ in range(n_calls):
        vjp_pair(model, cache, v)
    t_vjp = (time.perf_counter() - tic) / n_calls
    return t_fwd, t_vjp


def bench_grad_epoch():
    dataset = minmax_normalize(generate_robertson_dataset())
    model = init_model(mlp_spec(3, 64, 5, "gelu"), seed=0)
    loss = LossSpec("mae", tuple(dataset.times[1:]), tuple(dataset.observations[1:]))
    ctrl = FixedGridController(tuple(geometric_grid(dataset.times, 4)))
    fld = MlpField(model)
    args = (fld, tableau_catalog("cn"), loss, dataset.observations[0],
            float(dataset.times[0]), float(dataset.times[-1]), ctrl,
            CheckpointPolicy("store_all"))
    grad(*args)  # warm
    tic = time.perf_counter()
    grad(*args)
    return time.perf_counter() - tic


def run_once():
    t_fwd, t_vjp = bench_kernels()
    t_epoch = bench_grad_epoch()
    return {
        "numba": kernels.NUMBA_ENABLED,
        "forward_us": t_fwd * 1e6,
        "vjp_pair_us": t_vjp * 1e6,
        "grad_epoch_s": t_epoch,
    }


def main():
    mine = run_once()
    label = "numba" if mine["numba"] else "numpy"
    print(f"[{label}] forward {mine['forward_us']:.1f} us | "
          f"vjp pair {mine['vjp_pair_us']:.1f} us | "
          f"one CN training gradient {mine['grad_epoch_s']*1e3:.0f} ms")
    if mine["numba"] and "--single" not in sys.argv:
        env = dict(os.environ, ODEGRAD_NO_NUMBA="1")
        out = subprocess.run(
            [sys.executable, __file__, "--single", "--json"],
            capture_output=True, text=True, env=env, check=True,
        )
        other = json.loads(out.stdout.splitlines()[-1])
        print(f"[numpy] forward {other['forward_us']:.1f} us | "
              f"vjp pair {other['vjp_pair_us']:.1f} us | "
              f"one CN training gradient {other['grad_epoch_s']*1e3:.0f} ms")
        print(f"speedup: forward {other['forward_us']/mine['forward_us']:.1f}x, "
              f"vjp {other['vjp_pair_us']/mine['vjp_pair_us']:.1f}x, "
              f"gradient {other['grad_epoch_s']/mine['grad_epoch_s']:.1f}x")
    if "--json" in sys.argv:
        print(json.dumps(mine))


if __name__ == "__main__":
    main()
