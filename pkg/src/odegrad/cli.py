"""Command-line harness: gradient verification, adjoint comparisons,
checkpoint benchmarking, integrator order studies, and the Robertson fit.

Every command honors --seed, emits a machine-readable run record, and uses
exit codes 0 (pass), 2 (usage), 3 (assertion failure), 4 (solver failure).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from .adjoint import (
    fd_gradient,
    grad,
    local_adjoint_discrepancy,
    loss_value,
    rel_error,
)
from .checkpointing import (
    CheckpointPolicy,
    audit_schedule,
    dp_optimal_count,
    revolve_count,
)
from .integrators import (
    CallableField,
    FixedController,
    IntegrationError,
    MlpField,
    integrate,
)
from .linalg import ConvergenceError
from .losses import terminal_loss
from .nn import MlpModel, init_model, mlp_spec, save_model
from .tableaux import SCHEME_NAMES, tableau_catalog
from .training import (
    AdamWConfig,
    TrainConfig,
    generate_robertson_dataset,
    minmax_normalize,
    train,
    write_dataset_csv,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_ASSERT = 3
EXIT_SOLVER = 4


def _emit_record(args, record):
    record["wall_time_s"] = round(time.perf_counter() - record.pop("_tic"), 3)
    if getattr(args, "out", None):
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, "run_record.json")
        with open(path, "w") as fh:
            json.dump(record, fh, indent=2)
        record.setdefault("outputs", []).append(path)
    if getattr(args, "json", False):
        json.dump(record, sys.stdout, indent=2)
        sys.stdout.write("\n")


def _new_record(args, command):
    cfg = {k: v for k, v in vars(args).items()
           if k not in {"func", "json", "config"} and not k.startswith("_")}
    return {"command": command, "config": cfg, "seed": getattr(args, "seed", None),
            "_tic": time.perf_counter(), "outputs": []}


def _build_model(dim, width, depth, activation, seed):
    return init_model(mlp_spec(dim, width, depth, activation), seed=seed)


def cmd_verify_grad(args):
    record = _new_record(args, "verify-grad")
    if args.steps < 1:
        print("error: --steps must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    scheme = tableau_catalog(args.scheme)
    policy = CheckpointPolicy.parse(args.policy)
    rng = np.random.default_rng(args.seed)
    model = _build_model(args.dim, args.width, args.depth, "tanh", args.seed)
    u0 = rng.uniform(-1.0, 1.0, size=args.dim)
    target = rng.uniform(-1.0, 1.0, size=args.dim)
    loss = terminal_loss("mse", 1.0, target)
    ctrl = FixedController(args.steps)
    try:
        res = grad(MlpField(model), scheme, loss, u0, 0.0, 1.0, ctrl, policy)

        def loss_of_theta(th):
            return loss_value(MlpField(MlpModel(model.spec, th)), scheme, loss,
                              u0, 0.0, 1.0, ctrl)

        def loss_of_u0(u):
            return loss_value(MlpField(model), scheme, loss, u, 0.0, 1.0, ctrl)

        fd_theta = fd_gradient(loss_of_theta, model.theta, args.fd_eps)
        fd_u0 = fd_gradient(loss_of_u0, u0, args.fd_eps)
    except (IntegrationError, ConvergenceError) as err:
        print(f"solver failure: {err}", file=sys.stderr)
        return EXIT_SOLVER
    err_theta = rel_error(res.dtheta, fd_theta)
    err_u0 = rel_error(res.du0, fd_u0)
    scale_th = max(float(np.max(np.abs(fd_theta))), 1e-300)
    per_comp = np.abs(res.dtheta - fd_theta) / scale_th
    record["metrics"] = {
        "max_rel_err_theta": err_theta,
        "max_rel_err_u0": err_u0,
        "mean_rel_err_theta": float(np.mean(per_comp)),
        "loss": res.loss,
        "n_params": model.n_params,
        "counters": res.counters.as_dict(),
    }
    if args.dump_components:
        record["metrics"]["adjoint_dtheta"] = [float(x) for x in res.dtheta]
        record["metrics"]["fd_dtheta"] = [float(x) for x in fd_theta]
    _emit_record(args, record)
    worst = max(err_theta, err_u0)
    print(f"verify-grad {args.scheme}: max rel err dL/dtheta={err_theta:.3e} "
          f"dL/du0={err_u0:.3e}")
    if worst > 1e-5:
        print("FAIL: gradient mismatch beyond 1e-5", file=sys.stderr)
        return EXIT_ASSERT
    return EXIT_OK


def cmd_compare_adjoint(args):
    record = _new_record(args, "compare-adjoint")
    if args.problem == "linear":
        a = 2.0
        fld = CallableField(f=lambda u, t: a * u,
                            jvp=lambda u, t, w: a * w,
                            vjp_u=lambda u, t, v: a * v)
    elif args.problem == "quadratic":
        fld = CallableField(f=lambda u, t: u * u,
                            jvp=lambda u, t, w: 2.0 * u * w,
                            vjp_u=lambda u, t, v: 2.0 * u * v)
    else:
        print(f"error: unknown problem {args.problem!r}", file=sys.stderr)
        return EXIT_USAGE
    hs = [float(h) for h in args.h.split(",")]
    u = np.array([1.0])
    lam = np.array([1.0])
    rows = []
    for h in hs:
        d_h, _, _ = local_adjoint_discrepancy(fld, u, 0.0, h, lam)
        d_h2, _, _ = local_adjoint_discrepancy(fld, u, 0.0, h / 2, lam)
        ratio = d_h / d_h2 if d_h2 > 0 else float("inf")
        order = np.log2(ratio) if np.isfinite(ratio) and ratio > 0 else float("nan")
        rows.append({"h": h, "discrepancy": d_h, "discrepancy_half": d_h2,
                     "ratio": ratio, "fitted_order": order})
        print(f"h={h:.3e}  |cont-disc|={d_h:.6e}  ratio(h/2)={ratio:.3f}")
    record["metrics"] = {"rows": rows, "problem": args.problem}
    _emit_record(args, record)
    if args.problem == "linear":
        if any(r["discrepancy"] > 1e-14 for r in rows):
            print("FAIL: linear field should have zero discrepancy", file=sys.stderr)
            return EXIT_ASSERT
    else:
        if any(not (3.5 <= r["ratio"] <= 4.5) for r in rows):
            print("FAIL: discrepancy not O(h^2)", file=sys.stderr)
            return EXIT_ASSERT
        ds = [r["discrepancy"] for r in rows]
        if any(b >= a for a, b in zip(ds, ds[1:])) and sorted(hs, reverse=True) == hs:
            print("FAIL: discrepancy not monotone in h", file=sys.stderr)
            return EXIT_ASSERT
    return EXIT_OK


def cmd_checkpoint_bench(args):
    record = _new_record(args, "checkpoint-bench")
    lines = ["nt,nc,p_tilde,dp_count,max_slots,recomputed_steps"]
    mismatches = 0
    grid = {}
    for nt in range(1, args.nt_max + 1):
        for nc in range(1, args.nc_max + 1):
            p = revolve_count(nt, nc)
            d = dp_optimal_count(nt, nc)
            extra, live = audit_schedule(nt, nc)
            grid[(nt, nc)] = p
            if not (p == d == extra) or live > nc:
                mismatches += 1
            lines.append(f"{nt},{nc},{p},{d},{live},{extra}")
    # monotonicity: non-increasing in nc, non-decreasing in nt
    mono_bad = 0
    for (nt, nc), p in grid.items():
        if (nt, nc + 1) in grid and grid[(nt, nc + 1)] > p:
            mono_bad += 1
        if (nt + 1, nc) in grid and grid[(nt + 1, nc)] < p:
            mono_bad += 1
    csv_text = "\n".join(lines) + "\n"
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, "checkpoint_bench.csv")
        with open(path, "w") as fh:
            fh.write(csv_text)
        record["outputs"].append(path)
    else:
        sys.stdout.write(csv_text)
    record["metrics"] = {"mismatches": mismatches, "monotonicity_violations": mono_bad,
                         "grid": f"[1,{args.nt_max}]x[1,{args.nc_max}]"}
    _emit_record(args, record)
    print(f"checkpoint-bench: {len(grid)} cells, {mismatches} mismatches, "
          f"{mono_bad} monotonicity violations")
    if mismatches or mono_bad:
        return EXIT_ASSERT
    return EXIT_OK


_NOMINAL_ORDER = {"euler": 1, "midpoint": 2, "bosh3": 3, "rk4": 4, "dopri5": 5,
                  "beuler": 1, "cn": 2}


def measure_order(scheme_name, n_list=(40, 80, 160)):
    """Empirical convergence order on u' = u over [0, 1].

    Ratios are fitted only where truncation dominates roundoff (error above
    ~100 ulp of e); high-order schemes hit the floating-point floor within
    this grid range otherwise.
    """
    scheme = tableau_catalog(scheme_name)
    fld = CallableField(f=lambda u, t: u, jvp=lambda u, t, w: w,
                        vjp_u=lambda u, t, v: v)
    errs = []
    for n in n_list:
        uF, _ = integrate(scheme, fld, np.array([1.0]), 0.0, 1.0,
                          FixedController(n))
        errs.append(abs(uF[0] - np.e))
    floor = 100 * np.finfo(float).eps * np.e
    orders = [np.log2(errs[i] / errs[i + 1])
              for i in range(len(errs) - 1) if errs[i + 1] > floor]
    if not orders:
        orders = [np.log2(errs[0] / errs[1])]
    return errs, float(np.mean(orders))


def cmd_order_study(args):
    record = _new_record(args, "order-study")
    names = list(SCHEME_NAMES) if args.schemes == "all" else args.schemes.split(",")
    lines = ["scheme,nominal_order,fitted_order," +
             ",".join(f"err_n{n}" for n in (40, 80, 160))]
    rows = []
    ok = True
    for name in names:
        errs, fitted = measure_order(name)
        nominal = _NOMINAL_ORDER[name]
        good = abs(fitted - nominal) <= 0.2
        ok = ok and good
        rows.append({"scheme": name, "nominal": nominal, "fitted": fitted,
                     "pass": good})
        lines.append(f"{name},{nominal},{fitted:.4f}," + ",".join(f"{e:.6e}" for e in errs))
        print(f"{name:9s} nominal {nominal} fitted {fitted:.3f} "
              f"{'ok' if good else 'FAIL'}")
    csv_text = "\n".join(lines) + "\n"
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, "order_study.csv")
        with open(path, "w") as fh:
            fh.write(csv_text)
        record["outputs"].append(path)
    record["metrics"] = {"rows": rows}
    _emit_record(args, record)
    return EXIT_OK if ok else EXIT_ASSERT


def cmd_fit(args):
    record = _new_record(args, "fit")
    if args.problem != "robertson":
        print(f"error: unknown problem {args.problem!r}", file=sys.stderr)
        return EXIT_USAGE
    scheme = tableau_catalog(args.scheme)
    dataset = minmax_normalize(generate_robertson_dataset())
    model = _build_model(3, args.width, args.depth, "gelu", args.seed)
    cfg = TrainConfig(
        epochs=args.epochs,
        optimizer=AdamWConfig(lr=args.lr, weight_decay=args.weight_decay),
        policy=CheckpointPolicy.parse(args.policy),
        n_sub=args.n_sub,
        nfe_stop_factor=args.nfe_stop_factor,
    )
    trained, tr = train(model, scheme, dataset, cfg, log_every=args.log_every)
    outputs = {}
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        ds_path = os.path.join(args.out, "robertson_scaled.csv")
        write_dataset_csv(dataset, ds_path)
        model_path = os.path.join(args.out, "model.json")
        save_model(trained, model_path)
        rec_path = os.path.join(args.out, "training_record.json")
        doc = tr.as_dict()
        doc["model_json"] = model_path
        with open(rec_path, "w") as fh:
            json.dump(doc, fh, indent=2)
        outputs = {"dataset": ds_path, "model": model_path, "record": rec_path}
        record["outputs"] += list(outputs.values())
    finite = [g for g in tr.grad_norm if np.isfinite(g)]
    record["metrics"] = {
        "epochs_run": len(tr.loss),
        "initial_loss": tr.loss[0] if tr.loss else None,
        "final_loss": tr.loss[-1] if tr.loss else None,
        "aborted": tr.aborted,
        "abort_epoch": tr.abort_epoch,
        "nfe_blowup_epoch": tr.nfe_blowup_epoch,
        "max_grad_norm": max(finite) if finite else None,
        "total_nfe_forward": int(np.sum(tr.nfe_forward)),
    }
    _emit_record(args, record)
    status = tr.aborted or (
        f"nfe blow-up at epoch {tr.nfe_blowup_epoch}" if tr.nfe_blowup_epoch >= 0
        else "completed")
    print(f"fit robertson [{args.scheme}]: {len(tr.loss)} epochs, "
          f"loss {tr.loss[0]:.4e} -> {tr.loss[-1]:.4e}, {status}")
    if tr.aborted.startswith("solver_failure"):
        return EXIT_SOLVER
    return EXIT_OK


def _apply_config_file(args):
    """Values from --config fill in flags the user left at their defaults."""
    if not getattr(args, "config", None):
        return args
    with open(args.config) as fh:
        overrides = json.load(fh)
    defaults = getattr(args, "_sp_defaults", {})
    for key, value in overrides.items():
        dest = key.replace("-", "_")
        if hasattr(args, dest) and getattr(args, dest) == defaults.get(dest):
            setattr(args, dest, value)
    return args


def build_parser():
    p = argparse.ArgumentParser(prog="odegrad",
                                description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="cmd", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--config", type=str, default=None,
                        help="JSON config file; CLI flags override it")
        sp.add_argument("--out", type=str, default=None)
        sp.add_argument("--json", action="store_true",
                        help="print the run record to stdout")

    sp = sub.add_parser("verify-grad", help="adjoint gradient vs finite differences")
    sp.add_argument("--scheme", choices=SCHEME_NAMES, default="rk4")
    sp.add_argument("--steps", type=int, default=10)
    sp.add_argument("--dim", type=int, default=3)
    sp.add_argument("--width", type=int, default=8)
    sp.add_argument("--depth", type=int, default=3)
    sp.add_argument("--fd-eps", type=float, default=1e-5)
    sp.add_argument("--policy", type=str, default="store_all",
                    help="store_all | store_solutions | revolve:<nc>")
    sp.add_argument("--dump-components", action="store_true")
    common(sp)
    sp.set_defaults(func=cmd_verify_grad)

    sp = sub.add_parser("compare-adjoint",
                        help="continuous vs discrete adjoint local discrepancy")
    sp.add_argument("--scheme", choices=["euler"], default="euler")
    sp.add_argument("--problem", choices=["linear", "quadratic"], default="quadratic")
    sp.add_argument("--h", type=str, default="1e-2,1e-3")
    common(sp)
    sp.set_defaults(func=cmd_compare_adjoint)

    sp = sub.add_parser("checkpoint-bench",
                        help="closed-form vs DP recomputation counts + schedule audit")
    sp.add_argument("--nt-max", type=int, default=60)
    sp.add_argument("--nc-max", type=int, default=20)
    common(sp)
    sp.set_defaults(func=cmd_checkpoint_bench)

    sp = sub.add_parser("order-study", help="empirical integrator convergence orders")
    sp.add_argument("--problem", choices=["exp"], default="exp")
    sp.add_argument("--schemes", type=str, default="all")
    common(sp)
    sp.set_defaults(func=cmd_order_study)

    sp = sub.add_parser("fit", help="train the neural ODE on a stiff benchmark")
    sp.add_argument("problem", choices=["robertson"])
    sp.add_argument("--scheme", choices=SCHEME_NAMES, default="cn")
    sp.add_argument("--epochs", type=int, default=2000)
    sp.add_argument("--lr", type=float, default=0.005)
    sp.add_argument("--weight-decay", type=float, default=0.0)
    sp.add_argument("--width", type=int, default=64)
    sp.add_argument("--depth", type=int, default=5)
    sp.add_argument("--n-sub", type=int, default=4)
    sp.add_argument("--policy", type=str, default="store_all")
    sp.add_argument("--nfe-stop-factor", type=float, default=None)
    sp.add_argument("--log-every", type=int, default=0)
    common(sp)
    sp.set_defaults(func=cmd_fit)

    for action in sub._choices_actions:
        spx = sub.choices[action.dest]
        spx.set_defaults(_sp_defaults={a.dest: a.default for a in spx._actions})
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    args = _apply_config_file(args)
    try:
        return args.func(args)
    except (IntegrationError, ConvergenceError) as err:
        print(f"solver failure: {err}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
