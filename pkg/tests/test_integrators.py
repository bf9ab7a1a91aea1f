import numpy as np
import pytest

from odegrad.integrators import (
    AdaptiveController,
    CallableField,
    FixedController,
    FixedGridController,
    IntegrationError,
    NfeCounters,
    StiffnessError,
    explicit_rk_step,
    integrate,
    theta_step,
)
from odegrad.linalg import SolverConfig
from odegrad.tableaux import tableau_catalog

EXP = CallableField(f=lambda u, t: u, jvp=lambda u, t, w: w,
                    vjp_u=lambda u, t, v: v)
ONE = CallableField(f=lambda u, t: np.ones_like(u))


def test_euler_step_exponential():
    tab = tableau_catalog("euler").tableau
    rec, _, _ = explicit_rk_step(tab, EXP, np.array([1.0]), 0.0, 0.1, NfeCounters())
    assert abs(rec.u_next[0] - 1.1) <= 1e-15


def test_rk4_step_matches_taylor_sum():
    tab = tableau_catalog("rk4").tableau
    rec, _, _ = explicit_rk_step(tab, EXP, np.array([1.0]), 0.0, 0.1, NfeCounters())
    h = 0.1
    taylor = 1 + h + h ** 2 / 2 + h ** 3 / 6 + h ** 4 / 24
    assert abs(rec.u_next[0] - taylor) <= 1e-15
    assert abs(rec.u_next[0] - 1.1051708333) <= 1e-10


def test_midpoint_exact_for_constant_field():
    tab = tableau_catalog("midpoint").tableau
    rec, _, _ = explicit_rk_step(tab, ONE, np.array([0.0]), 0.0, 0.5, NfeCounters())
    assert rec.u_next[0] == 0.5


def test_theta_step_backward_euler_linear():
    cfg = SolverConfig()
    rec = theta_step(1.0, EXP, np.array([1.0]), 0.0, 0.5, cfg, NfeCounters())
    assert abs(rec.u_next[0] - 2.0) <= 1e-9


def test_theta_step_zero_field():
    zero = CallableField(f=lambda u, t: np.zeros_like(u),
                         jvp=lambda u, t, w: np.zeros_like(w))
    cfg = SolverConfig()
    rec = theta_step(0.5, zero, np.array([1.3, -0.2]), 0.0, 0.7, cfg, NfeCounters())
    assert np.allclose(rec.u_next, [1.3, -0.2], atol=1e-14)


def test_theta_step_stiff_a_stability_value():
    stiff = CallableField(f=lambda u, t: -1000.0 * u,
                          jvp=lambda u, t, w: -1000.0 * w)
    cfg = SolverConfig()
    rec = theta_step(0.5, stiff, np.array([1.0]), 0.0, 0.1, cfg, NfeCounters())
    assert abs(rec.u_next[0] - (-49.0 / 51.0)) <= 1e-9


@pytest.mark.parametrize("theta", [0.5, 1.0])
def test_theta_a_stability_probe(theta):
    cfg = SolverConfig()
    for lam_h in [-1e6, -1e4, -1e2, -1.0, -1e-3, 0.0]:
        fld = CallableField(f=lambda u, t, s=lam_h: s * u,
                            jvp=lambda u, t, w, s=lam_h: s * w)
        rec = theta_step(theta, fld, np.array([1.0]), 0.0, 1.0, cfg, NfeCounters())
        assert abs(rec.u_next[0]) <= 1.0 + 1e-9


def test_fixed_euler_unit_field_counts():
    counters = NfeCounters()
    uF, _ = integrate(tableau_catalog("euler"), ONE, np.array([0.0]), 0.0, 1.0,
                      FixedController(50), counters=counters)
    assert uF[0] == 1.0
    assert counters.nfe_forward == 50
    assert counters.steps_accepted == 50


def test_fixed_rk4_exponential_accuracy():
    uF, _ = integrate(tableau_catalog("rk4"), EXP, np.array([1.0]), 0.0, 1.0,
                      FixedController(20))
    # global error of classical RK4 at h=0.05 on u'=u, frozen from the exact
    # solution oracle: ~(e-1) h^4/120 plus higher-order terms
    err = abs(uF[0] - np.e)
    assert err <= 1.5e-7
    assert abs(err - 1.358e-7) <= 0.01e-7


def test_fsal_and_stage_counting():
    counters = NfeCounters()
    integrate(tableau_catalog("dopri5"), EXP, np.array([1.0]), 0.0, 1.0,
              FixedController(10), counters=counters)
    assert counters.nfe_forward == 6 * 10 + 1
    counters = NfeCounters()
    integrate(tableau_catalog("rk4"), EXP, np.array([1.0]), 0.0, 1.0,
              FixedController(10), counters=counters)
    assert counters.nfe_forward == 4 * 10
    counters = NfeCounters()
    integrate(tableau_catalog("bosh3"), EXP, np.array([1.0]), 0.0, 1.0,
              FixedController(10), counters=counters)
    assert counters.nfe_forward == 3 * 10 + 1


def test_fixed_grid_controller():
    grid = (0.0, 0.25, 0.5, 1.0)
    recs = []
    uF, _ = integrate(tableau_catalog("euler"), EXP, np.array([1.0]), 0.0, 1.0,
                      FixedGridController(grid), sink=recs.append)
    assert [r.t for r in recs] == [0.0, 0.25, 0.5]
    assert [r.h for r in recs] == [0.25, 0.25, 0.5]


def test_adaptive_dopri5_meets_tolerance():
    counters = NfeCounters()
    ctrl = AdaptiveController(abstol=1e-8, reltol=1e-8, h_init=0.1)
    uF, _ = integrate(tableau_catalog("dopri5"), EXP, np.array([1.0]), 0.0, 1.0,
                      ctrl, counters=counters)
    assert abs(uF[0] - np.e) <= 1e-6
    assert counters.steps_accepted >= 2


def test_adaptive_rejections_are_counted_not_delivered():
    # start with an oversized step so at least one rejection occurs
    fld = CallableField(f=lambda u, t: -50.0 * u)
    recs = []
    counters = NfeCounters()
    ctrl = AdaptiveController(abstol=1e-10, reltol=1e-10, h_init=1.0)
    integrate(tableau_catalog("dopri5"), fld, np.array([1.0]), 0.0, 1.0, ctrl,
              sink=recs.append, counters=counters)
    assert counters.steps_rejected >= 1
    assert len(recs) == counters.steps_accepted
    assert all(r.accepted for r in recs)


def test_adaptive_underflow_raises_stiffness_error():
    # field that overflows for any step: forces repeated rejections down to h_min
    bomb = CallableField(f=lambda u, t: u * 1e200)
    ctrl = AdaptiveController(h_init=1e-2, h_min=1e-6)
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(StiffnessError):
            integrate(tableau_catalog("dopri5"), bomb, np.array([1.0]), 0.0, 1.0,
                      ctrl)


def test_overflow_raises_integration_error():
    bomb = CallableField(f=lambda u, t: u * u)
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(IntegrationError):
            # repeated squaring blows past float range within ten unit steps
            integrate(tableau_catalog("euler"), bomb, np.array([1e3]), 0.0, 10.0,
                      FixedController(10))


def test_step_records_are_replay_exact():
    tab = tableau_catalog("rk4").tableau
    fld = CallableField(f=lambda u, t: np.sin(u) + t)
    recs = []
    integrate(tableau_catalog("rk4"), fld, np.array([0.3]), 0.0, 1.0,
              FixedController(7), sink=recs.append)
    for rec in recs:
        redo, _, _ = explicit_rk_step(tab, fld, rec.u, rec.t, rec.h, NfeCounters())
        assert np.array_equal(redo.u_next, rec.u_next)
        for a, b in zip(redo.stages, rec.stages):
            assert np.array_equal(a, b)


def test_theta_replay_exact():
    cfg = SolverConfig()
    recs = []
    integrate(tableau_catalog("cn"), EXP, np.array([1.0]), 0.0, 1.0,
              FixedController(5), sink=recs.append, solver_cfg=cfg)
    for rec in recs:
        redo = theta_step(0.5, EXP, rec.u, rec.t, rec.h, cfg, NfeCounters())
        assert np.array_equal(redo.u_next, rec.u_next)


def test_invalid_time_span():
    with pytest.raises(ValueError):
        integrate(tableau_catalog("euler"), EXP, np.array([1.0]), 1.0, 0.0,
                  FixedController(5))


@pytest.mark.parametrize("name,order", [
    ("euler", 1), ("midpoint", 2), ("bosh3", 3), ("rk4", 4), ("dopri5", 5),
    ("beuler", 1), ("cn", 2),
])
def test_empirical_convergence_orders(name, order):
    from odegrad.cli import measure_order

    _, fitted = measure_order(name)
    assert abs(fitted - order) <= 0.2
