import math

import pytest
import sympy as sp

from flowkt.errors import ConfigurationError, DomainError
from flowkt.schedules import (DerivativeMode, FDScheme, NoiseSchedule, ScheduleKind, boundary_report, evaluate,
                              make_schedule)

GRID = [i / 1000 for i in range(1001)]


def _vp_symbolic():
    t = sp.Symbol("t")
    a, b = sp.Rational(199, 10), sp.Rational(1, 10)
    alpha = sp.exp(-a * (1 - t) ** 2 / 4 - b * (1 - t) / 2)
    return t, alpha, sp.diff(alpha, t)


def test_rectified_flow_midpoint():
    v = evaluate(make_schedule("rectified_flow"), 0.5)
    assert (v.alpha, v.sigma, v.d_alpha, v.d_sigma) == (0.5, 0.5, 1.0, -1.0)


def test_rectified_flow_grid_exact():
    s = make_schedule("rectified_flow")
    for t in GRID:
        v = evaluate(s, t)
        assert v.alpha + v.sigma == 1.0
        assert (v.d_alpha, v.d_sigma) == (1.0, -1.0)


def test_vp_endpoint_and_ve_start():
    v = evaluate(make_schedule("vp_ode"), 1.0)
    assert v.alpha == 1.0 and v.sigma == 0.0
    assert evaluate(make_schedule("ve_ode"), 0.0).alpha == pytest.approx(0.02, rel=0, abs=1e-15)


def test_vp_central_difference_matches_symbolic():
    t, alpha, d_alpha = _vp_symbolic()
    exact = float(d_alpha.subs(t, sp.Rational(1, 2)).evalf(30))
    s = NoiseSchedule(ScheduleKind.VP_ODE, fd_delta=1e-3, fd_scheme=FDScheme.CENTRAL)
    assert abs(evaluate(s, 0.5).d_alpha - exact) / abs(exact) < 1e-4


def test_vp_backward_difference_is_first_order():
    t, alpha, d_alpha = _vp_symbolic()
    exact = float(d_alpha.subs(t, sp.Rational(1, 2)).evalf(30))
    second = float(sp.diff(alpha, t, 2).subs(t, sp.Rational(1, 2)).evalf(30))
    errs = []
    for delta in (4e-3, 2e-3, 1e-3, 5e-4):
        d = evaluate(NoiseSchedule(ScheduleKind.VP_ODE, fd_delta=delta), 0.5).d_alpha
        errs.append(abs(d - exact))
        # leading error term of a backward quotient is |alpha''| delta / 2
        assert abs(d - exact) <= 0.6 * abs(second) * delta
    for coarse, fine in zip(errs, errs[1:]):
        assert coarse / fine >= 1.9


def test_vp_alpha_zero_close():
    rep = boundary_report(make_schedule("vp_ode"))
    assert rep.alpha_0 == pytest.approx(math.exp(-0.25 * 19.9 - 0.05), rel=1e-12)
    assert rep.alpha_0 < 1e-2
    assert rep.alpha_1 == 1.0 and rep.sigma_1 == 0.0
    assert {c.name: c.status for c in rep.checks}["alpha_0"] == "approximate"


def test_rectified_flow_boundaries_exact():
    rep = boundary_report(make_schedule("rectified_flow"))
    assert (rep.alpha_0, rep.sigma_0, rep.alpha_1, rep.sigma_1) == (0.0, 1.0, 1.0, 0.0)
    assert rep.passed and all(c.status == "exact" for c in rep.checks)


def test_ve_sigma_deviation_flagged():
    rep = boundary_report(make_schedule("ve_ode"))
    assert rep.sigma_1 == pytest.approx(0.9)
    assert [c.name for c in rep.deviations()] == ["sigma_1"]
    assert rep.passed


def test_ve_sigma_derivative_never_zero():
    s = make_schedule("ve_ode")
    for t in GRID[::50]:
        assert evaluate(s, t, delta=0.125).d_sigma == -0.1


@pytest.mark.parametrize("kind", list(ScheduleKind))
def test_values_finite_nonnegative(kind):
    s = make_schedule(kind)
    for t in GRID:
        v = evaluate(s, t, delta=1 / 8)
        assert all(math.isfinite(x) for x in v)
        assert v.alpha >= 0 and v.sigma >= 0


def test_forward_difference_at_zero():
    s = make_schedule("vp_ode")
    v = evaluate(s, 0.0, delta=0.125)
    a0 = evaluate(s, 0.0).alpha
    a1 = evaluate(s, 0.125).alpha
    assert v.d_alpha == pytest.approx((a1 - a0) / 0.125)


def test_backward_difference_uses_step():
    s = make_schedule("vp_ode")
    v = evaluate(s, 0.5, delta=0.125)
    assert v.d_alpha == (evaluate(s, 0.5).alpha - evaluate(s, 0.375).alpha) / 0.125


def test_fd_delta_overrides_caller_step():
    s = NoiseSchedule(ScheduleKind.VP_ODE, fd_delta=1e-3)
    assert evaluate(s, 0.5, delta=0.25) == evaluate(s, 0.5, delta=1e-3)


@pytest.mark.parametrize("t", [-1e-9, 1.0 + 1e-9, float("nan")])
def test_domain_error(t):
    with pytest.raises(DomainError):
        evaluate(make_schedule("rectified_flow"), t)


@pytest.mark.parametrize("kind", [ScheduleKind.VP_ODE, ScheduleKind.VE_ODE])
def test_analytic_rejected_for_vp_ve(kind):
    with pytest.raises(ConfigurationError):
        NoiseSchedule(kind, derivative_mode=DerivativeMode.ANALYTIC)


def test_default_constants_and_ve_override():
    assert (make_schedule("vp_ode").a, make_schedule("vp_ode").b) == (19.9, 0.1)
    assert (make_schedule("ve_ode").a, make_schedule("ve_ode").b) == (0.02, 100.0)
    assert make_schedule("ve_ode", b=10.0).b == 10.0


def test_deterministic():
    s = make_schedule("vp_ode")
    assert evaluate(s, 0.37, delta=0.01) == evaluate(s, 0.37, delta=0.01)


@pytest.mark.parametrize("bad", [dict(a=-1.0), dict(fd_delta=0.0), dict(ve_sigma_slope=1.5)])
def test_invalid_constants(bad):
    with pytest.raises(ConfigurationError):
        NoiseSchedule(ScheduleKind.VE_ODE, **bad)
