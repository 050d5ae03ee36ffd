"""Noise schedules for the student-to-teacher interpolant.

A schedule is a pair of scalar functions ``(alpha_t, sigma_t)`` on ``[0, 1]``
so that ``Z_t = alpha_t * x_s + sigma_t * x_t``. Time runs from the student
end (``t = 1``) to the teacher end (``t = 0``).

Three kinds are provided:

* ``rectified_flow``: ``alpha = t``, ``sigma = 1 - t``; analytic derivatives.
* ``vp_ode``: ``alpha = exp(-a (1-t)^2 / 4 - b (1-t) / 2)``,
  ``sigma = sqrt(1 - alpha^2)`` with ``a = 19.9``, ``b = 0.1``.
* ``ve_ode``: ``alpha = a (b / a)^t`` with ``a = 0.02``, ``b = 100`` and the
  tilted ``sigma = 1 - 0.1 t`` (a constant sigma has zero derivative, which
  the target predictor divides by).

The VP derivative is unbounded as ``t -> 1``, so VP and VE are only offered
with finite-difference derivatives.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

from .errors import ConfigurationError, DomainError

DEFAULT_FD_DELTA = 1e-3
# tolerance for boundary checks that are only met approximately (VP, VE)
APPROX_TOL = 5e-2


class ScheduleKind(str, enum.Enum):
    RECTIFIED_FLOW = "rectified_flow"
    VP_ODE = "vp_ode"
    VE_ODE = "ve_ode"


class DerivativeMode(str, enum.Enum):
    ANALYTIC = "analytic"
    FINITE_DIFFERENCE = "finite_difference"


class FDScheme(str, enum.Enum):
    BACKWARD = "backward"
    CENTRAL = "central"


_DEFAULT_CONSTANTS = {
    ScheduleKind.RECTIFIED_FLOW: (1.0, 1.0),
    ScheduleKind.VP_ODE: (19.9, 0.1),
    ScheduleKind.VE_ODE: (0.02, 100.0),
}


@dataclass(frozen=True)
class NoiseSchedule:
    """Immutable schedule description.

    ``a``/``b`` default to the kind's published constants when left as
    ``None``. ``fd_delta=None`` lets the caller supply the differencing step
    (the flow core passes the Euler step size ``1/N``).
    """

    kind: ScheduleKind = ScheduleKind.RECTIFIED_FLOW
    a: float | None = None
    b: float | None = None
    derivative_mode: DerivativeMode | None = None
    fd_delta: float | None = None
    ve_sigma_slope: float = 0.1
    fd_scheme: FDScheme = FDScheme.BACKWARD

    def __post_init__(self) -> None:
        kind = ScheduleKind(self.kind)
        object.__setattr__(self, "kind", kind)
        default_a, default_b = _DEFAULT_CONSTANTS[kind]
        if self.a is None:
            object.__setattr__(self, "a", default_a)
        if self.b is None:
            object.__setattr__(self, "b", default_b)
        mode = self.derivative_mode
        if mode is None:
            mode = (
                DerivativeMode.ANALYTIC
                if kind is ScheduleKind.RECTIFIED_FLOW
                else DerivativeMode.FINITE_DIFFERENCE
            )
        mode = DerivativeMode(mode)
        object.__setattr__(self, "derivative_mode", mode)
        object.__setattr__(self, "fd_scheme", FDScheme(self.fd_scheme))
        if kind is not ScheduleKind.RECTIFIED_FLOW and mode is DerivativeMode.ANALYTIC:
            raise ConfigurationError(
                f"{kind.value} supports finite_difference derivatives only"
            )
        if not (self.a > 0 and self.b > 0):
            raise ConfigurationError("schedule constants a, b must be positive")
        if self.fd_delta is not None and not (0 < self.fd_delta <= 1):
            raise ConfigurationError("fd_delta must lie in (0, 1]")
        if not math.isfinite(self.ve_sigma_slope) or not (0 <= self.ve_sigma_slope < 1):
            raise ConfigurationError("ve_sigma_slope must lie in [0, 1)")

    def with_overrides(self, **changes) -> "NoiseSchedule":
        return replace(self, **changes)


class ScheduleValues(NamedTuple):
    alpha: float
    sigma: float
    d_alpha: float
    d_sigma: float


def _alpha_sigma(s: NoiseSchedule, t: float) -> tuple[float, float]:
    if s.kind is ScheduleKind.RECTIFIED_FLOW:
        return t, 1.0 - t
    if s.kind is ScheduleKind.VP_ODE:
        u = 1.0 - t
        alpha = math.exp(-0.25 * s.a * u * u - 0.5 * s.b * u)
        return alpha, math.sqrt(max(0.0, 1.0 - alpha * alpha))
    alpha = s.a * (s.b / s.a) ** t
    return alpha, 1.0 - s.ve_sigma_slope * t


def _difference(s: NoiseSchedule, t: float, delta: float) -> tuple[float, float]:
    central = s.fd_scheme is FDScheme.CENTRAL and t - delta >= 0.0 and t + delta <= 1.0
    if central:
        lo, hi = t - delta, t + delta
    elif t - delta >= 0.0:
        lo, hi = t - delta, t
    else:
        # one-sided forward difference near t = 0
        lo, hi = t, t + delta
    a_lo, s_lo = _alpha_sigma(s, lo)
    a_hi, s_hi = _alpha_sigma(s, hi)
    width = hi - lo
    return (a_hi - a_lo) / width, (s_hi - s_lo) / width


def evaluate(schedule: NoiseSchedule, t: float, delta: float | None = None) -> ScheduleValues:
    """Return ``(alpha, sigma, d_alpha, d_sigma)`` at time ``t``.

    ``delta`` is the differencing step used when the schedule has no fixed
    ``fd_delta``; it is ignored for analytic derivatives.
    """
    t = float(t)
    if not (0.0 <= t <= 1.0) or math.isnan(t):
        raise DomainError(f"t={t!r} outside [0, 1]")
    alpha, sigma = _alpha_sigma(schedule, t)
    if schedule.derivative_mode is DerivativeMode.ANALYTIC:
        return ScheduleValues(alpha, sigma, 1.0, -1.0)
    step = schedule.fd_delta or delta or DEFAULT_FD_DELTA
    d_alpha, d_sigma = _difference(schedule, t, step)
    if schedule.kind is ScheduleKind.VE_ODE:
        # sigma is linear; its difference quotient is exact up to rounding
        d_sigma = -schedule.ve_sigma_slope
    return ScheduleValues(alpha, sigma, d_alpha, d_sigma)


@dataclass(frozen=True)
class BoundaryCheck:
    name: str
    value: float
    target: float
    status: str  # "exact", "approximate", "deviation", "fail"
    note: str = ""

    @property
    def passed(self) -> bool:
        return self.status in ("exact", "approximate", "deviation")


@dataclass(frozen=True)
class BoundaryReport:
    kind: ScheduleKind
    alpha_0: float
    sigma_0: float
    alpha_1: float
    sigma_1: float
    checks: list[BoundaryCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def deviations(self) -> list[BoundaryCheck]:
        return [c for c in self.checks if c.status == "deviation"]


def _grade(name: str, value: float, target: float, tol: float) -> BoundaryCheck:
    if value == target:
        return BoundaryCheck(name, value, target, "exact")
    if abs(value - target) <= tol:
        return BoundaryCheck(name, value, target, "approximate")
    return BoundaryCheck(name, value, target, "fail")


def boundary_report(schedule: NoiseSchedule, approx_tol: float = APPROX_TOL) -> BoundaryReport:
    """Evaluate the endpoint constraints alpha_0 = 0, sigma_0 = 1, sigma_1 = 0.

    ``alpha_1`` is reported but not constrained (VE has alpha_1 = b).
    """
    alpha_0, sigma_0 = _alpha_sigma(schedule, 0.0)
    alpha_1, sigma_1 = _alpha_sigma(schedule, 1.0)
    checks = [
        _grade("alpha_0", alpha_0, 0.0, approx_tol),
        _grade("sigma_0", sigma_0, 1.0, approx_tol),
    ]
    s1 = _grade("sigma_1", sigma_1, 0.0, approx_tol)
    if schedule.kind is ScheduleKind.VE_ODE and schedule.ve_sigma_slope > 0 and s1.status == "fail":
        s1 = replace(
            s1,
            status="deviation",
            note=f"sigma(t) = 1 - {schedule.ve_sigma_slope:g} t keeps d_sigma nonzero",
        )
    checks.append(s1)
    return BoundaryReport(schedule.kind, alpha_0, sigma_0, alpha_1, sigma_1, checks)


def make_schedule(kind: str | ScheduleKind = "rectified_flow", **kwargs) -> NoiseSchedule:
    return NoiseSchedule(kind=ScheduleKind(kind), **kwargs)
