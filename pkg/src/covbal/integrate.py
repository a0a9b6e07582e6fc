"""Adaptive implicit trapezoidal integration with fault/clearing events.

The output grid is fixed (``dt_pre`` before the remote clearing, ``dt_post``
afterwards); each grid interval is covered by error-controlled sub-steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .network import FaultSpec

__all__ = ["StepControl", "EventSchedule", "IntegrationError", "TrapezoidIntegrator",
           "Trajectory", "integrate", "time_grid"]


class IntegrationError(RuntimeError):
    def __init__(self, message, t=np.nan, state_norm=np.nan):
        super().__init__(f"{message} at t={t:.6g} (|x|={state_norm:.3e})")
        self.t = t
        self.state_norm = state_norm


@dataclass(frozen=True)
class StepControl:
    dt_pre: float = 0.01
    dt_post: float = 0.03
    tol: float = 1e-6
    max_newton: int = 8
    min_step: float = 1e-9
    max_norm: float = 1e12

    def __post_init__(self):
        if min(self.dt_pre, self.dt_post, self.tol, self.max_norm) <= 0:
            raise ValueError("step sizes and tolerance must be positive")


@dataclass(frozen=True)
class EventSchedule:
    """Three-phase fault at ``faulted_end`` on ``faulted_branch``; the near
    end opens at ``clear_near`` and the remote end at ``clear_remote``."""

    fault_on: float
    clear_near: float
    clear_remote: float
    faulted_branch: str
    faulted_end: int

    def __post_init__(self):
        if not self.fault_on < self.clear_near < self.clear_remote:
            raise ValueError("need fault_on < clear_near < clear_remote")

    @property
    def times(self):
        return (self.fault_on, self.clear_near, self.clear_remote)

    def stage_at(self, t: float) -> int:
        """Network stage of an interval starting at ``t`` (0 = pre-fault)."""
        if t < self.fault_on:
            return 0
        if t < self.clear_near:
            return 1
        if t < self.clear_remote:
            return 2
        return 3

    def fault_for_stage(self, stage: int) -> FaultSpec | None:
        if stage == 0:
            return None
        return FaultSpec(bus=self.faulted_end, branch=self.faulted_branch, stage=stage)


def time_grid(t_span, control: StepControl = StepControl(), events: EventSchedule | None = None):
    """Output grid with a point at every event time inside ``t_span``."""
    t0, t1 = map(float, t_span)
    if not t1 > t0:
        raise ValueError("empty time span")
    switch = events.clear_remote if events is not None else math.inf
    breaks = [t0] + [t for t in (events.times if events else ()) if t0 < t < t1] + [t1]
    pts = [t0]
    for a, b in zip(breaks[:-1], breaks[1:]):
        dt = control.dt_pre if a < switch else control.dt_post
        n = max(1, math.ceil((b - a) / dt - 1e-9))
        pts.extend(a + (b - a) * np.arange(1, n + 1) / n)
        pts[-1] = b
    return np.array(pts)


def _fd_jacobian(fun, t, x, f0):
    n = len(x)
    J = np.empty((n, n))
    for j in range(n):
        h = 1.5e-8 * max(1.0, abs(x[j]))
        xp = x.copy()
        xp[j] += h
        J[:, j] = (fun(t, xp) - f0) / h
    return J


class TrapezoidIntegrator:
    """Trapezoidal rule with modified Newton and a filtered error-per-unit-step estimate.

    The finite-difference Jacobian and the LU factorization of ``I - h/2 J``
    are kept between steps and refreshed only when Newton stalls.
    """

    def __init__(self, tol=1e-6, max_newton=8, min_step=1e-9, h_init=None, max_norm=1e12):
        self.tol = tol
        self.max_norm = max_norm
        self.max_newton = max_newton
        self.min_step = min_step
        self.h = h_init
        self.J = None
        self._lu = None
        self._lu_h = None
        self.nfev = 0
        self.njev = 0
        self.nsteps = 0
        self.nreject = 0

    def reset(self):
        self.J = None
        self._lu = None

    def _factor(self, h):
        n = self.J.shape[0]
        self._lu = sla.lu_factor(np.eye(n) - 0.5 * h * self.J, check_finite=False)
        self._lu_h = h

    def _refresh(self, fun, t, x, f0):
        self.J = _fd_jacobian(fun, t, x, f0)
        self.nfev += len(x)
        self.njev += 1
        self._lu = None

    def advance(self, fun, t0, x0, t1):
        """Integrate ``x' = fun(t, x)`` from ``t0`` to exactly ``t1``."""
        x = np.array(x0, dtype=float)
        if len(x) == 0:
            return x
        t = float(t0)
        f = fun(t, x)
        self.nfev += 1
        span = t1 - t0
        h = span if self.h is None else min(self.h, span)
        if self.J is None:
            self._refresh(fun, t, x, f)
        fresh = True
        while t1 - t > 1e-14 * max(1.0, abs(t1)):
            last = h >= (t1 - t) * (1 - 1e-12)
            if last:
                h = t1 - t
            ok, x_new, f_new = self._newton(fun, t, x, f, h)
            if not ok:
                if not fresh:
                    self._refresh(fun, t, x, f)
                    fresh = True
                else:
                    h *= 0.25
                if h < self.min_step:
                    raise IntegrationError("Newton failure in implicit step", t, float(np.linalg.norm(x)))
                continue
            err = self._error(h, f, f_new, x, x_new)
            if err <= 1.0:
                t = t1 if last else t + h
                x, f = x_new, f_new
                self.nsteps += 1
                if np.max(np.abs(x)) > self.max_norm:
                    raise IntegrationError("state diverged", t, float(np.linalg.norm(x)))
                fresh = False
                fac = 2.0 if err == 0 else min(2.0, max(0.2, 0.9 * err ** -0.5))
                if not last or fac < 1:
                    self.h = h * fac
                elif self.h is None or self.h < h:
                    self.h = h
                h = self.h
            else:
                self.nreject += 1
                h *= max(0.2, 0.9 * err ** -0.5)
                if h < self.min_step:
                    raise IntegrationError("step size underflow", t, float(np.linalg.norm(x)))
        return x

    def _newton(self, fun, t, x, f, h):
        if self._lu is None or self._lu_h != h:
            self._factor(h)
        xn = x + h * f
        scale = self.tol * (1.0 + np.abs(x))
        prev = np.inf
        with np.errstate(over="ignore", invalid="ignore"):
            for _ in range(self.max_newton):
                fn = fun(t + h, xn)
                self.nfev += 1
                if not np.all(np.isfinite(fn)):
                    break
                g = xn - x - 0.5 * h * (f + fn)
                dx = sla.lu_solve(self._lu, g, check_finite=False)
                xn = xn - dx
                nrm = np.max(np.abs(dx) / scale)
                if nrm < 1e-3:
                    fn = fun(t + h, xn)
                    self.nfev += 1
                    return True, xn, fn
                if nrm > 0.9 * prev:
                    break
                prev = nrm
        return False, None, None

    def _error(self, h, f0, f1, x0, x1):
        est = (h * h / 12.0) * (self.J @ (f1 - f0))
        est = sla.lu_solve(self._lu, est, check_finite=False)
        # error per unit step keeps the global error near tol over unit time;
        # tol is relative above |x| = 1 and absolute below
        scale = h * self.tol * np.maximum(1.0, np.maximum(np.abs(x0), np.abs(x1)))
        return float(np.max(np.abs(est) / scale))


@dataclass
class Trajectory:
    t: np.ndarray
    x: np.ndarray  # shape (len(t), n)
    stats: dict = field(default_factory=dict)

    @property
    def final(self):
        return self.x[-1]


def integrate(rhs, x0, t_span, control: StepControl = StepControl(),
              events: EventSchedule | None = None) -> Trajectory:
    """Integrate ``rhs`` on the output grid.

    ``rhs(t, x)`` without events, ``rhs(t, x, stage)`` with an
    :class:`EventSchedule`; the stage is constant on every grid interval and
    the Jacobian is rebuilt whenever it changes.
    """
    x0 = np.asarray(x0, dtype=float)
    if not np.all(np.isfinite(x0)):
        raise ValueError("non-finite initial state")
    grid = time_grid(t_span, control, events)
    X = np.empty((len(grid), len(x0)))
    X[0] = x0
    stepper = TrapezoidIntegrator(control.tol, control.max_newton, control.min_step,
                                 max_norm=control.max_norm)
    stage = None
    x = x0
    for k in range(len(grid) - 1):
        if events is None:
            fun = rhs
        else:
            s = events.stage_at(grid[k])
            if s != stage:
                stepper.reset()
                stage = s
            fun = (lambda t, y, _s=s: rhs(t, y, _s))
        x = stepper.advance(fun, grid[k], x, grid[k + 1])
        X[k + 1] = x
    stats = dict(nfev=stepper.nfev, njev=stepper.njev, nsteps=stepper.nsteps, nreject=stepper.nreject)
    return Trajectory(grid, X, stats)
