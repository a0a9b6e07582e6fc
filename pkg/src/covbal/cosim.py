"""Partitioned co-simulation of study and external areas, the monolithic
reference, accuracy indices and the method comparison report.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .balance import (BalancedReduction, NonMinimalError, ReducedModel, balance, balance_laub,
                      truncate)
from .case import PowerCase, partition, whole_view
from .gramians import (PerturbationScheme, empirical_covariances, linear_gramians, linearize,
                       scale_system)
from .integrate import EventSchedule, StepControl, TrapezoidIntegrator, time_grid
from .machines import AreaModel, operating_point
from .network import BoundaryState, ConvergenceError, boundary_residual, build_matrices, update_boundary

__all__ = [
    "METHODS", "CosimRun", "CosimError", "AccuracyIndex", "MonolithicSystem", "PartitionedSystem",
    "run_cosim", "accuracy", "compare_methods", "external_system", "reduce_nonlinear",
    "reduce_linearized", "timing_table",
]

log = logging.getLogger(__name__)

METHODS = ("UnPartitioned", "Partitioned-Unreduced", "Partitioned-Reduced-NM", "Partitioned-Reduced-LM")
STATE_KINDS = ("delta", "omega", "eqp", "edp", "VR", "Efd", "Rf")


class CosimError(RuntimeError):
    pass


def _stages(area, events):
    if events is None:
        return {0: build_matrices(area)}
    return {s: build_matrices(area, events.fault_for_stage(s)) for s in range(4)}


def _stage(events, t):
    return 0 if events is None else events.stage_at(t)


@dataclass
class CosimRun:
    method: str
    t: np.ndarray
    x_s: np.ndarray
    x_e: np.ndarray
    V_s: np.ndarray
    theta_s: np.ndarray
    V_e: np.ndarray
    theta_e: np.ndarray
    labels_s: list
    labels_e: list
    timings: dict = field(default_factory=dict)
    residuals: np.ndarray | None = None
    n_red: int | None = None

    def __post_init__(self):
        n = len(self.t)
        for name in ("x_s", "x_e", "V_s", "theta_s", "V_e", "theta_e"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} length differs from the grid")

    @property
    def external_inputs(self):
        return np.hstack([self.V_s, self.theta_s])

    @property
    def external_states(self):
        return self.x_e

    def boundary(self, k) -> BoundaryState:
        return BoundaryState(self.V_s[k], self.theta_s[k], self.V_e[k], self.theta_e[k])

    def kind(self, kind, area="study"):
        """(trajectory array, machine ids) of one state kind."""
        X, labels = (self.x_s, self.labels_s) if area == "study" else (self.x_e, self.labels_e)
        cols = [j for j, (k, _) in enumerate(labels) if k == kind]
        return X[:, cols], [labels[j][1] for j in cols]


def _timings(t_s, t_e, t_b, wall):
    return dict(t_s=t_s, t_e=t_e, t_b=t_b, t_total=t_s + t_e + t_b,
                t_total_parallel=max(t_s, t_e) + t_b, wall=wall)


# --------------------------------------------------------------------------
# monolithic reference

class MonolithicSystem:
    """Whole system simulated as one area (no pseudo-generators)."""

    def __init__(self, case: PowerCase):
        self.case = case
        self.init = operating_point(case)
        self.view = whole_view(case)
        self.study, self.external = partition(case)
        self._models = {}
        base = self.model(None)
        s_ids = {m.id for m in self.study.machines}
        labels = base.layout.labels()
        self.labels_s = [lab for lab in labels if lab[1] in s_ids]
        self.labels_e = [lab for lab in labels if lab[1] not in s_ids]
        self.cols_s = np.array([base.layout.index(*lab) for lab in self.labels_s], dtype=int)
        self.cols_e = np.array([base.layout.index(*lab) for lab in self.labels_e], dtype=int)
        self.p = case.partition.p
        self.external_state_types = [lab[0] for lab in self.labels_e]
        self.external_input_types = ["V"] * self.p + ["theta"] * self.p

    def model(self, events) -> AreaModel:
        key = None if events is None else (events.faulted_branch, events.faulted_end)
        if key not in self._models:
            self._models[key] = AreaModel(self.view, self.init, _stages(self.view, events))
        return self._models[key]

    def simulate(self, t_span, control: StepControl = StepControl(), events=None,
                 method="UnPartitioned") -> CosimRun:
        t_wall = time.perf_counter()
        model = self.model(events)
        grid = time_grid(t_span, control, events)
        u = np.zeros(0)
        X = np.empty((len(grid), model.layout.n))
        X[0] = x = model.x0.copy()
        stepper = TrapezoidIntegrator(control.tol, control.max_newton, control.min_step,
                                      max_norm=control.max_norm)
        stage = None
        t_s = t_b = 0.0
        Y = np.empty((len(grid), 4 * self.p))
        Y[0] = model.h(x, u, _stage(events, grid[0]))
        for k in range(len(grid) - 1):
            s = _stage(events, grid[k])
            if s != stage:
                stepper.reset()
                stage = s
            t0 = time.perf_counter()
            x = stepper.advance(lambda t, y, _s=s: model.f(y, u, _s), grid[k], x, grid[k + 1])
            t1 = time.perf_counter()
            X[k + 1] = x
            Y[k + 1] = model.h(x, u, _stage(events, grid[k + 1]))
            t_b += time.perf_counter() - t1
            t_s += t1 - t0
        p = self.p
        th = np.unwrap(Y[:, 2 * p:], axis=0)
        return CosimRun(method, grid, X[:, self.cols_s], X[:, self.cols_e],
                        Y[:, :p], th[:, :p], Y[:, p:2 * p], th[:, p:],
                        self.labels_s, self.labels_e,
                        _timings(t_s, 0.0, t_b, time.perf_counter() - t_wall))


# --------------------------------------------------------------------------
# partitioned

def external_system(case: PowerCase):
    """External-area model at the stored operating point and its scaled wrapper."""
    _, ext = partition(case)
    model = AreaModel(ext, operating_point(case))
    return model, scale_system(model)


def reduce_nonlinear(case: PowerCase, scheme: PerturbationScheme = PerturbationScheme(),
                     cutoff=1e-5, n_red=None, jobs=None, covariances=None) -> BalancedReduction:
    """Empirical-covariance balancing of the external area, truncated."""
    _, sys = external_system(case)
    cov = covariances if covariances is not None else empirical_covariances(sys, scheme, jobs)
    bal = balance(cov, xs0=sys.xs0)
    bal.model = "nonlinear"
    return truncate(bal, cutoff, n_red)


def reduce_linearized(case: PowerCase, cutoff=1e-5, n_red=None, method="structured"):
    """Balanced truncation of the linearized external area (Lyapunov gramians)."""
    _, sys = external_system(case)
    lin = linearize(sys)
    cov = linear_gramians(lin, sys.T_x, sys.T_u)
    bal = (balance if method == "structured" else balance_laub)(cov, xs0=sys.xs0)
    bal.model = "linearized"
    bal.linear = lin
    return truncate(bal, cutoff, n_red)


class PartitionedSystem:
    def __init__(self, case: PowerCase):
        self.case = case
        self.init = operating_point(case)
        self.study, self.external = partition(case)
        self.p = case.partition.p
        self._models = {}
        ms, me = self.models(None)
        self.labels_s = ms.layout.labels()
        self.labels_e = me.layout.labels()
        self.scaled_external = scale_system(me)

    def models(self, events):
        key = None if events is None else (events.faulted_branch, events.faulted_end)
        if key not in self._models:
            self._models[key] = (AreaModel(self.study, self.init, _stages(self.study, events)),
                                 AreaModel(self.external, self.init, _stages(self.external, events)))
        return self._models[key]

    def initial_boundary(self):
        part = self.case.partition
        bs = [self.case.bus(b) for b in part.B_s_bound]
        be = [self.case.bus(b) for b in part.B_e_bound]
        return BoundaryState(np.array([b.V for b in bs]), np.array([b.theta for b in bs]),
                             np.array([b.V for b in be]), np.array([b.theta for b in be]))

    def simulate(self, t_span, control: StepControl = StepControl(), events=None,
                 bal: BalancedReduction | None = None, method="Partitioned-Unreduced",
                 jobs=1) -> CosimRun:
        t_wall = time.perf_counter()
        ms, me = self.models(events)
        if bal is None:
            ext_f = me.f
            to_full = None
            xe = me.x0.copy()
        else:
            if bal.n != me.layout.n:
                raise CosimError("reduction does not match the external-area dimension")
            sys = scale_system(me)
            dyn = None
            if bal.model == "linearized":
                lin = getattr(bal, "linear", None) or linearize(sys)
                dyn = lin.f
            red = ReducedModel(bal, sys, dyn)
            ext_f = lambda x, u, _s=0: red.f(x, u)  # noqa: E731 - external network has no events
            to_full = red.to_full
            xe = red.x0.copy()

        grid = time_grid(t_span, control, events)
        N = len(grid)
        xs = ms.x0.copy()
        Xs = np.empty((N, ms.layout.n))
        Xe = np.empty((N, me.layout.n))
        B = np.empty((N, 4, self.p))
        res = np.zeros(N)
        Xs[0] = xs
        Xe[0] = xe if to_full is None else to_full(xe)

        stage0 = _stage(events, grid[0])
        bnd = self.initial_boundary()
        if self.p:
            bnd = update_boundary(ms.psi_state(xs), me.psi_state(Xe[0]), bnd,
                                  ms.stages[stage0], me.stages[stage0])
            res[0] = boundary_residual(ms.psi_state(xs), me.psi_state(Xe[0]), bnd,
                                       ms.stages[stage0], me.stages[stage0])
        B[0] = bnd.V_s, bnd.theta_s, bnd.V_e, bnd.theta_e

        st_s = TrapezoidIntegrator(control.tol, control.max_newton, control.min_step,
                                   max_norm=control.max_norm)
        st_e = TrapezoidIntegrator(control.tol, control.max_newton, control.min_step,
                                   max_norm=control.max_norm)
        pool = ThreadPoolExecutor(max_workers=2) if jobs and jobs > 1 else None
        t_s = t_e = t_b = 0.0
        stage = None

        def run_s(k, s, us):
            t0 = time.perf_counter()
            out = st_s.advance(lambda t, y: ms.f(y, us, s), grid[k], xs, grid[k + 1])
            return out, time.perf_counter() - t0

        def run_e(k, ue):
            t0 = time.perf_counter()
            out = st_e.advance(lambda t, y: ext_f(y, ue), grid[k], xe, grid[k + 1])
            return out, time.perf_counter() - t0

        try:
            for k in range(N - 1):
                s = _stage(events, grid[k])
                if s != stage:
                    st_s.reset()
                    stage = s
                us, ue = bnd.u_study, bnd.u_external
                if pool is not None:
                    fs, fe = pool.submit(run_s, k, s, us), pool.submit(run_e, k, ue)
                    (xs, ds), (xe, de) = fs.result(), fe.result()
                else:
                    xs, ds = run_s(k, s, us)
                    xe, de = run_e(k, ue)
                t_s += ds
                t_e += de
                t0 = time.perf_counter()
                xe_full = xe if to_full is None else to_full(xe)
                nxt = _stage(events, grid[k + 1])
                psi_s, psi_e = ms.psi_state(xs), me.psi_state(xe_full)
                try:
                    bnd = update_boundary(psi_s, psi_e, bnd, ms.stages[nxt], me.stages[nxt])
                except ConvergenceError as exc:
                    raise CosimError(f"boundary update failed at step {k + 1} "
                                     f"(t={grid[k + 1]:.4f}): {exc}") from exc
                t_b += time.perf_counter() - t0
                res[k + 1] = boundary_residual(psi_s, psi_e, bnd, ms.stages[nxt], me.stages[nxt])
                Xs[k + 1] = xs
                Xe[k + 1] = xe_full
                B[k + 1] = bnd.V_s, bnd.theta_s, bnd.V_e, bnd.theta_e
        finally:
            if pool is not None:
                pool.shutdown()

        return CosimRun(method, grid, Xs, Xe, B[:, 0], B[:, 1], B[:, 2], B[:, 3],
                        self.labels_s, self.labels_e,
                        _timings(t_s, t_e, t_b, time.perf_counter() - t_wall), res,
                        None if bal is None else bal.n_red)


def run_cosim(case: PowerCase, method: str, bal: BalancedReduction | None = None,
              events: EventSchedule | None = None, control: StepControl = StepControl(),
              t_span=(0.0, 15.0), jobs=1) -> CosimRun:
    """Simulate ``case`` with one of :data:`METHODS`."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    if method == "UnPartitioned":
        return MonolithicSystem(case).simulate(t_span, control, events)
    if method == "Partitioned-Unreduced":
        return PartitionedSystem(case).simulate(t_span, control, events, None, method, jobs)
    if bal is None or bal.n_red is None:
        raise ValueError(f"{method} needs a truncated BalancedReduction")
    return PartitionedSystem(case).simulate(t_span, control, events, bal, method, jobs)


# --------------------------------------------------------------------------
# accuracy

@dataclass(frozen=True)
class AccuracyIndex:
    kind: str
    value: float
    reference: str = ""  # "eps1" vs UnPartitioned, "eps2" vs Partitioned-Unreduced
    area: str = "study"

    def __post_init__(self):
        if not self.value >= 0:
            raise ValueError("accuracy index must be non-negative")


def _series(run: CosimRun, kind, area):
    if kind in ("V", "theta"):
        parts = {"study": ("s",), "external": ("e",), "boundary": ("s", "e")}[area]
        X = np.hstack([getattr(run, ("V_" if kind == "V" else "theta_") + a) for a in parts])
        return X, None
    return run.kind(kind, area)


def accuracy(run_a: CosimRun, run_b: CosimRun, kind: str, reference: str | None = None,
             area: str = "study", tag: str = "") -> AccuracyIndex:
    """RMS deviation ``sqrt(sum (a - b)^2 / (N T_s))`` of one variable kind.

    ``area`` is "study" or "external" for machine states and "study",
    "external" or "boundary" (both sides) for bus ``V``/``theta``.  With
    ``reference`` (a study machine id) rotor and bus angles are taken relative
    to that machine's rotor angle in each run.
    """
    if len(run_a.t) != len(run_b.t) or np.max(np.abs(run_a.t - run_b.t)) > 1e-12:
        raise ValueError("runs are on different time grids")
    A, ids_a = _series(run_a, kind, area)
    Bm, ids_b = _series(run_b, kind, area)
    if A.shape != Bm.shape or ids_a != ids_b:
        raise ValueError(f"runs carry different {kind} trajectories")
    if reference is not None and kind in ("delta", "theta"):
        ra = _reference_angle(run_a, reference)
        rb = _reference_angle(run_b, reference)
        A = A - ra[:, None]
        Bm = Bm - rb[:, None]
    Ts, N = A.shape
    if N == 0:
        return AccuracyIndex(kind, 0.0, tag, area)
    return AccuracyIndex(kind, float(np.sqrt(np.sum((A - Bm) ** 2) / (N * Ts))), tag, area)


def _reference_angle(run, machine_id):
    D, ids = run.kind("delta", "study")
    if machine_id not in ids:
        raise ValueError(f"reference machine {machine_id!r} is not a study machine")
    return D[:, ids.index(machine_id)]


def timing_table(runs: dict):
    rows = {}
    base = runs.get("UnPartitioned")
    for name, run in runs.items():
        if run is None:
            continue
        row = dict(run.timings)
        if base is not None and row["t_total"] > 0:
            row["speedup"] = base.timings["t_total"] / row["t_total"]
            row["speedup_parallel"] = base.timings["t_total"] / row["t_total_parallel"]
        rows[name] = row
    return rows


def compare_methods(case: PowerCase, bal_nm: BalancedReduction | None, bal_lm: BalancedReduction | None,
                    events: EventSchedule | None = None, control: StepControl = StepControl(),
                    t_span=(0.0, 15.0), reference: str | None = None, kinds=None, jobs=1,
                    methods=METHODS, bal_lm_factory=None) -> dict:
    """Run the requested methods and assemble the accuracy and timing tables.

    Failures are recorded per method, never raised.  ``bal_lm_factory`` is
    called lazily (so that a reduction that cannot be built, such as the
    square-root method on a non-minimal system, is reported as a failure).
    """
    runs, failures = {}, {}
    for method in methods:
        bal = bal_nm if method.endswith("NM") else bal_lm if method.endswith("LM") else None
        try:
            if method.endswith("LM") and bal is None and bal_lm_factory is not None:
                bal = bal_lm_factory()
            runs[method] = run_cosim(case, method, bal, events, control, t_span, jobs)
        except NonMinimalError as exc:
            failures[method] = f"non-minimal failure: {exc}"
        except Exception as exc:  # noqa: BLE001 - reported, not fatal
            failures[method] = f"{type(exc).__name__}: {exc}"
        if method in failures:
            log.warning("%s failed: %s", method, failures[method])

    kinds = kinds or [k for k in STATE_KINDS if any(lab[0] == k for lab in _labels(case))]
    eps = {}
    for tag, ref_name in (("eps1", "UnPartitioned"), ("eps2", "Partitioned-Unreduced")):
        ref = runs.get(ref_name)
        for method in ("Partitioned-Reduced-NM", "Partitioned-Reduced-LM"):
            run = runs.get(method)
            if ref is None or run is None:
                continue
            for kind in kinds:
                eps[(tag, method, "study", kind)] = accuracy(run, ref, kind, reference, "study", tag).value
            for kind in ("V", "theta"):
                eps[(tag, method, "boundary", kind)] = accuracy(run, ref, kind, reference,
                                                                "boundary", tag).value

    checks = {}
    key_nm, key_lm = ("eps2", "Partitioned-Reduced-NM", "study", "delta"), \
        ("eps2", "Partitioned-Reduced-LM", "study", "delta")
    if key_nm in eps and key_lm in eps:
        ok = eps[key_nm] <= eps[key_lm]
        checks["nm_not_worse_than_lm"] = ok
        (log.info if ok else log.warning)("delta accuracy NM %.3e vs LM %.3e", eps[key_nm], eps[key_lm])
    return dict(runs=runs, failures=failures, eps=eps, timing=timing_table(runs), checks=checks)


def _labels(case):
    return PartitionedSystem(case).labels_s
