"""Scaled systems, empirical controllability/observability covariances,
linear gramians and the fault-ensemble calibration of perturbation sizes.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from joblib import Parallel, delayed
from scipy.linalg import expm, solve_continuous_lyapunov

from .integrate import StepControl, TrapezoidIntegrator

__all__ = [
    "ScaledSystem", "scale_system", "LinearSystem", "PerturbationScheme", "CovariancePair",
    "GramianError", "controllability_covariance", "observability_covariance",
    "empirical_covariances", "linearize", "linear_gramians", "CalibrationResult",
    "REFERENCE_PROFILE", "PROFILES", "scheme_for_profile", "calibrate_magnitudes",
]

M0_LINEAR = (0.25, 0.5, 0.75, 1.0)
M0_GEOMETRIC = (0.125, 0.25, 0.5, 1.0)
PROFILES = {
    "LS": (M0_LINEAR, 1.0), "LS-Half": (M0_LINEAR, 0.5), "LS-Double": (M0_LINEAR, 2.0),
    "GS": (M0_GEOMETRIC, 1.0), "GS-Half": (M0_GEOMETRIC, 0.5), "GS-Double": (M0_GEOMETRIC, 2.0),
}


class GramianError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# systems

@dataclass
class LinearSystem:
    """x' = A (x - x0) + B (u - u0),  y = y0 + C (x - x0) + D (u - u0)."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray | None = None
    x0: np.ndarray | None = None
    u0: np.ndarray | None = None
    y0: np.ndarray | None = None

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        n = self.A.shape[0]
        self.B = np.asarray(self.B, dtype=float).reshape(n, -1)
        self.C = np.asarray(self.C, dtype=float).reshape(-1, n)
        m, q = self.B.shape[1], self.C.shape[0]
        self.D = np.zeros((q, m)) if self.D is None else np.asarray(self.D, dtype=float).reshape(q, m)
        self.x0 = np.zeros(n) if self.x0 is None else np.asarray(self.x0, dtype=float)
        self.u0 = np.zeros(m) if self.u0 is None else np.asarray(self.u0, dtype=float)
        self.y0 = np.zeros(q) if self.y0 is None else np.asarray(self.y0, dtype=float)

    def f(self, x, u):
        return self.A @ (x - self.x0) + self.B @ (u - self.u0)

    def h(self, x, u):
        return self.y0 + self.C @ (x - self.x0) + self.D @ (u - self.u0)

    def scaled(self, T_x, T_u):
        """Same system in coordinates x = T_x x~, u = T_u u~."""
        return LinearSystem(self.A * T_x[None, :] / T_x[:, None], self.B * T_u[None, :] / T_x[:, None],
                            self.C * T_x[None, :], self.D * T_u[None, :],
                            self.x0 / T_x, self.u0 / T_u, self.y0)


@dataclass
class ScaledSystem:
    """Dynamics in coordinates x = T_x x~, u = T_u u~ (outputs unscaled)."""

    f: object
    h: object
    x0: np.ndarray
    u0: np.ndarray
    T_x: np.ndarray  # diagonals
    T_u: np.ndarray
    state_types: list = field(default_factory=list)
    input_types: list = field(default_factory=list)

    @property
    def n(self):
        return len(self.x0)

    @property
    def v(self):
        return len(self.u0)

    @property
    def xs0(self):
        return self.x0 / self.T_x

    @property
    def us0(self):
        return self.u0 / self.T_u

    def fs(self, xs, us):
        return self.f(self.T_x * xs, self.T_u * us) / self.T_x

    def hs(self, xs, us):
        return self.h(self.T_x * xs, self.T_u * us)

    def to_original(self, xs):
        return self.T_x * xs

    def to_scaled(self, x):
        return x / self.T_x


def _safe_diag(v, what):
    d = np.array(v, dtype=float)
    zero = d == 0
    if np.any(zero):
        warnings.warn(f"zero steady-state {what} component(s) {np.flatnonzero(zero).tolist()}; "
                      "scaling set to 1.0", RuntimeWarning, stacklevel=3)
        d[zero] = 1.0
    return d


def scale_system(model, x0=None, u0=None, state_types=None, input_types=None) -> ScaledSystem:
    """Wrap ``model`` (anything with ``f(x, u)`` and ``h(x, u)``) in scaled coordinates.

    ``x0``/``u0`` default to ``model.x0``/``model.u0``.  Zero steady-state
    components get a unit scale and a warning.
    """
    x0 = np.asarray(model.x0 if x0 is None else x0, dtype=float)
    u0 = np.asarray(model.u0 if u0 is None else u0, dtype=float)
    if state_types is None:
        state_types = list(getattr(model, "state_types", ["x"] * len(x0)))
    if input_types is None:
        input_types = list(getattr(model, "input_types", ["u"] * len(u0)))
    return ScaledSystem(model.f, model.h, x0, u0, _safe_diag(x0, "state"), _safe_diag(u0, "input"),
                        list(state_types), list(input_types))


# --------------------------------------------------------------------------
# perturbation scheme

def _check_orthonormal(Ts, dim, what):
    for T in Ts:
        T = np.asarray(T, dtype=float)
        if T.shape != (dim, dim) or np.max(np.abs(T.T @ T - np.eye(dim))) > 1e-12:
            raise ValueError(f"{what} direction matrices must be orthonormal {dim}x{dim}")


@dataclass(frozen=True)
class PerturbationScheme:
    """Directions, sizes, input shape and sampling of the perturbation experiments.

    ``T_c``/``T_o`` of ``None`` mean ``{I, -I}``.  Magnitudes are
    ``M0[m] * k[type]`` per input or state entry (``k`` defaults to 1).
    """

    T_c: tuple | None = None
    T_o: tuple | None = None
    M0: tuple = M0_LINEAR
    k_u: dict | None = None
    k_x: dict | None = None
    shape: str = "step"
    horizon: float = 5.0
    dt: float = 0.01
    tol: float = 1e-4

    def __post_init__(self):
        if self.shape not in ("step", "impulse"):
            raise ValueError(f"unknown input shape {self.shape!r}")
        if self.horizon <= 0 or self.dt <= 0 or self.tol <= 0:
            raise ValueError("horizon, dt and tol must be positive")
        if not self.M0 or min(self.M0) <= 0:
            raise ValueError("magnitudes must be positive")
        for k in (self.k_u or {}, self.k_x or {}):
            if any(val <= 0 for val in k.values()):
                raise ValueError("k factors must be positive")

    def input_directions(self, v):
        Ts = self.T_c if self.T_c is not None else (np.eye(v), -np.eye(v))
        _check_orthonormal(Ts, v, "input")
        return [np.asarray(T, dtype=float) for T in Ts]

    def state_directions(self, n):
        Ts = self.T_o if self.T_o is not None else (np.eye(n), -np.eye(n))
        _check_orthonormal(Ts, n, "state")
        return [np.asarray(T, dtype=float) for T in Ts]

    def magnitudes(self, types, kind):
        """(s, dim) array of per-entry sizes."""
        k = (self.k_u if kind == "input" else self.k_x) or {}
        base = np.array([k.get(t, 1.0) for t in types], dtype=float)
        return np.outer(np.asarray(self.M0, dtype=float), base)

    @property
    def grid(self):
        K = int(round(self.horizon / self.dt))
        return np.linspace(0.0, K * self.dt, K + 1)

    def weights(self):
        """Trapezoid quadrature weights on the sampling grid."""
        w = np.full(len(self.grid), self.dt)
        w[0] = w[-1] = 0.5 * self.dt
        return w


@dataclass
class CovariancePair:
    W_c: np.ndarray
    W_o: np.ndarray
    T_x: np.ndarray
    T_u: np.ndarray
    scheme: PerturbationScheme | None = None
    source: str = "empirical"

    def __post_init__(self):
        self.W_c = 0.5 * (self.W_c + self.W_c.T)
        self.W_o = 0.5 * (self.W_o + self.W_o.T)

    def check(self, tol=1e-8):
        for name, W in (("W_c", self.W_c), ("W_o", self.W_o)):
            if not np.all(np.isfinite(W)):
                raise GramianError(f"{name} has non-finite entries")
            ev = np.linalg.eigvalsh(W)
            if ev.size and ev[0] < -tol * max(ev[-1], 0.0) - 1e-300:
                raise GramianError(f"{name} not positive semidefinite (min eig {ev[0]:.3e})")
        return self


# --------------------------------------------------------------------------
# experiments

def _simulate(sys: ScaledSystem, xs0, inputs, grid, tol):
    """Trajectory sampled on ``grid`` with input ``inputs[k]`` held on interval k."""
    model = getattr(sys.f, "__self__", None)
    if isinstance(model, LinearSystem) and np.allclose(np.diff(grid), grid[1] - grid[0]):
        return _simulate_linear(model.scaled(sys.T_x, sys.T_u), xs0, inputs, grid[1] - grid[0])
    stepper = TrapezoidIntegrator(tol=tol)
    X = np.empty((len(grid), len(xs0)))
    X[0] = x = np.asarray(xs0, dtype=float)
    for k in range(len(grid) - 1):
        uk = inputs[k]
        if k and not np.array_equal(uk, inputs[k - 1]):
            stepper.reset()
        x = stepper.advance(lambda t, y, _u=uk: sys.fs(y, _u), grid[k], x, grid[k + 1])
        X[k + 1] = x
    return X


def _simulate_linear(lin: LinearSystem, xs0, inputs, dt):
    # exact zero-order-hold discretization
    n, m = lin.B.shape
    M = np.zeros((n + m, n + m))
    M[:n, :n], M[:n, n:] = lin.A, lin.B
    E = expm(M * dt)
    Ad, Bd = E[:n, :n], E[:n, n:]
    X = np.empty((len(inputs) + 1, n))
    X[0] = z = np.asarray(xs0, dtype=float) - lin.x0
    for k, u in enumerate(inputs):
        z = Ad @ z + Bd @ (u - lin.u0)
        X[k + 1] = z
    return X + lin.x0


def _input_history(sys, scheme, direction):
    grid = scheme.grid
    U = np.tile(sys.us0, (len(grid) - 1, 1))
    if scheme.shape == "step":
        U += direction
    else:
        U[0] += direction / scheme.dt
    return U


def _wc_experiment(sys, scheme, direction):
    X = _simulate(sys, sys.xs0, _input_history(sys, scheme, direction), scheme.grid, scheme.tol)
    return X - sys.xs0


def _wo_experiment(sys, scheme, x_init):
    grid = scheme.grid
    U = np.tile(sys.us0, (len(grid) - 1, 1))
    X = _simulate(sys, x_init, U, grid, scheme.tol)
    return np.array([sys.hs(x, sys.us0) for x in X])


def _run(tasks, jobs):
    if jobs is not None and jobs > 1:
        return Parallel(n_jobs=jobs)(delayed(fn)(*args) for fn, args in tasks)
    return [fn(*args) for fn, args in tasks]


def _guarded(fn, label):
    def run(*args):
        try:
            return fn(*args)
        except Exception as exc:  # noqa: BLE001 - re-raised with experiment index
            raise GramianError(f"experiment {label} failed: {exc}") from exc
    return run


def controllability_covariance(sys: ScaledSystem, scheme: PerturbationScheme, jobs=None):
    """Discrete empirical controllability covariance of the scaled system."""
    Ts = scheme.input_directions(sys.v)
    C = scheme.magnitudes(sys.input_types, "input")
    r, s = len(Ts), len(scheme.M0)
    keys, tasks = [], []
    for i in range(sys.v):
        for l, T in enumerate(Ts):
            for m in range(s):
                d = C[m, i] * T[:, i]
                keys.append((i, l, m))
                tasks.append((_guarded(_wc_experiment, (i, l, m)), (sys, scheme, d)))
    results = _run(tasks, jobs)
    w = scheme.weights()
    W = np.zeros((sys.n, sys.n))
    for (i, l, m), dX in zip(keys, results):
        W += (dX.T * w) @ dX / (r * s * C[m, i] ** 2)
    return 0.5 * (W + W.T)


def observability_covariance(sys: ScaledSystem, scheme: PerturbationScheme, jobs=None):
    """Discrete empirical observability covariance; inputs held at u0."""
    Ts = scheme.state_directions(sys.n)
    C = scheme.magnitudes(sys.state_types, "state")
    r, s, n = len(Ts), len(scheme.M0), sys.n
    keys = [("base",)]
    tasks = [(_guarded(_wo_experiment, "baseline"), (sys, scheme, sys.xs0))]
    for l, T in enumerate(Ts):
        for m in range(s):
            for i in range(n):
                keys.append((i, l, m))
                tasks.append((_guarded(_wo_experiment, (i, l, m)),
                              (sys, scheme, sys.xs0 + C[m, i] * T[:, i])))
    results = _run(tasks, jobs)
    Y0 = results[0]
    out = dict(zip(keys[1:], results[1:]))
    w = scheme.weights()
    W = np.zeros((n, n))
    for l, T in enumerate(Ts):
        for m in range(s):
            # rows: time samples, columns: output entry, last axis: experiment i
            D = np.stack([out[(i, l, m)] - Y0 for i in range(n)], axis=-1)
            Psi = np.einsum("k,kqi,kqj->ij", w, D, D) / np.outer(C[m], C[m])
            W += T @ Psi @ T.T / (r * s)
    return 0.5 * (W + W.T)


def empirical_covariances(sys: ScaledSystem, scheme: PerturbationScheme, jobs=None) -> CovariancePair:
    return CovariancePair(controllability_covariance(sys, scheme, jobs),
                          observability_covariance(sys, scheme, jobs),
                          sys.T_x.copy(), sys.T_u.copy(), scheme, "empirical")


# --------------------------------------------------------------------------
# linear model

def linearize(sys: ScaledSystem, eps=1e-6) -> LinearSystem:
    """Central-difference linearization of the scaled system at its steady state."""
    xs0, us0 = sys.xs0, sys.us0
    n, v = sys.n, sys.v
    y0 = np.asarray(sys.hs(xs0, us0), dtype=float)
    A = np.empty((n, n))
    C = np.empty((len(y0), n))
    for j in range(n):
        h = eps * max(1.0, abs(xs0[j]))
        e = np.zeros(n)
        e[j] = h
        A[:, j] = (sys.fs(xs0 + e, us0) - sys.fs(xs0 - e, us0)) / (2 * h)
        C[:, j] = (sys.hs(xs0 + e, us0) - sys.hs(xs0 - e, us0)) / (2 * h)
    B = np.empty((n, v))
    D = np.empty((len(y0), v))
    for j in range(v):
        h = eps * max(1.0, abs(us0[j]))
        e = np.zeros(v)
        e[j] = h
        B[:, j] = (sys.fs(xs0, us0 + e) - sys.fs(xs0, us0 - e)) / (2 * h)
        D[:, j] = (sys.hs(xs0, us0 + e) - sys.hs(xs0, us0 - e)) / (2 * h)
    return LinearSystem(A, B, C, D, xs0, us0, y0)


def linear_gramians(lin: LinearSystem, T_x=None, T_u=None) -> CovariancePair:
    """Infinite-horizon gramians from the two Lyapunov equations."""
    if np.max(np.linalg.eigvals(lin.A).real) >= 0:
        raise GramianError("linearized model is not asymptotically stable")
    Wc = solve_continuous_lyapunov(lin.A, -lin.B @ lin.B.T)
    Wo = solve_continuous_lyapunov(lin.A.T, -lin.C.T @ lin.C)
    n, v = lin.B.shape
    return CovariancePair(Wc, Wo, np.ones(n) if T_x is None else T_x,
                          np.ones(v) if T_u is None else T_u, None, "linear")


# --------------------------------------------------------------------------
# calibration

@dataclass
class CalibrationResult:
    k_u: dict
    k_x: dict
    n_f: int
    alpha_u: float = 2.0
    alpha_x: float = 2.0
    failures: list = field(default_factory=list)
    faults: list = field(default_factory=list)

    def __post_init__(self):
        if any(v <= 0 for v in (*self.k_u.values(), *self.k_x.values())):
            raise ValueError("calibrated k factors must be positive")


REFERENCE_PROFILE = CalibrationResult(
    k_u={"V": 0.054, "theta": 1.24},
    k_x={"delta": 0.90, "omega": 0.0050, "eqp": 0.024, "edp": 0.27},
    n_f=100)


def scheme_for_profile(name: str, calibration: CalibrationResult = REFERENCE_PROFILE, **kw) -> PerturbationScheme:
    """Scheme for one of LS, LS-Half, LS-Double, GS, GS-Half, GS-Double."""
    try:
        M0, fac = PROFILES[name]
    except KeyError:
        raise ValueError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}") from None
    k_u = {t: fac * v for t, v in calibration.k_u.items()}
    k_x = {t: fac * v for t, v in calibration.k_x.items()}
    return PerturbationScheme(M0=M0, k_u=k_u, k_x=k_x, **kw)


def _relative_peaks(X, x0):
    dev = np.max(np.abs(X - x0), axis=0)
    denom = np.where(x0 != 0, np.abs(x0), 1.0)
    return dev / denom


def calibrate_magnitudes(case, n_f=100, alpha_u=2.0, alpha_x=2.0, seed=0, horizon=3.0,
                         control: StepControl | None = None, fault_on=0.1, jobs=None) -> CalibrationResult:
    """k_u and k_x from an ensemble of random study-area line faults.

    Each fault is applied at a random end of a random non-tie study-area line
    and cleared at the near and remote ends after 0.05 s and 0.1 s.  The
    post-fault change of an entry is its peak relative excursion over the run.
    """
    from .cosim import MonolithicSystem  # local: cosim imports this module
    from .integrate import EventSchedule

    if n_f < 1:
        raise ValueError("n_f must be at least 1")
    control = control or StepControl()
    rng = np.random.default_rng(seed)
    study = set(case.partition.study_buses)
    lines = [b for b in case.branches
             if not b.tie and b.from_bus in study and b.to_bus in study]
    if not lines:
        raise GramianError("no study-area lines to fault")
    picks = []
    for _ in range(n_f):
        br = lines[rng.integers(len(lines))]
        end = br.from_bus if rng.integers(2) == 0 else br.to_bus
        picks.append(EventSchedule(fault_on, fault_on + 0.05, fault_on + 0.1, br.id, end))

    mono = MonolithicSystem(case)

    def one(ev):
        try:
            run = mono.simulate((0.0, horizon), control, ev)
        except Exception as exc:  # noqa: BLE001 - recorded and skipped
            return None, f"{ev.faulted_branch}@{ev.faulted_end}: {exc}"
        u = run.external_inputs
        x = run.external_states
        return (_relative_peaks(u, u[0]), _relative_peaks(x, x[0])), None

    results = _run([(one, (ev,)) for ev in picks], jobs)
    ok = [r for r, err in results if r is not None]
    failures = [err for r, err in results if r is None]
    if not ok:
        raise GramianError("all calibration fault simulations failed")
    du = np.max(np.array([r[0] for r in ok]), axis=0)
    dx = np.max(np.array([r[1] for r in ok]), axis=0)
    itypes, stypes = mono.external_input_types, mono.external_state_types
    k_u = _type_means(du, itypes, alpha_u)
    k_x = _type_means(dx, stypes, alpha_x)
    return CalibrationResult(k_u, k_x, len(ok), alpha_u, alpha_x, failures,
                             [(e.faulted_branch, e.faulted_end) for e in picks])


def _type_means(peaks, types, alpha):
    out = {}
    for t in dict.fromkeys(types):
        sel = [p for p, tt in zip(peaks, types) if tt == t]
        val = alpha * float(np.mean(sel))
        # an entry that never moves still needs a positive perturbation size
        out[t] = val if val > 0 else alpha * 1e-3
    return out
