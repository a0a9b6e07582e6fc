"""Per-area network algebra: Kron reduction, ZIP-load Newton solve, voltage
reconstruction and the boundary-bus update between two areas.

Retained nodes of an area are ordered as
``[machine internal nodes, pseudo-generator buses, non-conforming (ZIP) buses]``.
Machine internal nodes sit behind ``j x'_d`` (converted to the system base);
pseudo-generators are voltage sources placed directly at the opposite
boundary bus.  Every other bus is eliminated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .case import AreaView

__all__ = [
    "FaultSpec", "NetworkMatrices", "BoundaryState", "NetworkError",
    "ConvergenceError", "build_matrices", "zip_injection", "solve_nc_voltages",
    "reconstruct_voltages", "update_boundary", "boundary_residual",
]

FAULT_SHUNT = 1e7
ZIP_SWITCH = 0.5


class NetworkError(RuntimeError):
    pass


class ConvergenceError(RuntimeError):
    def __init__(self, message, residual=np.nan, iterations=0):
        super().__init__(f"{message} (residual {residual:.3e} after {iterations} iterations)")
        self.residual = residual
        self.iterations = iterations


@dataclass(frozen=True)
class FaultSpec:
    """Network modification for one stage of a three-phase fault.

    stage 1: bolted shunt at ``bus``; stage 2: ``branch`` opened at ``bus``
    while the fault point stays fed from the remote end; stage 3: ``branch``
    removed.
    """

    bus: int
    branch: str
    stage: int
    shunt: float = FAULT_SHUNT


@dataclass(frozen=True, eq=False)
class NetworkMatrices:
    Y_g: np.ndarray
    Y_gnc: np.ndarray
    Y_ncg: np.ndarray
    Y_nc: np.ndarray
    R_g: np.ndarray
    R_nc: np.ndarray
    n_machines: int
    n_pseudo: int
    elim: np.ndarray        # local bus indices reconstructed by R_g / R_nc
    pseudo_idx: np.ndarray  # local bus indices of pseudo-generators
    nc_idx: np.ndarray      # local bus indices of ZIP buses
    boundary_idx: np.ndarray
    n_buses: int
    zips: tuple = ()
    zip_params: object = None

    @property
    def n_sources(self) -> int:
        return self.n_machines + self.n_pseudo


@dataclass(frozen=True)
class BoundaryState:
    V_s: np.ndarray
    theta_s: np.ndarray
    V_e: np.ndarray
    theta_e: np.ndarray

    @classmethod
    def empty(cls):
        z = np.zeros(0)
        return cls(z, z, z, z)

    @classmethod
    def from_complex(cls, z_s, z_e, previous=None):
        th_s, th_e = np.angle(z_s), np.angle(z_e)
        if previous is not None:
            th_s = _unwrap_to(th_s, previous.theta_s)
            th_e = _unwrap_to(th_e, previous.theta_e)
        return cls(np.abs(z_s), th_s, np.abs(z_e), th_e)

    @property
    def z_s(self):
        return self.V_s * np.exp(1j * self.theta_s)

    @property
    def z_e(self):
        return self.V_e * np.exp(1j * self.theta_e)

    @property
    def u_study(self):
        return np.concatenate([self.V_e, self.theta_e])

    @property
    def u_external(self):
        return np.concatenate([self.V_s, self.theta_s])

    @property
    def p(self) -> int:
        return len(self.V_s)


def _unwrap_to(theta, ref):
    return theta + 2 * np.pi * np.round((ref - theta) / (2 * np.pi))


# --------------------------------------------------------------------------
# admittance assembly and Kron reduction

def _area_admittance(area: AreaView, fault: FaultSpec | None):
    nb = len(area.buses)
    ng = len(area.machines)
    idx = {b.id: k for k, b in enumerate(area.buses)}
    Y = np.zeros((nb + ng, nb + ng), dtype=complex)
    pseudo = {g.bus for g in area.pseudo}

    for br in area.branches:
        if fault is not None and fault.stage >= 2 and br.id == fault.branch:
            continue
        i, j = idx[br.from_bus], idx[br.to_bus]
        y = br.y_series
        Y[i, i] += y + 0.5j * br.b
        Y[j, j] += y + 0.5j * br.b
        Y[i, j] -= y
        Y[j, i] -= y

    zip_at = {z.bus: z for z in area.zip_loads}
    for k, b in enumerate(area.buses):
        if b.id in pseudo:
            continue
        Y[k, k] += complex(b.G_sh, b.B_sh)
        if b.P_load or b.Q_load:
            Y[k, k] += complex(b.P_load, -b.Q_load) / b.V ** 2
        z = zip_at.get(b.id)
        if z is not None:
            Y[k, k] += complex(z.p1 * z.P0, -z.q1 * z.Q0) / z.V0_mag ** 2

    base = area.system_base_mva
    for g, m in enumerate(area.machines):
        k, n = idx[m.bus], nb + g
        y = 1.0 / (1j * m.x_dp * base / m.S_N)
        Y[k, k] += y
        Y[n, n] += y
        Y[k, n] -= y
        Y[n, k] -= y

    if fault is not None:
        # the fault record may belong to another area; then it is a no-op here
        if fault.stage == 1 and fault.bus in idx and fault.bus not in pseudo:
            Y[idx[fault.bus], idx[fault.bus]] += fault.shunt
        elif fault.stage == 2:
            br = next((b for b in area.branches if b.id == fault.branch), None)
            if br is not None:
                remote = br.to_bus if br.from_bus == fault.bus else br.from_bus
                if remote not in pseudo:
                    Y[idx[remote], idx[remote]] += br.y_series + 0.5j * br.b
    return Y


def build_matrices(area: AreaView, fault: FaultSpec | None = None) -> NetworkMatrices:
    """Kron-reduce an area onto its machine, pseudo-generator and ZIP nodes.

    Parameters
    ----------
    area
        Area view (own buses, tie-lines and pseudo-generators).
    fault
        Optional fault stage modifying the admittance matrix.

    Returns
    -------
    NetworkMatrices
        ``Y_g``/``Y_gnc`` give currents injected by the sources,
        ``Y_ncg``/``Y_nc`` the ZIP-bus current balance, and ``R_g``/``R_nc``
        rebuild the eliminated bus voltages.
    """
    nb = len(area.buses)
    ng = len(area.machines)
    idx = {b.id: k for k, b in enumerate(area.buses)}
    Y = _area_admittance(area, fault)

    pseudo_idx = np.array([idx[g.bus] for g in area.pseudo], dtype=int)
    nc_idx = np.array([idx[z.bus] for z in area.zip_loads], dtype=int)
    kept = set(pseudo_idx.tolist()) | set(nc_idx.tolist())
    elim = np.array([k for k in range(nb) if k not in kept], dtype=int)
    src = np.concatenate([nb + np.arange(ng), pseudo_idx]).astype(int)
    ret = np.concatenate([src, nc_idx]).astype(int)

    Yee = Y[np.ix_(elim, elim)]
    Yer = Y[np.ix_(elim, ret)]
    if len(elim):
        _check_islands(area, Y, elim, ret)
        try:
            R = -np.linalg.solve(Yee, Yer)
        except np.linalg.LinAlgError:
            raise NetworkError("singular network block during Kron reduction") from None
        if not np.all(np.isfinite(R)):
            raise NetworkError("non-finite reconstruction matrix")
        Yred = Y[np.ix_(ret, ret)] + Y[np.ix_(ret, elim)] @ R
    else:
        R = np.zeros((0, len(ret)), dtype=complex)
        Yred = Y[np.ix_(ret, ret)]

    ns = len(src)
    boundary_idx = np.array([idx[b] for b in area.boundary], dtype=int)
    return NetworkMatrices(
        Y_g=Yred[:ns, :ns], Y_gnc=Yred[:ns, ns:], Y_ncg=Yred[ns:, :ns], Y_nc=Yred[ns:, ns:],
        R_g=R[:, :ns], R_nc=R[:, ns:], n_machines=ng, n_pseudo=len(pseudo_idx),
        elim=elim, pseudo_idx=pseudo_idx, nc_idx=nc_idx, boundary_idx=boundary_idx,
        n_buses=nb, zips=tuple(area.zip_loads), zip_params=ZipParams(area.zip_loads))


def _check_islands(area, Y, elim, ret):
    nb = len(area.buses)
    n = Y.shape[0]
    # ground counts as a node: any bus with net shunt admittance touches it
    adj = (np.abs(Y) > 0).astype(float)
    np.fill_diagonal(adj, 0.0)
    shunt = np.abs(Y.sum(axis=1)) > 1e-12 * max(1.0, np.abs(Y).max())
    A = np.zeros((n + 1, n + 1))
    A[:n, :n] = adj
    A[:n, n] = A[n, :n] = shunt
    _, comp = connected_components(csr_matrix(A), directed=False)
    anchored = set(comp[ret].tolist()) | {comp[n]}
    for k in elim:
        if comp[k] not in anchored and k < nb:
            raise NetworkError(f"bus {area.buses[k].id} is islanded (no path to a source or ground)")


# --------------------------------------------------------------------------
# ZIP loads

class ZipParams:
    """Per-bus constants of the constant-current and constant-power parts."""

    def __init__(self, zips):
        zips = tuple(zips)
        self.zips = zips
        P0 = np.array([z.P0 for z in zips], dtype=float)
        Q0 = np.array([z.Q0 for z in zips], dtype=float)
        p2 = np.array([z.p2 for z in zips], dtype=float)
        p3 = np.array([z.p3 for z in zips], dtype=float)
        q2 = np.array([z.q2 for z in zips], dtype=float)
        q3 = np.array([z.q3 for z in zips], dtype=float)
        V0m = np.array([z.V0_mag for z in zips], dtype=float)
        V0 = np.array([z.V0 for z in zips], dtype=complex)
        self.n = len(zips)
        # high-voltage law: I = -(A + B |V|) / conj(V)
        self.A = np.conj(p3 * P0 + 1j * q3 * Q0)
        self.B = np.conj(p2 * P0 + 1j * q2 * Q0) / V0m
        # low-voltage law: I = k V
        self.k = -np.conj((p3 * P0 + 1j * q3 * Q0 + p2 * P0 + 1j * q2 * Q0) / (V0 * np.conj(V0)))
        self.V0 = V0


def _params(zips):
    return zips if isinstance(zips, ZipParams) else ZipParams(zips)


def zip_injection(V: np.ndarray, zips) -> np.ndarray:
    """Constant-current plus constant-power current injection at ZIP buses."""
    zp = _params(zips)
    V = np.asarray(V, dtype=complex)
    r = np.abs(V)
    high = r > ZIP_SWITCH
    Vc = np.where(high, np.conj(V), 1.0)
    return np.where(high, -(zp.A + zp.B * r) / Vc, zp.k * V)


def _zip_partials(V, zips):
    """d I / d Re(V) and d I / d Im(V), componentwise."""
    zp = _params(zips)
    x, y, r = V.real, V.imag, np.abs(V)
    high = r > ZIP_SWITCH
    rs = np.where(high, r, 1.0)
    Vc = np.where(high, np.conj(V), 1.0)
    num = zp.A + zp.B * rs
    dx = -(zp.B * (x / rs) / Vc - num / Vc ** 2)
    dy = -(zp.B * (y / rs) / Vc + 1j * num / Vc ** 2)
    return np.where(high, dx, zp.k), np.where(high, dy, 1j * zp.k)


def nc_residual(mats: NetworkMatrices, Psi, V, zips):
    return mats.Y_ncg @ Psi + mats.Y_nc @ V - zip_injection(V, zips)


def solve_nc_voltages(mats: NetworkMatrices, Psi, zips, guess, tol=1e-11, max_iter=50):
    """Newton solve of the ZIP-bus current balance for the complex bus voltages.

    The Jacobian is analytic (real 2n form); ``guess`` must be finite.
    """
    if zips is mats.zips and mats.zip_params is not None:
        zp = mats.zip_params
    else:
        zp = _params(zips if zips is not None else ())
    if zp.n == 0:
        return np.zeros(0, dtype=complex)
    V = np.array(guess, dtype=complex)
    if not np.all(np.isfinite(V)):
        raise ValueError("non-finite initial guess for ZIP voltages")
    base = mats.Y_ncg @ Psi
    Ync = mats.Y_nc
    n = len(V)
    J = np.empty((2 * n, 2 * n))
    res = np.inf
    for it in range(max_iter + 1):
        F = base + Ync @ V - zip_injection(V, zp)
        res = float(np.max(np.abs(F)))
        if res < tol:
            return V
        if it == max_iter or not np.isfinite(res):
            break
        dx, dy = _zip_partials(V, zp)
        Jx = Ync.copy()
        Jx[np.diag_indices(n)] -= dx
        Jy = 1j * Ync
        Jy[np.diag_indices(n)] -= dy
        J[:n, :n], J[:n, n:] = Jx.real, Jy.real
        J[n:, :n], J[n:, n:] = Jx.imag, Jy.imag
        try:
            step = np.linalg.solve(J, np.concatenate([F.real, F.imag]))
        except np.linalg.LinAlgError:
            raise ConvergenceError("singular ZIP Newton Jacobian", res, it) from None
        V = V - (step[:n] + 1j * step[n:])
    raise ConvergenceError("ZIP voltage Newton did not converge", res, max_iter)


# --------------------------------------------------------------------------
# voltages

def reconstruct_voltages(mats: NetworkMatrices, Psi_state, Psi_input, V_nc):
    """Complex voltages of all area buses (local order)."""
    Psi_state = np.asarray(Psi_state, dtype=complex)
    Psi_input = np.asarray(Psi_input, dtype=complex)
    V_nc = np.asarray(V_nc, dtype=complex)
    if (len(Psi_state) != mats.n_machines or len(Psi_input) != mats.n_pseudo
            or len(V_nc) != len(mats.nc_idx)):
        raise ValueError(
            f"dimension mismatch: got ({len(Psi_state)}, {len(Psi_input)}, {len(V_nc)}) sources, "
            f"expected ({mats.n_machines}, {mats.n_pseudo}, {len(mats.nc_idx)})")
    V = np.zeros(mats.n_buses, dtype=complex)
    Psi = np.concatenate([Psi_state, Psi_input])
    V[mats.elim] = mats.R_g @ Psi + mats.R_nc @ V_nc
    V[mats.pseudo_idx] = Psi_input
    V[mats.nc_idx] = V_nc
    return V


def nc_guess(mats: NetworkMatrices):
    return np.array([z.V0 for z in mats.zips], dtype=complex)


def _boundary_nc(mats, Psi_state, Psi_input, guess=None):
    Psi = np.concatenate([Psi_state, Psi_input])
    V_nc = solve_nc_voltages(mats, Psi, mats.zips, nc_guess(mats) if guess is None else guess)
    V = reconstruct_voltages(mats, Psi_state, Psi_input, V_nc)
    return V[mats.boundary_idx], V_nc


def area_boundary_voltage(mats: NetworkMatrices, Psi_state, Psi_input, guess=None):
    """Own-boundary complex voltages for given sources (ZIP buses solved inside)."""
    return _boundary_nc(mats, Psi_state, Psi_input, guess)[0]


def boundary_residual(psi_s, psi_e, state: BoundaryState, mats_s, mats_e):
    """Magnitude and angle residuals of the coupled boundary equations."""
    if state.p == 0:
        return 0.0
    vs = area_boundary_voltage(mats_s, psi_s, state.z_e)
    ve = area_boundary_voltage(mats_e, psi_e, state.z_s)
    lhs = np.concatenate([vs, ve])
    mag = np.abs(lhs) - np.concatenate([state.V_s, state.V_e])
    ang = np.angle(lhs * np.exp(-1j * np.concatenate([state.theta_s, state.theta_e])))
    return float(max(np.max(np.abs(mag)), np.max(np.abs(ang))))


def update_boundary(psi_s, psi_e, boundary: BoundaryState, mats_s: NetworkMatrices,
                    mats_e: NetworkMatrices, tol=1e-11, max_iter=30, fd_step=1e-7):
    """Solve for consistent boundary voltages of both areas by Newton's method.

    ``psi_s``/``psi_e`` are the machine internal voltage sources of the two
    areas at the new time; ``boundary`` (the previous solution) is the initial
    guess.  Returns the new :class:`BoundaryState`.
    """
    p = boundary.p
    if p == 0:
        return BoundaryState.empty()

    warm = {}

    # ZIP solves warm-start from the latest solution of the same area
    def Fs(z_e):
        v, warm["s"] = _boundary_nc(mats_s, psi_s, z_e, warm.get("s"))
        return v

    def Fe(z_s):
        v, warm["e"] = _boundary_nc(mats_e, psi_e, z_s, warm.get("e"))
        return v

    def G(zs, ze):
        return np.concatenate([Fs(ze) - zs, Fe(zs) - ze])

    zs, ze = boundary.z_s.copy(), boundary.z_e.copy()
    res = np.inf
    for it in range(max_iter + 1):
        g = G(zs, ze)
        res = np.max(np.abs(g))
        if res < tol:
            return BoundaryState.from_complex(zs, ze, boundary)
        if it == max_iter or not np.isfinite(res):
            break
        # block Jacobian: d(Fs)/d(ze) and d(Fe)/d(zs) by forward differences
        n = 2 * p
        J = -np.eye(2 * n)
        fs0, fe0 = g[:p] + zs, g[p:] + ze
        for k in range(n):
            d = np.zeros(p, dtype=complex)
            d[k % p] = fd_step if k < p else 1j * fd_step
            col_s = (Fs(ze + d) - fs0) / fd_step
            col_e = (Fe(zs + d) - fe0) / fd_step
            J[:p, n + k] = col_s.real
            J[p:n, n + k] = col_s.imag
            J[n:n + p, k] = col_e.real
            J[n + p:, k] = col_e.imag
        rhs = np.concatenate([g[:p].real, g[:p].imag, g[p:].real, g[p:].imag])
        try:
            step = np.linalg.solve(J, rhs)
        except np.linalg.LinAlgError:
            raise ConvergenceError("singular boundary Jacobian", res, it) from None
        zs = zs - (step[:p] + 1j * step[p:n])
        ze = ze - (step[n:n + p] + 1j * step[n + p:])
    raise ConvergenceError("boundary-bus Newton did not converge", float(res), max_iter)
