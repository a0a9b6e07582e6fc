"""Generator dynamics for an area: two-axis machines with DC1 exciters
(7th order), two-axis machines with frozen field voltage (4th order) and
classical machines (2nd order), coupled through the reduced network.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .case import AreaView, PowerCase, whole_view
from .network import (NetworkMatrices, build_matrices, nc_guess, reconstruct_voltages,
                      solve_nc_voltages, zip_injection)

__all__ = [
    "OMEGA0", "KINDS", "StateLayout", "MachineInit", "operating_point",
    "initialize_setpoints", "AreaModel", "rhs", "outputs", "machine_sources",
]

OMEGA0 = 2 * math.pi * 60.0
KINDS = ("delta", "omega", "eqp", "edp", "VR", "Efd", "Rf")
_MIN_ORDER = {"delta": 2, "omega": 2, "eqp": 4, "edp": 4, "VR": 7, "Efd": 7, "Rf": 7}


class StateLayout:
    """Flat state vector grouped by variable kind: [δ; ω; e'q; e'd; V_R; E_fd; R_f].

    A kind only holds the machines whose model order carries that state; the
    remaining entries are frozen and kept out of the vector.
    """

    def __init__(self, machines):
        self.machine_ids = tuple(m.id for m in machines)
        orders = np.array([m.model_order for m in machines], dtype=int)
        self.rows = {}   # kind -> machine positions
        self.slots = {}  # kind -> vector positions
        pos = 0
        for kind in KINDS:
            rows = np.flatnonzero(orders >= _MIN_ORDER[kind])
            self.rows[kind] = rows
            self.slots[kind] = np.arange(pos, pos + len(rows))
            pos += len(rows)
        self.n = pos
        self._lookup = {(kind, self.machine_ids[r]): int(s)
                        for kind in KINDS for r, s in zip(self.rows[kind], self.slots[kind])}

    def index(self, kind, machine_id) -> int:
        return self._lookup[(kind, machine_id)]

    def labels(self):
        out = [None] * self.n
        for (kind, mid), s in self._lookup.items():
            out[s] = (kind, mid)
        return out

    def kind_ids(self, kind):
        return [self.machine_ids[r] for r in self.rows[kind]]

    def types(self):
        return [lab[0] for lab in self.labels()]

    def pack(self, values: dict) -> np.ndarray:
        x = np.empty(self.n)
        for kind in KINDS:
            x[self.slots[kind]] = values[kind][self.rows[kind]]
        return x

    def __eq__(self, other):
        return isinstance(other, StateLayout) and self._lookup == other._lookup

    def __len__(self):
        return self.n


@dataclass(frozen=True)
class MachineInit:
    delta: float
    omega: float
    eqp: float
    edp: float
    VR: float
    Efd: float
    Rf: float
    T_m: float
    exc3: float
    current: complex  # terminal current injection, system base


def _saturation(exc1, exc2, Efd):
    return exc1 * np.exp(exc2 * np.abs(Efd)) * np.sign(Efd)


def _bus_injections(case: PowerCase):
    """Current injected into each bus by its machine at the stored operating point."""
    view = whole_view(case)
    nb = len(view.buses)
    idx = view.index
    V = np.array([b.voltage for b in view.buses])
    Y = np.zeros((nb, nb), dtype=complex)
    for br in view.branches:
        i, j = idx[br.from_bus], idx[br.to_bus]
        y = br.y_series
        Y[i, i] += y + 0.5j * br.b
        Y[j, j] += y + 0.5j * br.b
        Y[i, j] -= y
        Y[j, i] -= y
    for k, b in enumerate(view.buses):
        Y[k, k] += complex(b.G_sh, b.B_sh) + complex(b.P_load, -b.Q_load) / b.V ** 2
    for z in view.zip_loads:
        k = idx[z.bus]
        Y[k, k] += complex(z.p1 * z.P0, -z.q1 * z.Q0) / z.V0_mag ** 2
    I = Y @ V
    if view.zip_loads:
        nc = np.array([idx[z.bus] for z in view.zip_loads])
        I[nc] -= zip_injection(V[nc], view.zip_loads)
    return {b.id: (V[k], I[k]) for k, b in enumerate(view.buses)}


def operating_point(case: PowerCase) -> dict:
    """Machine states consistent with the stored (pre-solved) bus voltages.

    Returns ``{machine_id: MachineInit}``.  ``T_m`` and the exciter reference
    ``exc3`` are the values that make every right-hand side vanish.
    """
    inj = _bus_injections(case)
    sb = case.system_base_mva
    out = {}
    for m in case.machines:
        V, I = inj[m.bus]
        ratio = sb / m.S_N
        Im = I * ratio
        Psi = V + 1j * m.x_dp * Im
        if m.model_order == 2:
            delta, eqp, edp = float(np.angle(Psi)), float(abs(Psi)), 0.0
        else:
            delta = float(np.angle(Psi + 1j * (m.x_q - m.x_qp) * Im))
            rot = Psi * np.exp(-1j * delta)
            eqp, edp = float(rot.real), float(-rot.imag)
        rc = Im * np.exp(-1j * delta)
        iq, id_ = rc.real, -rc.imag
        eq = eqp - m.x_dp * id_
        ed = edp + m.x_qp * iq
        Te = ratio * (eq * iq + ed * id_)
        Efd = eqp + (m.x_d - m.x_dp) * id_ if m.model_order >= 4 else 0.0
        VR = Rf = exc3 = 0.0
        exc = case.exciter_for(m.id)
        if m.model_order == 7:
            SE = float(_saturation(exc.exc1, exc.exc2, Efd))
            VR = exc.K_E * Efd + SE
            Rf = Efd
            exc3 = VR / exc.K_A + math.hypot(ed, eq)
        elif exc is not None:
            exc3 = exc.exc3
        out[m.id] = MachineInit(delta, OMEGA0, eqp, edp, VR, Efd, Rf, float(Te), exc3, complex(I))
    return out


def initialize_setpoints(case: PowerCase) -> PowerCase:
    """Return a copy of ``case`` with T_m and exc3 set for equilibrium."""
    init = operating_point(case)
    machines = [replace(m, T_m=init[m.id].T_m) for m in case.machines]
    exciters = [replace(e, exc3=init[e.machine].exc3) for e in case.exciters]
    return replace(case, machines=tuple(machines), exciters=tuple(exciters))


# --------------------------------------------------------------------------
# area model

def machine_sources(delta, eqp, edp):
    """Internal voltage sources (e'q - j e'd) exp(jδ)."""
    return (eqp - 1j * edp) * np.exp(1j * delta)


class AreaModel:
    """Bound dynamics of one area.

    ``f(x, u)`` and ``h(x, u)`` take the flat state vector and the input
    ``u = [V; θ]`` of the opposite boundary buses; outputs are the own
    boundary ``[V; θ]``.  Network stages (fault sequence) are selected with
    the ``stage`` argument.
    """

    def __init__(self, area: AreaView, init: dict, stages: dict | None = None):
        self.area = area
        self.layout = StateLayout(area.machines)
        self.stages = stages if stages is not None else {0: build_matrices(area)}
        ms = area.machines
        sb = area.system_base_mva
        self.ratio = np.array([sb / m.S_N for m in ms])
        self.H = np.array([m.H for m in ms])
        self.KD = np.array([m.K_D for m in ms])
        self.xd = np.array([m.x_d for m in ms])
        self.xq = np.array([m.x_q for m in ms])
        self.xdp = np.array([m.x_dp for m in ms])
        self.xqp = np.array([m.x_qp for m in ms])
        self.Td0p = np.array([m.T_d0p for m in ms])
        self.Tq0p = np.array([m.T_q0p for m in ms])
        self.Tm = np.array([m.T_m for m in ms])
        self.ng = len(ms)
        self.p = len(area.pseudo)
        self._vnc = None  # warm start for the ZIP Newton

        x0 = {k: np.array([getattr(init[m.id], k) for m in ms], dtype=float) for k in KINDS}
        self.frozen = x0
        self.x0 = self.layout.pack(x0) if self.ng else np.zeros(0)

        L = self.layout
        self._r4 = L.rows["eqp"]
        self._r7 = L.rows["VR"]
        exc = [area.exciter_for(ms[r].id) for r in self._r7]
        self.TA = np.array([e.T_A for e in exc])
        self.TE = np.array([e.T_E for e in exc])
        self.TF = np.array([e.T_F for e in exc])
        self.KA = np.array([e.K_A for e in exc])
        self.KE = np.array([e.K_E for e in exc])
        self.KF = np.array([e.K_F for e in exc])
        self.exc1 = np.array([e.exc1 for e in exc])
        self.exc2 = np.array([e.exc2 for e in exc])
        self.exc3 = np.array([e.exc3 for e in exc])

        bmap = {b.id: b for b in area.buses}
        vin = np.array([bmap[g.bus].voltage for g in area.pseudo], dtype=complex)
        self.u0 = np.concatenate([np.abs(vin), np.angle(vin)])
        self.input_types = ["V"] * self.p + ["theta"] * self.p
        self.state_types = L.types()

    # -- helpers -------------------------------------------------------
    def unpack(self, x):
        L = self.layout
        delta = x[L.slots["delta"]]
        omega = x[L.slots["omega"]]
        eqp = self.frozen["eqp"].copy()
        edp = self.frozen["edp"].copy()
        eqp[self._r4] = x[L.slots["eqp"]]
        edp[self._r4] = x[L.slots["edp"]]
        return delta, omega, eqp, edp

    def psi_state(self, x):
        delta, _, eqp, edp = self.unpack(x)
        return machine_sources(delta, eqp, edp)

    def psi_input(self, u):
        return u[:self.p] * np.exp(1j * u[self.p:])

    def network(self, x, u, mats):
        """(Psi_state, Psi_input, V_nc, terminal currents) at a state/input pair."""
        ps = self.psi_state(x)
        pi = self.psi_input(u)
        Psi = np.concatenate([ps, pi])
        guess = self._vnc if self._vnc is not None and len(self._vnc) == len(mats.nc_idx) else nc_guess(mats)
        V_nc = solve_nc_voltages(mats, Psi, mats.zips, guess)
        self._vnc = V_nc
        It = mats.Y_g[:self.ng] @ Psi + mats.Y_gnc[:self.ng] @ V_nc
        return ps, pi, V_nc, It

    # -- dynamics ------------------------------------------------------
    def f(self, x, u, stage=0):
        return rhs(self, self.stages[stage], x, u)

    def h(self, x, u, stage=0):
        return outputs(self, self.stages[stage], x, u)

    def bus_voltages(self, x, u, stage=0, mats=None):
        mats = self.stages[stage] if mats is None else mats
        ps, pi, V_nc, _ = self.network(x, u, mats)
        return reconstruct_voltages(mats, ps, pi, V_nc)


def rhs(model: AreaModel, mats: NetworkMatrices, x, u, t=0.0):
    """State derivative of an area (autonomous; ``t`` is accepted for solvers)."""
    L = model.layout
    if not np.all(np.isfinite(x)):
        raise FloatingPointError("non-finite state entering the machine equations")
    delta, omega, eqp, edp = model.unpack(x)
    _, _, _, It = model.network(x, u, mats)
    if not np.all(np.isfinite(It)):
        raise FloatingPointError("non-finite terminal current")
    iR, iI = It.real, It.imag
    s, c = np.sin(delta), np.cos(delta)
    iq = model.ratio * (iI * s + iR * c)
    id_ = model.ratio * (iR * s - iI * c)
    eq = eqp - model.xdp * id_
    ed = edp + model.xqp * iq
    Te = model.ratio * (eq * iq + ed * id_)
    if not np.all(np.isfinite(Te)):
        raise FloatingPointError("non-finite electrical torque")

    dx = np.empty(L.n)
    dx[L.slots["delta"]] = omega - OMEGA0
    dx[L.slots["omega"]] = OMEGA0 / (2 * model.H) * (
        model.Tm - Te - model.KD / OMEGA0 * (omega - OMEGA0))

    r4, r7 = model._r4, model._r7
    Efd = model.frozen["Efd"].copy()
    if len(r7):
        VR = x[L.slots["VR"]]
        Efd7 = x[L.slots["Efd"]]
        Rf = x[L.slots["Rf"]]
        Efd[r7] = Efd7
    if len(r4):
        dx[L.slots["eqp"]] = (Efd[r4] - eqp[r4] - (model.xd[r4] - model.xdp[r4]) * id_[r4]) / model.Td0p[r4]
        dx[L.slots["edp"]] = (-edp[r4] + (model.xq[r4] - model.xqp[r4]) * iq[r4]) / model.Tq0p[r4]
    if len(r7):
        VFB = model.KF / model.TF * (Efd7 - Rf)
        VTR = np.sqrt(ed[r7] ** 2 + eq[r7] ** 2)
        VA = -VFB + model.exc3 - VTR
        SE = _saturation(model.exc1, model.exc2, Efd7)
        dx[L.slots["VR"]] = (-VR + model.KA * VA) / model.TA
        dx[L.slots["Efd"]] = (VR - model.KE * Efd7 - SE) / model.TE
        dx[L.slots["Rf"]] = (-Rf + Efd7) / model.TF
    return dx


def outputs(model: AreaModel, mats: NetworkMatrices, x, u):
    """Own-boundary outputs ``[V; θ]``."""
    if len(mats.boundary_idx) == 0:
        return np.zeros(0)
    Vb = model.bus_voltages(x, u, mats=mats)[mats.boundary_idx]
    return np.concatenate([np.abs(Vb), np.angle(Vb)])


def electrical_torque(model: AreaModel, x, u, stage=0):
    delta, _, eqp, edp = model.unpack(x)
    _, _, _, It = model.network(x, u, model.stages[stage])
    s, c = np.sin(delta), np.cos(delta)
    iq = model.ratio * (It.imag * s + It.real * c)
    id_ = model.ratio * (It.real * s - It.imag * c)
    return model.ratio * ((eqp - model.xdp * id_) * iq + (edp + model.xqp * iq) * id_)
