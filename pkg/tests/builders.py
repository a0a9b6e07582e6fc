"""Small hand-built cases and an independent dense network oracle."""

import numpy as np

from covbal.case import (AreaPartition, Branch, Bus, Exciter, Machine, PowerCase, ZipLoad,
                         _build_partition, validate_case)
from covbal.machines import initialize_setpoints

DC1 = dict(T_A=0.2, T_E=0.314, T_F=0.35, K_A=20.0, K_E=1.0, K_F=0.063, exc1=0.0039, exc2=1.555)


def machine(mid, bus, order=2, H=5.0, KD=2.0, xdp=0.25, S_N=100.0):
    return Machine(mid, bus, order, H, KD, 1.0, 0.9, xdp, xdp, 5.0, 0.6, S_N)


def smib_case(order=7, V1=1.03, th1=0.25, V2=1.0, th2=0.0, line=(0.01, 0.2, 0.04)):
    """Machine G1 at bus 1 (study) tied to bus 2 (external, classical G2)."""
    buses = (Bus(1, "pv", V1, th1), Bus(2, "slack", V2, th2))
    branches = (Branch("1-2", 1, 2, *line, tie=True),)
    machines = (machine("G1", 1, order, H=4.0, xdp=0.2), machine("G2", 2, 2, H=50.0, xdp=0.05))
    exciters = (Exciter("G1", **DC1),) if order == 7 else ()
    part = _build_partition(buses, branches, {1: "study", 2: "external"})
    case = PowerCase(buses, branches, machines, exciters, (), 100.0, part)
    validate_case(case)
    return initialize_setpoints(case)


def single_area_case(rng, n_bus=6, n_gen=2, n_zip=1, load=True):
    """Random connected single-area network (all buses in the study area).

    Voltages are arbitrary: machines absorb whatever injection they imply, so
    any voltage profile is an operating point once set-points are fixed.
    """
    ids = list(range(1, n_bus + 1))
    V = 1.0 + 0.05 * rng.uniform(-1, 1, n_bus)
    th = 0.1 * rng.uniform(-1, 1, n_bus)
    buses = []
    for k, i in enumerate(ids):
        pl, ql = (rng.uniform(0.1, 0.8), rng.uniform(0.0, 0.3)) if load and k >= n_gen else (0.0, 0.0)
        buses.append(Bus(i, "pq", float(V[k]), float(th[k]), pl, ql))
    branches = []
    for k in range(1, n_bus):  # spanning tree plus a few chords
        j = int(rng.integers(k))
        branches.append(Branch(f"b{k}", ids[j], ids[k], float(rng.uniform(0.005, 0.02)),
                               float(rng.uniform(0.05, 0.2)), float(rng.uniform(0.0, 0.05))))
    for c in range(n_bus // 3):
        a, b = rng.choice(n_bus, 2, replace=False)
        branches.append(Branch(f"c{c}", ids[a], ids[b], 0.01, 0.15, 0.02))
    machines = tuple(machine(f"G{i}", ids[i], 2, xdp=float(rng.uniform(0.1, 0.4))) for i in range(n_gen))
    zips = []
    for z in range(n_zip):
        k = n_gen + z
        p1, p2 = rng.dirichlet([1, 1, 1])[:2]
        q1, q2 = rng.dirichlet([1, 1, 1])[:2]
        zips.append(ZipLoad(ids[k], float(rng.uniform(0.2, 1.0)), float(rng.uniform(0.0, 0.3)),
                            float(p1), float(p2), float(1 - p1 - p2), float(q1), float(q2),
                            float(1 - q1 - q2), buses[k].V, buses[k].theta))
    part = AreaPartition(frozenset(ids), frozenset())
    case = PowerCase(tuple(buses), tuple(branches), machines, (), tuple(zips), 100.0, part)
    validate_case(case)
    return initialize_setpoints(case)


def dense_admittance(view):
    """Bus admittance plus one internal node per machine, built from scratch."""
    nb, ng = len(view.buses), len(view.machines)
    pos = {b.id: k for k, b in enumerate(view.buses)}
    pseudo = {g.bus for g in view.pseudo}
    Y = np.zeros((nb + ng, nb + ng), dtype=complex)

    def link(i, j, y):
        Y[i, i] += y
        Y[j, j] += y
        Y[i, j] -= y
        Y[j, i] -= y

    for br in view.branches:
        i, j = pos[br.from_bus], pos[br.to_bus]
        link(i, j, 1 / complex(br.r, br.x))
        Y[i, i] += 0.5j * br.b
        Y[j, j] += 0.5j * br.b
    zmap = {z.bus: z for z in view.zip_loads}
    for b in view.buses:
        if b.id in pseudo:
            continue
        k = pos[b.id]
        Y[k, k] += complex(b.G_sh, b.B_sh) + complex(b.P_load, -b.Q_load) / b.V ** 2
        if b.id in zmap:
            z = zmap[b.id]
            Y[k, k] += complex(z.p1 * z.P0, -z.q1 * z.Q0) / z.V0_mag ** 2
    for g, m in enumerate(view.machines):
        link(pos[m.bus], nb + g, 1 / (1j * m.x_dp * view.system_base_mva / m.S_N))
    return Y


def dense_solve(view, psi_gen, psi_pseudo, v_nc):
    """All bus voltages and machine currents with every source node fixed."""
    Y = dense_admittance(view)
    nb, ng = len(view.buses), len(view.machines)
    pos = {b.id: k for k, b in enumerate(view.buses)}
    fixed = {nb + g: psi_gen[g] for g in range(ng)}
    fixed.update({pos[g.bus]: psi_pseudo[k] for k, g in enumerate(view.pseudo)})
    fixed.update({pos[z.bus]: v_nc[k] for k, z in enumerate(view.zip_loads)})
    free = [k for k in range(nb + ng) if k not in fixed]
    fk = list(fixed)
    vf = np.array([fixed[k] for k in fk], dtype=complex)
    V = np.zeros(nb + ng, dtype=complex)
    V[fk] = vf
    if free:
        V[free] = np.linalg.solve(Y[np.ix_(free, free)], -Y[np.ix_(free, fk)] @ vf)
    I = Y @ V
    return V[:nb], I[nb:]
