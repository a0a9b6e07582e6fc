"""Generate the two-area desk fixture shipped in src/covbal/data.

Study area: buses 1-8, three 7th-order machines with DC1 exciters and one
ZIP bus.  External area: buses 101-108, one 4th-order and three classical
machines.  Two tie-lines (7-101, 8-102).  The operating point comes from a
small power flow done here; the package itself only accepts solved
cases.

    python scripts/make_desk_case.py [output-path]
"""

import sys
from pathlib import Path

import numpy as np
from scipy.optimize import root

from covbal.case import (Branch, Bus, Exciter, Machine, PowerCase, ZipLoad, _build_partition,
                         save_case, validate_case)
from covbal.machines import initialize_setpoints

SLACK_ANGLE = 0.5

# id, type, V setpoint, P_gen, P_load, Q_load
BUSES = [
    (1, "slack", 1.04, 0.0, 0.0, 0.0),
    (2, "pv", 1.025, 1.2, 0.0, 0.0),
    (3, "pv", 1.025, 1.0, 0.0, 0.0),
    (4, "pq", 1.0, 0.0, 1.0, 0.30),
    (5, "pq", 1.0, 0.0, 0.0, 0.0),   # ZIP bus
    (6, "pq", 1.0, 0.0, 1.0, 0.35),
    (7, "pq", 1.0, 0.0, 0.5, 0.20),
    (8, "pq", 1.0, 0.0, 0.5, 0.10),
    (101, "pq", 1.0, 0.0, 0.5, 0.10),
    (102, "pq", 1.0, 0.0, 0.4, 0.10),
    (103, "pv", 1.03, 1.5, 0.0, 0.0),
    (104, "pv", 1.02, 1.0, 0.0, 0.0),
    (105, "pv", 1.02, 0.8, 0.0, 0.0),
    (106, "pv", 1.02, 0.8, 0.0, 0.0),
    (107, "pq", 1.0, 0.0, 1.5, 0.40),
    (108, "pq", 1.0, 0.0, 1.2, 0.30),
]
ZIP = dict(bus=5, P0=1.5, Q0=0.5, p1=0.2, p2=0.3, p3=0.5, q1=0.2, q2=0.3, q3=0.5)

LINES = [
    ("1-4", 1, 4, 0.008, 0.08, 0.05), ("2-5", 2, 5, 0.008, 0.08, 0.05),
    ("3-6", 3, 6, 0.008, 0.08, 0.05), ("4-5", 4, 5, 0.01, 0.10, 0.06),
    ("5-6", 5, 6, 0.01, 0.10, 0.06), ("4-6", 4, 6, 0.012, 0.12, 0.08),
    ("6-7", 6, 7, 0.01, 0.10, 0.06), ("5-8", 5, 8, 0.01, 0.10, 0.06),
    ("4-8", 4, 8, 0.012, 0.12, 0.06),
    ("101-103", 101, 103, 0.008, 0.08, 0.05), ("102-104", 102, 104, 0.008, 0.08, 0.05),
    ("101-102", 101, 102, 0.01, 0.10, 0.06), ("103-105", 103, 105, 0.01, 0.10, 0.06),
    ("104-106", 104, 106, 0.01, 0.10, 0.06), ("105-107", 105, 107, 0.008, 0.08, 0.05),
    ("106-108", 106, 108, 0.008, 0.08, 0.05), ("107-108", 107, 108, 0.012, 0.12, 0.06),
    ("101-107", 101, 107, 0.012, 0.12, 0.06), ("102-108", 102, 108, 0.012, 0.12, 0.06),
]
TIES = [("7-101", 7, 101, 0.01, 0.12, 0.04), ("8-102", 8, 102, 0.01, 0.12, 0.04)]

MACHINES = [
    # id, bus, order, H, KD, xd, xq, xdp, xqp, Td0p, Tq0p
    ("G1", 1, 7, 6.5, 15.0, 0.8958, 0.8645, 0.1198, 0.1198, 6.0, 0.535),
    ("G2", 2, 7, 5.0, 15.0, 1.3125, 1.2578, 0.1813, 0.1813, 5.89, 0.6),
    ("G3", 3, 7, 4.0, 15.0, 1.0, 0.95, 0.15, 0.15, 5.5, 0.55),
    ("G103", 103, 4, 5.5, 15.0, 1.0, 0.9, 0.25, 0.25, 5.0, 0.6),
    ("G104", 104, 2, 4.5, 15.0, 1.0, 1.0, 0.30, 0.30, 5.0, 0.5),
    ("G105", 105, 2, 4.0, 15.0, 1.0, 1.0, 0.28, 0.28, 5.0, 0.5),
    ("G106", 106, 2, 4.0, 15.0, 1.0, 1.0, 0.32, 0.32, 5.0, 0.5),
]
# TA, TE, TF, KA, KE, KF, exc1, exc2
DC1 = (0.2, 0.314, 0.35, 20.0, 1.0, 0.063, 0.0039, 1.555)


def _ybus(ids):
    idx = {b: k for k, b in enumerate(ids)}
    Y = np.zeros((len(ids), len(ids)), dtype=complex)
    for _, f, t, r, x, b in LINES + TIES:
        i, j = idx[f], idx[t]
        y = 1 / complex(r, x)
        Y[i, i] += y + 0.5j * b
        Y[j, j] += y + 0.5j * b
        Y[i, j] -= y
        Y[j, i] -= y
    return Y


def solve_power_flow():
    ids = [b[0] for b in BUSES]
    Y = _ybus(ids)
    typ = [b[1] for b in BUSES]
    Vset = np.array([b[2] for b in BUSES])
    Pg = np.array([b[3] for b in BUSES])
    Pl = np.array([b[4] for b in BUSES])
    Ql = np.array([b[5] for b in BUSES])
    k = ids.index(ZIP["bus"])
    Pl[k] += ZIP["P0"]
    Ql[k] += ZIP["Q0"]
    ang = [i for i, t in enumerate(typ) if t != "slack"]
    mag = [i for i, t in enumerate(typ) if t == "pq"]

    def unpack(z):
        th = np.full(len(ids), SLACK_ANGLE)
        V = Vset.copy()
        th[ang] = z[:len(ang)]
        V[mag] = z[len(ang):]
        return V * np.exp(1j * th)

    def mismatch(z):
        V = unpack(z)
        S = V * np.conj(Y @ V)
        dP = S.real - (Pg - Pl)
        dQ = S.imag + Ql
        return np.concatenate([dP[ang], dQ[mag]])

    z0 = np.concatenate([np.full(len(ang), SLACK_ANGLE), np.ones(len(mag))])
    sol = root(mismatch, z0, method="hybr", options={"xtol": 1e-13})
    if np.max(np.abs(mismatch(sol.x))) > 1e-11:
        raise RuntimeError(f"power flow failed: {sol.message}")
    return dict(zip(ids, unpack(sol.x)))


def build_case():
    V = solve_power_flow()
    buses = tuple(Bus(i, t, float(abs(V[i])), float(np.angle(V[i])), pl, ql)
                  for i, t, _, _, pl, ql in BUSES)
    branches = tuple(Branch(n, f, t, r, x, b, False) for n, f, t, r, x, b in LINES)
    branches += tuple(Branch(n, f, t, r, x, b, True) for n, f, t, r, x, b in TIES)
    machines = tuple(Machine(m[0], m[1], m[2], *m[3:], S_N=100.0) for m in MACHINES)
    exciters = tuple(Exciter(m[0], *DC1) for m in MACHINES if m[2] == 7)
    zv = V[ZIP["bus"]]
    zips = (ZipLoad(**ZIP, V0_mag=float(abs(zv)), V0_ang=float(np.angle(zv))),)
    labels = {b[0]: ("study" if b[0] < 100 else "external") for b in BUSES}
    part = _build_partition(buses, branches, labels)
    case = PowerCase(buses, branches, machines, exciters, zips, 100.0, part)
    validate_case(case)
    return initialize_setpoints(case)


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    out = Path(argv[0]) if argv else (Path(__file__).resolve().parents[1]
                                      / "src" / "covbal" / "data" / "desk_two_area.case")
    case = build_case()
    save_case(case, out)
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
