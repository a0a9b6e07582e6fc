from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.optimize import root

from covbal.case import (AreaPartition, Branch, Bus, PowerCase, ZipLoad, partition, validate_case,
                         whole_view)
from covbal.machines import AreaModel, operating_point
from covbal.network import (BoundaryState, ConvergenceError, FaultSpec, NetworkError, ZIP_SWITCH,
                            ZipParams, boundary_residual, build_matrices, nc_residual,
                            reconstruct_voltages, solve_nc_voltages, update_boundary,
                            zip_injection)

from builders import dense_admittance, dense_solve, machine, single_area_case


def _kron_oracle(view):
    """Dense block elimination onto [internal nodes, pseudo buses, ZIP buses]."""
    Y = dense_admittance(view)
    nb = len(view.buses)
    pos = {b.id: k for k, b in enumerate(view.buses)}
    src = [nb + g for g in range(len(view.machines))] + [pos[g.bus] for g in view.pseudo]
    ret = src + [pos[z.bus] for z in view.zip_loads]
    elim = [k for k in range(nb) if k not in ret]
    Yee = Y[np.ix_(elim, elim)]
    R = -np.linalg.inv(Yee) @ Y[np.ix_(elim, ret)]
    Yred = Y[np.ix_(ret, ret)] + Y[np.ix_(ret, elim)] @ R
    return Yred, R, len(src)


def test_single_generator_grounded_terminal():
    # terminal bus bolted to ground: the source sees only its own reactance
    buses = (Bus(1, "slack", 1.0, 0.0),)
    case = PowerCase(buses, (), (machine("G1", 1, xdp=0.25),), (), (), 100.0,
                     AreaPartition(frozenset({1}), frozenset()))
    view = whole_view(case)
    mats = build_matrices(view, FaultSpec(bus=1, branch="", stage=1, shunt=1e13))
    assert mats.Y_g.shape == (1, 1)
    assert mats.Y_g[0, 0] == pytest.approx(1 / 0.25j, rel=1e-11)


def test_no_zip_gives_empty_blocks(rng):
    mats = build_matrices(whole_view(single_area_case(rng, n_zip=0)))
    for M in (mats.Y_gnc, mats.R_nc):
        assert M.shape[1] == 0
    assert mats.Y_ncg.shape[0] == 0 and mats.Y_nc.shape == (0, 0)


def test_three_bus_chain_matches_dense_elimination():
    buses = (Bus(1, "pv", 1.02, 0.1), Bus(2, "pq", 0.99, 0.02, 0.4, 0.1), Bus(3, "pq", 0.97, -0.05))
    branches = (Branch("a", 1, 2, 0.01, 0.1, 0.02), Branch("b", 2, 3, 0.02, 0.15, 0.01))
    z = ZipLoad(3, 0.8, 0.2, 0.3, 0.3, 0.4, 0.2, 0.3, 0.5, 0.97, -0.05)
    case = PowerCase(buses, branches, (machine("G1", 1),), (), (z,), 100.0,
                     AreaPartition(frozenset({1, 2, 3}), frozenset()))
    validate_case(case)
    view = whole_view(case)
    mats = build_matrices(view)
    Yred, R, ns = _kron_oracle(view)
    np.testing.assert_allclose(mats.Y_g, Yred[:ns, :ns], atol=1e-12)
    np.testing.assert_allclose(mats.Y_gnc, Yred[:ns, ns:], atol=1e-12)
    np.testing.assert_allclose(mats.Y_ncg, Yred[ns:, :ns], atol=1e-12)
    np.testing.assert_allclose(mats.Y_nc, Yred[ns:, ns:], atol=1e-12)
    np.testing.assert_allclose(mats.R_g, R[:, :ns], atol=1e-12)
    np.testing.assert_allclose(mats.R_nc, R[:, ns:], atol=1e-12)


@given(seed=st.integers(0, 2**31 - 1), n_bus=st.integers(2, 8), n_zip=st.integers(0, 2))
def test_kron_currents_match_dense_solve(seed, n_bus, n_zip):
    rng = np.random.default_rng(seed)
    n_gen = int(rng.integers(1, n_bus + 1))
    n_zip = min(n_zip, n_bus - n_gen)
    view = whole_view(single_area_case(rng, n_bus, n_gen, n_zip))
    mats = build_matrices(view)
    psi = (1 + 0.1 * rng.standard_normal(n_gen)) * np.exp(1j * rng.uniform(-1, 1, n_gen))
    vnc = (1 + 0.05 * rng.standard_normal(n_zip)) * np.exp(1j * rng.uniform(-1, 1, n_zip))
    V_ref, I_ref = dense_solve(view, psi, [], vnc)
    I = mats.Y_g @ psi + mats.Y_gnc @ vnc
    assert np.max(np.abs(I - I_ref)) < 1e-10
    V = reconstruct_voltages(mats, psi, [], vnc)
    assert np.max(np.abs(V - V_ref)) < 1e-10


def test_islanded_bus_is_reported():
    buses = (Bus(1, "pv", 1.0, 0.0), Bus(2, "pq", 1.0, 0.0), Bus(3, "pq", 1.0, 0.0), Bus(4, "pq", 1.0, 0.0))
    branches = (Branch("a", 1, 2, 0.01, 0.1), Branch("b", 3, 4, 0.01, 0.1))
    case = PowerCase(buses, branches, (machine("G1", 1),), (), (), 100.0,
                     AreaPartition(frozenset({1, 2, 3, 4}), frozenset()))
    with pytest.raises(NetworkError, match="islanded"):
        build_matrices(whole_view(case))


# --------------------------------------------------------------------------
# ZIP Newton

def _scalar_zip_case(p, q):
    """One machine and one ZIP bus joined by a line."""
    buses = (Bus(1, "pv", 1.02, 0.1), Bus(2, "pq", 0.96, -0.05))
    z = ZipLoad(2, 0.9, 0.3, *p, *q, 0.96, -0.05)
    case = PowerCase(buses, (Branch("a", 1, 2, 0.01, 0.12, 0.02),), (machine("G1", 1),), (), (z,),
                     100.0, AreaPartition(frozenset({1, 2}), frozenset()))
    validate_case(case)
    return case


def test_pure_impedance_zip_is_linear():
    case = _scalar_zip_case((1.0, 0.0, 0.0), (1.0, 0.0, 0.0))
    mats = build_matrices(whole_view(case))
    psi = np.array([1.1 * np.exp(0.3j)])
    closed = np.linalg.solve(mats.Y_nc, -mats.Y_ncg @ psi)
    V = solve_nc_voltages(mats, psi, mats.zips, np.array([1.0 + 0j]), max_iter=1)
    np.testing.assert_allclose(V, closed, atol=1e-11)


def test_zip_matches_scalar_continuation_oracle():
    p, q = (0.2, 0.3, 0.5), (0.1, 0.4, 0.5)
    case = _scalar_zip_case(p, q)
    mats = build_matrices(whole_view(case))
    z = case.zip_loads[0]
    psi = np.array([1.08 * np.exp(0.35j)])
    a = complex((mats.Y_ncg @ psi)[0])
    y = complex(mats.Y_nc[0, 0])

    def injection(V, lam):
        # load current conj(S/V); S scales with |V| (I part) or is fixed (P part)
        S = lam * (complex(p[1] * z.P0, q[1] * z.Q0) * abs(V) / z.V0_mag + complex(p[2] * z.P0, q[2] * z.Q0))
        return -np.conj(S / V)

    w = np.array([1.0, 0.0])
    for lam in np.linspace(0.0, 1.0, 21):
        def F(v, lam=lam):
            V = complex(*v)
            r = a + y * V - injection(V, lam)
            return [r.real, r.imag]
        w = root(F, w, method="hybr", tol=1e-14).x
    V_oracle = complex(*w)
    V = solve_nc_voltages(mats, psi, mats.zips, np.array([z.V0]))
    assert abs(V[0] - V_oracle) < 1e-10


def test_zip_residual_recomputed(desk):
    study, _ = partition(desk)
    mats = build_matrices(study)
    model = AreaModel(study, operating_point(desk))
    rng = np.random.default_rng(3)
    for _ in range(10):
        x = model.x0 * (1 + 0.02 * rng.standard_normal(len(model.x0)))
        Psi = np.concatenate([model.psi_state(x), model.psi_input(model.u0)])
        V = solve_nc_voltages(mats, Psi, mats.zips, np.array([z.V0 for z in mats.zips]))
        # independent residual: currents through the reduced matrices minus ZIP law
        I_net = mats.Y_ncg @ Psi + mats.Y_nc @ V
        I_zip = zip_injection(V, list(mats.zips))
        assert np.max(np.abs(I_net - I_zip)) < 1e-10
        assert np.max(np.abs(nc_residual(mats, Psi, V, mats.zips))) < 1e-10


def test_zip_fixed_point_at_operating_point(desk):
    study, _ = partition(desk)
    mats = build_matrices(study)
    model = AreaModel(study, operating_point(desk))
    Psi = np.concatenate([model.psi_state(model.x0), model.psi_input(model.u0)])
    V0 = np.array([z.V0 for z in mats.zips])
    V = solve_nc_voltages(mats, Psi, mats.zips, V0 * 1.05)
    assert np.max(np.abs(V - V0)) < 1e-10


def test_low_voltage_branch_is_linear():
    z = _scalar_zip_case((0.2, 0.3, 0.5), (0.1, 0.4, 0.5)).zip_loads[0]
    zp = ZipParams([z])
    V = np.array([0.3 * np.exp(0.7j)])
    assert abs(V[0]) < ZIP_SWITCH
    np.testing.assert_allclose(zip_injection(V, [z]), zp.k * V, atol=1e-15)
    np.testing.assert_allclose(zip_injection(1.5 * V, [z]), 1.5 * zp.k * V, atol=1e-15)


def test_newton_failure_reports_residual():
    case = _scalar_zip_case((0.2, 0.3, 0.5), (0.1, 0.4, 0.5))
    mats = build_matrices(whole_view(case))
    with pytest.raises(ConvergenceError, match="residual"):
        solve_nc_voltages(mats, np.array([1.0 + 0j]), mats.zips, np.array([1.0 + 0j]), max_iter=0)


# --------------------------------------------------------------------------
# reconstruction

def test_zero_sources_give_zero_voltages(rng):
    view = whole_view(single_area_case(rng, 6, 2, 1))
    mats = build_matrices(view)
    V = reconstruct_voltages(mats, np.zeros(2), np.zeros(0), np.zeros(1))
    assert np.all(V == 0)


def test_flat_network_reconstructs_flat():
    rng = np.random.default_rng(8)
    case = single_area_case(rng, 7, 3, 0, load=False)
    case = replace(case, branches=tuple(replace(b, b=0.0) for b in case.branches),
                   buses=tuple(replace(b, V=1.0, theta=0.0) for b in case.buses))
    mats = build_matrices(whole_view(case))
    V = reconstruct_voltages(mats, np.ones(3), np.zeros(0), np.zeros(0))
    assert np.max(np.abs(V - 1.0)) < 1e-12


def test_reconstruction_dimension_check(rng):
    mats = build_matrices(whole_view(single_area_case(rng, 5, 2, 1)))
    with pytest.raises(ValueError, match="dimension"):
        reconstruct_voltages(mats, np.ones(1), np.zeros(0), np.ones(1))


def test_study_area_reconstruction_matches_dense(desk):
    study, _ = partition(desk)
    mats = build_matrices(study)
    model = AreaModel(study, operating_point(desk))
    x = model.x0.copy()
    x[model.layout.index("delta", "G2")] += 0.2
    V = model.bus_voltages(x, model.u0)
    ps, pi = model.psi_state(x), model.psi_input(model.u0)
    V_ref, _ = dense_solve(study, ps, pi, V[mats.nc_idx])
    assert np.max(np.abs(V - V_ref)) < 1e-10


# --------------------------------------------------------------------------
# boundary coupling

def _areas(desk):
    init = operating_point(desk)
    study, ext = partition(desk)
    return AreaModel(study, init), AreaModel(ext, init)


def test_boundary_fixed_point(desk):
    ms, me = _areas(desk)
    part = desk.partition
    v = lambda ids: np.array([desk.bus(b).voltage for b in ids])  # noqa: E731
    b0 = BoundaryState.from_complex(v(part.B_s_bound), v(part.B_e_bound))
    out = update_boundary(ms.psi_state(ms.x0), me.psi_state(me.x0), b0,
                          ms.stages[0], me.stages[0])
    for a, b in ((out.V_s, b0.V_s), (out.theta_s, b0.theta_s), (out.V_e, b0.V_e), (out.theta_e, b0.theta_e)):
        assert np.max(np.abs(a - b)) < 1e-9


def test_boundary_without_ties():
    out = update_boundary(np.zeros(1), np.zeros(1), BoundaryState.empty(), None, None)
    assert out.p == 0


def test_boundary_matches_monolithic_solve(desk):
    from covbal.cosim import MonolithicSystem

    ms, me = _areas(desk)
    mono = MonolithicSystem(desk)
    whole = mono.model(None)
    rng = np.random.default_rng(0)
    xs = ms.x0.copy()
    xe = me.x0.copy()
    xs[ms.layout.slots["delta"]] += 0.05 * rng.standard_normal(3)
    xe[me.layout.slots["delta"]] += 0.05 * rng.standard_normal(4)
    xs[ms.layout.slots["eqp"]] *= 1.02
    part = desk.partition
    v = lambda ids: np.array([desk.bus(b).voltage for b in ids])  # noqa: E731
    b0 = BoundaryState.from_complex(v(part.B_s_bound), v(part.B_e_bound))
    out = update_boundary(ms.psi_state(xs), me.psi_state(xe), b0, ms.stages[0], me.stages[0])
    assert boundary_residual(ms.psi_state(xs), me.psi_state(xe), out, ms.stages[0], me.stages[0]) < 1e-9

    xw = np.empty(whole.layout.n)
    xw[mono.cols_s] = xs
    xw[mono.cols_e] = xe
    Vw = whole.bus_voltages(xw, np.zeros(0))
    idx = whole.area.index
    ref_s = Vw[[idx[b] for b in part.B_s_bound]]
    ref_e = Vw[[idx[b] for b in part.B_e_bound]]
    assert np.max(np.abs(out.z_s - ref_s)) < 1e-9
    assert np.max(np.abs(out.z_e - ref_e)) < 1e-9
