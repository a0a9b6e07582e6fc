from dataclasses import replace

import numpy as np
import pytest

from covbal.balance import balance_laub
from covbal.cosim import (METHODS, CosimError, accuracy, compare_methods, external_system,
                          reduce_linearized, run_cosim, timing_table)

from conftest import DESK_FAULT, REFERENCE

SHORT = (0.0, 1.0)


def trajectories(run):
    return np.hstack([run.x_s, run.x_e, run.V_s, run.theta_s, run.V_e, run.theta_e])


def full_order(desk):
    _, sys = external_system(desk)
    return replace(reduce_linearized(desk, n_red=sys.n), model="nonlinear")


def test_equilibrium_every_method(desk, desk_nm, desk_lm):
    for method in METHODS:
        run = run_cosim(desk, method, desk_lm if method.endswith("LM") else desk_nm)
        X = trajectories(run)
        assert run.t[-1] == 15.0
        assert np.max(np.abs(X - X[0])) < 1e-8, method


def test_lengths_match_grid(faulted_refs):
    for run in faulted_refs.values():
        assert all(len(a) == len(run.t) for a in (run.x_s, run.x_e, run.V_s, run.theta_e))


def test_full_order_reduction_is_identity(desk):
    bal = full_order(desk)
    assert bal.n_red == bal.n
    a = run_cosim(desk, "Partitioned-Reduced-NM", bal, DESK_FAULT, t_span=SHORT)
    b = run_cosim(desk, "Partitioned-Unreduced", None, DESK_FAULT, t_span=SHORT)
    assert np.max(np.abs(a.x_s - b.x_s)) < 1e-4
    assert np.max(np.abs(a.x_e - b.x_e)) < 1e-4


def test_partitioned_tracks_monolithic(faulted_refs):
    eps = accuracy(faulted_refs["Partitioned-Unreduced"], faulted_refs["UnPartitioned"],
                   "delta", REFERENCE)
    assert eps.value < 0.1


def test_boundary_residual_every_step(faulted_refs):
    res = faulted_refs["Partitioned-Unreduced"].residuals
    assert res.shape == faulted_refs["Partitioned-Unreduced"].t.shape
    assert np.max(res) < 1e-9


def test_timing_identity(faulted_refs):
    for run in faulted_refs.values():
        tm = run.timings
        assert tm["t_total_parallel"] == max(tm["t_s"], tm["t_e"]) + tm["t_b"]
        assert tm["t_total"] == tm["t_s"] + tm["t_e"] + tm["t_b"]
    rows = timing_table(faulted_refs)
    assert rows["UnPartitioned"]["speedup"] == 1.0


def test_threads_match_sequential(desk):
    a = run_cosim(desk, "Partitioned-Unreduced", events=DESK_FAULT, t_span=(0.0, 0.4))
    b = run_cosim(desk, "Partitioned-Unreduced", events=DESK_FAULT, t_span=(0.0, 0.4), jobs=2)
    assert np.array_equal(trajectories(a), trajectories(b))


@pytest.fixture(scope="module")
def quiet(desk):
    return run_cosim(desk, "UnPartitioned", t_span=(0.0, 0.3))


def shifted(run, d, kinds=("delta",), buses=False):
    x_s = run.x_s.copy()
    for j, (k, _) in enumerate(run.labels_s):
        if k in kinds:
            x_s[:, j] += d
    out = replace(run, x_s=x_s)
    if buses:
        out = replace(out, theta_s=run.theta_s + d, theta_e=run.theta_e + d)
    return out


def test_identical_runs_score_zero(quiet):
    for kind in ("delta", "omega", "V", "theta"):
        assert accuracy(quiet, quiet, kind).value == 0.0


@pytest.mark.parametrize("d", [1e-3, 0.25, 3.0])
def test_constant_offset_scores_offset(quiet, d):
    assert abs(accuracy(shifted(quiet, d), quiet, "delta").value - d) < 1e-12


def test_reference_cancels_common_shift(quiet):
    moved = shifted(quiet, 0.7, buses=True)
    assert accuracy(moved, quiet, "delta").value > 0.6
    assert accuracy(moved, quiet, "delta", REFERENCE).value < 1e-12
    assert accuracy(moved, quiet, "theta", REFERENCE, "boundary").value < 1e-12


def test_accuracy_rejects_other_grid(desk, quiet):
    other = run_cosim(desk, "UnPartitioned", t_span=(0.0, 0.2))
    with pytest.raises(ValueError, match="time grids"):
        accuracy(quiet, other, "delta")
    with pytest.raises(ValueError, match="reference"):
        accuracy(quiet, quiet, "delta", "G105")


def test_reduced_method_needs_reduction(desk):
    with pytest.raises(ValueError, match="truncated"):
        run_cosim(desk, "Partitioned-Reduced-NM")
    with pytest.raises(ValueError, match="unknown method"):
        run_cosim(desk, "Monolithic")
    bad = reduce_linearized(desk, n_red=2)
    bad = replace(bad, T=bad.T[:3, :3], T_inv=bad.T_inv[:3, :3])
    with pytest.raises(CosimError, match="dimension"):
        run_cosim(desk, "Partitioned-Reduced-LM", bad, t_span=SHORT)


def test_no_fault_comparison_scores_zero(desk, desk_lm):
    rep = compare_methods(desk, full_order(desk), desk_lm, t_span=(0.0, 0.5), reference=REFERENCE)
    assert not rep["failures"]
    assert rep["eps"] and max(rep["eps"].values()) < 1e-8
    assert set(rep["timing"]) == set(METHODS)


def test_laub_failure_is_reported(desk):
    _, sys = external_system(desk)
    singular = np.diag(np.r_[np.ones(sys.n - 1), 0.0])

    rep = compare_methods(desk, None, None, t_span=SHORT, methods=("Partitioned-Reduced-LM",),
                          bal_lm_factory=lambda: balance_laub(singular, np.eye(sys.n)))
    assert rep["failures"]["Partitioned-Reduced-LM"].startswith("non-minimal failure")
    assert "Partitioned-Reduced-LM" not in rep["runs"]
