import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from covbal.case import (Branch, CaseFormatError, CaseValidationError, _build_partition, dump_case,
                         load_case, parse_case, partition, save_case, whole_view)

from builders import single_area_case, smib_case

MINIMAL = """\
CASE base_mva=100
[BUS]
1 slack 1.0 0.0 0 0 0 0
2 pq 0.98 -2.5deg 0.5 0.1 0 0
[BRANCH]
L12 1 2 0.01 0.1 0.02 0
[MACHINE]
G1 1 2 5.0 2.0 1.0 1.0 0.3 0.3 5.0 0.5 100 0.5
"""


def test_minimal_case_has_no_ties(tmp_path):
    path = tmp_path / "min.case"
    path.write_text(MINIMAL)
    case = load_case(path)
    assert case.partition.p == 0
    assert len(case.machines) == 1 and len(case.branches) == 1
    assert case.bus(2).theta == pytest.approx(-2.5 * math.pi / 180, abs=1e-15)


def test_zip_proportions_must_sum_to_one():
    text = MINIMAL + "[ZIP]\n2 0.5 0.1 0.5 0.2 0.2 0.3 0.3 0.4 0.98 -2.5deg\n"
    with pytest.raises(CaseValidationError, match="ZIP load at bus 2"):
        parse_case(text)


@pytest.mark.parametrize("bad, where", [
    ("2 pq 0.98 oops 0.5 0.1 0 0", "line 5"),
    ("2 pq 0.98", "line 5"),
])
def test_parse_errors_carry_line(bad, where):
    lines = MINIMAL.splitlines()
    lines[4] = bad
    with pytest.raises(CaseFormatError, match=where):
        parse_case("\n".join(lines))


def test_unknown_machine_bus_is_named():
    text = MINIMAL.replace("G1 1 2", "G1 7 2")
    with pytest.raises(CaseValidationError, match="machine G1: unknown bus 7"):
        parse_case(text)


def test_desk_boundary_sets(desk):
    # recomputed from the branch table, independent of the partition builder
    study = {b.id for b in desk.buses if b.id < 100}
    sb, eb = [], []
    for br in desk.branches:
        if (br.from_bus in study) != (br.to_bus in study):
            s, e = (br.from_bus, br.to_bus) if br.from_bus in study else (br.to_bus, br.from_bus)
            sb.append(s)
            eb.append(e)
    part = desk.partition
    assert part.p == 2
    assert list(part.B_s_bound) == sb and list(part.B_e_bound) == eb
    assert set(part.study_buses) == study
    assert not part.study_buses & part.external_buses


def test_desk_fixture_shape(desk):
    study, ext = partition(desk)
    assert sorted(m.model_order for m in study.machines) == [7, 7, 7]
    assert sorted(m.model_order for m in ext.machines) == [2, 2, 2, 4]
    assert len(study.zip_loads) == 1 and not ext.zip_loads


def test_tie_endpoint_must_be_labeled():
    case = smib_case()
    with pytest.raises(CaseValidationError, match="not labeled"):
        _build_partition(case.buses, case.branches, {1: "study"})


def test_crossing_branch_must_be_tie():
    case = smib_case()
    bad = replace(case, branches=(replace(case.branches[0], tie=False),))
    with pytest.raises(CaseValidationError, match="not flagged"):
        from covbal.case import validate_case
        validate_case(bad)


def test_no_ties_no_pseudo(rng):
    study, ext = partition(single_area_case(rng))
    assert study.pseudo == () and ext.pseudo == ()


def test_three_ties_three_pseudo(desk):
    extra = Branch("6-103", 6, 103, 0.01, 0.15, 0.03, True)
    branches = desk.branches + (extra,)
    labels = {b.id: ("study" if b.id < 100 else "external") for b in desk.buses}
    case = replace(desk, branches=branches, partition=_build_partition(desk.buses, branches, labels))
    study, ext = partition(case)
    assert study.p == ext.p == 3
    assert [g.bus for g in study.pseudo] == [101, 102, 103]
    assert [g.bus for g in ext.pseudo] == [7, 8, 6]


def test_label_swap_swaps_views(desk):
    labels = {b.id: ("external" if b.id < 100 else "study") for b in desk.buses}
    swapped = replace(desk, partition=_build_partition(desk.buses, desk.branches, labels))
    s0, e0 = partition(desk)
    s1, e1 = partition(swapped)
    assert s1 == e0 and e1 == s0


def test_partition_is_a_bijection(desk):
    study, ext = partition(desk)
    own = [b.id for b in study.own_buses] + [b.id for b in ext.own_buses]
    assert sorted(own) == sorted(b.id for b in desk.buses)
    assert len(whole_view(desk).buses) == len(desk.buses)


def test_views_rebase_indices(desk):
    for view in partition(desk):
        assert sorted(view.index.values()) == list(range(len(view.buses)))


@given(seed=st.integers(0, 2**31 - 1), n_bus=st.integers(2, 8), n_zip=st.integers(0, 1))
def test_round_trip(seed, n_bus, n_zip):
    case = single_area_case(np.random.default_rng(seed), n_bus, n_gen=1, n_zip=min(n_zip, n_bus - 1))
    assert parse_case(dump_case(case)) == case


def test_round_trip_desk(desk, tmp_path):
    save_case(desk, tmp_path / "d.case")
    assert load_case(tmp_path / "d.case") == desk
