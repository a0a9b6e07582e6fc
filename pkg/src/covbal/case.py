"""Electrical case data, the text case-file format, and area partitioning.

Case files are line oriented. Blank lines and ``#`` comments are ignored.
A header line ``CASE base_mva=<value>`` is followed by typed sections, each
introduced by ``[NAME]`` and holding one whitespace-separated record per line:

``[BUS]``        id type Vm Va Pload Qload Gsh Bsh
``[BRANCH]``     id from to r x b tie(0/1)
``[MACHINE]``    id bus order H KD xd xq xdp xqp Td0p Tq0p SN Tm
``[EXCITER]``    machine TA TE TF KA KE KF exc1 exc2 exc3
``[ZIP]``        bus P0 Q0 p1 p2 p3 q1 q2 q3 V0m V0a
``[PARTITION]``  ``study <bus ids...>`` and ``external <bus ids...>``

Angles are radians; a value may carry an explicit ``deg`` or ``rad`` suffix
(``12.5deg``).  All per-unit quantities are on the system base except the
machine reactances, which are on the machine base ``SN``.  Loads are
consumptions; ``Pload``/``Qload`` are constant-impedance loads evaluated at
the stored operating voltage.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

__all__ = [
    "Bus", "Branch", "Machine", "Exciter", "ZipLoad", "PseudoGenerator",
    "AreaPartition", "PowerCase", "AreaView", "CaseFormatError",
    "CaseValidationError", "load_case", "parse_case", "dump_case",
    "save_case", "partition", "whole_view", "validate_case", "DESK_CASE",
    "load_desk_case",
]

DESK_CASE = "desk_two_area.case"

ZIP_TOL = 1e-12


class CaseFormatError(ValueError):
    """Raised when a case file cannot be parsed."""

    def __init__(self, message, line=None, field=None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field '{field}'")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)
        self.line = line
        self.field = field


class CaseValidationError(ValueError):
    """Raised when a parsed case violates a data-model invariant."""


@dataclass(frozen=True)
class Bus:
    id: int
    type: str
    V: float
    theta: float
    P_load: float = 0.0
    Q_load: float = 0.0
    G_sh: float = 0.0
    B_sh: float = 0.0

    @property
    def voltage(self) -> complex:
        return self.V * complex(math.cos(self.theta), math.sin(self.theta))


@dataclass(frozen=True)
class Branch:
    id: str
    from_bus: int
    to_bus: int
    r: float
    x: float
    b: float = 0.0
    tie: bool = False

    @property
    def y_series(self) -> complex:
        return 1.0 / complex(self.r, self.x)


@dataclass(frozen=True)
class Machine:
    id: str
    bus: int
    model_order: int
    H: float
    K_D: float
    x_d: float
    x_q: float
    x_dp: float
    x_qp: float
    T_d0p: float
    T_q0p: float
    S_N: float
    T_m: float = 0.0


@dataclass(frozen=True)
class Exciter:
    machine: str
    T_A: float
    T_E: float
    T_F: float
    K_A: float
    K_E: float
    K_F: float
    exc1: float
    exc2: float
    exc3: float = 0.0


@dataclass(frozen=True)
class ZipLoad:
    bus: int
    P0: float
    Q0: float
    p1: float
    p2: float
    p3: float
    q1: float
    q2: float
    q3: float
    V0_mag: float
    V0_ang: float

    @property
    def V0(self) -> complex:
        return self.V0_mag * complex(math.cos(self.V0_ang), math.sin(self.V0_ang))


@dataclass(frozen=True)
class PseudoGenerator:
    """Boundary bus of the opposite area, represented as a frozen classical source."""

    bus: int
    tie_line: str


@dataclass(frozen=True)
class AreaPartition:
    study_buses: frozenset
    external_buses: frozenset
    tie_lines: tuple = ()
    B_s_bound: tuple = ()
    B_e_bound: tuple = ()
    G_s_pseudo: tuple = ()
    G_e_pseudo: tuple = ()

    @property
    def p(self) -> int:
        return len(self.tie_lines)


@dataclass(frozen=True)
class PowerCase:
    buses: tuple
    branches: tuple
    machines: tuple
    exciters: tuple
    zip_loads: tuple
    system_base_mva: float
    partition: AreaPartition

    def bus(self, bus_id: int) -> Bus:
        for b in self.buses:
            if b.id == bus_id:
                return b
        raise KeyError(bus_id)

    def branch(self, branch_id: str) -> Branch:
        for br in self.branches:
            if br.id == branch_id:
                return br
        raise KeyError(branch_id)

    def machine(self, machine_id: str) -> Machine:
        for m in self.machines:
            if m.id == machine_id:
                return m
        raise KeyError(machine_id)

    def exciter_for(self, machine_id: str):
        for e in self.exciters:
            if e.machine == machine_id:
                return e
        return None


@dataclass(frozen=True)
class AreaView:
    """One simulated area: own buses plus the opposite boundary buses as sources.

    ``buses`` lists own buses first, then the pseudo-generator buses in tie-line
    order.  ``boundary`` holds the own boundary buses (outputs) in tie-line
    order; ``pseudo`` the opposite boundary buses (inputs).
    """

    buses: tuple
    branches: tuple
    machines: tuple
    exciters: tuple
    zip_loads: tuple
    pseudo: tuple
    boundary: tuple
    system_base_mva: float
    index: dict = field(compare=False, hash=False, default_factory=dict)

    @property
    def own_buses(self) -> tuple:
        pseudo = {g.bus for g in self.pseudo}
        return tuple(b for b in self.buses if b.id not in pseudo)

    @property
    def p(self) -> int:
        return len(self.pseudo)

    def exciter_for(self, machine_id: str):
        for e in self.exciters:
            if e.machine == machine_id:
                return e
        return None


# --------------------------------------------------------------------------
# parsing

_SECTIONS = ("BUS", "BRANCH", "MACHINE", "EXCITER", "ZIP", "PARTITION")


def _num(token: str, line: int, name: str, angle=False) -> float:
    scale = 1.0
    text = token
    if angle:
        if text.endswith("deg"):
            text, scale = text[:-3], math.pi / 180.0
        elif text.endswith("rad"):
            text = text[:-3]
    try:
        value = float(text)
    except ValueError:
        raise CaseFormatError(f"expected a number, got {token!r}", line, name) from None
    if not math.isfinite(value):
        raise CaseFormatError(f"non-finite value {token!r}", line, name)
    return value * scale


def _int(token: str, line: int, name: str) -> int:
    try:
        return int(token)
    except ValueError:
        raise CaseFormatError(f"expected an integer, got {token!r}", line, name) from None


_FIELDS = {
    "BUS": ("id", "type", "Vm", "Va", "Pload", "Qload", "Gsh", "Bsh"),
    "BRANCH": ("id", "from", "to", "r", "x", "b", "tie"),
    "MACHINE": ("id", "bus", "order", "H", "KD", "xd", "xq", "xdp", "xqp",
                "Td0p", "Tq0p", "SN", "Tm"),
    "EXCITER": ("machine", "TA", "TE", "TF", "KA", "KE", "KF", "exc1", "exc2", "exc3"),
    "ZIP": ("bus", "P0", "Q0", "p1", "p2", "p3", "q1", "q2", "q3", "V0m", "V0a"),
}


def parse_case(text: str, validate: bool = True) -> PowerCase:
    """Parse case-file text into a :class:`PowerCase`."""
    base = None
    section = None
    buses, branches, machines, exciters, zips = [], [], [], [], []
    labels = {}
    saw_partition = False

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("CASE"):
            for tok in line.split()[1:]:
                key, _, val = tok.partition("=")
                if key == "base_mva":
                    base = _num(val, lineno, "base_mva")
                else:
                    raise CaseFormatError(f"unknown header key {key!r}", lineno, key)
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip().upper()
            if section not in _SECTIONS:
                raise CaseFormatError(f"unknown section {section!r}", lineno)
            saw_partition |= section == "PARTITION"
            continue
        if section is None:
            raise CaseFormatError("record outside of any section", lineno)
        tok = line.split()

        if section == "PARTITION":
            label = tok[0].lower()
            if label not in ("study", "external"):
                raise CaseFormatError(f"unknown area label {tok[0]!r}", lineno, "label")
            for t in tok[1:]:
                bid = _int(t, lineno, "bus")
                if bid in labels and labels[bid] != label:
                    raise CaseFormatError(f"bus {bid} labeled twice", lineno, "bus")
                labels[bid] = label
            continue

        names = _FIELDS[section]
        if len(tok) != len(names):
            raise CaseFormatError(
                f"{section} record needs {len(names)} fields, got {len(tok)}", lineno)
        if section == "BUS":
            buses.append(Bus(
                id=_int(tok[0], lineno, "id"), type=tok[1],
                V=_num(tok[2], lineno, "Vm"), theta=_num(tok[3], lineno, "Va", angle=True),
                P_load=_num(tok[4], lineno, "Pload"), Q_load=_num(tok[5], lineno, "Qload"),
                G_sh=_num(tok[6], lineno, "Gsh"), B_sh=_num(tok[7], lineno, "Bsh")))
        elif section == "BRANCH":
            tie = tok[6]
            if tie not in ("0", "1"):
                raise CaseFormatError(f"tie flag must be 0 or 1, got {tie!r}", lineno, "tie")
            branches.append(Branch(
                id=tok[0], from_bus=_int(tok[1], lineno, "from"), to_bus=_int(tok[2], lineno, "to"),
                r=_num(tok[3], lineno, "r"), x=_num(tok[4], lineno, "x"),
                b=_num(tok[5], lineno, "b"), tie=tie == "1"))
        elif section == "MACHINE":
            vals = [_num(t, lineno, n) for t, n in zip(tok[3:], names[3:])]
            machines.append(Machine(tok[0], _int(tok[1], lineno, "bus"),
                                    _int(tok[2], lineno, "order"), *vals))
        elif section == "EXCITER":
            vals = [_num(t, lineno, n) for t, n in zip(tok[1:], names[1:])]
            exciters.append(Exciter(tok[0], *vals))
        elif section == "ZIP":
            vals = [_num(t, lineno, n, angle=(n == "V0a")) for t, n in zip(tok[1:], names[1:])]
            zips.append(ZipLoad(_int(tok[0], lineno, "bus"), *vals))

    if base is None:
        raise CaseFormatError("missing 'CASE base_mva=...' header")

    if not saw_partition:
        labels = {b.id: "study" for b in buses}
    part = _build_partition(buses, branches, labels)
    case = PowerCase(tuple(buses), tuple(branches), tuple(machines), tuple(exciters),
                     tuple(zips), base, part)
    if validate:
        validate_case(case)
    return case


def _build_partition(buses, branches, labels) -> AreaPartition:
    study = frozenset(b for b, lab in labels.items() if lab == "study")
    external = frozenset(b for b, lab in labels.items() if lab == "external")
    ties = [br for br in branches if br.tie]
    b_s, b_e = [], []
    for br in ties:
        a, b = labels.get(br.from_bus), labels.get(br.to_bus)
        if a is None or b is None:
            missing = br.from_bus if a is None else br.to_bus
            raise CaseValidationError(f"tie-line {br.id}: endpoint bus {missing} is not labeled")
        if a == b:
            raise CaseValidationError(f"tie-line {br.id} does not cross areas")
        s, e = (br.from_bus, br.to_bus) if a == "study" else (br.to_bus, br.from_bus)
        b_s.append(s)
        b_e.append(e)
    return AreaPartition(
        study_buses=study, external_buses=external,
        tie_lines=tuple(br.id for br in ties),
        B_s_bound=tuple(b_s), B_e_bound=tuple(b_e),
        G_s_pseudo=tuple(PseudoGenerator(s, br.id) for s, br in zip(b_s, ties)),
        G_e_pseudo=tuple(PseudoGenerator(e, br.id) for e, br in zip(b_e, ties)),
    )


def validate_case(case: PowerCase) -> None:
    """Check every data-model invariant; raise :class:`CaseValidationError`."""
    ids = [b.id for b in case.buses]
    if len(set(ids)) != len(ids):
        raise CaseValidationError("duplicate bus ids")
    bus_ids = set(ids)
    if case.system_base_mva <= 0:
        raise CaseValidationError("system base must be positive")
    for b in case.buses:
        if b.V <= 0:
            raise CaseValidationError(f"bus {b.id}: voltage magnitude must be positive")

    br_ids = [br.id for br in case.branches]
    if len(set(br_ids)) != len(br_ids):
        raise CaseValidationError("duplicate branch ids")
    for br in case.branches:
        for end in (br.from_bus, br.to_bus):
            if end not in bus_ids:
                raise CaseValidationError(f"branch {br.id}: unknown bus {end}")
        if br.from_bus == br.to_bus:
            raise CaseValidationError(f"branch {br.id}: endpoints must be distinct")
        if br.r == 0 and br.x == 0:
            raise CaseValidationError(f"branch {br.id}: zero series impedance")

    m_ids = [m.id for m in case.machines]
    if len(set(m_ids)) != len(m_ids):
        raise CaseValidationError("duplicate machine ids")
    seen_bus = set()
    for m in case.machines:
        if m.bus not in bus_ids:
            raise CaseValidationError(f"machine {m.id}: unknown bus {m.bus}")
        if m.bus in seen_bus:
            raise CaseValidationError(f"machine {m.id}: more than one machine on bus {m.bus}")
        seen_bus.add(m.bus)
        if m.model_order not in (2, 4, 7):
            raise CaseValidationError(f"machine {m.id}: model order must be 2, 4 or 7")
        if m.H <= 0:
            raise CaseValidationError(f"machine {m.id}: H must be positive")
        if not (m.x_d >= m.x_dp > 0) or m.x_qp <= 0:
            raise CaseValidationError(f"machine {m.id}: need x_d >= x'_d > 0 and x'_q > 0")
        if m.model_order >= 4 and (m.T_d0p <= 0 or m.T_q0p <= 0):
            raise CaseValidationError(f"machine {m.id}: open-circuit time constants must be positive")
        if m.S_N <= 0:
            raise CaseValidationError(f"machine {m.id}: S_N must be positive")
        if m.model_order == 7 and case.exciter_for(m.id) is None:
            raise CaseValidationError(f"machine {m.id}: seventh-order model needs an exciter")

    for e in case.exciters:
        if e.machine not in m_ids:
            raise CaseValidationError(f"exciter for unknown machine {e.machine}")
        if min(e.T_A, e.T_E, e.T_F) <= 0:
            raise CaseValidationError(f"exciter {e.machine}: time constants must be positive")

    zip_buses = set()
    for z in case.zip_loads:
        if z.bus not in bus_ids:
            raise CaseValidationError(f"ZIP load at unknown bus {z.bus}")
        if z.bus in zip_buses:
            raise CaseValidationError(f"ZIP load at bus {z.bus}: duplicate record")
        zip_buses.add(z.bus)
        if abs(z.p1 + z.p2 + z.p3 - 1.0) > ZIP_TOL or abs(z.q1 + z.q2 + z.q3 - 1.0) > ZIP_TOL:
            raise CaseValidationError(
                f"ZIP load at bus {z.bus}: proportions must sum to 1 "
                f"(p: {z.p1 + z.p2 + z.p3:.12g}, q: {z.q1 + z.q2 + z.q3:.12g})")
        if z.V0_mag <= 0:
            raise CaseValidationError(f"ZIP load at bus {z.bus}: initial voltage must be positive")
        if abs(z.V0 - case.bus(z.bus).voltage) > 1e-9:
            raise CaseValidationError(f"ZIP load at bus {z.bus}: V0 differs from the bus voltage")

    part = case.partition
    labeled = part.study_buses | part.external_buses
    if part.study_buses & part.external_buses:
        raise CaseValidationError("a bus is labeled both study and external")
    if labeled != bus_ids:
        missing = sorted(bus_ids - labeled)
        extra = sorted(labeled - bus_ids)
        raise CaseValidationError(f"partition mismatch: unlabeled {missing}, unknown {extra}")
    for br in case.branches:
        crosses = (br.from_bus in part.study_buses) != (br.to_bus in part.study_buses)
        if crosses and not br.tie:
            raise CaseValidationError(f"branch {br.id} crosses areas but is not flagged as a tie-line")
    if len(set(part.B_s_bound)) != part.p or len(set(part.B_e_bound)) != part.p:
        raise CaseValidationError("each boundary bus must terminate exactly one tie-line")


def load_case(path) -> PowerCase:
    """Read and validate a case file."""
    return parse_case(Path(path).read_text())


def load_desk_case() -> PowerCase:
    """The bundled two-area fixture."""
    return parse_case(resources.files("covbal").joinpath("data", DESK_CASE).read_text())


# --------------------------------------------------------------------------
# serialization

def _f(v: float) -> str:
    return repr(float(v))


def dump_case(case: PowerCase) -> str:
    """Serialize a case; ``parse_case(dump_case(c)) == c``."""
    out = [f"CASE base_mva={_f(case.system_base_mva)}", "", "[BUS]",
           "# " + " ".join(_FIELDS["BUS"])]
    for b in case.buses:
        out.append(" ".join([str(b.id), b.type] + [_f(v) for v in (
            b.V, b.theta, b.P_load, b.Q_load, b.G_sh, b.B_sh)]))
    out += ["", "[BRANCH]", "# " + " ".join(_FIELDS["BRANCH"])]
    for br in case.branches:
        out.append(" ".join([br.id, str(br.from_bus), str(br.to_bus), _f(br.r), _f(br.x),
                             _f(br.b), "1" if br.tie else "0"]))
    out += ["", "[MACHINE]", "# " + " ".join(_FIELDS["MACHINE"])]
    for m in case.machines:
        out.append(" ".join([m.id, str(m.bus), str(m.model_order)] + [_f(v) for v in (
            m.H, m.K_D, m.x_d, m.x_q, m.x_dp, m.x_qp, m.T_d0p, m.T_q0p, m.S_N, m.T_m)]))
    if case.exciters:
        out += ["", "[EXCITER]", "# " + " ".join(_FIELDS["EXCITER"])]
        for e in case.exciters:
            out.append(" ".join([e.machine] + [_f(v) for v in (
                e.T_A, e.T_E, e.T_F, e.K_A, e.K_E, e.K_F, e.exc1, e.exc2, e.exc3)]))
    if case.zip_loads:
        out += ["", "[ZIP]", "# " + " ".join(_FIELDS["ZIP"])]
        for z in case.zip_loads:
            out.append(" ".join([str(z.bus)] + [_f(v) for v in (
                z.P0, z.Q0, z.p1, z.p2, z.p3, z.q1, z.q2, z.q3, z.V0_mag, z.V0_ang)]))
    part = case.partition
    out += ["", "[PARTITION]"]
    order = [b.id for b in case.buses]
    out.append("study " + " ".join(str(b) for b in order if b in part.study_buses))
    if part.external_buses:
        out.append("external " + " ".join(str(b) for b in order if b in part.external_buses))
    return "\n".join(out) + "\n"


def save_case(case: PowerCase, path) -> None:
    Path(path).write_text(dump_case(case))


# --------------------------------------------------------------------------
# partitioning

def _view(case, own, pseudo, boundary) -> AreaView:
    own_buses = [b for b in case.buses if b.id in own]
    pseudo_buses = [case.bus(g.bus) for g in pseudo]
    buses = tuple(own_buses + pseudo_buses)
    ties = set(case.partition.tie_lines) if pseudo else set()
    branches = tuple(br for br in case.branches
                     if (br.from_bus in own and br.to_bus in own) or br.id in ties)
    machines = tuple(m for m in case.machines if m.bus in own)
    mids = {m.id for m in machines}
    exciters = tuple(e for e in case.exciters if e.machine in mids)
    zips = tuple(z for z in case.zip_loads if z.bus in own)
    index = {b.id: k for k, b in enumerate(buses)}
    return AreaView(buses, branches, machines, exciters, zips, tuple(pseudo),
                    tuple(boundary), case.system_base_mva, index)


def partition(case: PowerCase):
    """Split a case into (study, external) area views.

    Each view holds its own buses, machines and loads, all tie-lines, and one
    pseudo-generator per opposite boundary bus.  Bus indices are re-based per
    area (``view.index``).
    """
    part = case.partition
    if not part.study_buses and not part.external_buses:
        raise CaseValidationError("case carries no partition labels")
    ties = {br.id: br for br in case.branches if br.tie}
    for tid in part.tie_lines:
        br = ties.get(tid)
        if br is None:
            raise CaseValidationError(f"dangling tie-line {tid}")
    study = _view(case, part.study_buses, part.G_e_pseudo, part.B_s_bound)
    external = _view(case, part.external_buses, part.G_s_pseudo, part.B_e_bound)
    return study, external


def whole_view(case: PowerCase) -> AreaView:
    """Unpartitioned view of the whole system; boundary = B_s then B_e."""
    part = case.partition
    own = frozenset(b.id for b in case.buses)
    return _view(case, own, (), tuple(part.B_s_bound) + tuple(part.B_e_bound))


def with_machines(case: PowerCase, machines, exciters) -> PowerCase:
    return replace(case, machines=tuple(machines), exciters=tuple(exciters))
