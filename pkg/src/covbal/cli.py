"""Command-line pipeline: calibrate, gramians, balance, cosim.

Each stage reads and writes files in ``--out`` so that the expensive
covariance stage runs once and can be re-balanced at several cutoffs::

    covbal gramians --case desk --profile LS --out runs/ls
    covbal balance --cutoff 1e-5 --out runs/ls
    covbal cosim --fault 4-6@6 --out runs/ls

Exit codes: 0 success, 2 configuration or missing-artifact error, 3
numerical failure (the failing stage is named on stderr).
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .balance import BalanceError, balance, balance_laub, truncate
from .case import CaseFormatError, CaseValidationError, load_case, load_desk_case
from .cosim import METHODS, STATE_KINDS, CosimError, compare_methods, external_system, \
    reduce_linearized
from .gramians import (REFERENCE_PROFILE, PROFILES, GramianError, calibrate_magnitudes,
                       empirical_covariances, linear_gramians, linearize, scheme_for_profile)
from .integrate import EventSchedule, IntegrationError, StepControl
from .io import (ArtifactError, load_calibration, load_covariances, load_reduction, read_matrices,
                 save_calibration, save_covariances, save_reduction, write_csv)
from .network import ConvergenceError, NetworkError

log = logging.getLogger("covbal")

COMMANDS = ("calibrate", "gramians", "balance", "cosim")
NUMERICAL = (GramianError, BalanceError, IntegrationError, CosimError, NetworkError,
             ConvergenceError, np.linalg.LinAlgError, FloatingPointError)


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    command: str = "cosim"
    case: str = "desk"
    profile: str = "LS"
    horizon: float = 5.0
    cutoff: float = 1e-5
    n_red: int | None = None
    methods: tuple = METHODS
    fault: str | None = None  # "<branch>@<bus>"
    fault_on: float = 0.1
    t_end: float = 15.0
    seed: int = 0
    jobs: int = 1
    out: str = "runs"
    calibration: str | None = None
    n_f: int = 100
    model: str = "nonlinear"
    balance_method: str = "structured"
    reference: str | None = None
    inputs: dict = field(default_factory=dict)

    def validate(self):
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}")
        if self.case != "desk" and not Path(self.case).is_file():
            raise ConfigError(f"case file {self.case} does not exist")
        if self.profile not in PROFILES:
            raise ConfigError(f"profile must be one of {', '.join(PROFILES)}")
        if self.calibration is not None and not Path(self.calibration).is_file():
            raise ConfigError(f"calibration file {self.calibration} does not exist")
        if not (self.horizon > 0 and self.cutoff > 0 and self.t_end > 0 and self.fault_on >= 0):
            raise ConfigError("horizon, cutoff and t-end must be positive")
        if self.n_red is not None and self.n_red < 1:
            raise ConfigError("--n-red must be at least 1")
        if self.jobs < 1 or self.n_f < 1:
            raise ConfigError("--jobs and --n-f must be at least 1")
        bad = [m for m in self.methods if m not in METHODS]
        if bad or not self.methods:
            raise ConfigError(f"unknown methods {bad}; choose from {', '.join(METHODS)}")
        if self.model not in ("nonlinear", "linearized"):
            raise ConfigError("--model must be nonlinear or linearized")
        if self.balance_method not in ("structured", "laub"):
            raise ConfigError("--balance-method must be structured or laub")
        if self.fault is not None:
            self.events()
        return self

    def events(self, case=None):
        if self.fault is None:
            return None
        try:
            branch, bus = self.fault.split("@")
            ev = EventSchedule(self.fault_on, self.fault_on + 0.05, self.fault_on + 0.1,
                               branch, int(bus))
        except ValueError as exc:
            raise ConfigError(f"--fault must look like BRANCH@BUS ({exc})") from None
        if case is not None:
            try:
                br = case.branch(branch)
            except KeyError:
                raise ConfigError(f"no branch {branch!r} in the case") from None
            if ev.faulted_end not in (br.from_bus, br.to_bus):
                raise ConfigError(f"bus {bus} is not an end of branch {branch}")
        return ev

    def hashable(self):
        d = asdict(self)
        d["methods"] = list(self.methods)
        for key in ("jobs", "out"):  # neither changes the results
            d.pop(key)
        return d

    @property
    def out_dir(self) -> Path:
        return Path(self.out)

    def artifact(self, key, default):
        return Path(self.inputs.get(key) or self.out_dir / default)


# --------------------------------------------------------------------------
# stages

def _case(cfg):
    try:
        return load_desk_case() if cfg.case == "desk" else load_case(cfg.case)
    except (CaseFormatError, CaseValidationError) as exc:
        raise ConfigError(f"invalid case: {exc}") from None


def _meta(cfg, stage):
    from .io import config_hash
    return dict(stage=stage, config=config_hash(cfg.hashable()), case=cfg.case)


def _require(path: Path, what):
    if not path.is_file():
        raise ConfigError(f"missing {what}: {path}")
    return path


def cmd_calibrate(cfg: RunConfig) -> Path:
    case = _case(cfg)
    cal = calibrate_magnitudes(case, n_f=cfg.n_f, seed=cfg.seed, jobs=cfg.jobs)
    path = cfg.out_dir / "calibration.json"
    save_calibration(path, cal, _meta(cfg, "calibrate"))
    log.info("k_u=%s k_x=%s (%d failed)", cal.k_u, cal.k_x, len(cal.failures))
    return path


def cmd_gramians(cfg: RunConfig) -> Path:
    case = _case(cfg)
    _, sys_ = external_system(case)
    if cfg.model == "linearized":
        cov = linear_gramians(linearize(sys_), sys_.T_x, sys_.T_u)
        path = cfg.out_dir / "covariances-linearized.txt"
    else:
        cal = load_calibration(cfg.calibration) if cfg.calibration else REFERENCE_PROFILE
        scheme = scheme_for_profile(cfg.profile, cal, horizon=cfg.horizon)
        cov = empirical_covariances(sys_, scheme, cfg.jobs).check()
        path = cfg.out_dir / "covariances.txt"
    meta = dict(_meta(cfg, "gramians"), model=cfg.model, profile=cfg.profile,
                xs0=[float(v) for v in sys_.xs0])
    save_covariances(path, cov, meta)
    return path


def cmd_balance(cfg: RunConfig) -> Path:
    default = "covariances-linearized.txt" if cfg.model == "linearized" else "covariances.txt"
    src = _require(cfg.artifact("covariances", default), "covariance file")
    try:
        cov = load_covariances(src)
        _, meta = read_matrices(src)
    except (ArtifactError, ValueError, KeyError) as exc:
        raise ConfigError(f"unreadable covariance file {src}: {exc}") from None
    xs0 = meta.get("xs0")
    fn = balance_laub if cfg.balance_method == "laub" else balance
    bal = fn(cov, xs0=None if xs0 is None else np.asarray(xs0))
    bal.model = "linearized" if cov.source == "linear" else "nonlinear"
    bal = truncate(bal, cfg.cutoff, cfg.n_red)
    name = "reduction-lm.txt" if bal.model == "linearized" else "reduction.txt"
    path = cfg.out_dir / name
    save_reduction(path, bal, dict(_meta(cfg, "balance"), covariances=str(src)))
    log.info("hankel %s -> n_red %d", np.array2string(bal.hankel, precision=3), bal.n_red)
    return path


def _load_bal(path):
    try:
        return load_reduction(path)
    except (ArtifactError, ValueError, KeyError) as exc:
        raise ConfigError(f"unreadable reduction file {path}: {exc}") from None


def cmd_cosim(cfg: RunConfig) -> Path:
    case = _case(cfg)
    events = cfg.events(case)
    bal_nm = bal_lm = None
    if "Partitioned-Reduced-NM" in cfg.methods:
        bal_nm = _load_bal(_require(cfg.artifact("reduction", "reduction.txt"), "NM reduction file"))
    lm_path = cfg.artifact("reduction_lm", "reduction-lm.txt")
    factory = None
    if "Partitioned-Reduced-LM" in cfg.methods:
        if lm_path.is_file():
            bal_lm = _load_bal(lm_path)
        else:
            def factory():
                return reduce_linearized(case, cfg.cutoff, cfg.n_red, cfg.balance_method)
    reference = cfg.reference
    study_ids = [m.id for m in case.machines if m.bus in case.partition.study_buses]
    if reference is None and study_ids:
        reference = study_ids[0]
    if reference is not None and reference not in study_ids:
        raise ConfigError(f"reference machine {reference!r} is not in the study area")

    rep = compare_methods(case, bal_nm, bal_lm, events, StepControl(), (0.0, cfg.t_end), reference,
                          jobs=cfg.jobs, methods=tuple(cfg.methods), bal_lm_factory=factory)
    out = cfg.out_dir
    conf = cfg.hashable()
    part = case.partition
    for method, run in rep["runs"].items():
        tag = method.lower()
        for kind in STATE_KINDS:
            Xs, ids_s = run.kind(kind, "study")
            Xe, ids_e = run.kind(kind, "external")
            if not ids_s and not ids_e:
                continue
            X = np.hstack([Xs, Xe])
            write_csv(out / f"{tag}_{kind}.csv", ["t", *ids_s, *ids_e],
                      (np.concatenate([[t], row]) for t, row in zip(run.t, X)), conf)
        for kind, (S, E) in {"V": (run.V_s, run.V_e), "theta": (run.theta_s, run.theta_e)}.items():
            write_csv(out / f"{tag}_{kind}.csv",
                      ["t", *(f"s{b}" for b in part.B_s_bound), *(f"e{b}" for b in part.B_e_bound)],
                      (np.concatenate([[t], a, b]) for t, a, b in zip(run.t, S, E)), conf)
    write_csv(out / "accuracy.csv", ["index", "method", "area", "kind", "value"],
              ([*k, float(v)] for k, v in sorted(rep["eps"].items())), conf)
    cols = ["t_s", "t_e", "t_b", "t_total", "t_total_parallel", "wall", "speedup", "speedup_parallel"]
    write_csv(out / "timing.csv", ["method", *cols],
              ([m, *(row.get(c, "") for c in cols)] for m, row in rep["timing"].items()), conf)
    write_csv(out / "status.csv", ["method", "status"],
              ([m, "ok" if m in rep["runs"] else rep["failures"][m]] for m in cfg.methods), conf)
    for name, ok in rep["checks"].items():
        log.info("check %s: %s", name, "pass" if ok else "FAIL (non-fatal)")
    return out / "accuracy.csv"


STAGES = {"calibrate": cmd_calibrate, "gramians": cmd_gramians, "balance": cmd_balance,
          "cosim": cmd_cosim}


# --------------------------------------------------------------------------
# argument parsing

def _parser():
    p = argparse.ArgumentParser(prog="covbal", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"covbal {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--case", default="desk", help="case file, or 'desk' for the bundled fixture")
    common.add_argument("--out", default="runs", help="artifact directory")
    common.add_argument("--jobs", type=int, default=1)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--profile", default="LS", help="M0 profile: " + ", ".join(PROFILES))
    common.add_argument("--horizon", type=float, default=5.0, help="experiment horizon (s)")
    common.add_argument("--cutoff", type=float, default=1e-5, help="hankel-value cutoff")
    common.add_argument("--n-red", type=int, default=None, help="retained order (overrides cutoff)")
    common.add_argument("--model", default="nonlinear", choices=("nonlinear", "linearized"))
    common.add_argument("--balance-method", default="structured", choices=("structured", "laub"))
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("calibrate", parents=[common], help="fault-ensemble magnitude factors")
    c.add_argument("--n-f", type=int, default=100, help="number of faults")

    g = sub.add_parser("gramians", parents=[common], help="covariances of the external area")
    g.add_argument("--calibration", default=None, help="calibration file (default: built-in factors)")

    b = sub.add_parser("balance", parents=[common], help="balance and truncate covariances")
    b.add_argument("--covariances", default=None, help="covariance file (default: OUT/covariances.txt)")

    s = sub.add_parser("cosim", parents=[common], help="co-simulate and compare methods")
    s.add_argument("--methods", default=",".join(METHODS), help="comma-separated method names")
    s.add_argument("--fault", default=None, help="BRANCH@BUS three-phase fault (cleared after 0.05/0.1 s)")
    s.add_argument("--fault-on", type=float, default=0.1)
    s.add_argument("--t-end", type=float, default=15.0)
    s.add_argument("--reference", default=None, help="study machine used as angle reference")
    s.add_argument("--reduction", default=None, help="NM reduction file (default: OUT/reduction.txt)")
    s.add_argument("--reduction-lm", default=None,
                   help="LM reduction file (default: OUT/reduction-lm.txt, else built on the fly)")
    return p


def config_from_args(ns) -> RunConfig:
    cfg = RunConfig(command=ns.command, case=ns.case, profile=ns.profile, horizon=ns.horizon,
                    cutoff=ns.cutoff, n_red=ns.n_red, seed=ns.seed, jobs=ns.jobs, out=ns.out,
                    model=ns.model, balance_method=ns.balance_method)
    if ns.command == "calibrate":
        cfg.n_f = ns.n_f
    if ns.command == "gramians":
        cfg.calibration = ns.calibration
    if ns.command == "balance" and ns.covariances:
        cfg.inputs["covariances"] = ns.covariances
    if ns.command == "cosim":
        cfg.methods = tuple(m.strip() for m in ns.methods.split(",") if m.strip())
        cfg.fault, cfg.fault_on, cfg.t_end, cfg.reference = ns.fault, ns.fault_on, ns.t_end, ns.reference
        for key in ("reduction", "reduction_lm"):
            if getattr(ns, key):
                cfg.inputs[key] = getattr(ns, key)
    return cfg


def main(argv=None) -> int:
    parser = _parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    stage = ns.command
    try:
        cfg = config_from_args(ns).validate()
        cfg.out_dir.mkdir(parents=True, exist_ok=True)
        path = STAGES[stage](cfg)
    except (ConfigError, ArtifactError) as exc:
        print(f"covbal {stage}: configuration error: {exc}", file=sys.stderr)
        return 2
    except NUMERICAL as exc:
        print(f"covbal {stage}: numerical failure in stage '{stage}': {exc}", file=sys.stderr)
        return 3
    print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
