"""Plain-text artifacts: matrix files with a metadata header and CSV tables.

Matrix files::

    # covbal-matrix v1
    # meta {"json": "object"}
    @ W_c 2 2
    1.0 0.0
    0.0 1.0

CSV files start with ``# covbal <version> config=<hash>`` followed by a
single ``# created <timestamp>`` line; everything after that is a
deterministic function of the inputs.
"""

from __future__ import annotations

import csv
import hashlib
import io as _io
import json
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__

__all__ = ["config_hash", "write_matrices", "read_matrices", "save_covariances",
           "load_covariances", "save_reduction", "load_reduction", "write_csv", "read_csv_body",
           "save_calibration", "load_calibration", "ArtifactError"]

MAGIC = "# covbal-matrix v1"


class ArtifactError(ValueError):
    pass


def config_hash(config) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _fmt(v: float) -> str:
    return repr(float(v))


def write_matrices(path, matrices: dict, meta: dict | None = None) -> None:
    lines = [MAGIC, "# meta " + json.dumps(meta or {}, sort_keys=True, default=str)]
    for name, M in matrices.items():
        nd = np.ndim(M)
        M = np.asarray(M, dtype=float).reshape(1, -1) if nd < 2 else np.asarray(M, dtype=float)
        lines.append(f"@ {name} {M.shape[0]} {M.shape[1]} {nd}")
        lines.extend(" ".join(_fmt(v) for v in row) for row in M)
    Path(path).write_text("\n".join(lines) + "\n")


def read_matrices(path):
    """Return ``(matrices, meta)``; 1-d arrays come back 1-d."""
    text = Path(path).read_text().splitlines()
    if not text or text[0] != MAGIC:
        raise ArtifactError(f"{path}: not a covbal matrix file")
    meta = {}
    out = {}
    k = 1
    while k < len(text):
        line = text[k]
        if line.startswith("# meta "):
            meta = json.loads(line[7:])
            k += 1
        elif line.startswith("@ "):
            _, name, r, c, nd = line.split()
            r, c, nd = int(r), int(c), int(nd)
            rows = [[float(v) for v in text[k + 1 + i].split()] for i in range(r)]
            M = np.array(rows, dtype=float).reshape(r, c)
            out[name] = M.ravel() if nd == 1 else M
            k += 1 + r
        elif not line.strip() or line.startswith("#"):
            k += 1
        else:
            raise ArtifactError(f"{path}:{k + 1}: unexpected line")
    return out, meta


def _scheme_meta(scheme):
    if scheme is None:
        return None
    d = {k: getattr(scheme, k) for k in ("M0", "k_u", "k_x", "shape", "horizon", "dt", "tol")}
    d["M0"] = list(d["M0"])
    if scheme.T_c is not None or scheme.T_o is not None:
        d["custom_directions"] = True
    return d


def save_covariances(path, cov, meta=None) -> None:
    m = dict(meta or {}, kind="covariances", source=cov.source, scheme=_scheme_meta(cov.scheme),
             version=__version__)
    write_matrices(path, {"W_c": cov.W_c, "W_o": cov.W_o, "T_x": cov.T_x, "T_u": cov.T_u}, m)


def load_covariances(path):
    from .gramians import CovariancePair, PerturbationScheme

    mats, meta = read_matrices(path)
    for key in ("W_c", "W_o"):
        if key not in mats:
            raise ArtifactError(f"{path}: missing {key}")
    n = mats["W_c"].shape[0]
    sch = meta.get("scheme")
    scheme = None
    if sch:
        sch = {k: v for k, v in sch.items() if k != "custom_directions"}
        sch["M0"] = tuple(sch["M0"])
        scheme = PerturbationScheme(**sch)
    return CovariancePair(mats["W_c"], mats["W_o"], mats.get("T_x", np.ones(n)),
                          mats.get("T_u", np.ones(0)), scheme, meta.get("source", "empirical"))


def save_reduction(path, bal, meta=None) -> None:
    m = dict(meta or {}, kind="reduction", method=bal.method, model=bal.model, blocks=list(bal.blocks),
             n_red=bal.n_red, version=__version__)
    mats = {"T": bal.T, "T_inv": bal.T_inv, "hankel": bal.hankel,
            "Sigma1": np.diag(bal.Sigma1), "Sigma3": np.diag(bal.Sigma3)}
    if bal.xs0 is not None:
        mats["xs0"] = bal.xs0
    write_matrices(path, mats, m)


def load_reduction(path):
    from .balance import BalancedReduction, truncate

    mats, meta = read_matrices(path)
    if meta.get("kind") != "reduction":
        raise ArtifactError(f"{path}: not a reduction file")
    bal = BalancedReduction(T=mats["T"], T_inv=mats["T_inv"], hankel=np.atleast_1d(mats["hankel"]),
                            Sigma1=np.diag(np.atleast_1d(mats["Sigma1"])),
                            Sigma3=np.diag(np.atleast_1d(mats["Sigma3"])),
                            blocks=tuple(meta.get("blocks", ())), method=meta.get("method", "structured"),
                            model=meta.get("model", "nonlinear"), xs0=mats.get("xs0"))
    if meta.get("n_red"):
        bal = truncate(bal, n_red=int(meta["n_red"]))
    return bal


def save_calibration(path, cal, meta=None) -> None:
    body = dict(k_u=cal.k_u, k_x=cal.k_x, n_f=cal.n_f, alpha_u=cal.alpha_u, alpha_x=cal.alpha_x,
                failures=cal.failures, faults=cal.faults)
    header = dict(meta or {}, kind="calibration", version=__version__)
    Path(path).write_text(json.dumps(dict(header=header, result=body), indent=2, sort_keys=True) + "\n")


def load_calibration(path):
    from .gramians import CalibrationResult

    data = json.loads(Path(path).read_text())
    r = data["result"]
    return CalibrationResult(r["k_u"], r["k_x"], r["n_f"], r["alpha_u"], r["alpha_x"],
                             r.get("failures", []), [tuple(f) for f in r.get("faults", [])])


def write_csv(path, header, rows, config=None) -> None:
    buf = _io.StringIO()
    buf.write(f"# covbal {__version__} config={config_hash(config or {})}\n")
    buf.write(f"# created {datetime.now(timezone.utc).isoformat(timespec='seconds')}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])
    Path(path).write_text(buf.getvalue())


def read_csv_body(path) -> str:
    """File contents without the timestamp line."""
    return "".join(line for line in Path(path).read_text().splitlines(keepends=True)
                   if not line.startswith("# created "))
