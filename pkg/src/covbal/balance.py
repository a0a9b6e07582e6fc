"""Balancing of (possibly rank-deficient) covariance pairs, truncation and
the Galerkin-projected reduced model.

Balanced coordinates are ``x^ = T x~`` with the blocks ordered as
``[controllable-observable, controllable-unobservable,
uncontrollable-observable, uncontrollable-unobservable]``.  In these
coordinates ``T W_c T^T = diag(Sigma1, I, 0, 0)`` and
``T^-T W_o T^-1 = diag(Sigma1, 0, Sigma3, 0)``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

__all__ = ["BalancedReduction", "BalanceError", "NonMinimalError", "balance", "balance_laub",
           "truncate", "reduced_rhs", "ReducedModel", "RANK_TOL"]

RANK_TOL = 1e-10


class BalanceError(ValueError):
    pass


class NonMinimalError(BalanceError):
    pass


@dataclass
class BalancedReduction:
    T: np.ndarray
    T_inv: np.ndarray
    hankel: np.ndarray
    Sigma1: np.ndarray
    Sigma3: np.ndarray
    blocks: tuple = ()  # sizes (co, c-uo, uc-o, uc-uo)
    n_red: int | None = None
    P: np.ndarray | None = None
    x_bar_2ss: np.ndarray | None = None
    method: str = "structured"
    model: str = "nonlinear"
    xs0: np.ndarray | None = None

    @property
    def n(self):
        return self.T.shape[0]


def _sym_eig(W):
    """Descending symmetric eigendecomposition with deterministic signs."""
    w, V = np.linalg.eigh(0.5 * (W + W.T))
    order = np.argsort(-w, kind="stable")
    w, V = w[order], V[:, order]
    for k in range(V.shape[1]):
        col = V[:, k]
        nz = np.flatnonzero(np.abs(col) > 1e-14)
        if nz.size and col[nz[0]] < 0:
            V[:, k] = -col
    return w, V


def _rank(w, ref):
    return int(np.sum(w > RANK_TOL * ref)) if ref > 0 else 0


def _check_psd(W, name):
    if not np.all(np.isfinite(W)):
        raise BalanceError(f"{name} has non-finite entries")
    if W.size == 0:
        return 0.0
    w = np.linalg.eigvalsh(0.5 * (W + W.T))
    top = max(w[-1], 0.0)
    if w[0] < -1e-8 * top - 1e-300:
        raise BalanceError(f"{name} is not positive semidefinite (min eigenvalue {w[0]:.3e})")
    return top


def balance(W_c, W_o=None, xs0=None) -> BalancedReduction:
    """Structured balancing transformation ``T = T4 T3 T2 T1``.

    Parameters
    ----------
    W_c, W_o
        Controllability and observability covariances; a
        :class:`~covbal.gramians.CovariancePair` may be passed as ``W_c``.
    xs0
        Scaled steady state, stored for truncation.

    Returns
    -------
    BalancedReduction
        With ``n_red`` unset.  ``hankel`` holds the eigenvalues of
        ``W_o^bal W_c^bal`` in non-increasing order.
    """
    if W_o is None:
        W_c, W_o = W_c.W_c, W_c.W_o
    W_c = np.asarray(W_c, dtype=float)
    W_o = np.asarray(W_o, dtype=float)
    n = W_c.shape[0]
    if W_c.shape != (n, n) or W_o.shape != (n, n):
        raise BalanceError("covariances must be square and of equal size")
    _check_psd(W_c, "W_c")
    _check_psd(W_o, "W_o")

    # T1: whiten the controllable subspace
    lam, V = _sym_eig(W_c)
    r1 = _rank(lam, lam[0] if n else 0.0)
    Vp, V0 = V[:, :r1], V[:, r1:]
    sq = np.sqrt(lam[:r1])
    T1 = np.vstack([Vp.T / sq[:, None], V0.T])
    T1i = np.hstack([Vp * sq[None, :], V0])
    Wo1 = T1i.T @ W_o @ T1i

    # T2: rotate the controllable block of W_o to diagonal form
    mu, U1 = _sym_eig(Wo1[:r1, :r1])
    ref = max(np.max(np.abs(np.diag(Wo1))) if n else 0.0, mu[0] if r1 else 0.0)
    ra = _rank(mu, ref)
    T2 = np.eye(n)
    T2[:r1, :r1] = U1.T
    T2i = T2.T.copy()
    Wo2 = T2i.T @ Wo1 @ T2i

    # T3: decouple the uncontrollable block from the controllable-observable one
    a, c = slice(0, ra), slice(r1, n)
    s1sq = mu[:ra]
    X = Wo2[a, c] / s1sq[:, None]
    T3 = np.eye(n)
    T3[a, c] = X
    T3i = np.eye(n)
    T3i[a, c] = -X
    S = Wo2[c, c] - Wo2[a, c].T @ X

    # T4: scale to Sigma1 and diagonalize the Schur complement
    s1 = np.sqrt(s1sq)
    sig3, U2 = _sym_eig(S)
    rc = _rank(sig3, ref)
    T4 = np.eye(n)
    T4i = np.eye(n)
    T4[a, a] = np.diag(np.sqrt(s1))
    T4i[a, a] = np.diag(1.0 / np.sqrt(s1))
    T4[c, c] = U2.T
    T4i[c, c] = U2

    T = T4 @ T3 @ T2 @ T1
    T_inv = T1i @ T2i @ T3i @ T4i
    hankel = np.concatenate([s1sq, np.zeros(n - ra)])
    return BalancedReduction(T=T, T_inv=T_inv, hankel=hankel, Sigma1=np.diag(s1),
                             Sigma3=np.diag(np.maximum(sig3[:rc], 0.0)),
                             blocks=(ra, r1 - ra, rc, n - r1 - rc), method="structured",
                             xs0=None if xs0 is None else np.asarray(xs0, dtype=float))


def balance_laub(W_c, W_o=None, xs0=None) -> BalancedReduction:
    """Square-root balancing from Cholesky factors and one SVD.

    Raises :class:`NonMinimalError` when either covariance is singular.
    """
    if W_o is None:
        W_c, W_o = W_c.W_c, W_c.W_o
    W_c = 0.5 * (np.asarray(W_c, dtype=float) + np.asarray(W_c, dtype=float).T)
    W_o = 0.5 * (np.asarray(W_o, dtype=float) + np.asarray(W_o, dtype=float).T)
    try:
        Lc = np.linalg.cholesky(W_c)
        Lo = np.linalg.cholesky(W_o)
    except np.linalg.LinAlgError:
        raise NonMinimalError("non-minimal system: covariance not positive definite "
                              "(Cholesky factorization failed)") from None
    U, lam, Vt = np.linalg.svd(Lo.T @ Lc)
    if lam[-1] <= RANK_TOL * lam[0]:
        raise NonMinimalError("non-minimal system: zero singular value in L_o^T L_c")
    V = Vt.T
    T_inv = Lc @ V / np.sqrt(lam)[None, :]
    T = (np.sqrt(lam)[:, None] * Vt) @ np.linalg.inv(Lc)
    n = len(lam)
    return BalancedReduction(T=T, T_inv=T_inv, hankel=lam ** 2, Sigma1=np.diag(lam),
                             Sigma3=np.zeros((0, 0)), blocks=(n, 0, 0, 0), method="laub",
                             xs0=None if xs0 is None else np.asarray(xs0, dtype=float))


def truncate(bal: BalancedReduction, cutoff: float = 1e-5, n_red: int | None = None,
             xs0=None) -> BalancedReduction:
    """Fix the retained order by a hankel ``cutoff`` or an explicit ``n_red``.

    The tail coordinates are frozen at the transformed steady state
    ``(T xs0)[n_red:]``; ``xs0`` defaults to the stored one, else ones.
    """
    n = bal.n
    if n_red is None:
        n_red = int(np.sum(bal.hankel > cutoff))
    if not 0 <= n_red <= n:
        raise BalanceError(f"n_red={n_red} outside [0, {n}]")
    if n_red == 0:
        raise BalanceError("no hankel value above the cutoff; nothing retained")
    xs0 = bal.xs0 if xs0 is None else np.asarray(xs0, dtype=float)
    if xs0 is None:
        xs0 = np.ones(n)
    P = np.eye(n_red, n)
    return replace(bal, n_red=n_red, P=P, x_bar_2ss=(bal.T @ xs0)[n_red:], xs0=xs0)


def reduced_rhs(bal: BalancedReduction, sys, x_bar_1, u):
    """Retained-state derivative ``P T T_x^-1 f(T_x T^-1 [x_1; x_2ss], u)``.

    ``u`` is in original units.
    """
    if bal.n_red is None:
        raise BalanceError("truncate() before evaluating the reduced model")
    k = bal.n_red
    xs = bal.T_inv[:, :k] @ x_bar_1 + bal.T_inv[:, k:] @ bal.x_bar_2ss
    return bal.T[:k] @ sys.fs(xs, np.asarray(u) / sys.T_u)


class ReducedModel:
    """Reduced external-area dynamics bound to a truncated balancing.

    ``dynamics(xs, us)`` is the scaled right-hand side; it defaults to the
    nonlinear one and may be a linearization.
    """

    def __init__(self, bal: BalancedReduction, sys, dynamics=None):
        if bal.n_red is None:
            raise BalanceError("truncate() before building a reduced model")
        self.bal = bal
        self.sys = sys
        self.dynamics = dynamics or sys.fs
        k = bal.n_red
        self.Tinv1 = bal.T_inv[:, :k]
        self.offset = bal.T_inv[:, k:] @ bal.x_bar_2ss
        self.PT = bal.T[:k]
        self.x0 = self.PT @ bal.xs0
        self.n = k

    def to_scaled(self, x1):
        return self.Tinv1 @ x1 + self.offset

    def to_full(self, x1):
        """Original (unscaled) full state."""
        return self.sys.T_x * self.to_scaled(x1)

    def f(self, x1, u):
        return self.PT @ self.dynamics(self.to_scaled(x1), np.asarray(u) / self.sys.T_u)

    def h(self, x1, u):
        return self.sys.hs(self.to_scaled(x1), np.asarray(u) / self.sys.T_u)
