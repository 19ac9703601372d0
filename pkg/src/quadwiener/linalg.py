"""Dense linear algebra and matrix functions.

Everything here works on small to moderate dense numpy arrays.  The symmetric
eigensolver is a cyclic Jacobi method with a round-robin (parallel) ordering,
so that each round of disjoint rotations is a handful of vectorised row and
column updates.  Large matrices are handed to LAPACK through numpy.

Matrix functions follow their defining power series

    e[M]   = sum M^n / n!
    ch[M]  = sum M^(2n) / (2n)!
    snh[M] = sum M^(2n+1) / (2n+1)!
    sh[M]  = sum M^(2n) / (2n+1)!        (so snh[M] = M sh[M])
    tnh[M] = sh[M] ch[M]^(-1)

evaluated after scaling M by a power of two and undone with the doubling
rules e[2X] = e[X]^2, ch[2X] = 2 ch[X]^2 - I, sh[2X] = sh[X] ch[X].
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    EigenFailure,
    IllConditionedVandermonde,
    NoConvergence,
    NonSymmetric,
    RepeatedEigenvalue,
    RepeatedNode,
    SingularCh,
    SingularEntry,
)

JACOBI_MAX_SWEEPS = 100
JACOBI_AUTO_LIMIT = 128
SERIES_RTOL = 1e-16
SERIES_MAX_TERMS = 200
TNH_SINGULAR = 1e-12

# 2x2 rotation generator; J^2 = -I
J2 = np.array([[0.0, -1.0], [1.0, 0.0]])


@dataclass(frozen=True)
class EigenDecomposition:
    """Eigenvalues in descending order with orthonormal eigenvector columns."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    sweeps: int = 0
    method: str = "jacobi"


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    # circle method: n-1 rounds of n/2 disjoint pairs (n even, padded if odd)
    m = n + (n % 2)
    idx = list(range(m))
    rounds = []
    for _ in range(m - 1):
        pairs = [(idx[i], idx[m - 1 - i]) for i in range(m // 2)]
        pairs = [(min(p, q), max(p, q)) for p, q in pairs if p < n and q < n]
        if pairs:
            p = np.array([a for a, _ in pairs])
            q = np.array([b for _, b in pairs])
            rounds.append((p, q))
        idx = [idx[0]] + [idx[-1]] + idx[1:-1]
    return rounds


def _jacobi(A: np.ndarray, tol: float) -> EigenDecomposition:
    n = A.shape[0]
    A = np.array(A, dtype=float)
    V = np.eye(n)
    scale = np.linalg.norm(A)
    if n == 1 or scale == 0.0:
        return _sorted(np.diag(A).copy(), V, 0, "jacobi")
    rounds = _round_robin(n)
    thresh = tol * scale
    for sweep in range(1, JACOBI_MAX_SWEEPS + 1):
        for p, q in rounds:
            apq = A[p, q]
            active = np.abs(apq) > 1e-300
            if not active.any():
                continue
            app = A[p, p]
            aqq = A[q, q]
            with np.errstate(divide="ignore", invalid="ignore"):
                tau = np.where(active, (aqq - app) / (2.0 * np.where(active, apq, 1.0)), 0.0)
            t = np.where(tau >= 0, 1.0, -1.0) / (np.abs(tau) + np.sqrt(1.0 + tau * tau))
            t = np.where(active, t, 0.0)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = t * c
            rp = A[p, :].copy()
            rq = A[q, :].copy()
            A[p, :] = c[:, None] * rp - s[:, None] * rq
            A[q, :] = s[:, None] * rp + c[:, None] * rq
            cp = A[:, p].copy()
            cq = A[:, q].copy()
            A[:, p] = cp * c - cq * s
            A[:, q] = cp * s + cq * c
            vp = V[:, p].copy()
            vq = V[:, q].copy()
            V[:, p] = vp * c - vq * s
            V[:, q] = vp * s + vq * c
        off = np.linalg.norm(A - np.diag(np.diag(A)))
        if off < thresh:
            return _sorted(np.diag(A).copy(), V, sweep, "jacobi")
    raise NoConvergence(f"Jacobi did not converge in {JACOBI_MAX_SWEEPS} sweeps")


def _sorted(w, V, sweeps, method):
    order = np.argsort(-w, kind="stable")
    return EigenDecomposition(w[order], V[:, order], sweeps, method)


def check_symmetric(A: np.ndarray, tol: float) -> None:
    A = np.asarray(A)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionMismatch(f"square matrix required, got shape {A.shape}")
    scale = np.linalg.norm(A)
    if np.linalg.norm(A - A.T) > tol * max(scale, 1e-300):
        raise NonSymmetric("matrix is not symmetric within tolerance")


def sym_eigen(A: np.ndarray, tol: float = 1e-12, method: str = "auto") -> EigenDecomposition:
    """Full eigendecomposition of a real symmetric matrix.

    method is "jacobi", "lapack" or "auto" (Jacobi up to dimension 128).
    """
    A = np.asarray(A, dtype=float)
    check_symmetric(A, tol)
    if not np.all(np.isfinite(A)):
        raise EigenFailure("non-finite entries")
    A = 0.5 * (A + A.T)
    if method == "auto":
        method = "jacobi" if A.shape[0] <= JACOBI_AUTO_LIMIT else "lapack"
    if method == "jacobi":
        return _jacobi(A, tol)
    if method == "lapack":
        w, V = np.linalg.eigh(A)
        return _sorted(w, V, 0, "lapack")
    raise ValueError(f"unknown method {method!r}")


def sym_eigvals(A: np.ndarray, tol: float = 1e-12, method: str = "auto") -> np.ndarray:
    """Descending eigenvalues only (skips eigenvectors on the LAPACK path)."""
    A = np.asarray(A, dtype=float)
    check_symmetric(A, tol)
    A = 0.5 * (A + A.T)
    if method == "auto":
        method = "jacobi" if A.shape[0] <= JACOBI_AUTO_LIMIT else "lapack"
    if method == "lapack":
        return np.linalg.eigvalsh(A)[::-1]
    return sym_eigen(A, tol, method).eigenvalues


# ---------------------------------------------------------------- series


def _norm1(X: np.ndarray) -> float:
    return float(np.max(np.sum(np.abs(X), axis=0))) if X.size else 0.0


def _scaled(M: np.ndarray) -> tuple[np.ndarray, int]:
    nrm = _norm1(M)
    s = 0
    if nrm > 1.0:
        s = int(np.ceil(np.log2(nrm)))
    return M / (2.0**s), s


def _sum_series(X: np.ndarray, first: np.ndarray, step) -> np.ndarray:
    # step(term, n) returns the next term; stops on relative size
    total = first.copy()
    term = first
    for n in range(1, SERIES_MAX_TERMS):
        term = step(term, n)
        total = total + term
        tn = np.max(np.abs(term))
        if tn <= SERIES_RTOL * np.max(np.abs(total)) or tn == 0.0:
            break
    return total


def _e_ch_sh(X: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    d = X.shape[0]
    eye = np.eye(d, dtype=X.dtype)
    X2 = X @ X
    e = _sum_series(X, eye, lambda t, n: t @ X / n)
    ch = _sum_series(X, eye, lambda t, n: t @ X2 / ((2 * n - 1) * (2 * n)))
    sh = _sum_series(X, eye, lambda t, n: t @ X2 / ((2 * n) * (2 * n + 1)))
    return e, ch, sh


def expm(M: np.ndarray) -> np.ndarray:
    """e[M] by series plus scaling and squaring."""
    M = np.asarray(M)
    X, s = _scaled(M.astype(complex) if np.iscomplexobj(M) else M.astype(float))
    d = X.shape[0]
    e = _sum_series(X, np.eye(d, dtype=X.dtype), lambda t, n: t @ X / n)
    for _ in range(s):
        e = e @ e
    return e


def matrix_functions(M: np.ndarray, tnh: bool | str = "auto") -> dict[str, np.ndarray]:
    """Return {"e", "ch", "sh", "snh"} and, when defined, "tnh".

    tnh="auto" includes tnh only if ch[M] is safely invertible; tnh=True
    raises SingularCh instead of omitting it; tnh=False never computes it.
    """
    M = np.asarray(M)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DimensionMismatch("square matrix required")
    dtype = complex if np.iscomplexobj(M) else float
    M = M.astype(dtype)
    d = M.shape[0]
    X, s = _scaled(M)
    e, ch, sh = _e_ch_sh(X)
    eye = np.eye(d, dtype=dtype)
    for _ in range(s):
        e = e @ e
        sh = sh @ ch
        ch = 2.0 * ch @ ch - eye
    out = {"e": e, "ch": ch, "sh": sh, "snh": M @ sh}
    if tnh:
        det_ch = np.linalg.det(ch)
        if abs(det_ch) < TNH_SINGULAR * (1.0 + _norm1(M)) ** d:
            if tnh is True:
                raise SingularCh(f"|det ch[M]| = {abs(det_ch):.3e} below threshold")
        else:
            out["tnh"] = np.linalg.solve(ch.T, sh.T).T
    return out


# ---------------------------------------------------------------- Putzer


def companion_matrix(C: Sequence[np.ndarray]) -> np.ndarray:
    """Block companion matrix of U^(k) = C_{k-1} U^(k-1) + ... + C_0 U."""
    k = len(C)
    d = np.asarray(C[0]).shape[0]
    M = np.zeros((k * d, k * d))
    for i in range(k - 1):
        M[i * d:(i + 1) * d, (i + 1) * d:(i + 2) * d] = np.eye(d)
    for i, Ci in enumerate(C):
        M[(k - 1) * d:, i * d:(i + 1) * d] = np.asarray(Ci, dtype=float)
    return M


def eigenvalues_general(M: np.ndarray) -> np.ndarray:
    """Eigenvalues of a general real matrix (LAPACK Hessenberg QR, root fallback)."""
    M = np.asarray(M, dtype=float)
    try:
        lam = np.linalg.eigvals(M)
        if np.all(np.isfinite(lam)):
            return lam
    except np.linalg.LinAlgError:
        pass
    if M.shape[0] <= 8:
        lam = np.roots(np.poly(M))
        if lam.size == M.shape[0] and np.all(np.isfinite(lam)):
            return lam.astype(complex)
    raise EigenFailure("eigenvalue computation failed")


def _bidiagonal(lam: np.ndarray) -> np.ndarray:
    m = lam.size
    L = np.diag(lam.astype(complex))
    L[np.arange(1, m), np.arange(m - 1)] = 1.0
    return L


def putzer_r(lam: Sequence[complex], t: float, derivative: int = 0) -> np.ndarray:
    """r_1(t..), ..., r_m(t) solving r_1' = l_1 r_1, r_j' = r_{j-1} + l_j r_j, r(0) = e_1.

    With derivative=m the m-th derivative is returned (r' = L r).
    """
    lam = np.asarray(lam, dtype=complex)
    L = _bidiagonal(lam)
    r = expm(t * L)[:, 0]
    for _ in range(derivative):
        r = L @ r
    return r


def putzer_r_integral(lam: Sequence[complex], t: float) -> np.ndarray:
    """The vector of integrals of r_j over [0, t]."""
    lam = np.asarray(lam, dtype=complex)
    m = lam.size
    big = np.zeros((m + 1, m + 1), dtype=complex)
    big[:m, :m] = _bidiagonal(lam)
    big[0, m] = 1.0
    return expm(t * big)[:m, m]


def putzer_derivatives_at_zero(lam: Sequence[complex], order: int) -> np.ndarray:
    """Row n holds (r_1^(n)(0), ..., r_m^(n)(0)) for n = 0..order."""
    lam = np.asarray(lam, dtype=complex)
    L = _bidiagonal(lam)
    out = np.zeros((order + 1, lam.size), dtype=complex)
    v = np.zeros(lam.size, dtype=complex)
    v[0] = 1.0
    for n in range(order + 1):
        out[n] = v
        v = L @ v
    return out


def putzer_exp(M: np.ndarray, t: float, eigenvalues: Sequence[complex] | None = None) -> np.ndarray:
    """e[tM] = sum_j r_j(t) P_j with P_1 = I, P_j = (M - l_{j-1}) ... (M - l_1)."""
    M = np.asarray(M, dtype=float)
    n = M.shape[0]
    lam = eigenvalues_general(M) if eigenvalues is None else np.asarray(eigenvalues, dtype=complex)
    if lam.size != n:
        raise DimensionMismatch(f"{lam.size} eigenvalues given for dimension {n}")
    r = putzer_r(lam, t)
    P = np.eye(n, dtype=complex)
    out = r[0] * P
    for j in range(1, n):
        P = (M - lam[j - 1] * np.eye(n)) @ P
        out = out + r[j] * P
    return out


def _q_matrices(C, U, lam) -> list[np.ndarray]:
    k = len(C)
    d = np.asarray(C[0]).shape[0]
    m = k * d
    R = putzer_derivatives_at_zero(lam, m)
    Q: list[np.ndarray] = [np.asarray(U[0], dtype=complex)]
    for mm in range(1, k):
        acc = np.asarray(U[mm], dtype=complex).copy()
        for j in range(mm):
            acc -= R[mm, j] * Q[j]
        Q.append(acc)
    for n in range(k * (d - 1)):
        acc = np.zeros((d, d), dtype=complex)
        for i in range(k):
            inner = sum(R[i + n, j] * Q[j] for j in range(i + n + 1))
            acc += np.asarray(C[i]) @ inner
        for j in range(k + n):
            acc -= R[k + n, j] * Q[j]
        Q.append(acc)
    return Q


def _as_real(X: np.ndarray, like_real: bool) -> np.ndarray:
    if like_real and np.max(np.abs(X.imag), initial=0.0) <= 1e-8 * (1.0 + np.max(np.abs(X.real), initial=0.0)):
        return X.real.copy()
    return X


def kth_order_ode_constant(C: Sequence[np.ndarray], U: Sequence[np.ndarray], tgrid,
                           eigenvalues: Sequence[complex] | None = None,
                           derivative: int = 0, integral: bool = False) -> np.ndarray:
    """Solve U^(k) - C_{k-1}U^(k-1) - ... - C_0 U = 0, U^(i)(0) = U_i, by U = sum r_j Q_j.

    Returns an array of shape (len(tgrid), d, d).  derivative=m returns
    U^(m) instead; integral=True returns the running integral from 0.
    """
    C = [np.atleast_2d(np.asarray(c, dtype=float)) for c in C]
    U = [np.atleast_2d(np.asarray(u, dtype=float)) for u in U]
    k = len(C)
    if len(U) != k:
        raise DimensionMismatch("need as many initial values as coefficients")
    d = C[0].shape[0]
    lam = eigenvalues_general(companion_matrix(C)) if eigenvalues is None else np.asarray(eigenvalues, dtype=complex)
    if lam.size != k * d:
        raise DimensionMismatch("eigenvalue count must equal k*d")
    Q = np.array(_q_matrices(C, U, lam))
    ts = np.atleast_1d(np.asarray(tgrid, dtype=float))
    out = np.empty((ts.size, d, d), dtype=complex)
    for i, t in enumerate(ts):
        r = putzer_r_integral(lam, t) if integral else putzer_r(lam, t, derivative)
        out[i] = np.tensordot(r, Q, axes=1)
    if not np.all(np.isfinite(out)):
        raise EigenFailure("non-finite values in Putzer representation")
    return _as_real(out, True)


def kth_order_ode_distinct(C: Sequence[np.ndarray], U: Sequence[np.ndarray],
                           nu: Sequence[complex], t) -> np.ndarray:
    """Same ODE via U(t) = sum e^{nu_j t} Q_j with a Vandermonde solve."""
    C = [np.atleast_2d(np.asarray(c, dtype=float)) for c in C]
    U = [np.atleast_2d(np.asarray(u, dtype=float)) for u in U]
    k = len(C)
    d = C[0].shape[0]
    nu = np.asarray(nu, dtype=complex)
    m = k * d
    if nu.size != m:
        raise DimensionMismatch("need k*d eigenvalues")
    scale = 1.0 + np.max(np.abs(nu))
    gaps = np.abs(nu[:, None] - nu[None, :]) + np.eye(m) * scale
    if np.min(gaps) <= 1e-8 * scale:
        raise RepeatedEigenvalue("eigenvalues are not distinct")
    Uh = [u.astype(complex) for u in U]
    for n in range(k, m):
        Uh.append(sum(C[i] @ Uh[n - k + i] for i in range(k)))
    V = np.vander(nu, m, increasing=True).T
    if np.linalg.cond(V) > 1e12:
        raise IllConditionedVandermonde(f"Vandermonde condition {np.linalg.cond(V):.2e}")
    rhs = np.array(Uh).reshape(m, d * d)
    Q = np.linalg.solve(V, rhs).reshape(m, d, d)
    ts = np.atleast_1d(np.asarray(t, dtype=float))
    out = np.einsum("tj,jpq->tpq", np.exp(np.outer(ts, nu)), Q)
    return _as_real(out, True)


# ---------------------------------------------------------------- identities


def cauchy_det(alpha: Sequence[float], beta: Sequence[float]) -> float:
    """det(1/(alpha_i + beta_j)) by the Cauchy product formula."""
    a = np.asarray(alpha, dtype=float)
    b = np.asarray(beta, dtype=float)
    if a.size != b.size:
        raise DimensionMismatch("alpha and beta must have equal length")
    s = a[:, None] + b[None, :]
    if np.any(s == 0.0):
        raise SingularEntry("alpha_i + beta_j = 0 for some i, j")
    num = 1.0
    n = a.size
    for i in range(n):
        for j in range(i + 1, n):
            num *= (a[i] - a[j]) * (b[i] - b[j])
    return float(num / np.prod(s))


def lagrange_sum(a: Sequence[float], b: Sequence[float], z: float) -> float:
    """Left side of Lagrange's identity; equals prod_k (z + b_k)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    n = a.size
    if b.size != n - 1:
        raise DimensionMismatch("b must have one entry fewer than a")
    if np.unique(a).size != n:
        raise RepeatedNode("nodes a_i must be distinct")
    total = 0.0
    for k in range(n):
        others = np.delete(a, k)
        total += np.prod(a[k] + b) * np.prod(others - z) / np.prod(others - a[k])
    return float(total)
