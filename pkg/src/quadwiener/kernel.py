"""Kernels on [0,T]^2, their discretisation, and operator functionals.

A kernel is sampled at cell midpoints t_i = (i + 1/2) T / n.  The operator
B_kappa acting on Cameron-Martin derivatives h' becomes the block matrix with
blocks kappa(t_i, t_j) * Delta, Delta = T / n.  Causal indicators 1_{[0,t)}(s)
become strict i > j, and the diagonal cell takes the average of the two
one-sided limits.  With that convention every causal kernel gives a strictly
block-lower-triangular matrix (when its diagonal limit vanishes), and its
regularised determinant is exactly one.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import linalg
from .errors import BadParams, NotIntegrable, SingularOperator, UnknownFamily
from .sigma import SigmaPath, constant

SINGULAR_RTOL = 1e-10
J2 = linalg.J2


def midpoints(n: int, T: float) -> np.ndarray:
    return (np.arange(n) + 0.5) * (T / n)


@dataclass(frozen=True)
class GridKernel:
    """values[i, j] is the d x d matrix kappa(t_i, t_j)."""

    d: int
    n: int
    T: float
    values: np.ndarray
    symmetric: bool = False
    family: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        v = self.values
        if v.shape != (self.n, self.n, self.d, self.d):
            raise BadParams(f"kernel values have shape {v.shape}, expected {(self.n, self.n, self.d, self.d)}")
        if not np.all(np.isfinite(v)):
            raise BadParams("kernel values must be finite")
        if self.symmetric and not np.allclose(v, v.transpose(1, 0, 3, 2), rtol=0, atol=1e-12 * (1 + np.abs(v).max())):
            raise BadParams("kernel flagged symmetric but values[i,j] != values[j,i]^T")

    @property
    def delta(self) -> float:
        return self.T / self.n

    @property
    def tgrid(self) -> np.ndarray:
        return midpoints(self.n, self.T)

    def operator(self) -> "DiscreteOperator":
        return DiscreteOperator(self.d, self.n, self.T, blocks_to_matrix(self.values) * self.delta, self.symmetric)

    def scaled(self, c: float) -> "GridKernel":
        return replace(self, values=c * self.values, family=f"{c}*{self.family}")

    def transpose(self) -> "GridKernel":
        """The adjoint kernel kappa*(t, s) = kappa(s, t)^T."""
        return replace(self, values=self.values.transpose(1, 0, 3, 2).copy(), family=f"({self.family})*")


@dataclass(frozen=True)
class DiscreteOperator:
    """Dense (n d) x (n d) matrix of B_kappa; index i*d + a is node i, component a."""

    d: int
    n: int
    T: float
    matrix: np.ndarray
    symmetric: bool = False

    @property
    def weight(self) -> float:
        return self.T / self.n

    @property
    def dim(self) -> int:
        return self.n * self.d

    def apply(self, h: np.ndarray) -> np.ndarray:
        return (self.matrix @ np.asarray(h).reshape(-1)).reshape(self.n, self.d)

    def kernel(self) -> GridKernel:
        return GridKernel(self.d, self.n, self.T, matrix_to_blocks(self.matrix, self.n, self.d) / self.weight,
                          self.symmetric)

    def with_matrix(self, matrix: np.ndarray, symmetric: bool | None = None) -> "DiscreteOperator":
        return DiscreteOperator(self.d, self.n, self.T, matrix, self.symmetric if symmetric is None else symmetric)


def blocks_to_matrix(values: np.ndarray) -> np.ndarray:
    n, _, d, _ = values.shape
    return values.transpose(0, 2, 1, 3).reshape(n * d, n * d)


def matrix_to_blocks(matrix: np.ndarray, n: int, d: int) -> np.ndarray:
    return matrix.reshape(n, d, n, d).transpose(0, 2, 1, 3)


def operator_from_matrix(matrix: np.ndarray, like: DiscreteOperator | GridKernel, symmetric: bool = False) -> DiscreteOperator:
    return DiscreteOperator(like.d, like.n, like.T, matrix, symmetric)


# ---------------------------------------------------------------- CM vectors


def cm_inner(h: np.ndarray, g: np.ndarray, delta: float) -> float:
    """<h, g>_H = Delta * sum <h'(t_i), g'(t_i)> on derivative samples."""
    return float(delta * np.vdot(np.asarray(h).reshape(-1), np.asarray(g).reshape(-1)).real)


def cm_vector(fn, n: int, T: float, d: int) -> np.ndarray:
    """Sample a derivative h'(t) (vector valued) on the midpoint grid."""
    return np.array([np.asarray(fn(t), dtype=float).reshape(d) for t in midpoints(n, T)])


# ---------------------------------------------------------------- families


def causal_mask(n: int) -> np.ndarray:
    """Strict i > j mask, the grid version of 1_{[0,t)}(s).

    Volterra kernels keep a zero diagonal so their operator matrices are
    strictly lower triangular and det_2(I + B) = 1 holds exactly.
    """
    return np.tril(np.ones((n, n)), -1)


def _rho_sigma_values(sigma: SigmaPath, n: int, T: float) -> np.ndarray:
    t = midpoints(n, T)
    S = sigma.on_grid(t)
    d = sigma.d
    vals = np.zeros((n, n, d, d))
    lower = np.tril(np.ones((n, n), dtype=bool), -1)
    vals[lower] = np.broadcast_to(S[:, None], (n, n, d, d))[lower]
    upper = lower.T
    vals[upper] = np.broadcast_to(S.transpose(0, 2, 1)[None, :], (n, n, d, d))[upper]
    idx = np.arange(n)
    vals[idx, idx] = 0.5 * (S + S.transpose(0, 2, 1))
    return vals


def _as_sigma(params: dict, d: int, T: float) -> SigmaPath:
    sig = params.get("sigma")
    if sig is None:
        raise BadParams("rho_sigma needs params['sigma']")
    if isinstance(sig, SigmaPath):
        if sig.d != d:
            raise BadParams("sigma dimension does not match d")
        return sig
    C = np.asarray(sig, dtype=float)
    if C.ndim == 0:
        C = C * np.eye(d)
    return constant(C, T)


def _iterated_kernel(sigma: SigmaPath, order: int, n: int, T: float) -> np.ndarray:
    t = midpoints(n, T)
    delta = T / n
    d = sigma.d
    diff = t[:, None] - t[None, :]
    def gamma(N):
        g = np.where(diff > 0, np.maximum(diff, 0.0) ** N / math.factorial(N), 0.0)
        if N == 0:
            g[np.diag_indices(n)] = 0.5
        return g
    g_lo, g_hi = gamma(order - 1), gamma(order)
    S = sigma.on_grid(t)
    # eta(t,s) = int g_{N-1}(u,t) g_N(u,s) sigma(u) + g_N(u,t) g_{N-1}(u,s) sigma(u)^T du
    a = np.einsum("ut,us,uab->tsab", g_lo, g_hi, S) * delta
    return a + a.transpose(1, 0, 3, 2)


def builtin_kernel(name: str, params: dict | None = None, d: int = 1, n: int = 128, T: float = 1.0) -> GridKernel:
    """Named kernel families sampled on the midpoint grid.

    levy_area      eta = (1/2)(1_{[0,t)}(s) - 1_{(t,T]}(s)) J        (d = 2)
    kac            c(kappa) = T - max(t, s) for kappa = 1_{[0,t)}(s)   (times I_d)
    indicator      kappa = scale * 1_{[0,t)}(s) I_d
    rho_sigma      1_{[0,t)}(s) sigma(t) + 1_{(t,T]}(s) sigma(s)^T
    sample_variance (min(t,s) - ts/T) D
    harmonic       c(kappa) for params['kappa'] (optionally c(kappa; x))
    iterated_integral  the kernel of int <sigma X_N, dX_N>, X_N the N-fold integral
    zero           0
    custom_csv     params['path'] (CSV t,s,i,j,value) with a key=value sidecar
    """
    params = dict(params or {})
    if n < 1 or T <= 0 or d < 1:
        raise BadParams("need n >= 1, d >= 1, T > 0")
    t = midpoints(n, T)
    eye = np.eye(d)
    if name == "zero":
        return GridKernel(d, n, T, np.zeros((n, n, d, d)), True, name, params)
    if name == "levy_area":
        if d != 2:
            raise BadParams("levy_area needs d = 2")
        sgn = np.tril(np.ones((n, n)), -1) - np.triu(np.ones((n, n)), 1)
        return GridKernel(2, n, T, 0.5 * sgn[:, :, None, None] * J2, True, name, params)
    if name == "kac":
        vals = (T - np.maximum(t[:, None], t[None, :]))[:, :, None, None] * eye
        return GridKernel(d, n, T, vals, True, name, params)
    if name == "indicator":
        scale = float(params.get("scale", 1.0))
        vals = scale * causal_mask(n)[:, :, None, None] * eye
        return GridKernel(d, n, T, vals, False, name, params)
    if name == "rho_sigma":
        sigma = _as_sigma(params, d, T)
        return GridKernel(d, n, T, _rho_sigma_values(sigma, n, T), True, name, {**params, "sigma": sigma})
    if name == "sample_variance":
        D = np.asarray(params.get("D", 1.0), dtype=float)
        D = D * eye if D.ndim == 0 else D.reshape(d, d)
        if not np.allclose(D, D.T):
            raise BadParams("D must be symmetric")
        core = np.minimum(t[:, None], t[None, :]) - np.outer(t, t) / T
        return GridKernel(d, n, T, core[:, :, None, None] * D, True, name, {**params, "D": D})
    if name == "harmonic":
        base = params.get("kappa")
        if not isinstance(base, GridKernel):
            raise BadParams("harmonic needs params['kappa'] as a GridKernel")
        return harmonic_kernels(base, params.get("x"))
    if name == "iterated_integral":
        order = int(params.get("order", 1))
        if order not in (1, 2):
            raise BadParams("iterated_integral supports order 1 or 2")
        sigma = _as_sigma(params, d, T)
        return GridKernel(d, n, T, _iterated_kernel(sigma, order, n, T), True, name,
                          {**params, "sigma": sigma, "order": order})
    if name == "custom_csv":
        return load_csv_kernel(params["path"], n=n, sidecar=params.get("sidecar"))
    raise UnknownFamily(f"unknown kernel family {name!r}")


def load_csv_kernel(path, n: int = 128, sidecar=None) -> GridKernel:
    """Read `t,s,i,j,value` rows and map them piecewise-constantly onto the grid.

    The sidecar (default: path with suffix .meta) holds `T=` and `d=` lines.
    Components i, j are 0-based.
    """
    path = Path(path)
    side = Path(sidecar) if sidecar else path.with_suffix(".meta")
    meta = read_keyvalue(side)
    try:
        T = float(meta["T"])
        d = int(meta["d"])
    except KeyError as exc:
        raise BadParams(f"sidecar {side} must define T and d") from exc
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["t", "s", "i", "j", "value"]:
            raise BadParams("CSV header must be t,s,i,j,value")
        try:
            for r in reader:
                rows.append((float(r["t"]), float(r["s"]), int(r["i"]), int(r["j"]), float(r["value"])))
        except (TypeError, ValueError) as exc:
            raise BadParams(f"malformed kernel CSV row: {exc}") from exc
    if not rows:
        raise BadParams("empty kernel CSV")
    ts = np.unique([r[0] for r in rows])
    ss = np.unique([r[1] for r in rows])
    table = np.zeros((ts.size, ss.size, d, d))
    for tt, s, i, j, v in rows:
        if not (0 <= i < d and 0 <= j < d):
            raise BadParams("component index out of range")
        table[np.searchsorted(ts, tt), np.searchsorted(ss, s), i, j] = v
    grid = midpoints(n, T)
    it = np.clip(np.searchsorted(ts, grid, side="right") - 1, 0, ts.size - 1)
    js = np.clip(np.searchsorted(ss, grid, side="right") - 1, 0, ss.size - 1)
    vals = table[it][:, js]
    sym = bool(np.allclose(vals, vals.transpose(1, 0, 3, 2)))
    return GridKernel(d, n, T, vals, sym, "custom_csv", {"path": str(path)})


def read_keyvalue(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise BadParams(f"bad key=value line: {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


# ---------------------------------------------------------------- kernel algebra


def eta_of_kappa(kappa: GridKernel) -> GridKernel:
    """eta(kappa) = -(kappa + kappa* + int kappa(u,.)^T kappa(u,.) du), so that
    I - B_eta = (I + B_kappa)^T (I + B_kappa) holds for the matrices."""
    M = kappa.operator().matrix
    B = -(M + M.T + M.T @ M)
    B = 0.5 * (B + B.T)
    return GridKernel(kappa.d, kappa.n, kappa.T, matrix_to_blocks(B, kappa.n, kappa.d) / kappa.delta, True,
                      f"eta({kappa.family})", {})


def harmonic_kernels(kappa: GridKernel, x=None) -> GridKernel:
    """c(kappa) (matrix B_kappa^T B_kappa) or, given x, c(kappa; x)."""
    M = kappa.operator().matrix
    n, d = kappa.n, kappa.d
    if x is None:
        B = M.T @ M
    else:
        xv = np.asarray(x, dtype=float).reshape(d)
        # rows u, columns (s, b): x^T kappa(u, s) Delta
        K = np.einsum("a,usab->usb", xv, kappa.values).reshape(n, n * d) * kappa.delta
        B = K.T @ K
    B = 0.5 * (B + B.T)
    return GridKernel(d, n, kappa.T, matrix_to_blocks(B, n, d) / kappa.delta, True, f"c({kappa.family})", {})


# ---------------------------------------------------------------- functionals


def _op(obj) -> DiscreteOperator:
    return obj.operator() if isinstance(obj, GridKernel) else obj


def spectrum(op, tol: float = 1e-10) -> np.ndarray:
    op = _op(op)
    return linalg.sym_eigvals(op.matrix, tol=tol)


def lambda_max(op) -> float:
    """Largest eigenvalue of the symmetric discretisation (0 for the zero operator)."""
    w = spectrum(op)
    return float(w[0]) if w.size else 0.0


def det2_log(op, shift: float = 1.0, eigenvalues: np.ndarray | None = None) -> dict:
    """log|det_2(I + shift B)| with sign and the count of non-positive factors."""
    w = spectrum(op) if eigenvalues is None else np.asarray(eigenvalues)
    f = 1.0 + shift * w
    nonpos = int(np.sum(f <= 0.0))
    with np.errstate(divide="ignore"):
        log_abs = float(np.sum(np.log(np.abs(f))) - shift * np.sum(w))
    sign = -1.0 if np.sum(f < 0.0) % 2 else 1.0
    if np.any(f == 0.0):
        sign = 0.0
    return {"log_abs": log_abs, "sign": sign, "nonpositive_factors": nonpos}


def det2(op, shift: float = 1.0) -> float:
    """det_2(I + shift B) = prod (1 + shift l) e^{-shift l} over the spectrum.

    Non-symmetric operators go through det(I + shift B) e^{-shift tr B}; a
    strictly block-lower-triangular (causal) matrix gives exactly 1.
    """
    op = _op(op)
    if not op.symmetric and not _is_symmetric(op.matrix):
        return float(det2_general(shift * op.matrix).real)
    r = det2_log(op, shift)
    if r["sign"] == 0.0:
        return 0.0
    return r["sign"] * math.exp(r["log_abs"])


def _is_symmetric(M: np.ndarray) -> bool:
    return bool(np.linalg.norm(M - M.T) <= 1e-10 * max(np.linalg.norm(M), 1e-300))


def det2_general(matrix: np.ndarray) -> complex:
    """det_2(I + A) = det(I + A) e^{-tr A} for a non-symmetric matrix."""
    A = np.asarray(matrix)
    if not np.any(np.triu(A)):
        return 1.0 + 0.0j
    sign, logdet = np.linalg.slogdet(np.eye(A.shape[0]) + A)
    return complex(sign * np.exp(logdet - np.trace(A)))


def sqrt_shift(eta) -> DiscreteOperator:
    """C - I with C symmetric positive and C^2 = I - B_eta."""
    op = _op(eta)
    E = linalg.sym_eigen(op.matrix, tol=1e-10)
    if E.eigenvalues.size and E.eigenvalues[0] >= 1.0:
        raise NotIntegrable(f"lambda_max = {E.eigenvalues[0]:.6g} >= 1")
    root = np.sqrt(1.0 - E.eigenvalues) - 1.0
    V = E.eigenvectors
    M = (V * root) @ V.T
    return op.with_matrix(0.5 * (M + M.T), True)


def resolvent_shift(kappa) -> DiscreteOperator:
    """(I + B)^{-1} - I, refused when I + B is numerically singular."""
    op = _op(kappa)
    A = np.eye(op.dim) + op.matrix
    smin = np.linalg.svd(A, compute_uv=False)[-1]
    if smin < SINGULAR_RTOL * (1.0 + np.linalg.norm(op.matrix, 2)):
        raise SingularOperator(f"smallest singular value {smin:.3e}")
    return op.with_matrix(np.linalg.inv(A) - np.eye(op.dim))


def hs_norm(op) -> float:
    return float(np.linalg.norm(_op(op).matrix))


def trace(op) -> float:
    return float(np.trace(_op(op).matrix))


def lambda_gap(kernel: GridKernel) -> dict | None:
    """lambda_max at n and n/2 for rebuildable builtin kernels (a resolution diagnostic)."""
    if kernel.family not in {"levy_area", "kac", "rho_sigma", "sample_variance"} or kernel.n < 4:
        return None
    coarse = builtin_kernel(kernel.family, kernel.params, kernel.d, kernel.n // 2, kernel.T)
    fine_l = lambda_max(kernel)
    coarse_l = lambda_max(coarse)
    return {"n": kernel.n, "lambda_n": fine_l, "n_half": kernel.n // 2, "lambda_half": coarse_l,
            "gap": abs(fine_l - coarse_l)}
