"""Matrix-valued coefficient paths t -> sigma(t) on [0, T]."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import BadParams

MatrixFn = Callable[[float], np.ndarray]


@dataclass(frozen=True)
class SigmaPath:
    """A d x d matrix function of time.

    ``fn`` evaluates the path; ``dfn`` is its derivative when known in closed
    form.  Without ``dfn`` the derivative is taken by centered differences
    (one-sided at the ends of [0, T]).
    """

    d: int
    T: float
    fn: MatrixFn
    dfn: MatrixFn | None = None
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __call__(self, t: float) -> np.ndarray:
        return np.asarray(self.fn(t), dtype=float).reshape(self.d, self.d)

    def derivative(self, t: float) -> np.ndarray:
        if self.dfn is not None:
            return np.asarray(self.dfn(t), dtype=float).reshape(self.d, self.d)
        h = 1e-5 * max(self.T, 1.0)
        lo, hi = max(t - h, 0.0), min(t + h, self.T)
        return (self(hi) - self(lo)) / (hi - lo)

    def sym(self, t: float) -> np.ndarray:
        s = self(t)
        return 0.5 * (s + s.T)

    def skew(self, t: float) -> np.ndarray:
        s = self(t)
        return 0.5 * (s - s.T)

    def on_grid(self, tgrid: Sequence[float]) -> np.ndarray:
        return np.array([self(t) for t in tgrid])

    def trace_integral(self, nodes: int = 64) -> float:
        """Gauss-Legendre value of the integral of tr sigma over [0, T]."""
        x, w = np.polynomial.legendre.leggauss(nodes)
        ts = 0.5 * self.T * (x + 1.0)
        return float(0.5 * self.T * sum(wi * np.trace(self(t)) for wi, t in zip(w, ts)))


def constant(C, T: float = 1.0) -> SigmaPath:
    C = np.atleast_2d(np.asarray(C, dtype=float))
    if C.shape[0] != C.shape[1]:
        raise BadParams("sigma must be square")
    d = C.shape[0]
    zero = np.zeros((d, d))
    return SigmaPath(d, T, lambda t: C, lambda t: zero, "constant", {"C": C.tolist()})


def polynomial(coeffs: Sequence, T: float = 1.0) -> SigmaPath:
    """sigma(t) = sum_k A_k t^k with an exact derivative."""
    A = [np.atleast_2d(np.asarray(a, dtype=float)) for a in coeffs]
    d = A[0].shape[0]

    def fn(t):
        return sum(a * t**k for k, a in enumerate(A))

    def dfn(t):
        if len(A) == 1:
            return np.zeros((d, d))
        return sum(k * a * t ** (k - 1) for k, a in enumerate(A) if k > 0)

    return SigmaPath(d, T, fn, dfn, "polynomial", {"coeffs": [a.tolist() for a in A]})


def from_grid(tgrid: Sequence[float], values: np.ndarray) -> SigmaPath:
    """Piecewise-linear interpolation of sampled matrices; derivative by differences."""
    tg = np.asarray(tgrid, dtype=float)
    vals = np.asarray(values, dtype=float)
    if tg.ndim != 1 or vals.shape[0] != tg.size or np.any(np.diff(tg) <= 0):
        raise BadParams("grid must be increasing and match the samples")
    d = vals.shape[1]
    flat = vals.reshape(tg.size, d * d)
    dflat = np.gradient(flat, tg, axis=0, edge_order=1)

    def fn(t):
        return np.array([np.interp(t, tg, flat[:, k]) for k in range(d * d)]).reshape(d, d)

    def dfn(t):
        return np.array([np.interp(t, tg, dflat[:, k]) for k in range(d * d)]).reshape(d, d)

    return SigmaPath(d, float(tg[-1]), fn, dfn, "grid", {})


def levy_area_sigma(T: float = 1.0) -> SigmaPath:
    """sigma = J/2, whose p_sigma is the stochastic area of a planar path."""
    J = np.array([[0.0, -1.0], [1.0, 0.0]])
    return constant(0.5 * J, T)
