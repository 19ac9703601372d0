"""Feynman-Kac transition densities and the heat kernel on G(2).

For a^x = int <phi (x + theta), d theta> + (1/2) int <psi (x + theta), x + theta> dt
the law of x + theta(T) under e^{a^x} d mu has the density

    p_T(x, y) = (e^{-int tr phi_S} / ((2 pi)^d det S(0) det v_T(S)))^{1/2} e^{d(x, y)}

with S, U, V the fundamental solutions of the second-order suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import laplace, ode
from .errors import BadParams, NotSPD, QuadratureNotConverged, SingularS, SingularV0
from .sigma import SigmaPath

V0_RTOL = 1e-12
G2_ENVELOPE = 1e-12
G2_PANEL = 0.5
G2_NODES = 16
G2_RTOL = 1e-10


# ---------------------------------------------------------------- Gaussian densities


@dataclass(frozen=True)
class GaussianDensity:
    V: np.ndarray

    def __post_init__(self):
        V = self.V
        if V.ndim != 2 or V.shape[0] != V.shape[1] or not np.allclose(V, V.T, atol=1e-12 * (1 + np.abs(V).max())):
            raise NotSPD("covariance must be a symmetric square matrix")
        if np.linalg.eigvalsh(0.5 * (V + V.T))[0] <= 0:
            raise NotSPD("covariance must be positive definite")

    def __call__(self, x) -> np.ndarray | float:
        """Density at a point, or at every row of an array of shape (..., d)."""
        d = self.V.shape[0]
        x = np.asarray(x, dtype=float)
        if d == 1 and (x.ndim == 0 or x.shape[-1] != 1):
            x = x[..., None]
        pts = x.reshape(-1, d)
        L = np.linalg.cholesky(self.V)
        z = np.linalg.solve(L, pts.T)
        logdet = 2.0 * np.sum(np.log(np.diag(L)))
        vals = np.exp(-0.5 * np.sum(z * z, axis=0) - 0.5 * (d * math.log(2 * math.pi) + logdet))
        return float(vals[0]) if x.ndim == 1 else vals.reshape(x.shape[:-1])


def gaussian_density(V, x) -> float:
    """g_V(x) = (2 pi)^{-d/2} (det V)^{-1/2} exp(-<V^{-1} x, x>/2)."""
    V = np.atleast_2d(np.asarray(V, dtype=float))
    x = np.asarray(x, dtype=float).reshape(V.shape[0])
    return float(GaussianDensity(V)(x))


# ---------------------------------------------------------------- Feynman-Kac


@dataclass(frozen=True)
class FKDensity:
    """Assembled data of p_T(x, y) for one (phi, psi, T)."""

    phi: SigmaPath
    psi: SigmaPath
    suite: ode.SecondOrderSuite
    vT: np.ndarray
    log_prefactor: float
    phiS_T: np.ndarray
    phiS_0: np.ndarray
    U0: np.ndarray
    dU0: np.ndarray
    V0inv: np.ndarray
    dV0: np.ndarray

    @property
    def d(self) -> int:
        return self.phi.d

    def quadratic(self, x, y) -> float:
        """d(x, y), assembled from the terminal and initial values of U, V."""
        x = np.asarray(x, dtype=float).reshape(self.d)
        y = np.asarray(y, dtype=float).reshape(self.d)
        return 0.5 * float(y @ self.phiS_T @ y - x @ self.phiS_0 @ x + x @ self.dU0 @ y
                           + (self.V0inv @ (x - self.U0 @ y)) @ (self.dV0.T @ x - y))

    def log_density(self, x, y) -> float:
        return self.log_prefactor + self.quadratic(x, y)

    def __call__(self, x, y) -> float:
        return math.exp(self.log_density(x, y))

    def y_gaussian(self, x) -> tuple[float, np.ndarray, np.ndarray]:
        """p_T(x, .) = exp(c - (y - m)^T P (y - m) / 2): returns (c, m, P)."""
        d = self.d
        x = np.asarray(x, dtype=float).reshape(d)
        f0 = self.log_density(x, np.zeros(d))
        E = np.eye(d)
        g = np.array([0.5 * (self.log_density(x, E[i]) - self.log_density(x, -E[i])) for i in range(d)])
        P = np.empty((d, d))
        for i in range(d):
            for j in range(d):
                P[i, j] = -0.25 * (self.log_density(x, E[i] + E[j]) - self.log_density(x, E[i] - E[j])
                                   - self.log_density(x, -E[i] + E[j]) + self.log_density(x, -E[i] - E[j]))
        P = 0.5 * (P + P.T)
        m = np.linalg.solve(P, g)
        return f0 + 0.5 * float(m @ P @ m), m, P


def _sym(M):
    return 0.5 * (M + M.T)


def fk_setup(phi: SigmaPath, psi: SigmaPath, steps: int = ode.DEFAULT_STEPS) -> FKDensity:
    if phi.d != psi.d or not math.isclose(phi.T, psi.T):
        raise BadParams("phi and psi must share d and T")
    d, T = phi.d, phi.T
    suite = ode.second_order_suite(phi, psi, steps)
    if not suite.nonsingular:
        raise SingularS("det S vanishes on [0, T]")
    V0 = suite.V.values[0]
    if abs(np.linalg.det(V0)) < V0_RTOL * max(1.0, np.abs(V0).max()) ** d:
        raise SingularV0("det V(0) = 0")
    vT = ode.v_t_of_S(suite.S, T)
    sign_v, logdet_v = np.linalg.slogdet(vT)
    if sign_v <= 0 or suite.det_S_sign[0] <= 0:
        raise SingularS("det S(0) det v_T(S) must be positive")
    tr = phi.trace_integral()
    log_pref = 0.5 * (-tr - d * math.log(2 * math.pi) - suite.log_abs_det_S[0] - logdet_v)
    return FKDensity(phi, psi, suite, vT, log_pref, _sym(phi(T)), _sym(phi(0.0)), suite.U.values[0],
                     suite.dU.values[0], np.linalg.inv(V0), suite.dV.values[0])


def fk_density(phi: SigmaPath, psi: SigmaPath, x, y, T: float | None = None,
               steps: int = ode.DEFAULT_STEPS) -> float:
    if T is not None and not math.isclose(T, phi.T):
        raise BadParams("T must match the horizon of phi and psi")
    return fk_setup(phi, psi, steps)(x, y)


def sigma_of_phi_psi(phi: SigmaPath, psi: SigmaPath, nodes: int = 32) -> SigmaPath:
    """sigma(t) = phi(t) + int_t^T psi_S(s) ds (Gauss-Legendre on [t, T])."""
    xg, wg = np.polynomial.legendre.leggauss(nodes)
    T = phi.T

    def tail(t):
        if t >= T:
            return np.zeros((phi.d, phi.d))
        s = t + 0.5 * (T - t) * (xg + 1.0)
        return 0.5 * (T - t) * sum(w * _sym(psi(si)) for w, si in zip(wg, s))

    return SigmaPath(phi.d, T, lambda t: phi(t) + tail(t), lambda t: phi.derivative(t) - _sym(psi(t)),
                     "phi+int psi", {})


def fk_mass_laplace(phi: SigmaPath, psi: SigmaPath, x, steps: int = ode.DEFAULT_STEPS) -> float:
    """E[e^{a^x}] = E[e^{p_sigma + int <sigma x, d theta>}] e^{<(int psi_S) x, x>/2 + (1/2) int int_t^T tr psi_S}."""
    d, T = phi.d, phi.T
    x = np.asarray(x, dtype=float).reshape(d)
    sigma = sigma_of_phi_psi(phi, psi)
    xg, wg = np.polynomial.legendre.leggauss(48)
    ts = 0.5 * T * (xg + 1.0)
    w = 0.5 * T * wg
    int_psi = sum(wi * _sym(psi(t)) for wi, t in zip(w, ts))
    # int_0^T int_t^T tr psi_S ds dt = int_0^T s tr psi_S(s) ds
    double = sum(wi * t * np.trace(psi(t)) for wi, t in zip(w, ts))
    base = laplace.laplace_ode(sigma, lambda t: sigma(t) @ x, steps, routes=("second_order",))["second_order"].value
    return float(base * math.exp(0.5 * x @ int_psi @ x + 0.5 * double))


def fk_normalization_check(phi: SigmaPath, psi: SigmaPath, x, T: float | None = None,
                           steps: int = ode.DEFAULT_STEPS, nodes: int = 48) -> dict:
    """Integrate p_T(x, .) numerically and compare with the Laplace route."""
    fk = fk_setup(phi, psi, steps)
    d = fk.d
    c, m, P = fk.y_gaussian(x)
    evals, evecs = np.linalg.eigh(P)
    if evals[0] <= 0:
        raise NotSPD("p_T(x, .) is not integrable in y")
    half = 12.0 / np.sqrt(evals)
    xg, wg = np.polynomial.legendre.leggauss(nodes)
    grids = [(half[i] * xg, half[i] * wg) for i in range(d)]
    mesh = np.stack(np.meshgrid(*[g[0] for g in grids], indexing="ij"), -1).reshape(-1, d)
    weights = np.prod(np.stack(np.meshgrid(*[g[1] for g in grids], indexing="ij"), -1).reshape(-1, d), axis=1)
    ys = m + mesh @ evecs.T
    vals = np.array([fk(x, y) for y in ys])
    quad = float(weights @ vals)
    lap = fk_mass_laplace(phi, psi, x, steps)
    return {"quadrature": quad, "laplace": lap, "abs_diff": abs(quad - lap), "rel_diff": abs(quad - lap) / abs(lap)}


# ---------------------------------------------------------------- closed forms used as oracles


def mehler_density(lam: float, a: float, x: float, y: float, T: float = 1.0) -> float:
    """phi = a, psi = -lam^2 (d = 1), including the e^{-aT/2} factor from the trace term."""
    lt = lam * T
    expo = 0.5 * a * (y * y - x * x) - 0.5 * lam / math.tanh(lt) * (x * x - 2 * x * y / math.cosh(lt) + y * y)
    return math.sqrt(lt / math.sinh(lt) / (2 * math.pi * T)) * math.exp(expo - 0.5 * a * T)


def mehler_density_oscillatory(lam: float, a: float, x: float, y: float, T: float = 1.0) -> float:
    """phi = a, psi = +lam^2 (d = 1), valid while S does not vanish; includes e^{-aT/2}."""
    lt = lam * T
    expo = 0.5 * a * (y * y - x * x) - 0.5 * lam / math.tan(lt) * (x * x - 2 * x * y / math.cos(lt) + y * y)
    return math.sqrt(lt / math.sin(lt) / (2 * math.pi * T)) * math.exp(expo - 0.5 * a * T)


# ---------------------------------------------------------------- G(2) heat kernel


@dataclass(frozen=True)
class G2Quadrature:
    nodes: np.ndarray
    weights: np.ndarray
    B: float


def _g2_rule(T: float, panels: int | None = None) -> G2Quadrature:
    # envelope (w / sinh w) <= 2 w e^{-w} with w = b T / 2 drops below 1e-12 at w ~ 31
    wmax = 1.0
    while 2.0 * wmax * math.exp(-wmax) > G2_ENVELOPE:
        wmax += 0.5
    B = 2.0 * wmax / T
    if panels is None:
        panels = max(8, int(math.ceil(B / G2_PANEL)))
    xg, wg = np.polynomial.legendre.leggauss(G2_NODES)
    edges = np.linspace(0.0, B, panels + 1)
    mid = 0.5 * (edges[1:] + edges[:-1])
    half = 0.5 * (edges[1:] - edges[:-1])
    nodes = (mid[:, None] + half[:, None] * xg[None, :]).ravel()
    weights = (half[:, None] * wg[None, :]).ravel()
    return G2Quadrature(nodes, weights, B)


def _g2_eval(r2: np.ndarray, a: np.ndarray, T: float, rule: G2Quadrature) -> np.ndarray:
    b = rule.nodes
    w = 0.5 * b * T
    ratio = w / np.sinh(w)
    wcoth = w / np.tanh(w)
    amp = rule.weights * ratio * np.exp(-np.outer(r2, wcoth) / (2.0 * T))          # (r, b)
    # the integrand is even in b: int_R e^{iab} f(b) db = 2 int_0^B cos(ab) f(b) db
    return 2.0 * amp @ np.cos(np.outer(b, a)) / ((2 * math.pi) * (2 * math.pi * T))


def g2_heat_kernel(x, a, T: float = 1.0, check: bool = True) -> np.ndarray | float:
    """Density of (theta(T), area) for a planar path.

    p_T(x, a) = ((2 pi)(2 pi T))^{-1} int e^{iab} (w / sinh w) exp(-|x|^2 w coth w / (2T)) db,
    w = bT/2, which is the d = 2 case of the determinant formula with the
    regularised determinant entering to the power -1/2.
    ``x`` may be a point or an array of points (.., 2); ``a`` scalar or 1-D.
    """
    if T <= 0:
        raise BadParams("T must be positive")
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != 2:
        raise BadParams("x must have two components")
    r2 = np.sum(x.reshape(-1, 2) ** 2, axis=1)
    av = np.atleast_1d(np.asarray(a, dtype=float))
    rule = _g2_rule(T)
    vals = _g2_eval(r2, av, T, rule)
    if check:
        fine = _g2_eval(r2, av, T, _g2_rule(T, panels=2 * rule.nodes.size // G2_NODES))
        err = np.max(np.abs(fine - vals))
        if err > G2_RTOL * max(np.max(np.abs(fine)), 1e-300) + 1e-300:
            raise QuadratureNotConverged(f"panel doubling changed the value by {err:.3e}")
        vals = fine
    out = vals.reshape(x.shape[:-1] + av.shape)
    if np.ndim(a) == 0:
        out = out[..., 0]
    return float(out) if out.ndim == 0 else out


def g2_area_marginal(x, T: float = 1.0, a_max: float | None = None, nodes: int = 801) -> float:
    """int p_T(x, a) da over [-a_max, a_max] by Gauss-Legendre."""
    if a_max is None:
        a_max = 10.0 * T + 2.0 * float(np.sum(np.asarray(x) ** 2))
    xg, wg = np.polynomial.legendre.leggauss(nodes)
    vals = g2_heat_kernel(np.asarray(x, dtype=float), a_max * xg, T)
    return float(a_max * wg @ np.atleast_1d(vals))


def g2_total_mass(T: float = 1.0, r_max: float | None = None, a_max: float | None = None,
                  r_nodes: int = 160, a_nodes: int = 401) -> float:
    """int int p_T dx da over a disc times an interval (polar coordinates in x)."""
    if r_max is None:
        r_max = 9.0 * math.sqrt(T)
    if a_max is None:
        a_max = 12.0 * T
    xr, wr = np.polynomial.legendre.leggauss(r_nodes)
    r = 0.5 * r_max * (xr + 1.0)
    wr = 0.5 * r_max * wr
    xa, wa = np.polynomial.legendre.leggauss(a_nodes)
    rule = _g2_rule(T)
    vals = _g2_eval(r * r, a_max * xa, T, rule)
    return float((wr * 2 * math.pi * r) @ vals @ (a_max * wa))
