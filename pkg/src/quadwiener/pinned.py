"""Pinned Laplace transforms through Pluecker coordinates.

The pinned integral E[e^{q} delta_0(D*k^{(N)})] is computed in two ways:

* ``pinned_general``: project the pins out of B_eta and take
  ((2 pi)^N det_2(I - B_{eta;k}) det C(k))^{-1/2} e^{-tr(pi B pi)/2};
* ``plucker_pinned``: split B_eta = A_I + A_F with A_F of finite rank,
  solve (I - A_I) J_p = sum p_j k_j and read det J_N off the 2M x M frame
  Phi = (J_M ; J_0).

Both work on the discretised operator in orthonormal grid coordinates
(u = sqrt(Delta) k'), where they are exact finite-dimensional identities.
``plucker_pinned(route="ode")`` instead solves for J_p with the linear
ODE of each worked family.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import kernel as K
from . import linalg
from .errors import (BadParams, DegenerateJN, DependentPins, NotIntegrable, ShapeMismatch,
                     UnknownFamily)
from .kernel import DiscreteOperator, GridKernel
from .laplace import LaplaceResult
from .ode import rk4_integrate
from .sigma import SigmaPath, constant

SPLIT_ATOL = 1e-12
RANGE_RTOL = 1e-10
JN_RTOL = 1e-10
DEPENDENT_RTOL = 1e-12
ODE_STEPS = 1024
QUAD_NODES = 64
FINE_STEPS = 4096
LOG_2PI = math.log(2.0 * math.pi)


# ---------------------------------------------------------------- pins


def monic_orthogonal(degree: int, T: float) -> list[np.polynomial.Polynomial]:
    """Monic f_0..f_degree with int_0^T f_i f_j dt = 0 for i != j (shifted Legendre)."""
    out = []
    for m in range(degree + 1):
        leg = np.polynomial.Legendre.basis(m, domain=[0.0, T]).convert(kind=np.polynomial.Polynomial)
        out.append(leg / leg.coef[-1])
    return out


@dataclass(frozen=True)
class PinSet:
    """Pins k_1..k_M as derivative samples on the midpoint grid, each flattened with index i*d + a."""

    d: int
    n: int
    T: float
    vectors: np.ndarray
    labels: tuple[str, ...] = ()
    polys: tuple = field(default=(), compare=False)

    @property
    def M(self) -> int:
        return self.vectors.shape[0]

    @property
    def delta(self) -> float:
        return self.T / self.n

    def onb(self, N: int | None = None) -> np.ndarray:
        """Columns sqrt(Delta) k_j', j < N, in orthonormal grid coordinates."""
        N = self.M if N is None else N
        return (math.sqrt(self.delta) * self.vectors[:N]).T

    def gram(self, N: int | None = None) -> np.ndarray:
        U = self.onb(N)
        return U.T @ U

    def scaled(self, factors) -> "PinSet":
        f = np.asarray(factors, dtype=float).reshape(-1, 1)
        return PinSet(self.d, self.n, self.T, self.vectors * f, self.labels, self.polys)


def polynomial_pins(d: int, n: int, T: float, degree: int = 0) -> PinSet:
    """k_{m d + i}' = f_m e_i for the monic orthogonal f_m, m <= degree; degree 0 pins theta(T)."""
    t = K.midpoints(n, T)
    polys = monic_orthogonal(degree, T)
    vecs, labels = [], []
    for m, f in enumerate(polys):
        ft = f(t)
        for i in range(d):
            v = np.zeros((n, d))
            v[:, i] = ft
            vecs.append(v.reshape(-1))
            labels.append(f"f{m}e{i + 1}")
    return PinSet(d, n, T, np.array(vecs), tuple(labels), tuple((m, i) for m in range(degree + 1) for i in range(d)))


def endpoint_pins(d: int, n: int, T: float) -> PinSet:
    return polynomial_pins(d, n, T, 0)


# ---------------------------------------------------------------- families


@dataclass(frozen=True)
class PinnedFamily:
    """A worked family: the functional is q_eta + constant, pinned at theta^{(N)}(T).

    kind            functional
    rho_sigma       p_sigma = int <sigma theta, d theta>
    sample_variance -v_D = -(1/2) int <D(theta - mean), theta - mean> dt
    gradient_square -(1/2) |D a_{C,D}|_H^2, a_{C,D} = (1/2) int <C theta, d theta> + (1/2) int <D theta, theta> dt
    iterated        q_eta of int <sigma X_N, dX_N> (N = order), without the additive trace term
    """

    kind: str
    d: int
    T: float
    n: int
    params: dict

    # ---- discrete side

    def base_kernel(self) -> GridKernel:
        if self.kind == "rho_sigma":
            return K.builtin_kernel("rho_sigma", {"sigma": self.params["sigma"]}, self.d, self.n, self.T)
        if self.kind == "sample_variance":
            return K.builtin_kernel("sample_variance", {"D": self.params["D"]}, self.d, self.n, self.T).scaled(-1.0)
        if self.kind == "gradient_square":
            return K.builtin_kernel("rho_sigma", {"sigma": self.sigma}, self.d, self.n, self.T)
        if self.kind == "iterated":
            return K.builtin_kernel("iterated_integral", {"sigma": self.params["sigma"], "order": self.params["order"]},
                                    self.d, self.n, self.T)
        raise UnknownFamily(self.kind)

    def operator(self) -> DiscreteOperator:
        op = self.base_kernel().operator()
        if self.kind == "gradient_square":
            return op.with_matrix(-(op.matrix @ op.matrix))
        return op

    def discrete_constant(self) -> float:
        if self.kind == "sample_variance":
            return -self.T**2 / 12.0 * float(np.trace(self.params["D"]))
        if self.kind == "gradient_square":
            return -0.5 * float(np.sum(self.base_kernel().operator().matrix ** 2))
        return 0.0

    def pins(self) -> PinSet:
        degree = {"rho_sigma": 0, "sample_variance": 1, "gradient_square": 2}.get(self.kind)
        if degree is None:
            degree = int(self.params["order"])
        return polynomial_pins(self.d, self.n, self.T, degree)

    @property
    def sigma(self) -> SigmaPath:
        if self.kind == "gradient_square":
            C, D, T = self.params["C"], self.params["D"], self.T
            return SigmaPath(self.d, T, lambda t: 0.5 * C + (T - t) * D, lambda t: -D, "gradient_square_sigma",
                             {"C": C, "D": D})
        return self.params["sigma"]

    @property
    def M(self) -> int:
        return self.pins().M


def rho_sigma_family(sigma: SigmaPath, n: int = 256) -> PinnedFamily:
    return PinnedFamily("rho_sigma", sigma.d, sigma.T, n, {"sigma": sigma})


def sample_variance_family(D, d: int = 1, T: float = 1.0, n: int = 256) -> PinnedFamily:
    D = np.asarray(D, dtype=float)
    D = D * np.eye(d) if D.ndim == 0 else D.reshape(d, d)
    if not np.allclose(D, D.T):
        raise BadParams("D must be symmetric")
    if linalg.sym_eigvals(-D)[0] >= 1.0:
        raise NotIntegrable("need Lambda(-D) < 1")
    return PinnedFamily("sample_variance", d, T, n, {"D": D})


def gradient_square_family(C, D, d: int = 1, T: float = 1.0, n: int = 256) -> PinnedFamily:
    C = np.asarray(C, dtype=float)
    D = np.asarray(D, dtype=float)
    C = C * np.eye(d) if C.ndim == 0 else C.reshape(d, d)
    D = D * np.eye(d) if D.ndim == 0 else D.reshape(d, d)
    if not np.allclose(D, D.T):
        raise BadParams("D must be symmetric")
    return PinnedFamily("gradient_square", d, T, n, {"C": C, "D": D})


def iterated_family(sigma: SigmaPath, order: int = 1, n: int = 128) -> PinnedFamily:
    if order not in (1, 2):
        raise BadParams("iterated integrals are supported for order 1 and 2")
    return PinnedFamily("iterated", sigma.d, sigma.T, n, {"sigma": sigma, "order": order})


# ---------------------------------------------------------------- condition (A)


@dataclass(frozen=True)
class ConditionADecomposition:
    A_I: np.ndarray
    A_F: np.ndarray
    pins: PinSet
    method: str
    upper_residual: float

    @property
    def M(self) -> int:
        return self.pins.M

    def log_det2_I(self) -> float:
        """log det_2(I - A_I) = log det(I - A_I) + tr A_I (the determinant must be positive)."""
        sign, logdet = np.linalg.slogdet(np.eye(self.A_I.shape[0]) - self.A_I)
        if sign <= 0:
            raise NotIntegrable("det(I - A_I) is not positive")
        return float(logdet + np.trace(self.A_I))


def _block_upper_strict(n: int, d: int) -> np.ndarray:
    return np.kron(np.triu(np.ones((n, n)), 1), np.ones((d, d))).astype(bool)


def _phi_rho_sigma(fam: PinnedFamily) -> np.ndarray:
    """kappa_F(t, s) = sigma(s)^T on the grid (range: constants)."""
    t = K.midpoints(fam.n, fam.T)
    S = fam.sigma.on_grid(t)
    vals = np.broadcast_to(S.transpose(0, 2, 1)[None], (fam.n, fam.n, fam.d, fam.d))
    return vals


def _phi_sample_variance(fam: PinnedFamily) -> np.ndarray:
    """kappa_F(t, s) = -(t/T)(T - s) D for the kernel -eta."""
    t = K.midpoints(fam.n, fam.T)
    core = -np.outer(t / fam.T, fam.T - t)
    return core[:, :, None, None] * fam.params["D"]


def _phi_iterated(fam: PinnedFamily) -> np.ndarray:
    """kappa_F as a polynomial of degree <= N in t with coefficients integrated over u in [s, T]."""
    N = fam.params["order"]
    sigma = fam.sigma
    T, n, d = fam.T, fam.n, fam.d
    t = K.midpoints(n, T)
    x, w = np.polynomial.legendre.leggauss(24)
    vals = np.zeros((n, n, d, d))
    for j, s in enumerate(t):
        u = s + (T - s) * (x + 1) / 2
        wu = w * (T - s) / 2
        Su = sigma.on_grid(u)
        gN = (u - s) ** N / math.factorial(N)
        gN1 = (u - s) ** (N - 1) / math.factorial(N - 1)
        coef = np.zeros((N + 1, d, d))
        for a in range(N):
            c = (-1) ** a / (math.factorial(a) * math.factorial(N - 1 - a))
            coef[a] += c * np.einsum("q,qij->ij", wu * u ** (N - a - 1) * gN, Su)
        for a in range(N + 1):
            c = (-1) ** a / (math.factorial(a) * math.factorial(N - a))
            coef[a] += c * np.einsum("q,qji->ij", wu * u ** (N - a) * gN1, Su)
        vals[:, j] = np.einsum("ta,aij->tij", t[:, None] ** np.arange(N + 1)[None, :], coef)
    return vals


def decompose_condition_A(eta, pins: PinSet | None = None, method: str = "auto") -> ConditionADecomposition:
    """Split the discrete B_eta into A_I + A_F with range(A_F) inside span(pins).

    For a PinnedFamily with method "auto" the family's finite-rank kernel
    kappa_F drives the split (A_F = B_{kappa_F}, A_I = B_eta - A_F).  The
    fallback "trivial" split is A_F = pi_k B_eta, A_I = (I - pi_k) B_eta.
    """
    if isinstance(eta, PinnedFamily):
        fam = eta
        M = fam.operator().matrix
        pins = fam.pins() if pins is None else pins
        n, d = fam.n, fam.d
        phi = {"rho_sigma": _phi_rho_sigma, "sample_variance": _phi_sample_variance,
               "iterated": _phi_iterated}.get(fam.kind)
        if method == "auto":
            method = "family" if phi is not None else "trivial"
    else:
        op = K._op(eta)
        M = op.matrix
        n, d = op.n, op.d
        if pins is None:
            raise BadParams("pins are required for a bare kernel")
        if method == "auto":
            method = "trivial"
        if method == "family":
            raise UnknownFamily("the family split needs a PinnedFamily")
    if pins.n != n or pins.d != d:
        raise ShapeMismatch("pins and operator live on different grids")
    U = pins.onb()
    if method == "family":
        A_F = K.blocks_to_matrix(phi(fam)) * (fam.T / n)
    elif method == "trivial":
        Q, _ = np.linalg.qr(U)
        A_F = Q @ (Q.T @ M)
    else:
        raise BadParams(f"unknown split method {method!r}")
    A_I = M - A_F
    if np.max(np.abs(A_I + A_F - M)) > SPLIT_ATOL * (1.0 + np.max(np.abs(M))):
        raise BadParams("A_I + A_F does not reproduce B_eta")
    Q, _ = np.linalg.qr(U)
    off = A_F - Q @ (Q.T @ A_F)
    if np.linalg.norm(off) > RANGE_RTOL * (1.0 + np.linalg.norm(A_F)):
        raise BadParams(f"range of A_F leaves span(pins) by {np.linalg.norm(off):.2e}")
    upper = float(np.max(np.abs(A_I[_block_upper_strict(n, d)]), initial=0.0))
    return ConditionADecomposition(A_I, A_F, pins, method, upper)


# ---------------------------------------------------------------- frames and values


@dataclass(frozen=True)
class PluckerFrame:
    """Phi = (J_M ; J_0) together with the Gram determinants det C(k^{(N)})."""

    Phi: np.ndarray
    det_C: np.ndarray
    orthogonal: bool
    direct: Callable[[int], np.ndarray] | None = field(default=None, compare=False)

    @property
    def M(self) -> int:
        return self.Phi.shape[1]

    def J_rows(self, N: int) -> np.ndarray:
        """Rows 1..N and M+N+1..2M of Phi."""
        M = self.M
        return np.vstack([self.Phi[:N], self.Phi[M + N:]])

    def J(self, N: int) -> np.ndarray:
        if self.direct is not None and not self.orthogonal:
            return self.direct(N)
        return self.J_rows(N)


def _check_jn(J: np.ndarray) -> float:
    N = J.shape[0]
    det = float(np.linalg.det(J))
    scale = np.linalg.norm(J, 2) ** N if N else 1.0
    if abs(det) < JN_RTOL * scale or det <= 0:
        raise DegenerateJN(f"det J_N = {det:.3e}")
    return det


def _plucker_value(frame: PluckerFrame, N: int, log_const: float) -> tuple[float, dict]:
    J = frame.J(N)
    detJ = _check_jn(J)
    logv = 0.5 * (math.log(frame.det_C[-1]) - N * LOG_2PI - math.log(frame.det_C[N]) - math.log(detJ)) + log_const
    return math.exp(logv), {"det_J_N": detJ, "det_C_M": float(frame.det_C[-1]), "det_C_N": float(frame.det_C[N]),
                            "log_constant": log_const}


def _gram_dets(C: np.ndarray) -> np.ndarray:
    return np.array([1.0] + [float(np.linalg.det(C[:m, :m])) for m in range(1, C.shape[0] + 1)])


def discrete_frame(dec: ConditionADecomposition, M_op: np.ndarray) -> PluckerFrame:
    U = dec.pins.onb()
    Mk = U.shape[1]
    I = np.eye(U.shape[0])
    J = np.linalg.solve(I - dec.A_I, U)
    C = U.T @ U

    def proj(N: int) -> np.ndarray:
        if N == 0:
            return np.zeros_like(I)
        Q, _ = np.linalg.qr(U[:, :N])
        return Q @ Q.T

    PM = proj(Mk)

    def direct(N: int) -> np.ndarray:
        return U.T @ (J - (PM - proj(N)) @ (M_op @ J))

    J_M = U.T @ J
    J_0 = direct(0)
    off = C - np.diag(np.diag(C))
    orthogonal = bool(np.max(np.abs(off)) <= 1e-10 * np.max(np.abs(C)))
    return PluckerFrame(np.vstack([J_M, J_0]), _gram_dets(C), orthogonal, direct)


def plucker_pinned(family: PinnedFamily, N: int, route: str = "ode", steps: int = ODE_STEPS) -> LaplaceResult:
    """E[exp(functional) delta_0(theta^{(N)}(T))] for 0 <= N <= d from the Pluecker frame.

    route "discrete" uses the grid operator; route "ode" solves the family's ODE for J_p.
    """
    if not 0 <= N <= family.d:
        raise BadParams("need 0 <= N <= d")
    if route == "discrete":
        op = family.operator()
        lam = K.lambda_max(op)
        if lam >= 1.0:
            raise NotIntegrable(f"lambda_max = {lam:.6g} >= 1")
        dec = decompose_condition_A(family)
        frame = discrete_frame(dec, op.matrix)
        log_const = -0.5 * dec.log_det2_I() - 0.5 * float(np.trace(dec.A_F)) + family.discrete_constant()
        value, diag = _plucker_value(frame, N, log_const)
        diag.update({"split": dec.method, "upper_residual": dec.upper_residual, "lambda_max": lam,
                     "n_grid": family.n, "orthogonal_pins": frame.orthogonal})
    elif route == "ode":
        frame, log_const = ode_frame(family, steps)
        value, diag = _plucker_value(frame, N, log_const)
        diag.update({"steps": steps})
    else:
        raise BadParams("route must be 'discrete' or 'ode'")
    diag.update({"N": N, "M": frame.M, "Phi": frame.Phi})
    return LaplaceResult(value, f"plucker_{route}", diag)


def pinned_general(eta, pins: PinSet, N: int | None = None, h=None, constant_term: float = 0.0) -> LaplaceResult:
    """((2 pi)^N det_2(I - B_{eta;k}) det C(k))^{-1/2} e^{-tr(pi_k B pi_k)/2} times the drift factor.

    ``eta`` may be a GridKernel, a DiscreteOperator or a PinnedFamily (whose
    additive constant is then included).  ``h`` is a CM derivative
    (callable or grid samples); its factor is exp(<(I - B_{eta;k})^{-1} g, g>/2), g = pi_k^perp h.
    """
    if isinstance(eta, PinnedFamily):
        constant_term += eta.discrete_constant()
        op = eta.operator()
    else:
        op = K._op(eta)
    N = pins.M if N is None else N
    if not 0 <= N <= pins.M:
        raise BadParams("need 0 <= N <= M")
    if pins.n != op.n or pins.d != op.d:
        raise ShapeMismatch("pins and operator live on different grids")
    M = op.matrix
    dim = M.shape[0]
    U = pins.onb(N)
    if N:
        C = U.T @ U
        detC = float(np.linalg.det(C))
        if detC <= DEPENDENT_RTOL * float(np.prod(np.diag(C))):
            raise DependentPins(f"det C(k) = {detC:.3e}")
        Q, _ = np.linalg.qr(U)
        P = Q @ Q.T
        trP = float(np.trace(Q.T @ M @ Q))
    else:
        detC, P, trP = 1.0, np.zeros((dim, dim)), 0.0
    Pp = np.eye(dim) - P
    Bk = Pp @ M @ Pp
    Bk = 0.5 * (Bk + Bk.T)
    w = linalg.sym_eigvals(Bk, tol=1e-10)
    if w.size and w[0] >= 1.0:
        raise NotIntegrable(f"lambda_max(B_eta;k) = {w[0]:.6g} >= 1")
    log_det2 = float(np.sum(np.log1p(-w) + w))
    logv = -0.5 * (N * LOG_2PI + log_det2 + math.log(detC)) - 0.5 * trP + constant_term
    shift = 0.0
    if h is not None:
        hs = K.cm_vector(h, op.n, op.T, op.d).reshape(-1) if callable(h) else np.asarray(h, dtype=float).reshape(-1)
        if hs.size != dim:
            raise ShapeMismatch("h samples must match the grid")
        g = Pp @ (math.sqrt(op.T / op.n) * hs)
        shift = 0.5 * float(g @ np.linalg.solve(np.eye(dim) - Bk, g))
    value = math.exp(logv + shift)
    return LaplaceResult(value, "pinned_general", {"N": N, "det_C": detC, "log_det2": log_det2,
                                                   "trace_projected": trP, "shift": shift,
                                                   "lambda_max": float(w[0]) if w.size else 0.0})


# ---------------------------------------------------------------- ODE route


@dataclass(frozen=True)
class JpSolution:
    """J(t) and J'(t) for the unit vectors p = e_m: arrays of shape (len(t), d, M)."""

    tgrid: np.ndarray
    J: np.ndarray
    dJ: np.ndarray

    def for_p(self, p) -> tuple[np.ndarray, np.ndarray]:
        p = np.asarray(p, dtype=float)
        return self.J @ p, self.dJ @ p


def _pin_polys(family: PinnedFamily) -> list[np.polynomial.Polynomial]:
    degree = family.pins().polys[-1][0]
    return monic_orthogonal(degree, family.T)


def _rho_sigma_U(sigma: SigmaPath, steps: int) -> tuple[np.ndarray, np.ndarray]:
    """U'' = 2 sigma_A U' + sigma' U, U(0) = 0, U'(0) = I; state (U, U', int sigma^T U')."""
    d = sigma.d

    def rhs(t, Y):
        U, dU = Y[:d], Y[d:2 * d]
        s = sigma(t)
        ddU = (s - s.T) @ dU + sigma.derivative(t) @ U
        return np.vstack([dU, ddU, s.T @ dU])

    Y0 = np.vstack([np.zeros((d, d)), np.eye(d), np.zeros((d, d))])
    return rk4_integrate(rhs, Y0, 0.0, sigma.T, steps)


def _constant_coefficient_J(family: PinnedFamily, tgrid: np.ndarray, derivative: int) -> np.ndarray:
    """J_p (or a derivative) for the constant-coefficient families, shape (len(t), d, M)."""
    d, T = family.d, family.T
    I = np.eye(d)
    Z = np.zeros((d, d))
    D = family.params["D"]
    if family.kind == "sample_variance":
        # J''' = D J', J(0) = 0, J'(0) = p1 - (T/2) p2, J''(0) = p2
        C = [Z, D, Z]
        init = [[Z, I, Z], [Z, -0.5 * T * I, I]]
    else:
        Cm = family.params["C"]
        A = 0.5 * (Cm - Cm.T)
        # J'''' = -D^2 J + (AD + DA) J' - A^2 J'', initial data from the pin polynomials
        C = [-(D @ D), A @ D + D @ A, -(A @ A), Z]
        A2 = A @ A
        init = [[Z, I, Z, -A2],
                [Z, -0.5 * T * I, I, 0.5 * T * A2],
                [Z, T**2 / 6 * I, -T * I, -T**2 / 6 * A2 + 2 * I]]
    blocks = [linalg.kth_order_ode_constant(C, U0, tgrid, derivative=derivative) for U0 in init]
    return np.concatenate(blocks, axis=2)


def solve_Jp(family: PinnedFamily, steps: int = ODE_STEPS, tgrid=None) -> JpSolution:
    """Solve (I - A_I) J_p = sum p_j k_j through the family's linear ODE."""
    if family.kind == "rho_sigma":
        ts, Y = _rho_sigma_U(family.sigma, steps)
        d = family.d
        return JpSolution(ts, Y[:, :d, :], Y[:, d:2 * d, :])
    if family.kind in ("sample_variance", "gradient_square"):
        ts = np.linspace(0.0, family.T, steps + 1) if tgrid is None else np.asarray(tgrid, dtype=float)
        return JpSolution(ts, _constant_coefficient_J(family, ts, 0), _constant_coefficient_J(family, ts, 1))
    raise UnknownFamily(f"no ODE for J_p in family {family.kind!r}")


def _cumtrapz(y: np.ndarray, t: np.ndarray) -> np.ndarray:
    out = np.zeros_like(y)
    dt = np.diff(t).reshape((-1,) + (1,) * (y.ndim - 1))
    out[1:] = np.cumsum(0.5 * dt * (y[1:] + y[:-1]), axis=0)
    return out


def jp_residual(family: PinnedFamily, sol: JpSolution) -> float:
    """max over grid and p = e_m of |J_p' - (A_I J_p)' - sum_j p_j k_j'|."""
    t = sol.tgrid
    J, dJ = sol.J, sol.dJ
    T, d = family.T, family.d
    polys = _pin_polys(family)
    rhs = np.zeros_like(J)
    for m, f in enumerate(polys):
        rhs[:, :, m * d:(m + 1) * d] = f(t)[:, None, None] * np.eye(d)[None]
    if family.kind == "rho_sigma":
        S = family.sigma.on_grid(t)
        inner = _cumtrapz(np.einsum("tji,tjm->tim", S, dJ), t)
        lhs = dJ - np.einsum("tij,tjm->tim", S, J) + inner
    elif family.kind == "sample_variance":
        D = family.params["D"]
        lhs = dJ - _cumtrapz(np.einsum("ij,tjm->tim", D, J), t)
    elif family.kind == "gradient_square":
        Cm, D = family.params["C"], family.params["D"]
        A = 0.5 * (Cm - Cm.T)
        g = np.einsum("ij,tjm->tim", A, dJ) - np.einsum("ij,tjm->tim", D, J)
        G1 = _cumtrapz(g, t)
        G2 = _cumtrapz(G1, t)
        inner = np.einsum("ij,tjm->tim", A, G1) - np.einsum("ij,tjm->tim", D, G2)
        lhs = dJ + _cumtrapz(inner, t)
    else:
        raise UnknownFamily(family.kind)
    return float(np.max(np.abs(lhs - rhs)))


def _gauss(T: float, nodes: int = QUAD_NODES) -> tuple[np.ndarray, np.ndarray]:
    x, w = np.polynomial.legendre.leggauss(nodes)
    return 0.5 * T * (x + 1), 0.5 * T * w


def _B_rho_apply(sigma: SigmaPath, h: np.ndarray, dh: np.ndarray, t: np.ndarray) -> np.ndarray:
    """(B_{rho_sigma} h)'(t) = sigma(t) h(t) + int_t^T sigma(s)^T h'(s) ds on a fine grid; h, dh shape (len t, d, m)."""
    S = sigma.on_grid(t)
    run = _cumtrapz(np.einsum("tji,tjm->tim", S, dh), t)
    tail = run[-1][None] - run
    return np.einsum("tij,tjm->tim", S, h) + tail


def ode_frame(family: PinnedFamily, steps: int = ODE_STEPS) -> tuple[PluckerFrame, float]:
    """The continuous Pluecker frame and log of det_2(I - A_I)^{-1/2} e^{-tr A_F/2} e^{constant}."""
    T, d = family.T, family.d
    if family.kind == "rho_sigma":
        ts, Y = _rho_sigma_U(family.sigma, steps)
        U_T = Y[-1, :d]
        Sig = Y[-1, 2 * d:]
        Phi = np.vstack([U_T, T * (np.eye(d) - Sig)])
        det_C = np.array([T**m for m in range(d + 1)])
        return PluckerFrame(Phi, det_C, True), -0.5 * family.sigma.trace_integral()
    polys = _pin_polys(family)
    Mk = len(polys) * d
    norms = [float((f * f).integ()(T) - (f * f).integ()(0)) for f in polys]
    diagC = np.repeat(norms, d)
    det_C = np.concatenate([[1.0], np.cumprod(diagC)])
    if family.kind == "sample_variance":
        tq, wq = _gauss(T)
        dJ = _constant_coefficient_J(family, tq, 1)
        D = family.params["D"]
        # (B k)'(t) for B = B_{-eta}: D int_0^t (k(s) - mean k) ds, per pin polynomial
        Bk = np.zeros((tq.size, d, Mk))
        K_ = np.zeros((tq.size, d, Mk))
        for m, f in enumerate(polys):
            F = f.integ()
            mean = (F.integ()(T) - F.integ()(0)) / T
            G = (F - mean).integ()
            G = G - G(0)
            for i in range(d):
                Bk[:, :, m * d + i] = G(tq)[:, None] * D[:, i][None]
                K_[:, i, m * d + i] = f(tq)
    elif family.kind == "gradient_square":
        tq = np.linspace(0.0, T, FINE_STEPS + 1)
        wq = np.full(tq.size, T / FINE_STEPS)
        wq[0] = wq[-1] = 0.5 * T / FINE_STEPS
        J = _constant_coefficient_J(family, tq, 0)
        dJ0 = _constant_coefficient_J(family, tq, 1)
        sig = family.sigma
        K_ = np.zeros((tq.size, d, Mk))
        Kint = np.zeros((tq.size, d, Mk))
        for m, f in enumerate(polys):
            F = f.integ()
            F = F - F(0)
            for i in range(d):
                K_[:, i, m * d + i] = f(tq)
                Kint[:, i, m * d + i] = F(tq)
        BJ = _B_rho_apply(sig, J, dJ0, tq)
        BK = _B_rho_apply(sig, Kint, K_, tq)
        # <B_{-c(eta)} J_p, k_j> = -<B_eta J_p, B_eta k_j>
        J_M = np.einsum("t,tij,tim->jm", wq, K_, dJ0)
        BJK = -np.einsum("t,tij,tim->jm", wq, BK, BJ)
        Phi = np.vstack([J_M, J_M - BJK])
        return PluckerFrame(Phi, det_C, True), 0.0
    else:
        raise UnknownFamily(f"no ODE route for family {family.kind!r}")
    J_M = np.einsum("t,tij,tim->jm", wq, K_, dJ)
    BJK = np.einsum("t,tij,tim->jm", wq, Bk, dJ)
    Phi = np.vstack([J_M, J_M - BJK])
    return PluckerFrame(Phi, det_C, True), 0.0
