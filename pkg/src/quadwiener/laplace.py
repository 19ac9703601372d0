"""Laplace and Fourier transforms of quadratic Wiener functionals.

Three numerical routes are implemented for E[exp(q_eta + D*h)]:

* spectral: det_2(I - B_eta)^{-1/2} exp(<(I - B_eta)^{-1} h, h> / 2) on the
  discretised operator;
* riccati: exp(int tr R / 2) from the backward Riccati equation for p_sigma;
* second_order: (exp(-int tr sigma) / det S(0))^{1/2} from the linear
  second-order equation.

Closed forms for the stochastic area serve as oracles.  Real determinant
products are accumulated in log space.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import kernel as K
from . import ode
from .errors import BadParams, Blowup, BranchTrackingFailure, DomainError, NotIntegrable, TailTooHeavy
from .kernel import DiscreteOperator, GridKernel
from .sigma import SigmaPath

LEVY_KEEP = 1e-7
LEVY_TAIL_MAX = 1e-8
BRANCH_SUBSTEPS = 32
BRANCH_MAX_HALVINGS = 12
BRANCH_DET_MIN = 1e-12


@dataclass(frozen=True)
class LaplaceResult:
    value: float | complex
    route: str
    diagnostics: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        v = self.value
        if isinstance(v, complex):
            val = {"re": v.real, "im": v.imag}
        else:
            val = float(v)
        return {"value": val, "route": self.route, "diagnostics": jsonable(self.diagnostics)}


def jsonable(obj):
    if isinstance(obj, dict):
        return {k: jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, complex):
        return {"re": obj.real, "im": obj.imag}
    return obj


# ---------------------------------------------------------------- integrability


def is_exp_integrable(eta) -> dict:
    """Lambda(B_eta) < 1 test with the a-priori bound on E[e^{q_eta}].

    Lambda of the true operator is non-negative, so the discrete lambda_max is
    clipped at 0 inside the bound.
    """
    lam = K.lambda_max(eta)
    norm2 = K.hs_norm(eta) ** 2
    flag = lam < 1.0
    if flag:
        L = max(lam, 0.0)
        expo = 0.5 * (0.5 + L / (3.0 * (1.0 - L) ** 3)) * norm2
        bound = math.exp(expo) if expo < 700.0 else math.inf
    else:
        bound = math.inf
    return {"integrable": flag, "lambda_max": lam, "bound": bound, "hs_norm_sq": norm2}


def _cm_samples(h, op: DiscreteOperator) -> np.ndarray | None:
    if h is None:
        return None
    if callable(h):
        return K.cm_vector(h, op.n, op.T, op.d).reshape(-1)
    v = np.asarray(h, dtype=float).reshape(-1)
    if v.size != op.dim:
        raise BadParams(f"h has {v.size} samples, operator needs {op.dim}")
    return v


# ---------------------------------------------------------------- spectral route


def laplace_spectral(eta, h=None) -> LaplaceResult:
    """E[exp(q_eta + D*h)] = det_2(I - B_eta)^{-1/2} exp(Delta h^T (I - M)^{-1} h / 2)."""
    op = K._op(eta)
    w = K.spectrum(op)
    lam = float(w[0]) if w.size else 0.0
    if lam >= 1.0:
        raise NotIntegrable(f"lambda_max = {lam:.6g} >= 1")
    d2 = K.det2_log(op, -1.0, eigenvalues=w)
    log_value = -0.5 * d2["log_abs"]
    shift = 0.0
    hv = _cm_samples(h, op)
    if hv is not None:
        A = np.eye(op.dim) - op.matrix
        shift = 0.5 * op.weight * float(hv @ np.linalg.solve(A, hv))
    value = math.exp(log_value + shift)
    diag = {"lambda_max": lam, "det2_log": d2["log_abs"], "det2": math.exp(d2["log_abs"]),
            "shift_term": shift, "trace_term": float(np.sum(w)), "n_grid": op.n,
            "blowup": False}
    if isinstance(eta, GridKernel):
        gap = K.lambda_gap(eta)
        if gap is not None:
            diag["lambda_gap"] = gap
    return LaplaceResult(value, "spectral", diag)


# ---------------------------------------------------------------- ODE routes


def _drift_function(h, sigma: SigmaPath, n_cells: int | None):
    """Turn h (callable or midpoint samples) into a callable h'(t)."""
    if h is None:
        return None
    if callable(h):
        return h
    v = np.asarray(h, dtype=float)
    n = v.size // sigma.d
    v = v.reshape(n, sigma.d)
    T = sigma.T

    def hp(t):
        k = min(max(int(math.floor(t / T * n)), 0), n - 1)
        return v[k]
    return hp


def _aligned_steps(steps: int, h, d: int) -> int:
    """Piecewise-constant drifts need every cell split into an even number of steps."""
    if h is None or callable(h):
        return steps
    n = np.asarray(h).size // d
    per = max(2, -(-steps // n))
    per += per % 2
    return n * per


def _second_order_shift(suite: ode.SecondOrderSuite, hp: Callable, T: float) -> float:
    """int_0^T |g|^2 with g = h' + b, b(t) = S(t)^{-T} int_t^T S'(s)^T h'(s) ds."""
    ts = suite.tgrid
    S, dS = suite.S.values, suite.dS.values
    steps = ts.size - 1
    step = T / steps
    # h' frozen on each step at its midpoint, cumulative integral exact per step
    hmid = np.array([np.asarray(hp(0.5 * (ts[k] + ts[k + 1])), dtype=float) for k in range(steps)])
    incr = np.einsum("kji,kj->ki", S[1:] - S[:-1], hmid)      # int over step of S'^T h'
    tail = np.zeros((steps + 1, S.shape[-1]))
    tail[:-1] = np.cumsum(incr[::-1], axis=0)[::-1]
    b = np.linalg.solve(S.transpose(0, 2, 1), tail[..., None])[..., 0]
    # on each step integrate |h'_k + b(t)|^2 by Simpson at the ends and the midpoint
    tmid = 0.5 * (ts[:-1] + ts[1:])
    total = 0.0
    for k in range(steps):
        Sm = _interp_cubic(ts[k], ts[k + 1], S[k], S[k + 1], dS[k], dS[k + 1], tmid[k], step)
        tm = tail[k + 1] + (S[k + 1] - Sm).T @ hmid[k]
        bm = np.linalg.solve(Sm.T, tm)
        g0, gm, g1 = hmid[k] + b[k], hmid[k] + bm, hmid[k] + b[k + 1]
        total += step / 6.0 * (g0 @ g0 + 4 * gm @ gm + g1 @ g1)
    return float(total)


def _interp_cubic(t0, t1, y0, y1, d0, d1, t, h):
    """Hermite interpolation from values and derivatives at the step ends."""
    s = (t - t0) / h
    h00 = 2 * s**3 - 3 * s**2 + 1
    h10 = s**3 - 2 * s**2 + s
    h01 = -2 * s**3 + 3 * s**2
    h11 = s**3 - s**2
    return h00 * y0 + h10 * h * d0 + h01 * y1 + h11 * h * d1


def laplace_ode(sigma: SigmaPath, h=None, steps: int = ode.DEFAULT_STEPS,
                routes: tuple[str, ...] = ("riccati", "second_order")) -> dict[str, LaplaceResult]:
    """E[exp(p_sigma + D*h)] by the Riccati and second-order routes.

    ``h`` is a callable t -> h'(t) or midpoint samples of h' (piecewise
    constant).  Raises Blowup when the Riccati route blows up or det S
    vanishes, since then p_sigma is not exponentially integrable.
    """
    steps = _aligned_steps(steps, h, sigma.d)
    hp = _drift_function(h, sigma, None)
    out: dict[str, LaplaceResult] = {}
    if "riccati" in routes:
        r = ode.riccati_solve(sigma, steps, h_prime=hp)
        if not r.solved:
            raise Blowup(f"Riccati solution blows up near t = {r.blowup_time:.6g} "
                         f"(bracket {r.blowup_bracket[0]:.6g}..{r.blowup_bracket[1]:.6g})")
        out["riccati"] = LaplaceResult(r.value, "riccati", {
            "trace_term": r.trace_integral, "shift_term": 0.5 * r.shift_integral, "ode_steps": steps,
            "max_asymmetry": r.max_asymmetry, "blowup": False})
    if "second_order" in routes:
        suite = ode.second_order_suite(sigma, None, steps)
        if not suite.nonsingular:
            raise Blowup("det S vanishes on [0, T]")
        tr = sigma.trace_integral()
        log_value = 0.5 * (-tr - suite.log_abs_det_S[0])
        shift = 0.0
        if hp is not None:
            shift = 0.5 * _second_order_shift(suite, hp, sigma.T)
        out["second_order"] = LaplaceResult(math.exp(log_value + shift), "second_order", {
            "det_S0": suite.det_S0, "trace_term": tr, "shift_term": shift, "ode_steps": steps,
            "blowup": False})
    return out


# ---------------------------------------------------------------- closed forms


def closed_form_levy_area(beta: float, gamma: float = 0.0) -> float:
    """E[exp(beta * area-type functional)] = ((1/2 + g) e^{b/2} + (1/2 - g) e^{-b/2})^{-1}."""
    if abs(gamma) > 0.5 or -beta * gamma >= 1.0:
        raise DomainError("need |gamma| <= 1/2 and -beta*gamma < 1")
    if gamma == 0.0:
        return 1.0 / math.cosh(0.5 * beta)
    return 1.0 / ((0.5 + gamma) * math.exp(0.5 * beta) + (0.5 - gamma) * math.exp(-0.5 * beta))


def levy_area_joint(a: complex, b: complex) -> complex:
    """E[exp(a s_1 + (b/2)|theta(1)|^2)] = 1/(cos(a/2) - (2b/a) sin(a/2)), planar path on [0, 1]."""
    if a == 0:
        return 1.0 / (1.0 - b)
    return 1.0 / (cmath.cos(0.5 * a) - (2.0 * b / a) * cmath.sin(0.5 * a))


def levy_area_conditional(a: float) -> float:
    """E[exp(i a s_1) | theta(1) = 0] = (a/2) / sinh(a/2)."""
    if a == 0:
        return 1.0
    return (0.5 * a) / math.sinh(0.5 * a)


# ---------------------------------------------------------------- characteristic function


def _charfn_square(sigma: SigmaPath, lams: np.ndarray, steps: int, tr_sym: float) -> tuple[np.ndarray, np.ndarray]:
    S0 = ode.complex_S0(sigma, 1j * lams, steps)
    dets = np.linalg.det(S0)
    return np.exp(-1j * lams * tr_sym) / dets, dets


def charfn_ode(sigma: SigmaPath, lam: float, steps: int = ode.DEFAULT_STEPS) -> complex:
    """E[exp(i lam p_sigma)] with the square root continued from 1 at lam = 0."""
    if lam == 0:
        return 1.0 + 0.0j
    tr_sym = sigma.trace_integral()
    grid = list(np.linspace(0.0, lam, BRANCH_SUBSTEPS + 1)[1:])
    sq, dets = _charfn_square(sigma, np.array(grid), steps, tr_sym)
    vals = dict(zip(grid, zip(sq, dets)))
    prev_l, prev = 0.0, 1.0 + 0.0j
    todo = grid[::-1]
    halvings = 0
    while todo:
        l = todo[-1]
        z, det = vals[l]
        if abs(det) < BRANCH_DET_MIN:
            raise BranchTrackingFailure(f"det S vanishes near lambda = {l:.6g}")
        w = cmath.sqrt(z)
        if abs(w - prev) > abs(w + prev):
            w = -w
        jump = abs(cmath.phase(w / prev)) if prev != 0 else 0.0
        if jump > 0.5 * math.pi:
            halvings += 1
            if halvings > BRANCH_MAX_HALVINGS * BRANCH_SUBSTEPS:
                raise BranchTrackingFailure("phase keeps jumping after repeated halving")
            mid = 0.5 * (prev_l + l)
            msq, mdet = _charfn_square(sigma, np.array([mid]), steps, tr_sym)
            vals[mid] = (msq[0], mdet[0])
            todo.append(mid)
            continue
        todo.pop()
        prev_l, prev = l, w
    return complex(prev)


# ---------------------------------------------------------------- harmonic oscillator type


def harmonic_laplace(kappa: GridKernel, x=None, h=None) -> LaplaceResult:
    """E[exp(-h(kappa; x) + D*h)] = det(I + C)^{-1/2} exp(<(I + C)^{-1} h, h>/2), C the c-kernel matrix."""
    C = K.harmonic_kernels(kappa, x).operator()
    A = np.eye(C.dim) + C.matrix
    sign, logdet = np.linalg.slogdet(A)
    shift = 0.0
    hv = _cm_samples(h, C)
    if hv is not None:
        shift = 0.5 * C.weight * float(hv @ np.linalg.solve(A, hv))
    value = math.exp(-0.5 * logdet + shift)
    return LaplaceResult(value, "closed_form", {"logdet": logdet, "shift_term": shift, "n_grid": kappa.n,
                                                "trace_term": float(np.trace(C.matrix))})


def kac_laplace(lam: float, n: int = 256, T: float = 1.0) -> LaplaceResult:
    """E[exp(-lam int_0^T theta^2 dt)] for a one-dimensional path.

    int theta^2 = q_{2c} + tr c with c = c(1_{[0,t)}(s)), so the spectral
    route is applied to eta = -2 lam c and multiplied by exp(-lam tr c).
    """
    c = K.builtin_kernel("kac", d=1, n=n, T=T)
    res = laplace_spectral(c.scaled(-2.0 * lam))
    tr = K.trace(c)
    return LaplaceResult(res.value * math.exp(-lam * tr), "spectral", {**res.diagnostics, "kac_trace": tr})


def kac_product(lam: float, terms: int = 200000, T: float = 1.0) -> float:
    """Truncated product prod_k (1 + 2 lam T^2 / ((k - 1/2)^2 pi^2))^{-1/2}."""
    k = np.arange(1, terms + 1)
    return float(np.exp(-0.5 * np.sum(np.log1p(2.0 * lam * T**2 / ((k - 0.5) ** 2 * np.pi**2)))))


# ---------------------------------------------------------------- Girsanov diagnostics


def girsanov_diagnostics(kappa: GridKernel) -> dict:
    """Novikov (||B_kappa||_op < 1) and Kazamaki (Lambda(B_kappa + B_kappa^*) < 2) indicators."""
    M = kappa.operator().matrix
    op_norm = float(np.linalg.norm(M, 2))
    lam_rho = float(np.linalg.eigvalsh(M + M.T)[-1])
    return {"op_norm": op_norm, "novikov": op_norm < 1.0, "lambda_rho": lam_rho, "kazamaki": lam_rho < 2.0}


# ---------------------------------------------------------------- self-decomposability


@dataclass(frozen=True)
class LevyDensitySpec:
    eigenvalues: np.ndarray
    xgrid: np.ndarray
    density: np.ndarray
    tail: float

    def exponent(self, lam: float, nodes_per_unit: int = 48) -> complex:
        """int (e^{i lam x} - 1 - i lam x) f_eta(x) dx by trapezoid in u = log|x|."""
        return levy_exponent_quadrature(self.eigenvalues, lam, nodes_per_unit)

    def exponent_exact(self, lam: float) -> complex:
        return log_charfn_eigen(self.eigenvalues, lam)


def levy_density_values(a: np.ndarray, x: np.ndarray) -> np.ndarray:
    """f(x) = (1/(2|x|)) sum over a with x a > 0 of exp(-|x/a|)."""
    a = np.asarray(a, dtype=float)
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    nz = x != 0
    xs = x[nz][:, None]
    same = (xs * a[None, :]) > 0
    terms = np.where(same, np.exp(-np.abs(xs / np.where(a == 0, np.inf, a)[None, :])), 0.0)
    out[nz] = terms.sum(1) / (2.0 * np.abs(x[nz]))
    return out


def log_charfn_eigen(a: np.ndarray, lam: float) -> complex:
    """log E[e^{i lam q_eta}] = -(1/2) sum [log(1 - i lam a) + i lam a]."""
    a = np.asarray(a, dtype=float)
    z = 1.0 - 1j * lam * a
    return complex(-0.5 * np.sum(np.log(z) + 1j * lam * a))


def levy_exponent_quadrature(a: np.ndarray, lam: float, nodes_per_unit: int = 48) -> complex:
    a = np.asarray(a, dtype=float)
    total = 0.0 + 0.0j
    for side in (1.0, -1.0):
        amp = np.abs(a[a * side > 0])
        if amp.size == 0:
            continue
        lo = math.log(1e-6 * amp.min()) - 2.0
        hi = math.log(45.0 * amp.max())
        m = int(math.ceil((hi - lo) * nodes_per_unit))
        u = np.linspace(lo, hi, m + 1)
        x = np.exp(u)
        sx = side * x
        kern = np.expm1(1j * lam * sx) - 1j * lam * sx
        # f(x) dx = (1/2) sum e^{-x/|a|} du
        weights = 0.5 * np.exp(-x[:, None] / amp[None, :]).sum(1)
        vals = kern * weights
        du = u[1] - u[0]
        total += du * (vals.sum() - 0.5 * (vals[0] + vals[-1]))
    return complex(total)


def levy_density(eta, xgrid) -> LevyDensitySpec:
    """Levy density of q_eta from the spectrum of B_eta (eigenvalues with |a| > 1e-7 kept)."""
    w = K.spectrum(eta)
    keep = np.abs(w) > LEVY_KEEP
    tail = float(np.sum(w[~keep] ** 2))
    if tail >= LEVY_TAIL_MAX:
        raise TailTooHeavy(f"dropped eigenvalue mass {tail:.3e}")
    a = w[keep]
    x = np.asarray(xgrid, dtype=float)
    return LevyDensitySpec(a, x, levy_density_values(a, x), tail)


def levy_exponent_check(spec: LevyDensitySpec, lams) -> float:
    """Max |quadrature exponent - eigenvalue exponent| over the given lambdas."""
    return max(abs(spec.exponent(l) - spec.exponent_exact(l)) for l in lams)
