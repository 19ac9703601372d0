"""Matrix ODE integration: RK4, the Riccati equation, and the S, U, V suite.

Every problem here carries terminal data at t = T.  We integrate those
backwards by running classical RK4 with a negative step, and all returned
paths use increasing time.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import BadParams, NonFinite, SingularS
from .sigma import SigmaPath

DEFAULT_STEPS = 512
MIN_STEPS = 16
BLOWUP_NORM = 1e12
DOUBLING_TOL = 1e-2
REFINE_LEVELS = 6
REFINE_SPLIT = 8
DETS_RTOL = 1e-8


@dataclass(frozen=True)
class MatrixPath:
    """values[k] is the d x d matrix at tgrid[k]."""

    tgrid: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        if self.tgrid.ndim != 1 or self.values.shape[0] != self.tgrid.size:
            raise BadParams("path grid and values disagree")
        if np.any(np.diff(self.tgrid) <= 0):
            raise BadParams("path grid must be increasing")

    @property
    def d(self) -> int:
        return self.values.shape[-1]

    def at(self, t: float) -> np.ndarray:
        """Value at a node (exact) or by linear interpolation between nodes."""
        k = int(np.searchsorted(self.tgrid, t))
        if k < self.tgrid.size and np.isclose(self.tgrid[k], t, rtol=0, atol=1e-12 * (1 + abs(t))):
            return self.values[k]
        if k > 0 and np.isclose(self.tgrid[k - 1], t, rtol=0, atol=1e-12 * (1 + abs(t))):
            return self.values[k - 1]
        if k == 0 or k == self.tgrid.size:
            raise BadParams(f"t = {t} outside the path grid")
        w = (t - self.tgrid[k - 1]) / (self.tgrid[k] - self.tgrid[k - 1])
        return (1 - w) * self.values[k - 1] + w * self.values[k]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["t", "i", "j", "value"])
            for t, M in zip(self.tgrid, self.values):
                for i in range(M.shape[0]):
                    for j in range(M.shape[1]):
                        wr.writerow([repr(float(t)), i, j, repr(float(M[i, j]))])


def _check_steps(steps: int) -> None:
    if steps < MIN_STEPS:
        raise BadParams(f"need at least {MIN_STEPS} steps, got {steps}")


def _rk4_step(rhs, t: float, y: np.ndarray, h: float) -> np.ndarray:
    k1 = rhs(t, y)
    k2 = rhs(t + 0.5 * h, y + 0.5 * h * k1)
    k3 = rhs(t + 0.5 * h, y + 0.5 * h * k2)
    k4 = rhs(t + h, y + h * k3)
    return y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def rk4_integrate(rhs: Callable, y_start: np.ndarray, t0: float, t1: float, steps: int) -> tuple[np.ndarray, np.ndarray]:
    """Classical RK4 from t0 to t1 (either direction); returns times and states in integration order."""
    _check_steps(steps)
    h = (t1 - t0) / steps
    ts = t0 + h * np.arange(steps + 1)
    ts[-1] = t1
    ys = np.empty((steps + 1,) + np.shape(y_start), dtype=np.result_type(y_start, float))
    ys[0] = y_start
    y = np.array(y_start, dtype=ys.dtype)
    for k in range(steps):
        y = _rk4_step(rhs, ts[k], y, h)
        if not np.all(np.isfinite(y)) or np.max(np.abs(y)) > BLOWUP_NORM:
            raise NonFinite(f"state left the finite range near t = {ts[k + 1]:.6g}")
        ys[k + 1] = y
    return ts, ys


def rk4_matrix_ode(rhs: Callable, condition: np.ndarray, T: float, direction: str = "backward",
                   steps: int = DEFAULT_STEPS, t0: float = 0.0) -> MatrixPath:
    """Integrate Y' = rhs(t, Y) on [t0, T].

    direction="forward" treats ``condition`` as Y(t0); "backward" as Y(T).
    """
    y = np.atleast_2d(np.asarray(condition, dtype=float))
    if direction == "forward":
        ts, ys = rk4_integrate(rhs, y, t0, T, steps)
    elif direction == "backward":
        ts, ys = rk4_integrate(rhs, y, T, t0, steps)
        ts, ys = ts[::-1].copy(), ys[::-1].copy()
    else:
        raise BadParams("direction must be 'forward' or 'backward'")
    return MatrixPath(ts, ys)


# ---------------------------------------------------------------- Riccati


@dataclass(frozen=True)
class RiccatiOutcome:
    solved: bool
    path: MatrixPath | None
    blowup_time: float | None
    blowup_bracket: tuple[float, float] | None
    trace_integral: float
    max_asymmetry: float = 0.0
    shift_integral: float = 0.0

    @property
    def value(self) -> float | None:
        """e^{(1/2) int tr R + (1/2) int |h' + b|^2} when solved."""
        if not self.solved:
            return None
        return float(np.exp(0.5 * self.trace_integral + 0.5 * self.shift_integral))


def _riccati_rhs(sigma: SigmaPath):
    def rhs(t, R):
        s = sigma(t)
        return -(R @ R) - s.T @ R - R @ s - s.T @ s
    return rhs


def _shifted_rhs(sigma: SigmaPath, forcing: list):
    """State columns: R (d), b, c.  b' = -(R + sigma)^T (h' + b), c' = -|h' + b|^2 / 2."""
    d = sigma.d

    def rhs(t, Y):
        R, b = Y[:, :d], Y[:, d]
        s = sigma(t)
        g = forcing[0] + b
        out = np.zeros_like(Y)
        out[:, :d] = -(R @ R) - s.T @ R - R @ s - s.T @ s
        out[:, d] = -(R + s).T @ g
        out[0, d + 1] = -0.5 * float(g @ g)
        return out
    return rhs


def _doubling_step(rhs, t: float, R: np.ndarray, h: float) -> tuple[np.ndarray, bool]:
    """One RK4 step checked against two half steps; returns (state, ok)."""
    with np.errstate(all="ignore"):
        full = _rk4_step(rhs, t, R, h)
        half = _rk4_step(rhs, t + 0.5 * h, _rk4_step(rhs, t, R, 0.5 * h), 0.5 * h)
    if not (np.all(np.isfinite(full)) and np.all(np.isfinite(half))):
        return half, False
    size = np.linalg.norm(half)
    if size > BLOWUP_NORM:
        return half, False
    if np.linalg.norm(full - half) > DOUBLING_TOL * (1.0 + size):
        return half, False
    return half, True


def _locate_blowup(rhs, t: float, R: np.ndarray, h: float, depth: int = 0) -> tuple[float, float] | None:
    """Restart the rejected step t -> t + h with finer substeps and return the
    finest rejected interval, or None if the refined march gets through."""
    if depth >= REFINE_LEVELS:
        return (min(t, t + h), max(t, t + h))
    sub = h / REFINE_SPLIT
    state = R
    for j in range(REFINE_SPLIT):
        tj = t + j * sub
        nxt, ok = _doubling_step(rhs, tj, state, sub)
        if not ok:
            return _locate_blowup(rhs, tj, state, sub, depth + 1)
        state = nxt
    return None


def riccati_solve(sigma: SigmaPath, steps: int = DEFAULT_STEPS, h_prime: Callable | None = None) -> RiccatiOutcome:
    """R' = -R^2 - sigma^T R - R sigma - sigma^T sigma on [0, T] with R(T) = 0.

    Blow-up (state norm above 1e12 or step-doubling disagreement above 1e-2)
    is reported as an outcome.  The rejected step is then re-run with finer
    substeps from the last accepted state to narrow the blow-up bracket.

    With a drift h' the linear part b' = -(R + sigma)^T (h' + b), b(T) = 0 is
    carried along; h' is frozen at each step midpoint, so piecewise-constant
    drifts aligned with the steps are integrated without splitting error.
    """
    _check_steps(steps)
    d, T = sigma.d, sigma.T
    forcing = [np.zeros(d)]
    rhs = _riccati_rhs(sigma) if h_prime is None else _shifted_rhs(sigma, forcing)
    h = -T / steps
    ts = T + h * np.arange(steps + 1)
    ts[-1] = 0.0
    width = d if h_prime is None else d + 2
    Ys = np.zeros((steps + 1, d, width))
    Y = np.zeros((d, width))
    for k in range(steps):
        h_k = ts[k + 1] - ts[k]
        if h_prime is not None:
            forcing[0] = np.asarray(h_prime(ts[k] + 0.5 * h_k), dtype=float).reshape(d)
        nxt, ok = _doubling_step(rhs, ts[k], Y, h_k)
        if not ok:
            bracket = _locate_blowup(rhs, ts[k], Y, h_k)
            if bracket is None:
                # the refined march survives this step: the singularity sits at or past t = ts[k+1]
                bracket = (max(ts[k + 1] + h_k, 0.0), ts[k + 1]) if ts[k + 1] > 0 else (0.0, ts[k])
            bracket = (max(bracket[0], 0.0), bracket[1])
            return RiccatiOutcome(False, None, 0.5 * (bracket[0] + bracket[1]), bracket, float("nan"))
        Y = nxt
        Ys[k + 1] = Y
    ts, Ys = ts[::-1].copy(), Ys[::-1].copy()
    Rs = Ys[:, :, :d].copy()
    tr = np.trace(Rs, axis1=1, axis2=2)
    integral = float(_uniform_integral(tr, T / steps))
    shift = 0.0 if h_prime is None else float(2.0 * Ys[0, 0, d + 1])
    asym = float(max(np.linalg.norm(M - M.T) / (1.0 + np.linalg.norm(M)) for M in Rs))
    return RiccatiOutcome(True, MatrixPath(ts, Rs), None, None, integral, asym, shift)


# ---------------------------------------------------------------- second order suite


@dataclass(frozen=True)
class SecondOrderSuite:
    """Fundamental solutions of Phi'' = 2 phi_A Phi' + (phi' - psi_S) Phi with data at T.

    S(T) = I, S'(T) = phi(T); U(T) = I, U'(T) = 0; V(T) = 0, V'(T) = I.
    """

    S: MatrixPath
    U: MatrixPath
    V: MatrixPath
    dS: MatrixPath
    dU: MatrixPath
    dV: MatrixPath
    log_abs_det_S: np.ndarray
    det_S_sign: np.ndarray
    nonsingular: bool

    @property
    def tgrid(self) -> np.ndarray:
        return self.S.tgrid

    @property
    def det_S0(self) -> float:
        return float(self.det_S_sign[0] * np.exp(self.log_abs_det_S[0]))


def _sym(M):
    return 0.5 * (M + M.T)


def _skew(M):
    return 0.5 * (M - M.T)


def second_order_suite(phi: SigmaPath, psi: SigmaPath | None = None, steps: int = DEFAULT_STEPS) -> SecondOrderSuite:
    """Solve for S, U, V.  With psi omitted this is the sigma form S'' - 2 sigma_A S' - sigma' S = 0."""
    _check_steps(steps)
    d, T = phi.d, phi.T
    if psi is not None and (psi.d != d or not np.isclose(psi.T, T)):
        raise BadParams("phi and psi must share d and T")
    cache: dict[float, tuple[np.ndarray, np.ndarray]] = {}

    def coeffs(t):
        c = cache.get(t)
        if c is None:
            A = 2.0 * _skew(phi(t))
            B = phi.derivative(t) - (_sym(psi(t)) if psi is not None else 0.0)
            c = cache[t] = (A, B)
        return c

    def rhs(t, Y):
        A, B = coeffs(t)
        # Y[m, 0] = Phi_m, Y[m, 1] = Phi_m'
        out = np.empty_like(Y)
        out[:, 0] = Y[:, 1]
        out[:, 1] = A @ Y[:, 1] + B @ Y[:, 0]
        return out

    eye, zero = np.eye(d), np.zeros((d, d))
    Y_T = np.array([[eye, phi(T)], [eye, zero], [zero, eye]])
    ts, ys = rk4_integrate(rhs, Y_T, T, 0.0, steps)
    ts, ys = ts[::-1].copy(), ys[::-1].copy()
    paths = [MatrixPath(ts, ys[:, m, o].copy()) for o in (0, 1) for m in range(3)]
    sign, logdet = np.linalg.slogdet(ys[:, 0, 0])
    nonsingular = bool(np.all(sign != 0) and np.all(sign == sign[0]))
    if nonsingular:
        nonsingular = bool(np.min(logdet) - np.max(logdet) > np.log(DETS_RTOL))
    return SecondOrderSuite(*paths, logdet, sign, nonsingular)


def _uniform_integral(y: np.ndarray, h: float) -> np.ndarray:
    """Composite Simpson on uniform samples (3/8 rule closes an odd interval count)."""
    m = y.shape[0] - 1
    if m == 1:
        return 0.5 * h * (y[0] + y[1])
    if m % 2 == 0:
        return h / 3.0 * (y[0] + y[-1] + 4 * y[1:-1:2].sum(0) + 2 * y[2:-1:2].sum(0))
    head = _uniform_integral(y[: m - 2], h) if m > 3 else 0.0
    tail = 3 * h / 8 * (y[-4] + 3 * y[-3] + 3 * y[-2] + y[-1])
    return head + tail


def v_t_of_S(S: MatrixPath, t: float | None = None) -> np.ndarray:
    """v_t = int_0^t (S(t) S(s)^{-1})(S(t) S(s)^{-1})^T ds on the grid nodes up to t."""
    tg = S.tgrid
    if t is None:
        t = float(tg[-1])
    k = int(np.argmin(np.abs(tg - t)))
    if not np.isclose(tg[k], t, rtol=0, atol=1e-9 * (1 + abs(t))):
        raise BadParams("v_t_of_S needs t on the path grid")
    if k == 0:
        return np.zeros((S.d, S.d))
    Ss = S.values[: k + 1]
    sign, _ = np.linalg.slogdet(Ss)
    if np.any(sign == 0):
        raise SingularS("det S vanishes on [0, t]")
    try:
        W = np.linalg.solve(Ss.transpose(0, 2, 1), np.broadcast_to(S.values[k].T, Ss.shape)).transpose(0, 2, 1)
    except np.linalg.LinAlgError as exc:
        raise SingularS("det S vanishes on [0, t]") from exc
    integrand = W @ W.transpose(0, 2, 1)
    h = np.diff(tg[: k + 1])
    if not np.allclose(h, h[0], rtol=1e-9):
        raise BadParams("v_t_of_S expects a uniform grid")
    v = _uniform_integral(integrand, h[0])
    return 0.5 * (v + v.T)


def complex_S0(sigma: SigmaPath, zetas, steps: int = DEFAULT_STEPS) -> np.ndarray:
    """S_zeta(0) for S'' - 2 zeta sigma_A S' - zeta sigma' S = 0, S(T) = I, S'(T) = zeta sigma(T).

    ``zetas`` may be an array; all values are stepped together on one grid.
    """
    _check_steps(steps)
    z = np.atleast_1d(np.asarray(zetas, dtype=complex))
    d, T = sigma.d, sigma.T
    zc = z[:, None, None]

    def rhs(t, Y):
        A = 2.0 * _skew(sigma(t))
        B = sigma.derivative(t)
        out = np.empty_like(Y)
        out[:, 0] = Y[:, 1]
        out[:, 1] = zc * (A @ Y[:, 1] + B @ Y[:, 0])
        return out

    Y = np.empty((z.size, 2, d, d), dtype=complex)
    Y[:, 0] = np.eye(d)
    Y[:, 1] = zc * sigma(T)
    _, ys = rk4_integrate(rhs, Y, T, 0.0, steps)
    return ys[-1][:, 0]
