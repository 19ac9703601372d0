"""Monte Carlo oracle: Brownian and Ornstein-Uhlenbeck paths and estimators.

Random stream (reproducible in any language):

* one xorshift64* generator per path ("lane"); lane p starts from
  splitmix64(seed + (p + 1) * 0x9E3779B97F4A7C15), replaced by 1 if zero;
* step: x ^= x >> 12; x ^= x << 25; x ^= x >> 27; output x * 0x2545F4914F6CDD1D (mod 2^64);
* uniform in [0, 1): (output >> 11) * 2^-53;
* normals by the polar Box-Muller method: v = 2u - 1 for two uniforms,
  redraw the pair while s = v1^2 + v2^2 is 0 or >= 1, then
  z = v * sqrt(-2 log(s) / s);
* each time step draws ceil(d/2) accepted pairs per lane and uses the
  first d normals, scaled by sqrt(Delta).

A lane's stream depends only on (seed, lane), so any split of the paths
into chunks reproduces the same numbers.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from . import kernel as K
from .errors import BadParams, BandwidthTooSmall, ShapeMismatch, VarianceWarning
from .kernel import GridKernel
from .sigma import SigmaPath

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
MULT = np.uint64(0x2545F4914F6CDD1D)
TWO_53 = 2.0 ** -53
DEFAULT_PATHS = 100_000
DEFAULT_PINNED_PATHS = 400_000
DEFAULT_STEPS = 512
CHUNK = 8192
MIN_ESS = 100


def splitmix64(x: np.ndarray) -> np.ndarray:
    z = (np.asarray(x, dtype=np.uint64) + GOLDEN).astype(np.uint64)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


class LaneRNG:
    """Vectorised xorshift64* generators, one per lane."""

    def __init__(self, seed: int, first_lane: int, count: int):
        lanes = np.arange(first_lane, first_lane + count, dtype=np.uint64) + np.uint64(1)
        with np.errstate(over="ignore"):
            s = splitmix64(np.uint64(seed % 2**64) + lanes * GOLDEN)
        s[s == 0] = np.uint64(1)
        self.state = s

    def _next(self, idx) -> np.ndarray:
        x = self.state[idx]
        x ^= x >> np.uint64(12)
        x ^= x << np.uint64(25)
        x ^= x >> np.uint64(27)
        self.state[idx] = x
        with np.errstate(over="ignore"):
            return x * MULT

    def uniform(self, idx=slice(None)) -> np.ndarray:
        return (self._next(idx) >> np.uint64(11)).astype(np.float64) * TWO_53

    def normal_pair(self) -> tuple[np.ndarray, np.ndarray]:
        n = self.state.size
        z1 = np.empty(n)
        z2 = np.empty(n)
        pending = np.arange(n)
        while pending.size:
            v1 = 2.0 * self.uniform(pending) - 1.0
            v2 = 2.0 * self.uniform(pending) - 1.0
            s = v1 * v1 + v2 * v2
            ok = (s > 0.0) & (s < 1.0)
            f = np.sqrt(-2.0 * np.log(s[ok]) / s[ok])
            idx = pending[ok]
            z1[idx] = v1[ok] * f
            z2[idx] = v2[ok] * f
            pending = pending[~ok]
        return z1, z2

    def normals(self, d: int) -> np.ndarray:
        cols = []
        for _ in range((d + 1) // 2):
            cols.extend(self.normal_pair())
        return np.stack(cols[:d], axis=1)


@dataclass(frozen=True)
class PathBatch:
    """n_paths Brownian paths in R^d with n_steps increments on [0, T]."""

    n_paths: int
    n_steps: int
    T: float = 1.0
    d: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.n_paths < 1 or self.n_steps < 1 or self.d < 1 or self.T <= 0:
            raise BadParams("need positive n_paths, n_steps, d and T")

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    @property
    def tgrid(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.n_steps + 1)

    def chunks(self, size: int = CHUNK) -> Iterable[tuple[int, int]]:
        for start in range(0, self.n_paths, size):
            yield start, min(size, self.n_paths - start)

    def increments(self, first_lane: int = 0, count: int | None = None) -> np.ndarray:
        """All increments of a block of lanes, shape (count, n_steps, d)."""
        count = self.n_paths - first_lane if count is None else count
        rng = LaneRNG(self.seed, first_lane, count)
        sq = math.sqrt(self.dt)
        out = np.empty((count, self.n_steps, self.d))
        for k in range(self.n_steps):
            out[:, k] = sq * rng.normals(self.d)
        return out


@dataclass(frozen=True)
class MCEstimate:
    mean: float | complex
    stderr: float
    n_paths: int
    seed: int

    def within(self, value, k: float = 3.0, extra: float = 0.0) -> bool:
        return abs(self.mean - value) <= k * self.stderr + extra

    def to_json(self) -> dict:
        m = self.mean
        mean = {"re": m.real, "im": m.imag} if isinstance(m, complex) else float(m)
        return {"mean": mean, "stderr": self.stderr, "n_paths": self.n_paths, "seed": self.seed}


def _estimate(samples: np.ndarray, batch: PathBatch) -> MCEstimate:
    n = samples.size
    m = samples.mean()
    if n > 1:
        var = float(np.mean(np.abs(samples - m) ** 2)) * n / (n - 1)
    else:
        var = 0.0
    mean = complex(m) if np.iscomplexobj(samples) else float(m)
    return MCEstimate(mean, math.sqrt(var / n), n, batch.seed)


# ---------------------------------------------------------------- streaming functionals


class Functional:
    """Accumulates one per-path quantity while the path is generated step by step."""

    def start(self, count: int, batch: PathBatch) -> None:
        raise NotImplementedError

    def update(self, k: int, t: float, theta: np.ndarray, dtheta: np.ndarray) -> None:
        raise NotImplementedError

    def result(self) -> np.ndarray:
        raise NotImplementedError


class PSigma(Functional):
    """p_sigma = sum_k <sigma(t_k) theta(t_k), Delta theta_k> (left point)."""

    def __init__(self, sigma: SigmaPath):
        self.sigma = sigma

    def start(self, count, batch):
        if batch.d != self.sigma.d or not math.isclose(batch.T, self.sigma.T):
            raise ShapeMismatch("sigma and batch disagree on d or T")
        self.acc = np.zeros(count)
        self.mats = [self.sigma(t) for t in batch.tgrid[:-1]]

    def update(self, k, t, theta, dtheta):
        self.acc += np.einsum("pi,pi->p", theta @ self.mats[k].T, dtheta)

    def result(self):
        return self.acc


class Drift(Functional):
    """D*h = sum_k <h'(t_k + Delta/2), Delta theta_k>; h' callable or step samples."""

    def __init__(self, h):
        self.h = h

    def start(self, count, batch):
        if callable(self.h):
            mid = batch.tgrid[:-1] + 0.5 * batch.dt
            self.vals = np.array([np.asarray(self.h(t), dtype=float).reshape(batch.d) for t in mid])
        else:
            v = np.asarray(self.h, dtype=float)
            if v.size != batch.n_steps * batch.d:
                raise ShapeMismatch("h samples must match the step grid")
            self.vals = v.reshape(batch.n_steps, batch.d)
        self.acc = np.zeros(count)

    def update(self, k, t, theta, dtheta):
        self.acc += dtheta @ self.vals[k]

    def result(self):
        return self.acc


class QEta(Functional):
    """q_eta = sum_{i > j} <eta(t_i, t_j) Delta theta_j, Delta theta_i> for a kernel on the step grid."""

    def __init__(self, eta: GridKernel):
        self.eta = eta

    def start(self, count, batch):
        if self.eta.n != batch.n_steps or self.eta.d != batch.d or not math.isclose(self.eta.T, batch.T):
            raise ShapeMismatch("kernel grid must equal the batch step grid")
        n, d = self.eta.n, self.eta.d
        M = K.blocks_to_matrix(self.eta.values)
        mask = np.kron(np.tril(np.ones((n, n)), -1), np.ones((d, d)))
        self.lower = M * mask
        self.incs = np.empty((count, n * d))

    def update(self, k, t, theta, dtheta):
        d = dtheta.shape[1]
        self.incs[:, k * d:(k + 1) * d] = dtheta

    def result(self):
        return np.einsum("pi,pi->p", self.incs @ self.lower.T, self.incs)


class SquareIntegral(Functional):
    """int_0^T |theta|^2 dt by the trapezoid rule."""

    def start(self, count, batch):
        self.acc = np.zeros(count)
        self.dt = batch.dt

    def update(self, k, t, theta, dtheta):
        nxt = theta + dtheta
        self.acc += 0.5 * self.dt * (np.sum(theta**2, 1) + np.sum(nxt**2, 1))

    def result(self):
        return self.acc


class Endpoint(Functional):
    def start(self, count, batch):
        self.last = np.zeros((count, batch.d))

    def update(self, k, t, theta, dtheta):
        self.last = theta + dtheta

    def result(self):
        return self.last


def simulate(batch: PathBatch, functionals: dict[str, Functional], chunk: int = CHUNK) -> dict[str, np.ndarray]:
    """Run every functional over all paths; returns per-path arrays."""
    out: dict[str, list] = {k: [] for k in functionals}
    sq = math.sqrt(batch.dt)
    tg = batch.tgrid
    for first, count in batch.chunks(chunk):
        rng = LaneRNG(batch.seed, first, count)
        for f in functionals.values():
            f.start(count, batch)
        theta = np.zeros((count, batch.d))
        for k in range(batch.n_steps):
            dtheta = sq * rng.normals(batch.d)
            for f in functionals.values():
                f.update(k, tg[k], theta, dtheta)
            theta = theta + dtheta
        for name, f in functionals.items():
            out[name].append(f.result())
    return {k: np.concatenate(v, axis=0) for k, v in out.items()}


# ---------------------------------------------------------------- estimators


def sample_q_eta(eta: GridKernel, batch: PathBatch) -> np.ndarray:
    return simulate(batch, {"q": QEta(eta)})["q"]


def sample_p_sigma(sigma: SigmaPath, batch: PathBatch) -> np.ndarray:
    return simulate(batch, {"p": PSigma(sigma)})["p"]


def _exponent_functional(eta) -> Functional:
    if isinstance(eta, SigmaPath):
        return PSigma(eta)
    if isinstance(eta, GridKernel):
        return QEta(eta)
    raise BadParams("eta must be a GridKernel or a SigmaPath")


def _warn_variance(eta) -> None:
    if isinstance(eta, GridKernel):
        lam = K.lambda_max(eta)
    else:
        grid = K.builtin_kernel("rho_sigma", {"sigma": eta}, eta.d, 64, eta.T)
        lam = K.lambda_max(grid)
    if lam > 0.5:
        warnings.warn(f"lambda_max = {lam:.3f} > 0.5: the estimator variance is large", VarianceWarning,
                      stacklevel=3)


def estimate_exp(eta, h=None, batch: PathBatch | None = None, scale: complex = 1.0) -> MCEstimate:
    """Mean of exp(scale * (q + D*h)); q is q_eta (GridKernel) or p_sigma (SigmaPath).

    scale = 1j gives the characteristic function.
    """
    if batch is None:
        raise BadParams("a PathBatch is required")
    if scale == 1.0:
        _warn_variance(eta)
    fs = {"q": _exponent_functional(eta)}
    if h is not None:
        fs["h"] = Drift(h)
    res = simulate(batch, fs)
    expo = res["q"] + (res["h"] if h is not None else 0.0)
    vals = np.exp(scale * expo)
    if complex(scale).imag == 0:
        vals = vals.real
    return _estimate(vals, batch)


def estimate_functional(values: np.ndarray, batch: PathBatch) -> MCEstimate:
    return _estimate(np.asarray(values), batch)


# ---------------------------------------------------------------- Ornstein-Uhlenbeck


def ou_paths(chi: SigmaPath, batch: PathBatch, c=None, scheme: str = "exponential") -> dict[str, np.ndarray]:
    """Simulate d xi = d theta + chi xi dt, xi(0) = 0.

    scheme "euler" is Euler-Maruyama.  scheme "exponential" propagates with
    E_k = exp(chi(t_k + Delta/2) Delta) and injects the noise at the half step
    (xi_{k+1} = E_k xi_k + E_k^{1/2} Delta theta_k), which is exact in law up
    to O(Delta^2) for constant chi.
    Returns the endpoint and, when c is given, int <c, xi>^2 dt (trapezoid).
    """
    from .linalg import expm

    if chi.d != batch.d or not math.isclose(chi.T, batch.T):
        raise ShapeMismatch("chi and batch disagree on d or T")
    if scheme not in ("euler", "exponential"):
        raise BadParams("scheme must be 'euler' or 'exponential'")
    dt = batch.dt
    tg = batch.tgrid
    if scheme == "euler":
        props = [np.eye(batch.d) + dt * chi(t) for t in tg[:-1]]
        halves = [np.eye(batch.d)] * batch.n_steps
    else:
        props = [expm(dt * chi(t + 0.5 * dt)) for t in tg[:-1]]
        halves = [expm(0.5 * dt * chi(t + 0.5 * dt)) for t in tg[:-1]]
    cv = None if c is None else np.asarray(c, dtype=float).reshape(batch.d)
    ends, integrals = [], []
    sq = math.sqrt(dt)
    for first, count in batch.chunks():
        rng = LaneRNG(batch.seed, first, count)
        xi = np.zeros((count, batch.d))
        acc = np.zeros(count)
        for k in range(batch.n_steps):
            dtheta = sq * rng.normals(batch.d)
            nxt = xi @ props[k].T + dtheta @ halves[k].T
            if cv is not None:
                acc += 0.5 * dt * ((xi @ cv) ** 2 + (nxt @ cv) ** 2)
            xi = nxt
        ends.append(xi)
        integrals.append(acc)
    out = {"endpoint": np.concatenate(ends)}
    if cv is not None:
        out["c_integral"] = np.concatenate(integrals)
    return out


def estimate_psi(p, c, x: float, n_paths: int = DEFAULT_PATHS, n_steps: int = DEFAULT_STEPS,
                 seed: int = 0) -> MCEstimate:
    """Psi(x) = E[exp(-(1/2) int_0^x <c, xi>^2)] for the OU process with drift diag(p)."""
    from .sigma import constant

    p = np.asarray(p, dtype=float)
    batch = PathBatch(n_paths, n_steps, x, p.size, seed)
    res = ou_paths(constant(np.diag(p), x), batch, c)
    return _estimate(np.exp(-0.5 * res["c_integral"]), batch)


# ---------------------------------------------------------------- pinned estimates


@dataclass(frozen=True)
class PinnedEstimate:
    eps: float
    at_eps: MCEstimate
    at_2eps: MCEstimate
    extrapolated: MCEstimate
    ess: float

    @property
    def bias_band(self) -> float:
        """Allowance for the O(eps^4) remainder: a quarter of the removed O(eps^2) term."""
        return 0.25 * abs(self.at_eps.mean - self.at_2eps.mean) / 3.0

    def within(self, value, k: float = 3.0) -> bool:
        return self.extrapolated.within(value, k, self.bias_band)

    def to_json(self) -> dict:
        return {"eps": self.eps, "at_eps": self.at_eps.to_json(), "at_2eps": self.at_2eps.to_json(),
                "extrapolated": self.extrapolated.to_json(), "ess": self.ess, "bias_band": self.bias_band}


def _gauss_kernel(y: np.ndarray, eps: float) -> np.ndarray:
    N = y.shape[1]
    return np.exp(-0.5 * np.sum(y * y, 1) / eps**2) / (2 * math.pi * eps**2) ** (N / 2)


def pinned_estimate(eta, N: int, eps: float, batch: PathBatch, weight: Callable | None = None,
                    scale: complex = 1.0) -> PinnedEstimate:
    """E[exp(scale * q) K_eps(theta^{(N)}(T))] at eps and 2 eps, plus the Richardson value (4 E_eps - E_2eps)/3.

    ``eta`` is a GridKernel, a SigmaPath, "zero", or "square" (weight exp(scale * int |theta|^2)).
    """
    if not 0 <= N <= batch.d:
        raise BadParams("need 0 <= N <= d")
    if eps <= 0:
        raise BadParams("bandwidth must be positive")
    fs: dict[str, Functional] = {"end": Endpoint()}
    if isinstance(eta, str):
        if eta == "square":
            fs["q"] = SquareIntegral()
        elif eta != "zero":
            raise BadParams(f"unknown functional {eta!r}")
    else:
        fs["q"] = _exponent_functional(eta)
    res = simulate(batch, fs)
    base = np.exp(scale * res["q"]) if "q" in res else np.ones(batch.n_paths)
    if complex(scale).imag == 0:
        base = base.real
    if N == 0:
        est = _estimate(base, batch)
        return PinnedEstimate(eps, est, est, est, float(batch.n_paths))
    y = res["end"][:, :N]
    k1 = _gauss_kernel(y, eps)
    k2 = _gauss_kernel(y, 2 * eps)
    ess = float(k1.sum() ** 2 / np.sum(k1**2))
    if ess < MIN_ESS:
        raise BandwidthTooSmall(f"effective sample size {ess:.1f} < {MIN_ESS}")
    e1 = _estimate(base * k1, batch)
    e2 = _estimate(base * k2, batch)
    ex = _estimate(base * (4 * k1 - k2) / 3.0, batch)
    return PinnedEstimate(eps, e1, e2, ex, ess)
