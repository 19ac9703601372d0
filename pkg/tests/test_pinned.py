import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from quadwiener import kernel as K, laplace as L, montecarlo as MC, pinned as P, sigma as sg
from quadwiener.errors import (BadParams, DependentPins, NotIntegrable, ShapeMismatch,
                               UnknownFamily)

POLY2 = sg.polynomial([[[0.2, -0.3], [0.1, 0.25]], [[0.15, 0.2], [-0.1, 0.05]]])


def gaussian_pinned(c, T):
    # E[exp((c/2)(theta(T)^2 - T)) delta_0(theta(T))] = (2 pi T)^{-1/2} e^{-cT/2}
    return (2 * math.pi * T) ** -0.5 * math.exp(-c * T / 2)


def families():
    return [P.rho_sigma_family(POLY2, n=96), P.rho_sigma_family(sg.constant(0.4), n=96),
            P.sample_variance_family(1.0, 1, n=96), P.sample_variance_family([[1.0, 0.3], [0.3, 0.5]], 2, n=96)]


def rel(a, b):
    return abs(a - b) / abs(b)


# ---------------------------------------------------------------- pins


def test_monic_orthogonal():
    T = 2.0
    fs = P.monic_orthogonal(3, T)
    for i, f in enumerate(fs):
        assert f.coef[-1] == pytest.approx(1.0) and f.degree() == i
        for g in fs[:i]:
            h = (f * g).integ()
            assert abs(h(T) - h(0)) <= 1e-12


def test_polynomial_pins_layout():
    pins = P.polynomial_pins(2, 16, 1.0, 1)
    assert pins.M == 4
    assert pins.labels == ("f0e1", "f0e2", "f1e1", "f1e2")
    # endpoint pins are orthonormal in grid coordinates when T = 1
    assert np.allclose(P.endpoint_pins(2, 16, 1.0).gram(), np.eye(2), atol=1e-14)
    assert np.allclose(pins.scaled([1, 2, 3, 4]).vectors[3], 4 * pins.vectors[3])


# ---------------------------------------------------------------- condition (A)


@pytest.mark.parametrize("fam,rank", [(P.rho_sigma_family(POLY2, n=64), 2),
                                      (P.rho_sigma_family(sg.constant(0.7), n=64), 1),
                                      (P.sample_variance_family(1.0, 1, n=64), 2),
                                      (P.sample_variance_family([[1.0, 0.3], [0.3, 0.5]], 2, n=64), 4),
                                      (P.iterated_family(sg.constant(0.3), 1, n=64), 1)])
def test_family_split(fam, rank):
    dec = P.decompose_condition_A(fam)
    assert dec.method == "family"
    assert np.allclose(dec.A_I + dec.A_F, fam.operator().matrix, atol=1e-12)
    assert np.linalg.matrix_rank(dec.A_F, 1e-10) <= rank
    assert dec.upper_residual <= 1e-6


def test_rho_sigma_kernel_F_is_sigma_transpose():
    fam = P.rho_sigma_family(POLY2, n=32)
    dec = P.decompose_condition_A(fam)
    t = K.midpoints(32, 1.0)
    blocks = dec.A_F.reshape(32, 2, 32, 2) / (1.0 / 32)
    for j in (0, 10, 31):
        assert np.allclose(blocks[5, :, j, :], POLY2(t[j]).T, atol=1e-12)
        assert np.allclose(blocks[20, :, j, :], POLY2(t[j]).T, atol=1e-12)


def test_sample_variance_kernel_F():
    D = 0.7
    fam = P.sample_variance_family(D, 1, T=2.0, n=24)
    dec = P.decompose_condition_A(fam)
    t = K.midpoints(24, 2.0)
    ref = -np.outer(t / 2.0, 2.0 - t) * D * (2.0 / 24)
    assert np.allclose(dec.A_F, ref, atol=1e-14)


def test_volterra_part_has_unit_det2_in_the_limit():
    # the midpoint diagonal of A_I carries an O(1/n) defect
    vals = [abs(P.decompose_condition_A(P.rho_sigma_family(POLY2, n=n)).log_det2_I()) for n in (64, 128)]
    assert vals[1] <= 0.6 * vals[0]
    assert abs(P.decompose_condition_A(P.sample_variance_family(1.0, 1, n=64)).log_det2_I()) <= 1e-12


def test_trivial_split_on_random_kernel():
    rng = np.random.default_rng(4)
    n = 24
    Z = rng.standard_normal((n, n))
    Z = 0.5 * (Z + Z.T)
    Z *= 0.6 / np.max(np.abs(np.linalg.eigvalsh(Z)))
    op = K.builtin_kernel("zero", n=n).operator().with_matrix(Z)
    pins = P.endpoint_pins(1, n, 1.0)
    dec = P.decompose_condition_A(op, pins)
    assert dec.method == "trivial"
    assert np.isfinite(dec.log_det2_I())
    assert np.allclose(dec.A_I + dec.A_F, Z, atol=1e-12)


def test_split_errors():
    op = K.builtin_kernel("kac", n=16)
    with pytest.raises(BadParams):
        P.decompose_condition_A(op)
    with pytest.raises(UnknownFamily):
        P.decompose_condition_A(op, P.endpoint_pins(1, 16, 1.0), method="family")
    with pytest.raises(ShapeMismatch):
        P.decompose_condition_A(op, P.endpoint_pins(1, 8, 1.0))


# ---------------------------------------------------------------- J_p


@pytest.mark.parametrize("c", [0.0, 0.6, -1.3])
def test_jp_constant_sigma_is_linear(c):
    sol = P.solve_Jp(P.rho_sigma_family(sg.constant(c), n=32), steps=64)
    t = sol.tgrid
    assert np.allclose(sol.J[:, 0, 0], t, atol=1e-13)
    assert np.allclose(sol.dJ[:, 0, 0], 1.0, atol=1e-13)


@pytest.mark.parametrize("fam", [P.rho_sigma_family(POLY2, n=32), P.sample_variance_family(0.8, 1, n=32),
                                 P.sample_variance_family([[1.0, 0.3], [0.3, 0.5]], 2, n=32),
                                 P.gradient_square_family([[0.3, 0.5], [-0.1, 0.2]], [[0.4, 0.1], [0.1, -0.2]], 2,
                                                          n=32)])
def test_jp_integral_equation_residual(fam):
    sol = P.solve_Jp(fam, steps=2048)
    assert P.jp_residual(fam, sol) <= 1e-6


def test_jp_sample_variance_matches_discrete_solve():
    n = 256
    fam = P.sample_variance_family(0.8, 1, n=n)
    dec = P.decompose_condition_A(fam)
    U = dec.pins.onb()
    Jd = np.linalg.solve(np.eye(n) - dec.A_I, U) / math.sqrt(1.0 / n)
    sol = P.solve_Jp(fam, tgrid=K.midpoints(n, 1.0))
    assert np.abs(Jd - sol.dJ[:, 0, :]).max() <= 1e-3


def test_jp_iterated_has_no_ode():
    with pytest.raises(UnknownFamily):
        P.solve_Jp(P.iterated_family(sg.constant(0.3), 1, n=16))


# ---------------------------------------------------------------- frames


@pytest.mark.parametrize("idx", range(4))
def test_row_selection_identity(idx):
    fam = families()[idx]
    dec = P.decompose_condition_A(fam)
    frame = P.discrete_frame(dec, fam.operator().matrix)
    assert frame.orthogonal
    for N in range(frame.M + 1):
        assert np.abs(frame.J_rows(N) - frame.direct(N)).max() <= 1e-10


def test_rho_sigma_ode_frame_zero():
    frame, log_const = P.ode_frame(P.rho_sigma_family(sg.constant(np.zeros((2, 2)), 2.0), n=16), steps=64)
    assert np.allclose(frame.Phi, np.vstack([2.0 * np.eye(2), 2.0 * np.eye(2)]))
    assert np.allclose(frame.det_C, [1.0, 2.0, 4.0])
    assert log_const == 0.0


# ---------------------------------------------------------------- pinned values


@pytest.mark.parametrize("route", ["ode", "discrete"])
def test_brownian_endpoint_density(route):
    fam = P.rho_sigma_family(sg.constant(0.0), n=32)
    assert P.plucker_pinned(fam, 1, route=route).value == pytest.approx((2 * math.pi) ** -0.5, rel=1e-12)
    assert P.plucker_pinned(fam, 0, route=route).value == pytest.approx(1.0, rel=1e-12)


@pytest.mark.parametrize("c,T", [(0.5, 1.0), (-1.0, 1.0), (0.3, 2.0)])
@pytest.mark.parametrize("route", ["ode", "discrete"])
def test_constant_sigma_gaussian(c, T, route):
    fam = P.rho_sigma_family(sg.constant(c, T), n=64)
    assert rel(P.plucker_pinned(fam, 1, route=route).value, gaussian_pinned(c, T)) <= 1e-6


@pytest.mark.parametrize("idx", range(4))
def test_plucker_matches_general(idx):
    fam = families()[idx]
    for N in range(fam.d + 1):
        g = P.pinned_general(fam, fam.pins(), N=N).value
        assert rel(P.plucker_pinned(fam, N, route="discrete").value, g) <= 1e-10
        assert rel(P.plucker_pinned(fam, N, route="ode").value, g) <= 1e-4


@pytest.mark.parametrize("idx", range(4))
def test_n_zero_is_unpinned_laplace(idx):
    fam = families()[idx]
    spec = L.laplace_spectral(fam.operator()).value * math.exp(fam.discrete_constant())
    assert rel(P.plucker_pinned(fam, 0, route="discrete").value, spec) <= 1e-6


def test_gradient_square_routes():
    fam = P.gradient_square_family(0.4, 0.3, 1, n=128)
    for N in (0, 1):
        g = P.pinned_general(fam, fam.pins(), N=N).value
        assert rel(P.plucker_pinned(fam, N, route="discrete").value, g) <= 1e-10
        assert rel(P.plucker_pinned(fam, N, route="ode").value, g) <= 1e-5


def test_iterated_discrete_matches_general():
    for order in (1, 2):
        fam = P.iterated_family(sg.constant(0.3), order, n=64)
        for N in (0, 1):
            g = P.pinned_general(fam, fam.pins(), N=N).value
            assert rel(P.plucker_pinned(fam, N, route="discrete").value, g) <= 1e-10
    with pytest.raises(UnknownFamily):
        P.plucker_pinned(P.iterated_family(sg.constant(0.3), 1, n=16), 1, route="ode")


def test_plucker_errors():
    fam = P.rho_sigma_family(sg.constant(0.1), n=16)
    with pytest.raises(BadParams):
        P.plucker_pinned(fam, 2)
    with pytest.raises(BadParams):
        P.plucker_pinned(fam, 1, route="spectral")
    with pytest.raises(NotIntegrable):
        P.sample_variance_family(-1.5, 1)
    with pytest.raises(BadParams):
        P.iterated_family(sg.constant(0.1), 3)
    with pytest.raises(BadParams):
        P.gradient_square_family(0.0, [[0.0, 1.0], [0.0, 0.0]], 2)


def test_result_itemizes_factors():
    r = P.plucker_pinned(P.sample_variance_family(1.0, 1, n=32), 1, route="discrete")
    assert {"det_J_N", "det_C_M", "det_C_N", "log_constant", "split"} <= set(r.diagnostics)


# ---------------------------------------------------------------- pinned_general


@pytest.mark.parametrize("scale", [1.0, 0.5, 3.0])
def test_general_zero_kernel_unit_pin(scale):
    n = 32
    pins = P.endpoint_pins(1, n, 1.0).scaled([scale])
    r = P.pinned_general(K.builtin_kernel("zero", n=n), pins)
    detC = float(pins.gram()[0, 0])
    assert detC == pytest.approx(scale ** 2)
    assert r.value == pytest.approx((2 * math.pi) ** -0.5 * detC ** -0.5, rel=1e-12)


def test_general_drift_shift():
    # E[exp(int h' d theta) delta_0(theta(1))] = (2 pi)^{-1/2} exp((|h|^2 - (int h')^2) / 2)
    n = 256
    t = K.midpoints(n, 1.0)
    r = P.pinned_general(K.builtin_kernel("zero", n=n), P.endpoint_pins(1, n, 1.0), h=t)
    hh = float(np.sum(t ** 2) / n)
    ref = (2 * math.pi) ** -0.5 * math.exp(0.5 * (hh - 0.25))
    assert r.value == pytest.approx(ref, rel=1e-12)
    assert rel(r.value, (2 * math.pi) ** -0.5 * math.exp(1 / 24)) <= 1e-5


def test_general_pinning_twice():
    n = 48
    op = K.builtin_kernel("kac", n=n).scaled(0.8).operator()
    pins = P.endpoint_pins(1, n, 1.0)
    once = P.pinned_general(op, pins)
    Q = pins.onb() / np.linalg.norm(pins.onb())
    Pp = np.eye(n) - Q @ Q.T
    # B restricted to the orthogonal complement twice over, plus the untouched pinned block
    projected = op.with_matrix(Pp @ (Pp @ op.matrix @ Pp) @ Pp + Q @ Q.T @ op.matrix @ Q @ Q.T)
    assert P.pinned_general(projected, pins).value == pytest.approx(once.value, rel=1e-12)


def test_general_errors():
    n = 16
    op = K.builtin_kernel("kac", n=n)
    pins = P.endpoint_pins(1, n, 1.0)
    doubled = P.PinSet(1, n, 1.0, np.vstack([pins.vectors, pins.vectors]))
    with pytest.raises(DependentPins):
        P.pinned_general(op, doubled)
    with pytest.raises(ShapeMismatch):
        P.pinned_general(op, P.endpoint_pins(1, 8, 1.0))
    with pytest.raises(BadParams):
        P.pinned_general(op, pins, N=2)
    with pytest.raises(NotIntegrable):
        P.pinned_general(K.builtin_kernel("kac", n=n).scaled(30.0), pins)


def test_kac_pinned_against_monte_carlo():
    n = 32
    eta = K.builtin_kernel("kac", n=n).scaled(-1.0)
    exact = P.pinned_general(eta, P.endpoint_pins(1, n, 1.0)).value
    pe = MC.pinned_estimate(eta, 1, 0.1, MC.PathBatch(100_000, n, seed=21))
    assert abs(pe.extrapolated.mean - exact) <= 3 * pe.extrapolated.stderr + pe.bias_band


# ---------------------------------------------------------------- properties


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), d=st.integers(1, 2))
def test_rescaling_pins(seed, d):
    rng = np.random.default_rng(seed)
    fam = P.sample_variance_family(np.diag(rng.uniform(-0.8, 1.5, d)), d, n=48)
    pins = fam.pins()
    factors = rng.uniform(0.2, 5.0, pins.M)
    for N in range(d + 1):
        # delta_0(f k) = delta_0(k) / |f| on the pinned directions; the unpinned ones drop out
        base = P.pinned_general(fam, pins, N=N).value / float(np.prod(factors[:N]))
        assert P.pinned_general(fam, pins.scaled(factors), N=N).value == pytest.approx(base, rel=1e-10)
        dec = P.decompose_condition_A(fam, pins.scaled(factors))
        frame = P.discrete_frame(dec, fam.operator().matrix)
        log_const = -0.5 * dec.log_det2_I() - 0.5 * np.trace(dec.A_F) + fam.discrete_constant()
        detJ = np.linalg.det(frame.J(N))
        v = math.sqrt(frame.det_C[-1] / ((2 * math.pi) ** N * frame.det_C[N] * detJ)) * math.exp(log_const)
        assert v == pytest.approx(base, rel=1e-9)


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), d=st.integers(1, 2))
def test_random_rho_sigma_routes_agree(seed, d):
    rng = np.random.default_rng(seed)
    coeffs = [0.3 * rng.standard_normal((d, d)) / d for _ in range(2)]
    fam = P.rho_sigma_family(sg.polynomial(coeffs), n=64)
    for N in range(d + 1):
        g = P.pinned_general(fam, fam.pins(), N=N).value
        assert rel(P.plucker_pinned(fam, N, route="discrete").value, g) <= 1e-9
        assert rel(P.plucker_pinned(fam, N, route="ode").value, g) <= 1e-3
