import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from quadwiener import linalg, ode, sigma as sg
from quadwiener.errors import BadParams, NonFinite, SingularS


# ---------------------------------------------------------------- RK4


def test_rk4_zero_rhs_backward():
    p = ode.rk4_matrix_ode(lambda t, Y: np.zeros_like(Y), np.eye(2), 1.0, "backward", 16)
    assert np.allclose(p.values, np.eye(2))
    assert p.tgrid[0] == 0.0 and p.tgrid[-1] == 1.0


def test_rk4_exponential():
    p = ode.rk4_matrix_ode(lambda t, Y: Y, [[1.0]], 1.0, "forward", 64)
    assert abs(p.values[-1, 0, 0] - math.e) <= 1e-8


def test_rk4_blowup():
    with pytest.raises(NonFinite):
        ode.rk4_matrix_ode(lambda t, Y: Y @ Y, [[2.0]], 1.0, "forward", 256)


def test_rk4_rejects_few_steps_and_bad_direction():
    with pytest.raises(BadParams):
        ode.rk4_matrix_ode(lambda t, Y: Y, [[1.0]], 1.0, "forward", 8)
    with pytest.raises(BadParams):
        ode.rk4_matrix_ode(lambda t, Y: Y, [[1.0]], 1.0, "sideways", 16)


def test_matrix_path_interpolation():
    p = ode.MatrixPath(np.array([0.0, 1.0]), np.array([[[0.0]], [[2.0]]]))
    assert p.at(0.25)[0, 0] == pytest.approx(0.5)
    assert p.at(1.0)[0, 0] == 2.0


# ---------------------------------------------------------------- Riccati


def test_riccati_zero():
    out = ode.riccati_solve(sg.constant(np.zeros((2, 2))))
    assert out.solved
    assert np.allclose(out.path.values, 0)
    assert out.trace_integral == 0.0
    assert out.value == 1.0


@pytest.mark.parametrize("c", [0.5, -1.0, 0.9])
def test_riccati_scalar_closed_form(c):
    out = ode.riccati_solve(sg.constant(c))
    assert out.solved
    assert out.path.values[0, 0, 0] == pytest.approx(c / (1 - c) - c, rel=1e-8)
    # int_0^1 R = -log(1 - c) - c
    assert out.trace_integral == pytest.approx(-math.log(1 - c) - c, rel=1e-8)


def test_riccati_blowup_at_threshold():
    out = ode.riccati_solve(sg.constant(1.0))
    assert not out.solved
    assert out.path is None
    lo, hi = out.blowup_bracket
    assert lo <= out.blowup_time <= hi
    assert hi - lo <= 1.0 / ode.DEFAULT_STEPS + 1e-12
    assert hi <= 2.0 / ode.DEFAULT_STEPS


def test_riccati_blowup_inside_interval():
    # y = R + c solves y' = -y^2, y(T) = c, so y blows up at T - 1/c
    out = ode.riccati_solve(sg.constant(2.0))
    assert not out.solved
    lo, hi = out.blowup_bracket
    assert lo - 1e-9 <= 0.5 <= hi + 1e-9


def small_sigma(seed, d, degree):
    rng = np.random.default_rng(seed)
    coeffs = [rng.standard_normal((d, d)) for _ in range(degree + 1)]
    norm = sum(np.linalg.norm(c) for c in coeffs)
    chi = 0.6 / (math.sqrt(d) * math.e)
    return sg.polynomial([c * chi / norm for c in coeffs])


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), d=st.integers(1, 3), degree=st.integers(0, 2))
def test_riccati_symmetry_and_suite_agreement(seed, d, degree):
    sigma = small_sigma(seed, d, degree)
    r = ode.riccati_solve(sigma, steps=256)
    suite = ode.second_order_suite(sigma, steps=256)
    assert r.solved and suite.nonsingular
    for R in r.path.values:
        assert np.linalg.norm(R - R.T) <= 1e-8 * (1 + np.linalg.norm(R))
    for k in range(0, 257, 32):
        t = r.path.tgrid[k]
        chi = r.path.values[k] + sigma(t)
        S, dS = suite.S.values[k], suite.dS.values[k]
        assert np.abs(chi - dS @ np.linalg.inv(S)).max() <= 1e-5
    total = r.trace_integral + sigma.trace_integral()
    assert suite.log_abs_det_S[0] + total == pytest.approx(0.0, abs=1e-5)


# ---------------------------------------------------------------- second-order suite


def test_suite_zero():
    suite = ode.second_order_suite(sg.constant(np.zeros((2, 2))), steps=32)
    t = suite.tgrid
    assert np.allclose(suite.S.values, np.eye(2))
    assert np.allclose(suite.U.values, np.eye(2))
    assert np.allclose(suite.V.values, (t - 1.0)[:, None, None] * np.eye(2))
    assert suite.nonsingular


@pytest.mark.parametrize("lam", [0.5, 1.0, 2.0])
def test_suite_mehler(lam):
    suite = ode.second_order_suite(sg.constant(0.0), sg.constant(-lam ** 2), steps=256)
    t = suite.tgrid
    assert np.allclose(suite.S.values[:, 0, 0], np.cosh(lam * (t - 1.0)), rtol=1e-10)
    assert suite.nonsingular


@pytest.mark.parametrize("lam,ok", [(1.2, True), (1.6, False)])
def test_suite_oscillatory(lam, ok):
    suite = ode.second_order_suite(sg.constant(0.0), sg.constant(lam ** 2), steps=256)
    t = suite.tgrid
    assert np.allclose(suite.S.values[:, 0, 0], np.cos(lam * (t - 1.0)), atol=1e-9)
    assert suite.nonsingular == ok


def test_suite_convergence_order():
    lam = 2.0
    errs = []
    for steps in (16, 32):
        s = ode.second_order_suite(sg.constant(0.0), sg.constant(-lam ** 2), steps=steps)
        errs.append(abs(s.S.values[0, 0, 0] - math.cosh(lam)))
    assert 10.0 <= errs[0] / errs[1] <= 22.0


# ---------------------------------------------------------------- v_t


def test_v_identity_path():
    tg = np.linspace(0, 2, 33)
    S = ode.MatrixPath(tg, np.broadcast_to(np.eye(2), (33, 2, 2)).copy())
    assert np.allclose(ode.v_t_of_S(S), 2.0 * np.eye(2))
    assert np.allclose(ode.v_t_of_S(S, 1.0), np.eye(2))


@pytest.mark.parametrize("lam", [0.5, 1.0])
def test_v_mehler(lam):
    suite = ode.second_order_suite(sg.constant(0.0), sg.constant(-lam ** 2), steps=512)
    assert ode.v_t_of_S(suite.S)[0, 0] == pytest.approx(math.tanh(lam) / lam, rel=1e-9)


def test_v_skew_sigma():
    T, a = 1.0, 0.8
    A = a * linalg.J2
    suite = ode.second_order_suite(sg.constant(A, T), steps=512)
    v = ode.v_t_of_S(suite.S)
    tnh = linalg.matrix_functions(T * A)["tnh"]
    assert np.allclose(v, T * tnh, atol=1e-9)


def test_v_singular():
    tg = np.linspace(0, 1, 17)
    vals = np.broadcast_to(np.eye(1), (17, 1, 1)).copy()
    vals[4] = 0.0
    with pytest.raises(SingularS):
        ode.v_t_of_S(ode.MatrixPath(tg, vals))


def test_complex_s0_real_axis():
    # zeta = 1 reproduces the real suite
    sigma = sg.polynomial([[[0.3]], [[0.2]]])
    real = ode.second_order_suite(sigma, steps=256).S.values[0, 0, 0]
    z = ode.complex_S0(sigma, [1.0, 0.0], steps=256)
    assert z[0][0, 0] == pytest.approx(real, rel=1e-10)
    assert np.allclose(z[1], np.eye(1))
