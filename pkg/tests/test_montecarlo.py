import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from quadwiener import kernel as K, montecarlo as MC, sigma as sg, special
from quadwiener.errors import BadParams, BandwidthTooSmall, ShapeMismatch, VarianceWarning

MASK = 2**64 - 1
GOLDEN = 0x9E3779B97F4A7C15


# pure-python transcription of the documented stream, used as an independent oracle
def ref_splitmix(x):
    z = (x + GOLDEN) & MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
    return z ^ (z >> 31)


class RefLane:
    def __init__(self, seed, lane):
        self.x = ref_splitmix((seed + (lane + 1) * GOLDEN) & MASK) or 1

    def uniform(self):
        x = self.x
        x ^= x >> 12
        x ^= (x << 25) & MASK
        x ^= x >> 27
        self.x = x
        return (((x * 0x2545F4914F6CDD1D) & MASK) >> 11) * 2.0 ** -53

    def normal_pair(self):
        while True:
            v1 = 2 * self.uniform() - 1
            v2 = 2 * self.uniform() - 1
            s = v1 * v1 + v2 * v2
            if 0 < s < 1:
                f = math.sqrt(-2 * math.log(s) / s)
                return v1 * f, v2 * f


# ---------------------------------------------------------------- RNG


def test_splitmix_reference_vector():
    # first two outputs of the SplitMix64 reference generator seeded with 0
    out = MC.splitmix64(np.array([0, GOLDEN], dtype=np.uint64))
    assert [int(v) for v in out] == [0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4]


@pytest.mark.parametrize("seed", [0, 1, 2**63 + 5])
def test_lane_stream_matches_reference(seed):
    rng = MC.LaneRNG(seed, 3, 4)
    u = rng.uniform()
    for lane in range(4):
        assert u[lane] == RefLane(seed, 3 + lane).uniform()
    rng = MC.LaneRNG(seed, 0, 3)
    z = rng.normals(3)
    for lane in range(3):
        ref = RefLane(seed, lane)
        a, b = ref.normal_pair()
        c, _ = ref.normal_pair()
        assert np.allclose(z[lane], [a, b, c], rtol=1e-15, atol=0)


def test_batches_are_deterministic():
    b = MC.PathBatch(300, 10, d=2, seed=42)
    assert np.array_equal(b.increments(), b.increments())
    assert not np.array_equal(b.increments(), MC.PathBatch(300, 10, d=2, seed=43).increments())


def test_chunking_does_not_change_stream():
    b = MC.PathBatch(50, 12, seed=9)
    whole = MC.simulate(b, {"e": MC.Endpoint()}, chunk=50)["e"]
    split = MC.simulate(b, {"e": MC.Endpoint()}, chunk=7)["e"]
    assert np.array_equal(whole, split)
    assert np.allclose(b.increments(10, 5).sum(1), whole[10:15], atol=1e-14)


def test_batch_validation():
    with pytest.raises(BadParams):
        MC.PathBatch(0, 10)
    with pytest.raises(BadParams):
        MC.estimate_exp(sg.constant(0.1))


# ---------------------------------------------------------------- q_eta


def test_q_eta_zero():
    assert np.all(MC.sample_q_eta(K.builtin_kernel("zero", n=16), MC.PathBatch(100, 16)) == 0)


def test_q_eta_moments():
    n = 32
    eta = K.builtin_kernel("kac", n=n)
    q = MC.sample_q_eta(eta, MC.PathBatch(40000, n, seed=3))
    m = MC.estimate_functional(q, MC.PathBatch(40000, n))
    assert m.within(0.0)
    # strict i > j sum: E[q^2] = sum_{i>j} (eta_ij Delta)^2, which tends to |eta|_2^2 / 2
    M = eta.operator().matrix
    exact = 0.5 * (np.sum(M ** 2) - np.sum(np.diag(M) ** 2))
    assert abs(exact - 0.5 * K.hs_norm(eta) ** 2) <= 2.0 / n
    assert MC.estimate_functional(q ** 2, MC.PathBatch(40000, n)).within(exact)


def test_q_eta_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        MC.sample_q_eta(K.builtin_kernel("kac", n=16), MC.PathBatch(10, 32))


# ---------------------------------------------------------------- estimate_exp


def test_estimate_exp_zero():
    e = MC.estimate_exp(K.builtin_kernel("zero", n=8), batch=MC.PathBatch(100, 8))
    assert e.mean == 1.0 and e.stderr == 0.0


def test_estimate_exp_levy_area_charfn():
    e = MC.estimate_exp(sg.levy_area_sigma(), batch=MC.PathBatch(20000, 128, d=2, seed=6), scale=1j)
    assert e.within(1 / math.cosh(0.5))


def test_estimate_exp_scalar_gaussian():
    ref = 0.5 ** -0.5 * math.exp(-0.25)
    e = MC.estimate_exp(sg.constant(0.5), batch=MC.PathBatch(20000, 128, seed=5))
    assert e.within(ref)


def test_estimate_exp_drift():
    # E[exp(D*h)] = exp(|h|^2/2) for h' = 0.5 everywhere
    b = MC.PathBatch(20000, 8, seed=2)
    e = MC.estimate_exp(K.builtin_kernel("zero", n=8), np.full(8, 0.5), b)
    assert e.within(math.exp(0.125))


def test_variance_warning():
    with pytest.warns(VarianceWarning):
        MC.estimate_exp(K.builtin_kernel("kac", n=16).scaled(1.5), batch=MC.PathBatch(50, 16))


def test_stderr_scales_like_root_n():
    eta = K.builtin_kernel("kac", n=16).scaled(-1.0)
    s1 = MC.estimate_exp(eta, batch=MC.PathBatch(10000, 16, seed=1)).stderr
    s4 = MC.estimate_exp(eta, batch=MC.PathBatch(40000, 16, seed=2)).stderr
    assert 0.8 <= (s1 / s4) / 2.0 <= 1.2


def test_step_doubling_bias_is_small():
    s = sg.polynomial([[[0.3]], [[-0.4]]])
    vals = []
    for steps in (256, 512):
        eta = K.builtin_kernel("rho_sigma", {"sigma": s}, 1, steps)
        vals.append(MC.estimate_exp(eta, batch=MC.PathBatch(6000, steps, seed=8)))
    band = 2.0 * math.hypot(vals[0].stderr, vals[1].stderr)
    assert abs(vals[0].mean - vals[1].mean) <= band


def test_estimate_json():
    e = MC.estimate_exp(sg.levy_area_sigma(), batch=MC.PathBatch(50, 8, d=2), scale=1j).to_json()
    assert set(e["mean"]) == {"re", "im"} and e["n_paths"] == 50


# ---------------------------------------------------------------- OU


def test_ou_zero_is_brownian():
    b = MC.PathBatch(200, 16, d=2, seed=4)
    ou = MC.ou_paths(sg.constant(np.zeros((2, 2))), b)["endpoint"]
    assert np.array_equal(ou, MC.simulate(b, {"e": MC.Endpoint()})["e"])


@pytest.mark.parametrize("scheme", ["exponential", "euler"])
def test_ou_variance(scheme):
    b = MC.PathBatch(20000, 256, seed=12)
    end = MC.ou_paths(sg.constant(-1.0), b, scheme=scheme)["endpoint"][:, 0]
    est = MC.estimate_functional(end ** 2, b)
    assert est.within((1 - math.exp(-2)) / 2)


def test_ou_rejects_bad_scheme():
    with pytest.raises(BadParams):
        MC.ou_paths(sg.constant(0.0), MC.PathBatch(4, 4), scheme="milstein")


def test_psi_matches_ode():
    a = special.DiscreteMeasure.from_points([-0.5, 0.7], [1.0, 0.6])
    x = 1.2
    est = MC.estimate_psi(a.p, a.c, x, n_paths=20000, n_steps=128, seed=3)
    assert est.within(special.psi_via_ode(a, x))


# ---------------------------------------------------------------- pinned


def test_pinned_zero():
    p = MC.pinned_estimate("zero", 1, 0.1, MC.PathBatch(100000, 16, seed=7))
    assert p.within(1 / math.sqrt(2 * math.pi))
    assert p.ess > 1000


def test_pinned_scalar_gaussian():
    p = MC.pinned_estimate(sg.constant(0.5), 1, 0.1, MC.PathBatch(100000, 64, seed=7))
    assert p.within(math.exp(-0.25) / math.sqrt(2 * math.pi))
    assert set(p.to_json()) >= {"extrapolated", "bias_band", "ess"}


def test_pinned_n_zero_is_plain_mean():
    b = MC.PathBatch(500, 8, seed=1)
    p = MC.pinned_estimate("square", 0, 0.1, b, scale=-1.0)
    assert p.extrapolated.mean == p.at_eps.mean


def test_pinned_errors():
    b = MC.PathBatch(50, 8, seed=1)
    with pytest.raises(BandwidthTooSmall):
        MC.pinned_estimate("zero", 1, 1e-4, b)
    with pytest.raises(BadParams):
        MC.pinned_estimate("zero", 2, 0.1, b)
    with pytest.raises(BadParams):
        MC.pinned_estimate("zero", 1, -0.1, b)
    with pytest.raises(BadParams):
        MC.pinned_estimate("cube", 1, 0.1, b)


@settings(max_examples=20, deadline=None)
@given(mean=st.floats(-5, 5), spread=st.floats(0.01, 2), k=st.floats(1, 5))
def test_within_band(mean, spread, k):
    e = MC.MCEstimate(mean, spread, 100, 0)
    assert e.within(mean + 0.99 * k * spread, k)
    assert not e.within(mean + 1.01 * k * spread + 1e-12, k)
