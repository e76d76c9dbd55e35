import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from qflow.volume import (CirSpec, besq0_absorption_prob, besq0_transition, cir_moments, cir_paths, cir_stationary,
                          cir_transition, compare_laws, euler_volume_paths, feller_flag)


def test_besq_from_zero_stays_at_zero():
    out = besq0_transition(0.0, 1.0, 2.0, np.random.default_rng(0), 100)
    assert np.all(out == 0)
    assert besq0_absorption_prob(0.0, 1.0, 2.0) == 1.0


def test_besq_is_a_martingale_with_known_variance():
    # dV = c sqrt(V) dB: E V_t = v0, Var V_t = c^2 v0 t
    v0, t, c = 3.0, 0.7, 2.0
    out = besq0_transition(v0, t, c, np.random.default_rng(1), 200_000)
    se = math.sqrt(c ** 2 * v0 * t / len(out))
    assert abs(out.mean() - v0) < 4 * se
    assert out.var() == pytest.approx(c ** 2 * v0 * t, rel=0.02)


def test_absorption_probability_matches_euler_oracle():
    v0, t, c = 1.0, 1.0, 2.0
    exact = float(besq0_absorption_prob(v0, t, c))
    assert exact == pytest.approx(math.exp(-0.5))
    euler = euler_volume_paths(v0, t, 1e-3, 20_000, np.random.default_rng(2), diffusion_coeff=c)
    frac = np.mean(euler == 0)
    # Euler with absorption converges slowly in dt; allow its bias on top of the sampling error
    assert abs(frac - exact) < 4 * math.sqrt(exact * (1 - exact) / 20_000) + 0.01
    draws = besq0_transition(v0, t, c, np.random.default_rng(3), 100_000)
    assert abs(np.mean(draws == 0) - exact) < 4 * math.sqrt(exact * (1 - exact) / 100_000)


def test_besq_rejects_bad_arguments():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        besq0_transition(-1.0, 1.0, 1.0, rng)
    with pytest.raises(ValueError):
        besq0_transition(1.0, 0.0, 1.0, rng)


@pytest.fixture(scope="module")
def spec():
    return CirSpec.from_flow(2, -0.05, 4 * math.pi ** 2, 1.0, 0.5)


def test_cir_parameters_from_flow(spec):
    assert spec.a == pytest.approx(-0.1)
    assert spec.b == pytest.approx(4 * math.pi ** 2)
    assert spec.s == pytest.approx(1.0)
    assert spec.feller_exact()


def test_cir_transition_moments(spec):
    v0, t = 10.0, 2.0
    out = cir_transition(spec, v0, t, np.random.default_rng(4), 200_000)
    mean, var = cir_moments(spec, v0, t)
    # oracle for the mean: b + (v0 - b) e^{-kappa t}
    assert mean == pytest.approx(spec.b + (v0 - spec.b) * math.exp(-0.1 * t))
    assert abs(out.mean() - mean) < 4 * math.sqrt(var / len(out))
    assert out.var() == pytest.approx(var, rel=0.02)


def test_cir_stationary_law(spec):
    law = cir_stationary(spec)
    # shape 2 kappa b / s^2, rate 2 kappa / s^2
    assert law["shape"] == pytest.approx(2 * 0.1 * spec.b)
    assert law["rate"] == pytest.approx(0.2)
    assert law["mean"] == pytest.approx(spec.b)
    far = cir_transition(spec, 1.0, 200.0, np.random.default_rng(5), 5000)
    assert compare_laws(far, cdf=law["cdf"]).pvalue > 0.001


def test_cir_degenerates_to_besq_without_drift():
    # a -> 0 with b fixed: the CIR transition approaches the BESQ(0) law
    spec = CirSpec(-1e-8, 1.0, 2.0)
    rng = np.random.default_rng(6)
    a = cir_transition(spec, 3.0, 0.5, rng, 20_000)
    b = besq0_transition(3.0, 0.5, 2.0, rng, 20_000)
    assert compare_laws(a[a > 1e-3], b[b > 1e-3]).pvalue > 0.001


def test_feller_flags():
    assert feller_flag(-0.05, 4 * math.pi ** 2, 1.0, 0.5)
    assert not feller_flag(-0.001, 1.0, 1.0, 1.0)
    assert not CirSpec(-0.01, 1.0, 1.0).feller_exact()
    with pytest.raises(ValueError):
        cir_transition(CirSpec(0.1, 1.0, 1.0), 1.0, 1.0, np.random.default_rng(0))


def test_cir_paths_stay_positive_under_feller(spec):
    paths = cir_paths(spec, 0.5 * spec.b, 1.0, 50, 2000, np.random.default_rng(7))
    assert paths.shape == (2000, 51)
    assert np.all(paths > 0)


def test_ks_identical_samples_and_exact_mode():
    x = np.linspace(0, 1, 30)
    res = compare_laws(x, x, min_samples=10)
    assert res.statistic == 0.0 and res.pvalue == pytest.approx(1.0)
    assert res.method == "exact"
    assert compare_laws(np.arange(300.0), np.arange(300.0)).method == "asymp"


def test_ks_insufficient_samples_and_argument_errors():
    with pytest.raises(ValueError, match="insufficient"):
        compare_laws(np.zeros(10), np.zeros(500))
    with pytest.raises(ValueError):
        compare_laws(np.zeros(500))
    with pytest.raises(ValueError):
        compare_laws(np.zeros(500), np.zeros(500), cdf=stats.norm.cdf)


def test_ks_pvalues_are_uniform_under_the_null():
    rng = np.random.default_rng(8)
    p = [compare_laws(rng.normal(size=300), cdf=stats.norm.cdf).pvalue for _ in range(400)]
    assert stats.kstest(p, "uniform").pvalue > 0.001


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), c=st.floats(0.5, 3.0))
def test_besq_scale_consistency(seed, c):
    # V = (c^2/4) X: scaling the start by c^2/4 and using c equals the standard process times c^2/4
    rng_a, rng_b = np.random.default_rng(seed), np.random.default_rng(seed)
    a = besq0_transition(c ** 2 / 4 * 1.5, 0.3, c, rng_a, 50)
    b = besq0_transition(1.5, 0.3, 2.0, rng_b, 50)
    assert np.allclose(a, c ** 2 / 4 * b, rtol=1e-12)
