import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qflow.chaos import (InversionPlan, build_gmc, counterterm, estimate_counterterm, gmc_moment_scan,
                         gmc_second_moment_oracle, invert_gmc, moment_growth_exponent, smallest_admissible_eps,
                         total_mass_samples)
from qflow.fields import sample_cgf
from qflow.rng import stream
from qflow.spectral import FieldCoeffs, TorusGeometry, green_kernel


def test_counterterm_at_lowest_truncation():
    # oracle: 4 modes with Lambda = 1 and 4 with Lambda = 2, each of variance 1/(a_2 Lambda), over vol 4 pi^2
    geom = TorusGeometry(2, 2 * math.pi, 4, 1)
    var = (4 * 2 * math.pi + 4 * math.pi) / (4 * math.pi ** 2)
    assert var == pytest.approx(3 / math.pi)
    assert counterterm(geom, 1.0) == pytest.approx(0.5 * 3 / math.pi, rel=1e-13)
    assert counterterm(geom, 0.0) == 0.0


def test_gamma_zero_is_reference_volume():
    geom = TorusGeometry(2, 2 * math.pi, 16, 4)
    m = build_gmc(geom, sample_cgf(geom, stream(1)), 0.0)
    assert np.allclose(m.masses, geom.cell_vol)
    assert m.total() == pytest.approx(geom.vol)


@pytest.mark.parametrize("gamma", [-0.1, 2.0, 3.0])
def test_supercritical_gamma_rejected(gamma):
    geom = TorusGeometry(2, 2 * math.pi, 16, 4)
    with pytest.raises(ValueError, match="supercritical"):
        build_gmc(geom, sample_cgf(geom, stream(1)), gamma)


def test_second_moment_oracle_matches_pair_sum():
    # oracle: explicit double sum of cellvol^2 exp(gamma^2 k_N(x - y)) with the cosine-sum kernel
    geom = TorusGeometry(2, 2 * math.pi, 8, 3)
    x = geom.grid_coords().reshape(2, -1).T
    k = green_kernel(geom, x[:, None, :] - x[None, :, :])
    exact = float(np.sum(np.exp(0.8 ** 2 * k))) * geom.cell_vol ** 2
    assert gmc_second_moment_oracle(geom, 0.8) == pytest.approx(exact, rel=1e-12)


def test_mean_and_second_moment_monte_carlo():
    geom = TorusGeometry(2, 2 * math.pi, 16, 4)
    mass = total_mass_samples(geom, 1.0, 20_000, stream(2))
    assert abs(mass.mean() - geom.vol) < 3 * mass.std() / math.sqrt(len(mass))
    m2 = mass ** 2
    assert abs(m2.mean() - gmc_second_moment_oracle(geom, 1.0)) < 3 * m2.std() / math.sqrt(len(m2))


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), amp=st.floats(-2, 2))
def test_shift_multiplies_masses(seed, amp):
    geom = TorusGeometry(2, 2 * math.pi, 16, 4)
    rng = np.random.default_rng(seed)
    psi = sample_cgf(geom, rng).field
    h = FieldCoeffs.trig_mode(geom, (1, 2), "cos", amp) + 0.3
    direct = build_gmc(geom, psi + h, 0.7).masses
    shifted = build_gmc(geom, psi, 0.7).masses * np.exp(0.7 * h.grid())
    assert np.max(np.abs(direct / shifted - 1)) < 1e-12


def test_moment_scan_requires_enough_replicas():
    geom = TorusGeometry(2, 2 * math.pi, 16, 4)
    with pytest.raises(ValueError, match="1000"):
        gmc_moment_scan(geom, 1.0, [2], 999, stream(3))


def test_growth_exponent():
    # zeta(p) = (n + gamma^2/2) p - gamma^2 p^2 / 2; growth only above the threshold 2n / gamma^2
    assert moment_growth_exponent(2, 1.0, 2) == 0.0
    # gamma^2 = 2.56: zeta(2) = 3.28 * 2 - 2.56 * 2 = 1.44, growth 2 - 1.44
    assert moment_growth_exponent(2, 1.6, 2) == pytest.approx(0.56)
    assert moment_growth_exponent(2, 1.6, 1) == 0.0


def test_moment_scan_flags_only_supercritical_order():
    geom = TorusGeometry(2, 2 * math.pi, 64, 4)
    scan = gmc_moment_scan(geom, 1.6, [1, 2], 1000, stream(4), N_list=[4, 8, 16])
    assert scan.blowup[2.0] and not scan.blowup[1.0]
    assert scan.threshold == pytest.approx(4 / 1.6 ** 2)


@pytest.fixture(scope="module")
def inversion():
    geom = TorusGeometry(2, 2 * math.pi, 32, 6)
    plan = InversionPlan([smallest_admissible_eps(geom)], mc_reps=200)
    estimate_counterterm(geom, 0.3, plan, stream(5))
    return geom, plan


def test_inversion_is_shift_equivariant(inversion):
    geom, plan = inversion
    psi = sample_cgf(geom, stream(6)).field
    base = invert_gmc(geom, build_gmc(geom, psi, 0.3), plan).field.grid()
    moved = invert_gmc(geom, build_gmc(geom, psi, 0.3, shift_c=-1.25), plan).field.grid()
    assert np.max(np.abs(moved - base + 1.25)) < 1e-10


def test_inversion_errors(inversion):
    geom, plan = inversion
    psi = sample_cgf(geom, stream(7)).field
    with pytest.raises(ValueError, match="counter-term"):
        invert_gmc(geom, build_gmc(geom, psi, 0.3), plan, eps=1.0)
    with pytest.raises(ValueError, match="gamma > 0"):
        invert_gmc(geom, build_gmc(geom, psi, 0.0), plan)
    with pytest.raises(ValueError, match="two grid cells"):
        plan.window(geom, geom.L / geom.G)


def test_inversion_recovers_small_gamma_field(inversion):
    geom, _ = inversion
    plan = InversionPlan([smallest_admissible_eps(geom)], mc_reps=200)
    estimate_counterterm(geom, 0.05, plan, stream(8))
    psi = sample_cgf(geom, stream(9)).field
    rec = invert_gmc(geom, build_gmc(geom, psi, 0.05), plan).field.ground().grid()
    cor = np.corrcoef(rec.ravel(), psi.grid().ravel())[0, 1]
    assert cor > 0.8
