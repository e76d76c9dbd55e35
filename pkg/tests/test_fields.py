import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qflow.fields import (MollifierFamily, mollified_field, mollified_kernel, mollified_kernel_diag, pair_with_E,
                          sample_cgf)
from qflow.rng import provenance, stream
from qflow.spectral import FieldCoeffs, TorusGeometry, green_kernel, pairing_E


@pytest.fixture(scope="module")
def geom():
    return TorusGeometry(2, 2 * math.pi, 16, 4)


@pytest.fixture(scope="module")
def big_sample(geom):
    return sample_cgf(geom, stream(11), 100_000)


def test_streams_are_reproducible_and_distinct():
    a = stream(5, 1, 2).standard_normal(4)
    assert np.array_equal(a, stream(5, 1, 2).standard_normal(4))
    assert not np.array_equal(a, stream(5, 1, 3).standard_normal(4))
    assert provenance(5, 1)["rng"] == "numpy.random.Philox"


def test_sample_is_grounded_and_real(geom):
    psi = sample_cgf(geom, stream(0), 10)
    assert psi.field.grounded
    assert np.max(np.abs(geom.quadrature(psi.grid()))) < 1e-12
    assert np.array_equal(sample_cgf(geom, stream(0), 10).field.coeffs, psi.field.coeffs)


def test_mode_variances_and_kurtosis(geom, big_sample):
    c = big_sample.field.coeffs
    pooled = []
    for k in [(1, 0), (0, 2), (1, -1), (2, 2)]:
        idx = tuple(v + geom.N for v in k)
        re = np.sqrt(2) * c[(Ellipsis,) + idx].real
        target = geom.green_eig[idx]
        se = target * math.sqrt(2 / len(re))
        assert abs(re.var() - target) < 3 * se
        pooled.append(re / math.sqrt(target))
    # one kurtosis check on the pooled standardized coefficients
    z = np.concatenate(pooled)
    kurt = np.mean(z ** 4) / np.mean(z ** 2) ** 2
    assert abs(kurt - 3) < 3 * math.sqrt(24 / len(z))


def test_field_covariance_matches_green_double_sum(geom, big_sample):
    u = FieldCoeffs.trig_mode(geom, (1, 0), "cos")
    v = FieldCoeffs.trig_mode(geom, (1, 1), "cos") + FieldCoeffs.trig_mode(geom, (1, 0), "cos", 0.5)
    grid = big_sample.grid()
    a = geom.quadrature(grid * u.grid())
    b = geom.quadrature(grid * v.grid())
    prod = a * b
    # oracle: quadrature of u(x) k_N(x - y) v(y) by the explicit cosine sum
    x = geom.grid_coords().reshape(2, -1).T
    kmat = green_kernel(geom, x[:, None, :] - x[None, :, :])
    exact = float(u.grid().ravel() @ kmat @ v.grid().ravel()) * geom.cell_vol ** 2
    assert abs(prod.mean() - exact) < 3 * prod.std() / math.sqrt(len(prod))


def test_E_pairing_examples(geom, big_sample):
    one = FieldCoeffs.constant(geom, 1.0)
    assert np.all(pair_with_E(geom, one, big_sample) == 0)
    h = FieldCoeffs.trig_mode(geom, (1, 2), "sin", 0.7) + FieldCoeffs.trig_mode(geom, (0, 1), "cos") + 2.0
    vals = pair_with_E(geom, h, big_sample)
    target = pairing_E(geom, h.ground(), h.ground())
    se = target * math.sqrt(2 / len(vals))
    assert abs(vals.var() - target) < 3 * se


def test_single_mode_pairing_is_diagonal(geom):
    psi = sample_cgf(geom, stream(3))
    k = (2, 1)
    idx = tuple(v + geom.N for v in k)
    e = FieldCoeffs.zeros(geom)
    e.coeffs[idx] = 1.0
    e.coeffs[tuple(-v + geom.N for v in k)] = 1.0
    expected = 2 * geom.p_eig[idx] * psi.field.coeffs[idx].real
    assert pair_with_E(geom, e, psi) == pytest.approx(expected, rel=1e-12)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), t=st.floats(-3, 3))
def test_cameron_martin_shift_moves_pairings(seed, t):
    geom = TorusGeometry(2, 2 * math.pi, 16, 4)
    rng = np.random.default_rng(seed)
    psi = sample_cgf(geom, rng).field
    h = FieldCoeffs.trig_mode(geom, (1, 1), "cos", rng.normal())
    g = FieldCoeffs.trig_mode(geom, (0, 2), "sin", rng.normal()) + FieldCoeffs.trig_mode(geom, (1, 1), "cos")
    moved = psi + t * h
    assert pairing_E(geom, g, moved) == pytest.approx(pairing_E(geom, g, psi) + t * pairing_E(geom, g, h), abs=1e-9)


def test_mollifier_rows_are_probability_measures():
    geom = TorusGeometry(2, 2 * math.pi, 64, 8)
    for j in (1.0, 3.0):
        k = MollifierFamily(j).grid_kernel(geom)
        assert abs(geom.quadrature(k) - 1) < 1e-10


def test_mollifier_below_resolution_rejected():
    geom = TorusGeometry(2, 2 * math.pi, 16, 4)
    with pytest.raises(ValueError):
        MollifierFamily(10.0).grid_kernel(geom)


def test_mollified_field_converges_to_field():
    geom = TorusGeometry(2, 2 * math.pi, 64, 6)
    psi = sample_cgf(geom, stream(4))
    errs = [np.max(np.abs(geom.to_grid(psi.field.coeffs * MollifierFamily(j).multipliers(geom)) - psi.grid()))
            for j in (2.0, 20.0, 200.0)]
    assert errs[0] > errs[1] > errs[2]
    assert errs[2] < 1e-3 * np.max(np.abs(psi.grid()))


def test_mollified_kernel_diagonal_is_constant():
    geom = TorusGeometry(2, 2 * math.pi, 32, 6)
    fam = MollifierFamily(2.0)
    diag = mollified_kernel_diag(geom, fam)
    assert np.ptp(diag) < 1e-8
    # oracle: direct double quadrature of q(x - x') k_N(x' - y') q(y' - x) at a few points
    q = fam.grid_kernel(geom)
    x = geom.grid_coords().reshape(2, -1).T
    kmat = green_kernel(geom, x[:, None, :] - x[None, :, :])
    rng = np.random.default_rng(0)
    for idx in rng.integers(0, geom.G, size=(3, 2)):
        shifted = np.roll(q, tuple(idx), axis=(0, 1)).ravel()
        val = shifted @ kmat @ shifted * geom.cell_vol ** 2
        assert val == pytest.approx(diag.flat[0], rel=1e-8)


def test_mollified_kernel_converges_off_diagonal():
    geom = TorusGeometry(2, 2 * math.pi, 16, 6)
    r = np.array([[geom.L / 8 + 0.1, 0.0], [geom.L / 4, geom.L / 5], [geom.L / 2, 0.3]])
    exact = green_kernel(geom, r)
    err = [np.max(np.abs(mollified_kernel(geom, MollifierFamily(j), r) - exact)) for j in (10.0, 1e4)]
    assert err[1] < err[0]
    assert err[1] < 1e-6


def test_grid_and_exact_mollification_agree_when_resolved():
    geom = TorusGeometry(2, 2 * math.pi, 64, 4)
    psi = sample_cgf(geom, stream(6))
    fam = MollifierFamily(1.0)
    grid = mollified_field(geom, fam, psi, "grid")
    exact = mollified_field(geom, fam, psi, "exact")
    assert np.max(np.abs(grid - exact)) < 0.05 * np.max(np.abs(exact))
