import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qflow.curvature import (PrescribingFunction, SmoothConformalState, energy, flow_rhs, integrate_deterministic,
                             q_pairing)
from qflow.spectral import FieldCoeffs, TorusGeometry


def smooth_phi(geom, rng, amplitude=0.3):
    c = rng.standard_normal(geom.coeff_shape) + 1j * rng.standard_normal(geom.coeff_shape)
    flip = (slice(None, None, -1),) * geom.n
    c = (c + np.conj(c[flip])) / 2 * np.exp(-geom.lam)
    return FieldCoeffs(amplitude * c, geom)


@pytest.fixture(scope="module")
def geom():
    return TorusGeometry(2, 2 * math.pi, 32, 8, 0.02)


def test_prescribing_sign_classes(geom):
    assert PrescribingFunction.build(geom, 2.0).sign_class == "strictly_positive"
    assert PrescribingFunction.build(geom, 0.0).sign_class == "nonpositive"
    mixed = PrescribingFunction.build(geom, FieldCoeffs.trig_mode(geom, (1, 0), "cos"))
    assert mixed.sign_class == "mixed"
    with pytest.raises(ValueError, match="strictly positive"):
        mixed.require("NQF")
    with pytest.raises(ValueError, match="nonpositive"):
        PrescribingFunction.build(geom, 1.0).require("LQF")


def test_energies_at_flat_metric(geom):
    # phi = 0: the quadratic and linear terms vanish, leaving the f terms
    st = SmoothConformalState(np.zeros(geom.grid_shape), geom)
    f = PrescribingFunction.build(geom, 2.0)
    v = geom.vol
    assert energy(geom, "E1", st, f) == pytest.approx(-geom.q_ref_total * math.log(2 * v) / 2, rel=1e-13)
    assert energy(geom, "E2", st, f, rho=0.7) == pytest.approx(-2 * v / 2, rel=1e-13)
    with pytest.raises(ValueError):
        energy(geom, "E3", st, f)


def test_q_total_is_conformally_invariant(geom):
    rng = np.random.default_rng(0)
    st = SmoothConformalState.from_field(smooth_phi(geom, rng))
    assert q_pairing(geom, st, 1.0) == pytest.approx(geom.q_ref_total, rel=1e-12)
    # Q_t(1) computed as omega_t(Q_t) agrees with the pairing
    assert float(np.sum(st.masses * st.q_function())) == pytest.approx(geom.q_ref_total, rel=1e-10)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), which=st.sampled_from(["NQF", "LQF"]))
def test_flow_is_negative_energy_gradient(seed, which):
    geom = TorusGeometry(2, 2 * math.pi, 16, 6, 0.02 if which == "NQF" else -0.02)
    rng = np.random.default_rng(seed)
    base = 1.0 if which == "NQF" else -1.0
    f = PrescribingFunction.build(geom, base + 0.2 * FieldCoeffs.trig_mode(geom, (1, 1), "cos", rng.uniform(-1, 1)))
    st = SmoothConformalState.from_field(smooth_phi(geom, rng))
    h = smooth_phi(geom, rng, 1.0).grid()
    name = "E1" if which == "NQF" else "E2"
    step = 1e-5
    plus = energy(geom, name, SmoothConformalState(st.phi_grid + step * h, geom), f, 1.2)
    minus = energy(geom, name, SmoothConformalState(st.phi_grid - step * h, geom), f, 1.2)
    fd = (plus - minus) / (2 * step)
    exact = -float(np.sum(st.masses * flow_rhs(geom, which, st, f, 1.2) * h))
    assert fd == pytest.approx(exact, rel=1e-6, abs=1e-9)


@pytest.mark.parametrize("scheme", ["imex", "rk4"])
def test_nqf_conserves_volume_and_decreases_energy(geom, scheme):
    rng = np.random.default_rng(1)
    f = PrescribingFunction.build(geom, 1.0 + 0.3 * FieldCoeffs.trig_mode(geom, (0, 1), "sin"))
    st = SmoothConformalState.from_field(smooth_phi(geom, rng, 0.5))
    dt = 1e-2 if scheme == "imex" else 1e-3
    traj = integrate_deterministic(geom, "NQF", st, f, dt=dt, T=0.3, scheme=scheme, cadence=10)
    assert traj.status == "ok"
    assert abs(traj.volume[-1] / traj.volume[0] - 1) < (1e-10 if scheme == "imex" else 1e-6)
    assert np.all(np.diff(traj.energy) <= 1e-9 * abs(traj.energy[0]))


@pytest.mark.parametrize("k", [(1, 0), (1, 1), (2, 1)])
def test_linearized_decay_rate(k):
    # small perturbation of the flat metric with Q_ref = 0: mode k decays like exp(-Lambda_k t)
    geom = TorusGeometry(2, 2 * math.pi, 16, 4, 0.0)
    f = PrescribingFunction.build(geom, 1.0)
    phi = FieldCoeffs.trig_mode(geom, k, "cos", 1e-6)
    traj = integrate_deterministic(geom, "NQF", SmoothConformalState.from_field(phi), f, dt=1e-3, T=0.5,
                                   scheme="rk4", cadence=500)
    end = traj.final.phi_grid
    rate = -math.log(np.ptp(end) / np.ptp(phi.grid())) / 0.5
    assert rate == pytest.approx(k[0] ** 2 + k[1] ** 2, rel=1e-5)


def test_lqf_fixed_point():
    geom = TorusGeometry(2, 2 * math.pi, 16, 4, -0.05)
    f = PrescribingFunction.build(geom, 1.3 * geom.q_ref_const)
    st = SmoothConformalState(np.zeros(geom.grid_shape), geom)
    assert np.max(np.abs(flow_rhs(geom, "LQF", st, f, rho=1.3))) < 1e-14
    traj = integrate_deterministic(geom, "LQF", st, f, rho=1.3, dt=1e-2, T=0.2)
    assert np.max(np.abs(traj.final.phi_grid)) < 1e-12


def test_flow_rejects_wrong_sign_and_scheme(geom):
    st = SmoothConformalState(np.zeros(geom.grid_shape), geom)
    with pytest.raises(ValueError):
        integrate_deterministic(geom, "LQF", st, PrescribingFunction.build(geom, 1.0))
    with pytest.raises(ValueError, match="scheme"):
        integrate_deterministic(geom, "NQF", st, PrescribingFunction.build(geom, 1.0), scheme="leapfrog")


def test_unstable_explicit_step_aborts_with_diagnostic(geom):
    rng = np.random.default_rng(2)
    st = SmoothConformalState.from_field(smooth_phi(geom, rng, 0.5))
    traj = integrate_deterministic(geom, "NQF", st, PrescribingFunction.build(geom, 1.0), dt=0.5, T=20.0,
                                   scheme="euler")
    assert traj.status == "aborted"
    assert "step" in traj.diagnostic
