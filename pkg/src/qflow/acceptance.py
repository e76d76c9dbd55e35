"""The ten acceptance criteria as runnable experiments.

Each criterion returns a CriterionResult with the measured quantities, the
threshold it was judged against and a pass flag. Criterion 10 is soft: a
failure is reported with a diagnostic bundle but does not fail the suite.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .chaos import (InversionPlan, build_gmc, estimate_counterterm, gmc_moment_scan, gmc_second_moment_oracle,
                    invert_gmc, smallest_admissible_eps, total_mass_samples, window_masses)
from .curvature import (PrescribingFunction, SmoothConformalState, energy, flow_energy, flow_rhs,
                        integrate_deterministic, q_pairing)
from .fields import sample_cgf
from .forms import (ModelParams, WindowedMeasureSampler, apply_generator, carre_du_champ, form_check,
                    frechet_derivative, ibp_check, ibp_terms, random_cylinder, random_test_function,
                    stationarity_check)
from .rng import stream
from .spectral import FieldCoeffs, TorusGeometry, apply_operator
from .stochastic import FlowParams, MeasureState, SdeScheme, martingale_residuals, projected_drift, run_flow
from .volume import (CirSpec, besq0_transition, cir_paths, cir_transition, compare_laws, feller_flag)

EXACT_TOL = 1e-10


@dataclass
class CriterionResult:
    number: int
    name: str
    passed: bool
    metrics: dict = field(default_factory=dict)
    soft: bool = False
    seconds: float = 0.0
    error: str = ""

    def line(self) -> str:
        tag = "PASS" if self.passed else ("SOFT-FAIL" if self.soft else "FAIL")
        return f"criterion {self.number:2d} [{tag}] {self.name}: {self.metrics.get('summary', '')}"


def _random_phi(geom: TorusGeometry, rng, amplitude=0.3) -> FieldCoeffs:
    c = rng.standard_normal(geom.coeff_shape) + 1j * rng.standard_normal(geom.coeff_shape)
    flip = (slice(None, None, -1),) * geom.n
    c = (c + np.conj(c[flip])) / 2 * np.exp(-geom.lam)
    return FieldCoeffs(amplitude * c, geom)


# ------------------------------------------------------------------ 1
def identities(seed: int = 0) -> CriterionResult:
    rng = stream(seed, 1)
    geom = TorusGeometry(2, 2 * math.pi, 32, 8, 0.02)
    errs = {}
    u, v = geom.grid_apply(rng.standard_normal(geom.grid_shape), "P"), rng.standard_normal(geom.grid_shape)
    lhs = geom.quadrature(u * geom.grid_apply(v, "P"))
    rhs = geom.quadrature(geom.grid_apply(u, "P") * v)
    errs["P_self_adjoint"] = abs(lhs - rhs) / max(abs(lhs), 1.0)

    psi = sample_cgf(geom, rng).field
    back = apply_operator(geom, "green", apply_operator(geom, "p", psi))
    errs["green_after_p"] = float(np.max(np.abs(back.coeffs - psi.coeffs)) / np.max(np.abs(psi.coeffs)))

    gamma = 1.0
    h = random_test_function(geom, rng, max_mode=3)
    direct = build_gmc(geom, psi + h, gamma).masses
    shifted = build_gmc(geom, psi, gamma).masses * np.exp(gamma * h.grid())
    errs["gmc_shift"] = float(np.max(np.abs(direct - shifted) / direct))

    f = PrescribingFunction.build(geom, 1.0 + random_test_function(geom, rng, grounded=True, scale=0.3))
    params = ModelParams(geom, 1.0, f)
    one = FieldCoeffs.constant(geom, 1.0)
    G = random_cylinder(geom, rng, 1e-3, scale=geom.vol)
    s = WindowedMeasureSampler("grounded", params, 1e-3).draw(200, rng)
    a, b = ibp_terms("grounded", G, one, s, params)
    errs["ibp_grounded_h1"] = float(max(np.max(np.abs(a)), np.max(np.abs(b))))
    s = WindowedMeasureSampler("NQF", params, 0.05).draw(200, rng)
    G = random_cylinder(geom, rng, 0.05)
    a, b = ibp_terms("NQF", G, one, s, params)
    d1 = frechet_derivative(G, s.masses, params.gamma, np.ones(geom.grid_shape))
    errs["ibp_nqf_h1_pairing"] = float(np.max(np.abs(a)))
    errs["ibp_nqf_h1_constant_terms"] = float(np.max(np.abs(b - d1)) / max(np.max(np.abs(d1)), 1.0))

    phi = _random_phi(geom, rng)
    st = SmoothConformalState.from_field(phi)
    drift = projected_drift(geom, "NQF", st.masses, f, np.ones(geom.grid_shape))
    errs["nqf_h1_drift"] = abs(drift) / geom.vol
    errs["q_total_invariance"] = abs(q_pairing(geom, st, 1.0) - geom.q_ref_total) / abs(geom.q_ref_total)
    worst = max(errs.values())
    errs["summary"] = f"max error {worst:.2e} (tol {EXACT_TOL:g})"
    return CriterionResult(1, "exact algebraic identities", worst <= EXACT_TOL, errs)


# ------------------------------------------------------------------ 2
def gradient_flow(seed: int = 0, cases: int = 20, step: float = 1e-5) -> CriterionResult:
    rng = stream(seed, 2)
    worst = {}
    for which, q_ref in (("NQF", 0.02), ("LQF", -0.02)):
        geom = TorusGeometry(2, 2 * math.pi, 32, 8, q_ref)
        errs = []
        for _ in range(cases):
            if which == "NQF":
                f = PrescribingFunction.build(geom, 1.0 + random_test_function(geom, rng, grounded=True, scale=0.3))
            else:
                f = PrescribingFunction.build(geom, -1.0 + random_test_function(geom, rng, grounded=True, scale=0.3))
            rho = float(rng.uniform(0.5, 1.5))
            st = SmoothConformalState.from_field(_random_phi(geom, rng))
            h = random_test_function(geom, rng, max_mode=3).grid()
            name = flow_energy(which)
            plus = energy(geom, name, SmoothConformalState(st.phi_grid + step * h, geom), f, rho)
            minus = energy(geom, name, SmoothConformalState(st.phi_grid - step * h, geom), f, rho)
            fd = (plus - minus) / (2 * step)
            exact = -float(np.sum(st.masses * flow_rhs(geom, which, st, f, rho) * h))
            errs.append(abs(fd - exact) / max(abs(exact), 1e-12))
        worst[which] = max(errs)
    ok = max(worst.values()) < 1e-6
    worst["summary"] = f"max relative FD error NQF {worst['NQF']:.1e}, LQF {worst['LQF']:.1e} (tol 1e-6)"
    return CriterionResult(2, "gradient-flow consistency", ok, worst)


# ------------------------------------------------------------------ 3
def volume_conservation(seed: int = 0) -> CriterionResult:
    rng = stream(seed, 3)
    geom = TorusGeometry(2, 2 * math.pi, 64, 8, 0.02)
    f = PrescribingFunction.build(geom, 1.0 + random_test_function(geom, rng, grounded=True, scale=0.3))
    st = SmoothConformalState.from_field(_random_phi(geom, rng, 0.5))
    traj = integrate_deterministic(geom, "NQF", st, f, dt=1e-2, T=1.0, scheme="imex", cadence=100)
    drift = abs(traj.volume[-1] - traj.volume[0]) / traj.volume[0]
    mono = bool(np.all(np.diff(traj.energy) <= 1e-9 * abs(traj.energy[0])))
    ok = traj.status == "ok" and drift < 1e-8
    return CriterionResult(3, "deterministic NQF volume conservation", ok,
                           {"relative_drift": drift, "energy_monotone": mono, "status": traj.status,
                            "summary": f"|V_T - V_0|/V_0 = {drift:.2e} (tol 1e-8)"})


# ------------------------------------------------------------------ 4
def ibp_battery(seed: int = 0, pairs: int = 50, reps: int = 100_000) -> CriterionResult:
    rng = stream(seed, 4)
    split = {"grounded": pairs - 2 * (pairs // 3), "NQF": pairs // 3, "LQF": pairs // 3}
    zs, rows = [], []
    for target, count in split.items():
        q_ref = {"grounded": 0.0, "NQF": 0.01, "LQF": -0.01}[target]
        geom = TorusGeometry(2, 2 * math.pi, 16, 7, q_ref)
        if target == "LQF":
            f = PrescribingFunction.build(geom, -0.02 + random_test_function(geom, rng, grounded=True, scale=0.02))
            rho = 1.3
        else:
            f = PrescribingFunction.build(geom, 1.0 + random_test_function(geom, rng, grounded=True, scale=0.3))
            rho = 1.0
        params = ModelParams(geom, 1.0, f, rho)
        for _ in range(count):
            if target == "grounded":
                G = random_cylinder(geom, rng, 1e-3, scale=geom.vol)
            else:
                G = random_cylinder(geom, rng, 0.05)
            h = random_test_function(geom, rng, grounded=(target == "LQF"))
            r = ibp_check(geom, target, G, h, reps, rng, params)
            zs.append(r.z)
            rows.append({"target": target, "z": r.z, "ess": r.ess})
    zs = np.array(zs)
    ks = compare_laws(zs, cdf=stats.norm.cdf, min_samples=len(zs))
    ok = bool(np.all(np.abs(zs) < 3) and ks.pvalue > 0.01)
    return CriterionResult(4, "Gaussian IBP Monte Carlo", ok,
                           {"max_abs_z": float(np.max(np.abs(zs))), "ks_pvalue": ks.pvalue, "rows": rows,
                            "summary": f"max|z| = {np.max(np.abs(zs)):.2f} over {len(zs)} pairs, "
                                       f"normality KS p = {ks.pvalue:.3f}"})


# ------------------------------------------------------------------ 5
def generator_form(seed: int = 0, pairs: int = 10, reps: int = 40_000) -> CriterionResult:
    rng = stream(seed, 5)
    zs = {"NQF": [], "LQF": []}
    product_err = 0.0
    for which in ("NQF", "LQF"):
        geom = TorusGeometry(2, 2 * math.pi, 16, 7, 0.01 if which == "NQF" else -0.01)
        if which == "NQF":
            f = PrescribingFunction.build(geom, 1.0 + random_test_function(geom, rng, grounded=True, scale=0.3))
        else:
            f = PrescribingFunction.build(geom, -0.02 + random_test_function(geom, rng, grounded=True, scale=0.02))
        params = ModelParams(geom, 1.0, f, 1.0 if which == "NQF" else 1.3)
        for _ in range(pairs):
            F, G = random_cylinder(geom, rng, 0.05), random_cylinder(geom, rng, 0.05)
            fc = form_check(which, F, G, reps, rng, params)
            zs[which].append((fc.form.z, fc.symmetry.z))
        # product rule of the generator, per sample
        s = WindowedMeasureSampler(which, params, 0.05).draw(500, rng)
        FG = F * G
        lhs = apply_generator(which, FG, s, params) - F(s.masses) * apply_generator(which, G, s, params) \
            - G(s.masses) * apply_generator(which, F, s, params)
        rhs = carre_du_champ(F, G, s.masses, params)
        product_err = max(product_err, float(np.max(np.abs(lhs - rhs)) / max(np.max(np.abs(rhs)), 1e-300)))
    allz = np.abs(np.array(zs["NQF"] + zs["LQF"]))
    ok = bool(np.all(allz < 3)) and product_err < 1e-8
    return CriterionResult(5, "generator/form identity", ok,
                           {"z": zs, "product_rule_error": product_err,
                            "summary": f"max|z| form {allz[:, 0].max():.2f}, symmetry {allz[:, 1].max():.2f} "
                                       f"over 2x{pairs} pairs; product rule error {product_err:.1e}"})


# ------------------------------------------------------------------ 6
def volume_laws(seed: int = 0, paths: int = 2000, dt: float = 1e-3) -> CriterionResult:
    rng = stream(seed, 6)
    out = {}
    geom = TorusGeometry(2, 2 * math.pi, 8, 3, 0.0)
    sigma = 1.0
    f = PrescribingFunction.build(geom, 1.0)
    init = MeasureState.uniform(geom, geom.vol, (paths,))
    rec = run_flow(geom, "NQF", init, FlowParams("NQF", f, sigma, SdeScheme(dt)), 1.0, 100, rng, seed_path=())
    c = geom.n * sigma
    for t in (0.1, 1.0):
        i = int(np.argmin(np.abs(rec.times - t)))
        exact = besq0_transition(geom.vol, t, c, rng, 20000)
        out[f"besq_p_t{t}"] = compare_laws(rec.volume[i], exact).pvalue
    out["nqf_floor_fraction"] = rec.floor_fraction

    geom = TorusGeometry(2, 2 * math.pi, 8, 3, -0.05)
    sigma, rho = 0.5, 1.0
    f = PrescribingFunction.build(geom, geom.q_ref_const)
    spec = CirSpec.from_flow(2, geom.q_ref_const, geom.vol, rho, sigma)
    v0 = 0.5 * geom.vol
    init = MeasureState.uniform(geom, v0, (paths,))
    rec = run_flow(geom, "LQF", init, FlowParams("LQF", f, sigma, SdeScheme(dt), rho), 1.0, 1000, rng, seed_path=())
    exact = cir_transition(spec, v0, 1.0, rng, 20000)
    out["cir_p"] = compare_laws(rec.volume[-1], exact).pvalue
    out["lqf_floor_fraction"] = rec.floor_fraction

    flag = feller_flag(geom.q_ref_const, geom.vol, rho, sigma)
    paths_ = cir_paths(spec, v0, 1.0, 200, 10_000, rng)
    hits = int(np.sum(paths_.min(axis=1) <= 0))
    out.update({"feller_flag": flag, "feller_exact": spec.feller_exact(), "boundary_hits": hits})
    ok = (out["besq_p_t0.1"] > 0.01 and out["besq_p_t1.0"] > 0.01 and out["cir_p"] > 0.01
          and flag and hits == 0)
    out["summary"] = (f"BESQ KS p = {out['besq_p_t0.1']:.3f} (t=0.1), {out['besq_p_t1.0']:.3f} (t=1); "
                      f"CIR KS p = {out['cir_p']:.3f}; Feller boundary hits {hits}/10000")
    return CriterionResult(6, "volume laws", ok, out)


# ------------------------------------------------------------------ 7
def weak_residuals(seed: int = 0, paths: int = 200, steps: int = 50, dt: float = 1e-3) -> CriterionResult:
    rng = stream(seed, 7)
    out = {}
    for which, q_ref in (("NQF", 0.02), ("LQF", -0.05)):
        geom = TorusGeometry(2, 2 * math.pi, 8, 3, q_ref)
        if which == "NQF":
            f = PrescribingFunction.build(geom, 1.0 + random_test_function(geom, rng, grounded=True, scale=0.3))
        else:
            f = PrescribingFunction.build(geom, -0.05 + random_test_function(geom, rng, grounded=True, scale=0.02))
        tests = [FieldCoeffs.constant(geom, 1.0)] + [random_test_function(geom, rng) for _ in range(4)]
        init = MeasureState.from_phi(geom, _random_phi(geom, rng), (paths,))
        params = FlowParams(which, f, 0.5, SdeScheme(dt))
        res = martingale_residuals(geom, which, init, params, steps, rng, tests)
        for j in range(len(tests)):
            out[f"{which}_h{j}"] = compare_laws(res[..., j].ravel(), cdf=stats.norm.cdf).pvalue
    pmin = min(out.values())
    out["summary"] = f"min KS p = {pmin:.3f} over 2 flavors x 5 test functions (threshold 0.01)"
    return CriterionResult(7, "projected weak-solution residuals", pmin > 0.01, out)


# ------------------------------------------------------------------ 8
def gmc_moments(seed: int = 0, reps: int = 10_000) -> CriterionResult:
    rng = stream(seed, 8)
    geom = TorusGeometry(2, 2 * math.pi, 64, 8, 0.0)
    gamma = 0.5 * math.sqrt(2 * geom.n)
    mass = total_mass_samples(geom, gamma, reps, rng)
    m1, se1 = mass.mean(), mass.std(ddof=1) / math.sqrt(reps)
    m2, se2 = (mass ** 2).mean(), (mass ** 2).std(ddof=1) / math.sqrt(reps)
    oracle = gmc_second_moment_oracle(geom, gamma)
    z1, z2 = (m1 - geom.vol) / se1, (m2 - oracle) / se2
    hot = 1.6
    scan = gmc_moment_scan(TorusGeometry(2, 2 * math.pi, 64, 4, 0.0), hot, [1, 2], 1000, rng, N_list=[4, 8, 16])
    cold = gmc_moment_scan(TorusGeometry(2, 2 * math.pi, 64, 4, 0.0), gamma, [1, 2], 1000, rng, N_list=[4, 8, 16])
    threshold = 2 * geom.n / hot ** 2
    ok = (abs(z1) < 3 and abs(z2) < 3 and scan.blowup[2.0] and not scan.blowup[1.0]
          and not cold.blowup[2.0])
    return CriterionResult(8, "GMC moments", ok, {
        "mean": m1, "mean_se": se1, "second": m2, "second_se": se2, "oracle": oracle,
        "slopes_hot": scan.slopes, "slopes_cold": cold.slopes, "threshold_hot": threshold,
        "summary": (f"E[M] z = {z1:.2f}, E[M^2] z = {z2:.2f}; at gamma={hot} (threshold p={threshold:.2f}) "
                    f"p=2 slope {scan.slopes[2.0]:.2f} triggers, p=1 slope {scan.slopes[1.0]:.2f} does not")})


# ------------------------------------------------------------------ 9
def _recovery(geom, gamma, replicas, rng):
    plan = InversionPlan([smallest_admissible_eps(geom)])
    eps = plan.eps_list[0]
    estimate_counterterm(geom, gamma, plan, rng)
    win = plan.window(geom, eps)
    errs, cors = [], []
    for _ in range(replicas):
        psi = sample_cgf(geom, rng).field
        rec = invert_gmc(geom, build_gmc(geom, psi, gamma), plan).field.ground().grid()
        oracle = window_masses(geom, psi.grid() * geom.cell_vol, win)
        oracle = oracle - oracle.mean()
        errs.append(np.linalg.norm(rec - oracle) / np.linalg.norm(oracle))
        cors.append(np.corrcoef(rec.ravel(), oracle.ravel())[0, 1])
    return plan, np.array(errs), np.array(cors)


def gmc_inversion(seed: int = 0, replicas: int = 100) -> CriterionResult:
    rng = stream(seed, 9)
    geom = TorusGeometry(2, 2 * math.pi, 64, 8, 0.0)
    plan, err_small, _ = _recovery(geom, 0.1, replicas, rng)
    psi = sample_cgf(geom, rng).field
    m = build_gmc(geom, psi, 0.1)
    shift = 0.37
    base = invert_gmc(geom, m, plan).field.grid()
    moved = invert_gmc(geom, build_gmc(geom, psi, 0.1, shift_c=shift), plan).field.grid()
    equiv = float(np.max(np.abs(moved - base - shift)))
    _, _, cors = _recovery(geom, 0.3 * math.sqrt(2 * geom.n), replicas, rng)
    ok = equiv <= EXACT_TOL and err_small.mean() < 0.05 and cors.mean() > 0.9
    return CriterionResult(9, "GMC inversion", ok, {
        "shift_error": equiv, "small_gamma_rel_err": float(err_small.mean()),
        "small_gamma_rel_err_max": float(err_small.max()), "corr_mean": float(cors.mean()),
        "corr_min": float(cors.min()),
        "summary": (f"shift error {equiv:.1e}; gamma=0.1 mean rel. error {err_small.mean():.4f} (<0.05); "
                    f"gamma=0.6 mean correlation {cors.mean():.4f} (min {cors.min():.4f}, >0.9)")})


# ------------------------------------------------------------------ 10
def lqf_stationarity(seed: int = 0, samples: int = 1000, T: float = 1.0, dt: float = 1e-3) -> CriterionResult:
    rng = stream(seed, 10)
    geom = TorusGeometry(2, 2 * math.pi, 8, 3, -0.05)
    params = ModelParams(geom, 0.5, PrescribingFunction.build(geom, geom.q_ref_const), 1.0)
    observables = [random_cylinder(geom, rng, 1e-3, scale=geom.vol) for _ in range(2)]
    rep = stationarity_check(params, T, dt, samples, 200, rng, observables)
    pv = rep.pvalues
    metrics = {"pvalues": pv, "polyakov_liouville": rep.polyakov_liouville, "rho": rep.rho,
               "summary": "KS p: " + ", ".join(f"{k} {v:.3f}" for k, v in pv.items())
                          + f"; Polyakov-Liouville regime: {rep.polyakov_liouville}"}
    if not rep.passed:
        metrics["diagnostics"] = rep.diagnostics
    return CriterionResult(10, "LQF stationarity (soft)", rep.passed, metrics, soft=True)


CRITERIA = [identities, gradient_flow, volume_conservation, ibp_battery, generator_form, volume_laws,
            weak_residuals, gmc_moments, gmc_inversion, lqf_stationarity]


def run_criterion(fn, seed: int = 0) -> CriterionResult:
    start = time.perf_counter()
    number = CRITERIA.index(fn) + 1
    try:
        res = fn(seed)
    except Exception as exc:  # recorded, the suite continues
        res = CriterionResult(number, fn.__name__, False, {"summary": f"aborted: {exc}"},
                              soft=fn is lqf_stationarity, error=repr(exc))
    res.seconds = time.perf_counter() - start
    return res
