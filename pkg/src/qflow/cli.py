"""Command-line entry point.

Exit codes: 0 success, 1 a checked criterion failed, 2 configuration error.
Outputs go to --out, else $QFLOW_OUTPUT_DIR, else ./qflow_out.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np
from scipy import stats

from .chaos import (InversionPlan, build_gmc, estimate_counterterm, gmc_moment_scan, invert_gmc,
                    smallest_admissible_eps)
from .config import ConfigError, validate_config
from .curvature import SmoothConformalState, integrate_deterministic
from .fields import sample_cgf
from .forms import (form_check, ibp_check, random_cylinder, random_test_function, sample_symmetrizing,
                    stationarity_check)
from .rng import provenance, stream
from .stochastic import FlowParams, MeasureState, SdeScheme, run_flow
from .suite import emit_report, run_suite, save_snapshot, to_jsonable
from .volume import CirSpec, besq0_absorption_prob, besq0_transition, cir_stationary, cir_transition, compare_laws

ENV_OUTPUT = "QFLOW_OUTPUT_DIR"


def output_dir(args, cfg=None) -> Path:
    path = args.out or (cfg.output.path if cfg is not None and cfg.output.path else None) \
        or os.environ.get(ENV_OUTPUT) or "qflow_out"
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(to_jsonable(obj), indent=2, sort_keys=True))
    print(path)


def _write_csv(path: Path, rows: list[dict]) -> None:
    if not rows:
        path.write_text("")
        return
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    print(path)


def _load(args):
    return validate_config(args.config)


# ----------------------------------------------------------------- commands
def cmd_validate(args):
    cfg = _load(args)
    print(json.dumps({"status": cfg.status, "hash": cfg.config_hash(), "derived": cfg.derived,
                      "warnings": cfg.warnings}, indent=2, default=float))
    return 0


def cmd_flow_det(args):
    cfg = _load(args)
    geom, f = cfg.geom(), cfg.prescribing()
    phi = random_test_function(geom, stream(cfg.experiment.seed, 0), scale=args.amplitude)
    traj = integrate_deterministic(geom, cfg.model.flavor, SmoothConformalState.from_field(phi), f, cfg.model.rho,
                                   cfg.scheme.dt, cfg.scheme.T, cfg.scheme.scheme, cfg.output.cadence)
    out = output_dir(args, cfg)
    _write_csv(out / "flow_det.csv", traj.as_rows())
    save_snapshot(out / "flow_det_phi", traj.final.phi_grid, {"t": traj.times[-1], "config": cfg.config_hash()})
    _write_json(out / "flow_det.json", {"status": traj.status, "diagnostic": traj.diagnostic})
    return 0 if traj.status == "ok" else 1


def cmd_flow_sto(args):
    cfg = _load(args)
    geom, f = cfg.geom(), cfg.prescribing()
    rng = stream(cfg.experiment.seed, 1)
    init = MeasureState.uniform(geom, geom.vol, (args.paths,))
    params = FlowParams(cfg.model.flavor, f, cfg.model.sigma, SdeScheme(cfg.scheme.dt, clamp_floor=cfg.scheme.clamp_floor),
                        cfg.model.rho)
    rec = run_flow(geom, cfg.model.flavor, init, params, cfg.scheme.T, cfg.output.cadence, rng,
                   seed_path=(cfg.experiment.seed, 1))
    out = output_dir(args, cfg)
    rows = [{"t": t, **{f"V{j}": v for j, v in enumerate(vs)}} for t, vs in zip(rec.times, rec.volume)]
    _write_csv(out / "flow_sto.csv", rows)
    _write_json(out / "flow_sto.json", {"floor_fraction": rec.floor_fraction, "reliable": rec.reliable,
                                        "flags": rec.flags, "cemetery_time": rec.cemetery_time,
                                        "params": rec.params, "provenance": rec.provenance, "status": cfg.status})
    return 0


def cmd_gmc_build(args):
    cfg = _load(args)
    geom = cfg.geom()
    psi = sample_cgf(geom, stream(cfg.experiment.seed, 2), seed_path=(cfg.experiment.seed, 2))
    m = build_gmc(geom, psi, cfg.derived["gamma"])
    out = output_dir(args, cfg)
    save_snapshot(out / "gmc_masses", m.masses, {"gamma": m.gamma, "trunc": m.trunc, "counterterm": m.counterterm,
                                                 "provenance": provenance(cfg.experiment.seed, 2)})
    print(f"total mass {m.total():.6g}")
    return 0


def cmd_gmc_moments(args):
    cfg = _load(args)
    scan = gmc_moment_scan(cfg.geom(), cfg.derived["gamma"], args.p, cfg.experiment.reps,
                           stream(cfg.experiment.seed, 3), N_list=args.N)
    out = output_dir(args, cfg)
    _write_csv(out / "gmc_moments.csv", [r.__dict__ for r in scan.rows])
    _write_json(out / "gmc_moments.json", {"gamma": scan.gamma, "threshold": scan.threshold,
                                           "slopes": scan.slopes, "blowup": scan.blowup})
    return 0


def cmd_gmc_invert(args):
    cfg = _load(args)
    geom, gamma = cfg.geom(), cfg.derived["gamma"]
    rng = stream(cfg.experiment.seed, 4)
    plan = InversionPlan([args.eps or smallest_admissible_eps(geom)])
    est = estimate_counterterm(geom, gamma, plan, rng)
    psi = sample_cgf(geom, rng).field
    res = invert_gmc(geom, build_gmc(geom, psi, gamma), plan)
    rec = res.field.ground().grid()
    corr = float(np.corrcoef(rec.ravel(), psi.grid().ravel())[0, 1])
    out = output_dir(args, cfg)
    save_snapshot(out / "gmc_inverted", res.field.grid(), {"eps": res.eps})
    _write_json(out / "gmc_invert.json", {"eps": res.eps, "counterterm": {k: {"F": v["F"], "se": v["se"]}
                                                                          for k, v in est.items()},
                                          "floor_hits": res.floor_hits, "corr_with_input": corr})
    return 0


def cmd_measure_sample(args):
    cfg = _load(args)
    samples, diag = sample_symmetrizing(cfg.geom(), cfg.model.flavor, cfg.scheme.window_eps, args.length,
                                        stream(cfg.experiment.seed, 5), cfg.model_params(), args.chains)
    out = output_dir(args, cfg)
    vol = samples.masses.sum(axis=tuple(range(-cfg.geometry.n, 0)))
    _write_csv(out / "measure_samples.csv", [{"u": u, "V": v} for u, v in zip(samples.u, vol)])
    _write_json(out / "measure_sample.json", diag)
    return 0


def _cyl_pair(cfg, rng):
    geom = cfg.geom()
    eps = cfg.scheme.window_eps
    return random_cylinder(geom, rng, eps), random_test_function(geom, rng, grounded=cfg.model.flavor == "LQF")


def cmd_check_ibp(args):
    cfg = _load(args)
    rng = stream(cfg.experiment.seed, 6)
    G, h = _cyl_pair(cfg, rng)
    target = args.target or cfg.model.flavor
    res = ibp_check(cfg.geom(), target, G, h, cfg.experiment.reps, rng, cfg.model_params())
    _write_json(output_dir(args, cfg) / "check_ibp.json", res.as_dict())
    return 0 if abs(res.z) < 3 else 1


def cmd_check_generator(args):
    cfg = _load(args)
    rng = stream(cfg.experiment.seed, 7)
    geom, eps = cfg.geom(), cfg.scheme.window_eps
    F, G = random_cylinder(geom, rng, eps), random_cylinder(geom, rng, eps)
    res = form_check(cfg.model.flavor, F, G, cfg.experiment.reps, rng, cfg.model_params())
    _write_json(output_dir(args, cfg) / "check_generator.json",
                {"form": res.form.as_dict(), "symmetry": res.symmetry.as_dict()})
    return 0 if abs(res.form.z) < 3 and abs(res.symmetry.z) < 3 else 1


def cmd_check_stationary(args):
    cfg = _load(args)
    rng = stream(cfg.experiment.seed, 8)
    geom = cfg.geom()
    obs = [random_cylinder(geom, rng, cfg.scheme.window_eps, scale=geom.vol) for _ in range(2)]
    rep = stationarity_check(cfg.model_params(), cfg.scheme.T, cfg.scheme.dt, args.samples, args.length, rng, obs)
    _write_json(output_dir(args, cfg) / "check_stationary.json", rep)
    return 0 if rep.passed else 1


def cmd_vol_besq(args):
    rng = stream(args.seed, 9)
    v = besq0_transition(args.v0, args.t, args.c, rng, args.n)
    out = output_dir(args)
    _write_csv(out / "besq.csv", [{"v": x} for x in v])
    _write_json(out / "besq.json", {"absorption_prob": float(besq0_absorption_prob(args.v0, args.t, args.c)),
                                    "empirical_absorbed": float(np.mean(v == 0))})
    return 0


def cmd_vol_cir(args):
    rng = stream(args.seed, 10)
    spec = CirSpec(args.a, args.b, args.s)
    v = cir_transition(spec, args.v0, args.t, rng, args.n)
    out = output_dir(args)
    _write_csv(out / "cir.csv", [{"v": x} for x in v])
    st = cir_stationary(spec)
    _write_json(out / "cir.json", {"feller_exact": spec.feller_exact(), "stationary_shape": st["shape"],
                                   "stationary_rate": st["rate"]})
    return 0


def _read_column(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return np.array([float(r[-1]) for r in rows[1:]])


def cmd_vol_compare(args):
    a = _read_column(args.a)
    if args.b:
        res = compare_laws(a, _read_column(args.b))
    else:
        res = compare_laws(a, cdf=stats.norm.cdf)
    print(json.dumps(res.__dict__))
    return 0 if res.pvalue > args.level else 1


def cmd_suite_run(args):
    cfg = _load(args) if args.config else validate_config({})
    record = run_suite(cfg, args.suite, echo=print)
    out = output_dir(args, cfg)
    for fmt in args.format:
        print(emit_report(record, fmt, out))
    return 1 if record.hard_failures else 0


# ------------------------------------------------------------------ parser
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qflow", description="Stochastic Q-curvature flow laboratory")
    sub = p.add_subparsers(dest="command", required=True)

    def leaf(parent, name, func, config=True):
        sp = parent.add_parser(name)
        if config:
            sp.add_argument("config", help="JSON run configuration")
        sp.add_argument("--out", help=f"output directory (default ${ENV_OUTPUT} or ./qflow_out)")
        sp.set_defaults(func=func)
        return sp

    leaf(sub, "validate", cmd_validate)
    flow = sub.add_parser("flow").add_subparsers(dest="sub", required=True)
    leaf(flow, "det", cmd_flow_det).add_argument("--amplitude", type=float, default=0.3)
    leaf(flow, "sto", cmd_flow_sto).add_argument("--paths", type=int, default=100)
    gmc = sub.add_parser("gmc").add_subparsers(dest="sub", required=True)
    leaf(gmc, "build", cmd_gmc_build)
    sp = leaf(gmc, "moments", cmd_gmc_moments)
    sp.add_argument("--p", type=float, nargs="+", default=[1.0, 2.0])
    sp.add_argument("--N", type=int, nargs="+", default=None)
    leaf(gmc, "invert", cmd_gmc_invert).add_argument("--eps", type=float, default=None)
    meas = sub.add_parser("measure").add_subparsers(dest="sub", required=True)
    sp = leaf(meas, "sample", cmd_measure_sample)
    sp.add_argument("--chains", type=int, default=64)
    sp.add_argument("--length", type=int, default=200)
    check = sub.add_parser("check").add_subparsers(dest="sub", required=True)
    leaf(check, "ibp", cmd_check_ibp).add_argument("--target", choices=["grounded", "ungrounded", "NQF", "LQF"])
    leaf(check, "generator", cmd_check_generator)
    sp = leaf(check, "stationary", cmd_check_stationary)
    sp.add_argument("--samples", type=int, default=1000)
    sp.add_argument("--length", type=int, default=200)
    vol = sub.add_parser("vol").add_subparsers(dest="sub", required=True)
    sp = leaf(vol, "besq", cmd_vol_besq, config=False)
    for name, default in (("--v0", 1.0), ("--t", 1.0), ("--c", 1.0)):
        sp.add_argument(name, type=float, default=default)
    sp.add_argument("--n", type=int, default=1000)
    sp.add_argument("--seed", type=int, default=0)
    sp = leaf(vol, "cir", cmd_vol_cir, config=False)
    for name, default in (("--a", -1.0), ("--b", 1.0), ("--s", 1.0), ("--v0", 1.0), ("--t", 1.0)):
        sp.add_argument(name, type=float, default=default)
    sp.add_argument("--n", type=int, default=1000)
    sp.add_argument("--seed", type=int, default=0)
    sp = leaf(vol, "compare", cmd_vol_compare, config=False)
    sp.add_argument("a", help="CSV sample file (last column)")
    sp.add_argument("b", nargs="?", help="second CSV sample file; standard normal reference when omitted")
    sp.add_argument("--level", type=float, default=0.01)
    suite = sub.add_parser("suite").add_subparsers(dest="sub", required=True)
    sp = suite.add_parser("run")
    sp.add_argument("config", nargs="?", help="JSON run configuration (reference config when omitted)")
    sp.add_argument("--suite", choices=["unit", "acceptance", "full"], default="acceptance")
    sp.add_argument("--format", nargs="+", choices=["json", "csv", "md"], default=["json", "md"])
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_suite_run)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
