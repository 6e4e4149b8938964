"""Command-line driver: certification, geodesic batches, wave experiments.

Every run is config-driven (JSON), writes CSV/JSON artifacts into an output
directory, and embeds the config hash and seed into each artifact so repeated
runs are byte-identical.  Exit codes: 0 = pass, 1 = a verdict failed,
2 = config or hypothesis error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import geodesics, metrics, wave_polar, wave_radial
from .errors import (
    DomainError,
    HypothesisViolationError,
    InapplicableTheoremError,
    MetricError,
    ParameterError,
)


def config_hash(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def _meta(cfg, seed):
    return (f"config_sha256={config_hash(cfg)}", f"seed={seed}")


def _load_config(path):
    with open(path) as fh:
        return json.load(fh)


def _say(quiet, *args):
    if not quiet:
        print(*args)


def _write_json(path, payload, cfg, seed):
    payload = dict(payload)
    payload["config_sha256"] = config_hash(cfg)
    payload["seed"] = seed
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# certify

def cmd_certify(args) -> int:
    cfg = _load_config(args.config)
    metric = metrics.metric_from_spec(cfg["metric"])
    s = cfg.get("sample", {})
    sample = metrics.SampleSpec(
        r_lo=float(s.get("r_lo", metric.r_c)),
        r_hi=float(s.get("r_hi", metric.r_c + 9.0)),
        n_r=int(s.get("n_r", 64)),
        n_theta=int(s.get("n_theta", 32)),
        seed=args.seed)
    tol = float(cfg.get("tol", metrics.CERT_TOL))
    report = metrics.certify_escape(metric, sample, tol=tol)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "certify_report.csv", meta=_meta(cfg, args.seed))
    _say(args.quiet, f"certify: verdict={'pass' if report.verdict else 'fail'} "
         f"worst_margin={report.worst_margin:.3e} "
         f"min_alpha_slack={report.min_alpha_slack:.3e}")
    return 0 if report.verdict else 1


# ---------------------------------------------------------------------------
# geodesic

def _write_trace_csv(path, trace, meta):
    n = trace.x.shape[1]
    cols = (["t"] + [f"x{i + 1}" for i in range(n)] + [f"v{i + 1}" for i in range(n)]
            + ["r", "h", "speed_drift"])
    with open(path, "w") as fh:
        for line in meta:
            fh.write(f"# {line}\n")
        fh.write(",".join(cols) + "\n")
        for i in range(trace.t.shape[0]):
            row = ([trace.t[i]] + list(trace.x[i]) + list(trace.v[i])
                   + [trace.r[i], trace.h[i], trace.drift[i]])
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def cmd_geodesic(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.x0 is not None:
        # single-shot flag mode
        spec = _load_config(args.metric)
        metric = metrics.metric_from_spec(spec)
        cfg = {"metric": spec, "x0": args.x0, "dir": args.dir, "T": args.T,
               "dt": args.dt, "reflect": args.reflect}
        x0 = np.array([float(c) for c in args.x0.split(",")])
        d = np.array([float(c) for c in args.dir.split(",")])
        steps = int(round(args.T / args.dt))
        trace = geodesics.integrate_geodesic(
            metric, x0, d, args.T, dt=args.dt, reflect=args.reflect,
            record_every=max(1, steps // 5000))
        _write_trace_csv(out / "trace.csv", trace, _meta(cfg, args.seed))
        _say(args.quiet, f"geodesic: final_r={trace.final_r:.4g} "
             f"max_drift={trace.max_drift:.2e} reflections={len(trace.reflections)}")
        return 0
    cfg = _load_config(args.config)
    metric = metrics.metric_from_spec(cfg["metric"])
    tol = float(cfg.get("tolerance", 1e-3))
    report = geodesics.batch_shoot(
        metric, cfg["x0"], int(cfg.get("directions", 16)),
        float(cfg["T"]), dt=float(cfg.get("dt", 1e-3)), seed=args.seed,
        rho0=cfg.get("rho0"), check_integral=bool(cfg.get("check_integral", False)))
    _write_json(out / "escape_report.json", report.to_dict(), cfg, args.seed)
    if cfg.get("write_traces", False):
        steps = int(round(float(cfg["T"]) / float(cfg.get("dt", 1e-3))))
        rec = max(1, steps // 2000)
        for i, shot in enumerate(report.shots):
            tr = geodesics.integrate_geodesic(
                metric, shot.x0, shot.direction, float(cfg["T"]),
                dt=float(cfg.get("dt", 1e-3)), record_every=rec,
                reflect=bool(cfg.get("reflect", False)))
            _write_trace_csv(out / f"trace_{i:03d}.csv", tr, _meta(cfg, args.seed))
    worst = [m for m in (report.min_velocity_margin, report.min_integral_margin)
             if m is not None]
    failed = any(m < -tol for m in worst)
    _say(args.quiet, f"geodesic: counts={report.counts} "
         f"min_velocity_margin={report.min_velocity_margin} "
         f"min_integral_margin={report.min_integral_margin}")
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# waves

def cmd_wave_radial(args) -> int:
    cfg = _load_config(args.config)
    report = wave_radial.radial_decay_experiment(
        m=float(cfg["m"]), r0=float(cfg.get("r0", 1.0)), a=float(cfg.get("a", 4.0)),
        R0_support=float(cfg.get("R0_support", 3.0)), T=float(cfg.get("T", 100.0)),
        N=int(cfg.get("N", 8192)), bump=tuple(cfg.get("bump", (1.5, 2.5))),
        record_every=int(cfg.get("record_every", 8)))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.series.write_csv(out / "radial_energy.csv", meta=_meta(cfg, args.seed))
    _write_json(out / "radial_fit.json",
                {"m": report.m, "E0": report.E0, "fit": report.fit.to_dict()},
                cfg, args.seed)
    _say(args.quiet, f"wave-radial: m={report.m} class={report.fit.kind} "
         f"exponent={report.fit.exponent} rate={report.fit.rate}")
    expect = cfg.get("expect_class")
    if report.fit.kind == "inconclusive":
        return 1
    if expect is not None and report.fit.kind != expect:
        return 1
    return 0


def cmd_wave_general(args) -> int:
    cfg = _load_config(args.config)
    metric = metrics.metric_from_spec(cfg["metric"])
    kind = cfg.get("experiment", "uniform_decay")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    common = dict(
        R0_support=float(cfg.get("R0_support", 2.5)), T=float(cfg.get("T", 100.0)),
        N_r=int(cfg.get("N_r", 2048)), N_th=int(cfg.get("N_th", 96)),
        record_every=int(cfg.get("record_every", 10)))
    if kind == "uniform_decay":
        rep = wave_polar.uniform_decay_experiment(
            metric, r0=float(cfg.get("r0", 1.0)),
            a=cfg.get("a"), window=tuple(cfg.get("window", (20.0, 100.0))), **common)
        rep.record.write_csv(out / "polar_energy.csv", meta=_meta(cfg, args.seed))
        _write_json(out / "verdict.json",
                    {"experiment": kind, "passed": rep.passed,
                     "statistic_max_mid": rep.statistic_max_mid,
                     "statistic_max_last": rep.statistic_max_last},
                    cfg, args.seed)
        _say(args.quiet, f"wave-general: uniform_decay passed={rep.passed} "
             f"mid={rep.statistic_max_mid:.4g} last={rep.statistic_max_last:.4g}")
        return 0 if rep.passed else 1
    if kind == "spacetime":
        rep = wave_polar.spacetime_bound_experiment(
            metric, r0=cfg.get("r0"), **common)
        rep.record.write_csv(out / "polar_energy.csv", meta=_meta(cfg, args.seed))
        _write_json(out / "verdict.json",
                    {"experiment": kind, "passed": rep.passed,
                     "S_final": rep.S_final, "S_three_quarter": rep.S_three_quarter,
                     "S_over_E0": rep.S_final / rep.E0},
                    cfg, args.seed)
        _say(args.quiet, f"wave-general: spacetime passed={rep.passed} "
             f"S/E0={rep.S_final / rep.E0:.4g}")
        return 0 if rep.passed else 1
    raise ParameterError(f"unknown experiment {kind!r}")


def cmd_morawetz(args) -> int:
    cfg = _load_config(args.config)
    metric = metrics.metric_from_spec(cfg["metric"])
    resolutions = [tuple(p) for p in cfg.get("resolutions",
                                             [[128, 32], [256, 64], [512, 128]])]
    study = wave_polar.morawetz_refinement_study(
        metric, resolutions, T=float(cfg.get("T", 5.0)),
        r0=float(cfg.get("r0", 1.0)), R0_support=float(cfg.get("R0_support", 2.5)),
        multiplier=cfg.get("multiplier", "r_dr"),
        mult_params=cfg.get("multiplier_params"),
        snapshot_every=int(cfg.get("snapshot_every", 4)))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "morawetz_residuals.csv", "w") as fh:
        for line in _meta(cfg, args.seed):
            fh.write(f"# {line}\n")
        fh.write("N_r,N_th,residual,relative_residual\n")
        for n_r, n_th, res in study:
            fh.write(f"{n_r},{n_th},{res.residual!r},{res.relative_residual!r}\n")
    residuals = [res.residual for _, _, res in study]
    factors = [residuals[i] / residuals[i + 1] for i in range(len(residuals) - 1)
               if residuals[i + 1] > 0]
    min_factor = min(factors) if factors else float("inf")
    _say(args.quiet, f"morawetz: residuals={['%.3e' % v for v in residuals]} "
         f"min_reduction={min_factor:.2f}")
    return 0 if min_factor >= float(cfg.get("min_reduction", 1.8)) else 1


# ---------------------------------------------------------------------------
# entry point

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="escapemetrics",
                                 description="escape-metric experiments")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--quiet", action="store_true")

    for name, fn in (("certify", cmd_certify), ("wave-radial", cmd_wave_radial),
                     ("wave-general", cmd_wave_general), ("morawetz", cmd_morawetz)):
        p = sub.add_parser(name)
        common(p)
        p.set_defaults(func=fn, needs_config=True)

    g = sub.add_parser("geodesic")
    common(g)
    g.add_argument("--metric", help="metric spec file (flag mode)")
    g.add_argument("--x0", help="comma-separated start point (flag mode)")
    g.add_argument("--dir", help="comma-separated initial direction (flag mode)")
    g.add_argument("--T", type=float, default=10.0)
    g.add_argument("--dt", type=float, default=1e-3)
    g.add_argument("--reflect", action="store_true")
    g.set_defaults(func=cmd_geodesic, needs_config=False)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.needs_config and not args.config:
        print("error: --config is required", file=sys.stderr)
        return 2
    if args.command == "geodesic" and not args.config and not (args.x0 and args.metric):
        print("error: provide --config or (--metric, --x0, --dir)", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (KeyError, json.JSONDecodeError, FileNotFoundError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (HypothesisViolationError, ParameterError, DomainError) as exc:
        print(f"hypothesis/parameter error: {exc}", file=sys.stderr)
        return 2
    except (InapplicableTheoremError, MetricError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
