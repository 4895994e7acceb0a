"""Command line entry point: ``clustrial analyze | simulate | truth``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .analysis import AnalysisConfig, analyze, normalize_estimator
from .dataset import ColumnSchema, Family, WeightScheme, load_csv
from .errors import ClustrialError, ConfigError
from .harness import ScenarioConfig, check_failures, format_table, run_scenario, write_outputs
from .propensity import PropensityPolicy
from .simgen import true_estimand


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="clustrial", description="AIPW estimation for multi-center trials.")
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", help="analyze a trial CSV")
    a.add_argument("csv")
    a.add_argument("--config", help="analysis config (JSON)")
    a.add_argument("--cluster-randomized", action="store_true")
    a.add_argument("--hierarchical", action="store_true")
    a.add_argument("--weights", choices=["equal-centers", "equal-patients"])
    a.add_argument("--level", type=float)
    a.add_argument("--out", help="directory for report.json")
    a.add_argument("--family", choices=["gaussian", "binomial"])
    a.add_argument("--col-outcome")
    a.add_argument("--col-treatment")
    a.add_argument("--col-center")
    a.add_argument("--col-cluster")
    a.add_argument("--col-patient")
    a.add_argument("--col-covariate", action="append", default=None)
    a.add_argument("--estimator", action="append", default=None,
                   help="roster label, e.g. 'naive' or 'Mixed(1+A|c) Sam adj'; repeatable")
    a.add_argument("--propensity", choices=["marginal", "logistic_covariates", "mixed_logistic"])
    a.add_argument("--couple-arm-draws", choices=["yes", "no"])
    a.add_argument("--seed", type=int)

    s = sub.add_parser("simulate", help="run a simulation scenario")
    s.add_argument("--config", required=True)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--out", default=None)
    s.add_argument("--quiet", action="store_true")

    t = sub.add_parser("truth", help="compute the true estimands of a scenario")
    t.add_argument("--config", required=True)
    return p


def _analysis_config(args) -> AnalysisConfig:
    cfg = AnalysisConfig.load(args.config) if args.config else AnalysisConfig()
    upd = {}
    cols = cfg.columns
    flags = {k: getattr(args, f"col_{k}") for k in ("outcome", "treatment", "center", "cluster", "patient")}
    if any(v is not None for v in flags.values()) or args.col_covariate is not None:
        base = dataclasses.asdict(cols) if cols else {}
        base.update({k: v for k, v in flags.items() if v is not None})
        if args.col_covariate is not None:
            base["covariates"] = args.col_covariate
        for k in ("outcome", "treatment", "center"):
            if not base.get(k):
                raise ConfigError(f"missing column mapping for {k} (use --col-{k} or the config)")
        cols = ColumnSchema.from_dict(base)
    if cols is None:
        raise ConfigError("no column mapping: pass --config or --col-outcome/--col-treatment/--col-center")
    upd["columns"] = cols
    if args.family:
        upd["family"] = Family.parse(args.family)
    if args.weights:
        upd["weights"] = WeightScheme.parse(args.weights)
    if args.level is not None:
        if not 0 < args.level < 1:
            raise ConfigError("level must lie in (0, 1)")
        upd["level"] = args.level
    if args.estimator:
        upd["estimators"] = tuple(normalize_estimator(e) for e in args.estimator)
    if args.propensity:
        policy = PropensityPolicy(args.propensity, cfg.propensity.covariate_columns, cfg.propensity.clamp)
        upd["propensity"] = policy
        upd["naive_propensity"] = policy
    if args.couple_arm_draws:
        upd["couple_arm_draws"] = args.couple_arm_draws == "yes"
    if args.seed is not None:
        upd["seed"] = args.seed
    return dataclasses.replace(cfg, **upd)


def _f(v, digits=4):
    return "NA" if v is None else f"{v:.{digits}f}"


def format_report(report: dict) -> str:
    lines = []
    if "J" in report:
        lines.append(f"cluster-randomized analysis: n={report['n']} clusters={report['J']}")
        for estimand, b in report["estimands"].items():
            lo, hi = b["interval"]
            lines.append(f"  {estimand:<30} {_f(b['estimate'])}  SE {_f(b['se'])}  df {b['df']}  "
                         f"CI [{_f(lo)}, {_f(hi)}]")
        return "\n".join(lines)
    lines.append(f"n={report['n']} centers={report['k']} weights={report['weights']} level={report['level']}")
    for entry in report["estimators"]:
        lines.append("")
        lines.append(f"== {entry['estimator']}")
        for estimand, b in entry["estimands"].items():
            lines.append(f"  {estimand}: estimate {_f(b['estimate'])}")
            if b["se_naive"] is not None:
                lo, hi = b["intervals"]["naive"]
                lines.append(f"    naive SE {_f(b['se_naive'])}  df {b['df'].get('naive')}  CI [{_f(lo)}, {_f(hi)}]")
            for m, se in b["se"].items():
                lo, hi = b["intervals"][m]
                lines.append(f"    {m:<5} SE {_f(se)}  df {_f(b['df'][m], 1)}  rho {_f(b['rho'][m], 3)}  "
                             f"sigma2_u {_f(b['sigma2_u'][m])}  CI [{_f(lo)}, {_f(hi)}]")
            if "hierarchical" in b:
                h = b["hierarchical"]
                lo, hi = h["interval"]
                lines.append(f"    hierarchical SE {_f(h['se'])}  df {h['df']}  CI [{_f(lo)}, {_f(hi)}]  "
                             f"(center {_f(h['var_center'])}, cluster {_f(h['var_cluster'])}, "
                             f"residual {_f(h['var_residual'])})")
            lines.append(f"    variance fallbacks {b['variance_fallbacks']}  "
                         f"corr(n_c, estimate) {_f(b['size_effect_correlation'], 3)}")
            if b.get("centers"):
                lines.append(f"    {'center':<12}{'n':>6}{'treated':>9}{'estimate':>12}{'var':>12}")
                for c in b["centers"]:
                    flag = " *" if c["fallback"] else ""
                    lines.append(f"    {c['center']:<12}{c['n']:>6}{c['n_treated']:>9}"
                                 f"{c['estimate']:>12.4f}{c['sigma2_c']:>12.5f}{flag}")
        lines.append(f"  propensity clamped: {entry['propensity_clamped']}")
        if "gcomputation_check" in entry:
            lines.append(f"  G-computation cross-check: |AIPW - G-comp| = {entry['gcomputation_check']:.3e}")
        for w in entry["warnings"]:
            lines.append(f"  warning: {w}")
    return "\n".join(lines)


def cmd_analyze(args) -> int:
    cfg = _analysis_config(args)
    data = load_csv(args.csv, cfg.columns, cfg.family)
    report = analyze(data, cfg, cluster_randomized=args.cluster_randomized, hierarchical=args.hierarchical)
    print(format_report(report))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True, default=str) + "\n")
    return 0


def cmd_simulate(args) -> int:
    cfg = ScenarioConfig.load(args.config)
    if args.jobs < 1:
        raise ConfigError("--jobs must be >= 1")

    def progress(done, total):
        if not args.quiet:
            print(f"\r{done}/{total} replications", end="", file=sys.stderr, flush=True)

    result = run_scenario(cfg, jobs=args.jobs, progress=progress)
    if not args.quiet:
        print(file=sys.stderr)
    print(format_table(result))
    out = args.out or cfg.output or "."
    for path in write_outputs(result, out):
        print(f"wrote {path}")
    for key, errs in result.failures.items():
        print(f"failures {key}: {len(errs)} ({errs[0]})", file=sys.stderr)
    check_failures(result)
    return 0


def cmd_truth(args) -> int:
    cfg = ScenarioConfig.load(args.config)
    for scheme in cfg.weights:
        for estimand in cfg.estimands:
            t = true_estimand(cfg.dgm, estimand, scheme, cfg.truth_draws, cfg.truth_seed)
            se = "exact" if t.mc_se is None else f"mc_se {t.mc_se:.2e}"
            print(f"{estimand.value:<30} {scheme.value:<15} {t.value:.6f}  ({t.method}, {se})")
    return 0


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    handler = {"analyze": cmd_analyze, "simulate": cmd_simulate, "truth": cmd_truth}[args.command]
    try:
        return handler(args)
    except ClustrialError as exc:
        print(f"clustrial: {exc.code}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
