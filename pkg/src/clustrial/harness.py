"""Monte Carlo harness: run an estimator roster over replicated synthetic trials."""

from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .dataset import WeightScheme
from .errors import ConfigError, FailureFractionExceeded
from .estimators import (
    ROSTER,
    Estimand,
    EstimatorOptions,
    FitCache,
    parse_roster_label,
    roster_label,
    run_estimator,
)
from .propensity import PropensityPolicy
from .rng import stream
from .simgen import BinaryCovariates, ContinuousCovariates, DgmSpec, SizeSetting, generate, true_estimand
from .variance import METHODS, total_inference

SEED_ENV = "CLUSTRIAL_SEED"


@dataclass(frozen=True)
class ScenarioConfig:
    id: str
    dgm: DgmSpec
    estimators: tuple[str, ...] = tuple(roster_label(n, a) for a in (False, True) for n in ROSTER)
    estimands: tuple[Estimand, ...] = (Estimand.TREATED, Estimand.ATE)
    weights: tuple[WeightScheme, ...] = (WeightScheme.EQUAL_CENTERS,)
    methods: tuple[str, ...] = METHODS
    replications: int = 1000
    seed: int = 1
    level: float = 0.95
    quantile: str = "t"
    draws: int = 1000
    couple_arm_draws: bool = True
    nagq: int = 1
    propensity: PropensityPolicy = field(default_factory=PropensityPolicy)
    truth_draws: int = 10_000_000
    truth_seed: int = 20240101
    max_failure_fraction: float = 0.02
    output: str | None = None

    @classmethod
    def from_dict(cls, d: dict, env=None) -> "ScenarioConfig":
        env = os.environ if env is None else env
        if not isinstance(d, dict):
            raise ConfigError("scenario config must be a JSON object")
        known = {"id", "dgm", "estimators", "estimands", "weights", "methods", "replications", "seed",
                 "level", "quantile", "draws", "couple_arm_draws", "nagq", "propensity", "truth",
                 "max_failure_fraction", "output"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        try:
            dgm = _dgm_from_dict(d.get("dgm", {}))
            estimators = tuple(d.get("estimators", cls.estimators))
            for label in estimators:
                parse_roster_label(label)
            estimands = tuple(Estimand.parse(e) for e in d.get("estimands", ("treated", "ate")))
            weights = tuple(WeightScheme.parse(w) for w in d.get("weights", ("equal_centers",)))
            methods = tuple(d.get("methods", METHODS))
            for m in methods:
                if m not in METHODS:
                    raise ConfigError(f"unknown variance method {m!r}")
            prop = d.get("propensity", {})
            policy = PropensityPolicy(
                variant=prop.get("variant", "mixed_logistic"),
                covariate_columns=tuple(prop.get("covariate_columns", ())),
                clamp=tuple(prop.get("clamp", (0.01, 0.99))),
            )
            truth = d.get("truth", {})
            seed = int(d.get("seed", 1))
            if env.get(SEED_ENV):
                seed = int(env[SEED_ENV])
            cfg = cls(
                id=str(d.get("id", "scenario")),
                dgm=dgm,
                estimators=estimators,
                estimands=estimands,
                weights=weights,
                methods=methods,
                replications=int(d.get("replications", 1000)),
                seed=seed,
                level=float(d.get("level", 0.95)),
                quantile=str(d.get("quantile", "t")),
                draws=int(d.get("draws", 1000)),
                couple_arm_draws=bool(d.get("couple_arm_draws", True)),
                nagq=int(d.get("nagq", 1)),
                propensity=policy,
                truth_draws=int(truth.get("draws", 10_000_000)),
                truth_seed=int(truth.get("seed", 20240101)),
                max_failure_fraction=float(d.get("max_failure_fraction", 0.02)),
                output=d.get("output"),
            )
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(f"invalid scenario config: {exc}") from exc
        if cfg.replications < 1:
            raise ConfigError("replications must be >= 1")
        if not 0 < cfg.level < 1:
            raise ConfigError("level must lie in (0, 1)")
        if cfg.quantile not in ("t", "normal"):
            raise ConfigError("quantile must be 't' or 'normal'")
        if not any(c.isalnum() for c in cfg.id) or any(c in cfg.id for c in "/\\"):
            raise ConfigError("scenario id must be a plain file name")
        return cfg

    @classmethod
    def load(cls, path, env=None) -> "ScenarioConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                d = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(d, env)

    def options(self, seed: int) -> EstimatorOptions:
        return EstimatorOptions(draws=self.draws, seed=seed, couple_arms=self.couple_arm_draws,
                                nagq=self.nagq, propensity=self.propensity)


def _dgm_from_dict(d: dict) -> DgmSpec:
    d = dict(d)
    kw = {}
    for key in ("endpoint", "misspecified", "informative_size", "kendall_tau"):
        if key in d:
            kw[key] = d.pop(key)
    if "sigma2" in d:
        s = d.pop("sigma2")
        if len(s) != 3:
            raise ConfigError("sigma2 must be a triple (b0, b1, b2)")
        kw.update(sigma2_b0=float(s[0]), sigma2_b1=float(s[1]), sigma2_b2=float(s[2]))
    for key in ("sigma2_b0", "sigma2_b1", "sigma2_b2"):
        if key in d:
            kw[key] = float(d.pop(key))
    if "setting" in d:
        s = d.pop("setting")
        kw["setting"] = SizeSetting(**s) if isinstance(s, dict) else int(s)
    if "covariates" in d:
        c = d.pop("covariates")
        if kw.get("endpoint", "continuous") == "continuous":
            kw["continuous_covariates"] = ContinuousCovariates(**c)
        else:
            kw["binary_covariates"] = BinaryCovariates(**c)
    if d:
        raise ConfigError(f"unknown dgm key(s): {', '.join(sorted(d))}")
    try:
        return DgmSpec(**kw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------------------
# influence-value diagnostics


def compute_if_icc(values, groups) -> float:
    """One-way ANOVA intraclass correlation; may be negative."""
    v = np.asarray(values, float)
    g = np.asarray(groups)
    _, g = np.unique(g, return_inverse=True)
    k = int(g.max()) + 1
    N = v.size
    if k < 2:
        raise ValueError("need at least 2 groups")
    if np.ptp(v) == 0:
        return 0.0
    n = np.bincount(g, minlength=k).astype(float)
    if N == k:
        return float("nan")
    means = np.bincount(g, weights=v, minlength=k) / n
    grand = v.mean()
    msb = np.dot(n, (means - grand) ** 2) / (k - 1)
    msw = np.sum((v - means[g]) ** 2) / (N - k)
    n0 = (N - np.sum(n ** 2) / N) / (k - 1)
    denom = msb + (n0 - 1) * msw
    return float((msb - msw) / denom) if denom != 0 else 0.0


def within_center_covariance(values, groups) -> tuple[float, float]:
    """Average product of centered values over distinct same-center pairs, with its SE.

    Values are centered at the overall mean. The SE treats centers as the
    independent units of a ratio estimator.
    """
    v = np.asarray(values, float)
    _, g = np.unique(np.asarray(groups), return_inverse=True)
    k = int(g.max()) + 1
    d = v - v.mean()
    s1 = np.bincount(g, weights=d, minlength=k)
    s2 = np.bincount(g, weights=d * d, minlength=k)
    n = np.bincount(g, minlength=k).astype(float)
    S = s1 ** 2 - s2
    P = n * (n - 1)
    if P.sum() == 0:
        raise ValueError("no center has two or more patients")
    est = S.sum() / P.sum()
    se = math.sqrt(np.sum((S - est * P) ** 2) * k / (k - 1)) / P.sum()
    return float(est), float(se)


# ---------------------------------------------------------------------------
# replications


def replication_seed(master: int, r: int, purpose: int = 0) -> int:
    """Integer seed for one replication and purpose, derived by counter-based splitting."""
    return int(np.random.SeedSequence(int(master), spawn_key=(int(r), int(purpose))).generate_state(1)[0])


def _fit_failed(res) -> str | None:
    fit = res.outcome_fit
    if fit is not None and not getattr(fit, "converged", True):
        return "outcome model did not converge"
    return None


def run_replication(cfg: ScenarioConfig, r: int, truths: dict) -> list[dict]:
    """One replication: generate, estimate every roster entry, infer, record."""
    with threadpool_limits(1):
        data = generate(cfg.dgm, seed=replication_seed(cfg.seed, r, 0))
        cache = FitCache(data)
        opts = cfg.options(replication_seed(cfg.seed, r, 1))
        rows = []
        for label in cfg.estimators:
            name, adjusted = parse_roster_label(label)
            try:
                res = run_estimator(data, name, adjusted, cache, opts)
                err = _fit_failed(res)
            except Exception as exc:  # a failing estimator is excluded, not fatal
                res, err = None, f"{type(exc).__name__}: {exc}"
            for scheme in cfg.weights:
                for estimand in cfg.estimands:
                    row = {"replication": r, "estimator": label, "estimand": estimand.value, "weights": scheme.value}
                    if err is None:
                        try:
                            pooled = res.pooled(estimand, scheme)
                            inf = total_inference(pooled, cfg.methods, cfg.level, cfg.quantile)
                        except Exception as exc:
                            row["error"] = f"{type(exc).__name__}: {exc}"
                            rows.append(row)
                            continue
                        truth = truths[(estimand, scheme)]
                        row["estimate"] = inf.estimate
                        if inf.se_naive is not None:
                            row["se_naive"] = inf.se_naive
                            lo, hi = inf.intervals["naive"]
                            row["cover_naive"] = int(lo <= truth <= hi)
                        for m in cfg.methods:
                            if m in inf.se_by_method:
                                row[f"se_{m}"] = inf.se_by_method[m]
                                lo, hi = inf.intervals[m]
                                row[f"cover_{m}"] = int(lo <= truth <= hi)
                        row["icc"] = compute_if_icc(
                            np.concatenate([c.if_values(estimand) for c in pooled.per_center]),
                            np.repeat(np.arange(pooled.k), pooled.n_c),
                        )
                        if inf.fallback is not None:
                            row["fallback"] = inf.n_fallback
                    else:
                        row["error"] = err
                    rows.append(row)
        return rows


def _run_chunk(args):
    cfg, indices, truths = args
    return [run_replication(cfg, r, truths) for r in indices]


@dataclass
class ScenarioResult:
    config: ScenarioConfig
    truths: dict
    rows: list[dict]  # one summary row per (estimator, estimand, weights)
    replications: list[dict]
    failures: dict

    @property
    def failure_fraction(self) -> float:
        """Largest per-estimator fraction of failed replications."""
        if not self.rows:
            return 0.0
        return max(r["failures"] / self.config.replications for r in self.rows)


def compute_truths(cfg: ScenarioConfig) -> dict:
    out = {}
    for scheme in cfg.weights:
        for estimand in cfg.estimands:
            out[(estimand, scheme)] = true_estimand(cfg.dgm, estimand, scheme, cfg.truth_draws, cfg.truth_seed).value
    return out


def summarize(cfg: ScenarioConfig, reps: list[dict], truths: dict) -> tuple[list[dict], dict]:
    """Per-(estimator, estimand, weights) metrics over successful replications."""
    groups: dict = {}
    for row in reps:
        groups.setdefault((row["estimator"], row["estimand"], row["weights"]), []).append(row)
    out, failures = [], {}
    for label in cfg.estimators:
        for scheme in cfg.weights:
            for estimand in cfg.estimands:
                key = (label, estimand.value, scheme.value)
                rows = groups.get(key, [])
                ok = [r for r in rows if "error" not in r]
                errs = [r["error"] for r in rows if "error" in r]
                if errs:
                    failures[" | ".join(key)] = errs
                truth = truths[(estimand, scheme)]
                summary = {
                    "estimator": label,
                    "block": "adjusted" if label.endswith(" adj") else "unadjusted",
                    "estimand": estimand.value,
                    "weights": scheme.value,
                    "truth": truth,
                    "replications": len(ok),
                    "failures": len(errs),
                }
                summary.update(metrics([r["estimate"] for r in ok], truth))
                for m in ("naive",) + cfg.methods:
                    se = [r[f"se_{m}"] for r in ok if f"se_{m}" in r]
                    cov = [r[f"cover_{m}"] for r in ok if f"cover_{m}" in r]
                    summary[f"se_{m}"] = float(np.mean(se)) if se else None
                    summary[f"coverage_{m}"] = float(np.mean(cov)) if cov else None
                icc = [r["icc"] for r in ok if np.isfinite(r.get("icc", np.nan))]
                summary["mean_icc"] = float(np.mean(icc)) if icc else None
                out.append(summary)
    return out, failures


def metrics(estimates, truth) -> dict:
    """Bias, MSE and Monte Carlo SD of a set of estimates."""
    x = np.asarray(estimates, float)
    if x.size == 0:
        return {"estimate": None, "bias": None, "mse": None, "mc_sd": None}
    err = x - truth
    return {
        "estimate": float(x.mean()),
        "bias": float(err.mean()),
        "mse": float(np.mean(err ** 2)),
        "mc_sd": float(np.std(x, ddof=1)) if x.size > 1 else None,
    }


def coverage(lower, upper, truth) -> float:
    lo = np.asarray(lower, float)
    hi = np.asarray(upper, float)
    return float(np.mean((lo <= truth) & (truth <= hi)))


def run_scenario(cfg: ScenarioConfig, jobs: int = 1, truths: dict | None = None, progress=None) -> ScenarioResult:
    """Run every replication (in parallel when ``jobs > 1``) and summarize in index order."""
    truths = compute_truths(cfg) if truths is None else truths
    R = cfg.replications
    if jobs <= 1:
        reps = []
        for r in range(R):
            reps.extend(run_replication(cfg, r, truths))
            if progress:
                progress(r + 1, R)
    else:
        size = max(1, min(25, R // (4 * jobs) or 1))
        chunks = [list(range(s, min(R, s + size))) for s in range(0, R, size)]
        reps = []
        done = 0
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for chunk_rows in pool.map(_run_chunk, [(cfg, c, truths) for c in chunks]):
                for rows in chunk_rows:
                    reps.extend(rows)
                done += len(chunk_rows)
                if progress:
                    progress(done, R)
    rows, failures = summarize(cfg, reps, truths)
    return ScenarioResult(cfg, truths, rows, reps, failures)


def check_failures(result: ScenarioResult):
    if result.failure_fraction > result.config.max_failure_fraction:
        raise FailureFractionExceeded(
            f"failure fraction {result.failure_fraction:.3f} exceeds {result.config.max_failure_fraction:.3f}"
        )


# ---------------------------------------------------------------------------
# output

SUMMARY_FIELDS = ["estimator", "block", "estimand", "weights", "truth", "replications", "failures",
                  "estimate", "bias", "mse", "mc_sd"]
REPLICATION_FIELDS = ["replication", "estimator", "estimand", "weights", "estimate"]


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def summary_columns(methods) -> list[str]:
    cols = list(SUMMARY_FIELDS)
    cols += [f"se_{m}" for m in ("naive",) + tuple(methods)]
    cols += [f"coverage_{m}" for m in ("naive",) + tuple(methods)]
    cols += ["mean_icc"]
    return cols


def summary_csv(result: ScenarioResult) -> str:
    buf = io.StringIO()
    cols = summary_columns(result.config.methods)
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for row in result.rows:
        w.writerow([_fmt(row.get(c)) for c in cols])
    return buf.getvalue()


def replications_csv(result: ScenarioResult) -> str:
    buf = io.StringIO()
    methods = ("naive",) + result.config.methods
    cols = REPLICATION_FIELDS + [f"se_{m}" for m in methods] + [f"cover_{m}" for m in methods] + ["icc", "fallback", "error"]
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for row in result.replications:
        w.writerow([_fmt(row.get(c)) for c in cols])
    return buf.getvalue()


def _config_json(cfg: ScenarioConfig) -> dict:
    d = asdict(cfg)
    d["estimands"] = [e.value for e in cfg.estimands]
    d["weights"] = [w.value for w in cfg.weights]
    return d


def result_json(result: ScenarioResult) -> str:
    payload = {
        "scenario": result.config.id,
        "config": _config_json(result.config),
        "truths": [{"estimand": e.value, "weights": s.value, "value": v} for (e, s), v in result.truths.items()],
        "results": result.rows,
        "failure_fraction": result.failure_fraction,
        "failures": result.failures,
    }
    return json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n"


def write_outputs(result: ScenarioResult, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sid = result.config.id
    files = {
        out / f"{sid}.csv": summary_csv(result),
        out / f"{sid}_replications.csv": replications_csv(result),
        out / f"{sid}.json": result_json(result),
    }
    for path, text in files.items():
        path.write_text(text, encoding="utf-8")
    return list(files)


def format_table(result: ScenarioResult) -> str:
    """Paper-style text table: SD, SE per method and coverage per method."""
    methods = ("naive",) + result.config.methods
    head = f"{'Method':<24}{'estimand':<12}{'bias':>9}{'SD':>8}" + "".join(f"{'SE ' + m:>10}" for m in methods)
    head += "".join(f"{'Cov ' + m:>10}" for m in methods) + f"{'fail':>6}"
    lines = [f"scenario {result.config.id}: {result.config.replications} replications", head]
    block = None
    for row in result.rows:
        if row["block"] != block:
            block = row["block"]
            lines.append(f"-- {block} ({row['weights']})")
        short = "tau1" if row["estimand"] == Estimand.TREATED.value else ("tau0" if row["estimand"] == Estimand.CONTROL.value else "ate")
        cells = f"{row['estimator']:<24}{short:<12}"
        cells += f"{_num(row['bias'], 9, 4)}{_num(row['mc_sd'], 8, 3)}"
        cells += "".join(_num(row[f"se_{m}"], 10, 3) for m in methods)
        cells += "".join(_num(None if row[f"coverage_{m}"] is None else 100 * row[f"coverage_{m}"], 10, 1) for m in methods)
        cells += f"{row['failures']:>6}"
        lines.append(cells)
    return "\n".join(lines)


def _num(v, width, digits):
    return f"{'':>{width}}" if v is None else f"{v:>{width}.{digits}f}"
