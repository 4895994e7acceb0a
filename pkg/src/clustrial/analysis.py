"""Analysis of a user-supplied trial: estimates, standard errors, diagnostics."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .dataset import ColumnSchema, Family, TrialDataset, WeightScheme
from .errors import ConfigError
from .estimators import (
    ROSTER,
    Estimand,
    EstimatorOptions,
    FitCache,
    cluster_randomized_mean,
    gcomputation_ate,
    roster_label,
    run_estimator,
)
from .glm import DesignSpec, fit_glm, predict_counterfactual
from .propensity import PropensityPolicy, cluster_propensity
from .variance import (
    METHODS,
    cluster_ate_variance,
    cluster_variance,
    hierarchical_variance,
    hierarchical_weights,
    size_effect_correlation,
    total_inference,
)


@dataclass(frozen=True)
class AnalysisConfig:
    columns: ColumnSchema | None = None
    family: Family = Family.GAUSSIAN
    estimators: tuple[str, ...] = ("Naive adj", "Mixed(1+A|c) Sam adj")
    estimands: tuple[Estimand, ...] = (Estimand.TREATED, Estimand.CONTROL, Estimand.ATE)
    weights: WeightScheme = WeightScheme.EQUAL_CENTERS
    methods: tuple[str, ...] = METHODS
    level: float = 0.95
    quantile: str = "t"
    draws: int = 1000
    seed: int = 0
    couple_arm_draws: bool = True
    nagq: int = 1
    propensity: PropensityPolicy = field(default_factory=PropensityPolicy)
    naive_propensity: PropensityPolicy = field(default_factory=lambda: PropensityPolicy("marginal"))
    cluster_covariates: tuple[str, ...] = ()

    @classmethod
    def from_dict(cls, d: dict) -> "AnalysisConfig":
        if not isinstance(d, dict):
            raise ConfigError("analysis config must be a JSON object")
        try:
            cols = ColumnSchema.from_dict(d["columns"]) if d.get("columns") else None
            prop = d.get("propensity", {})
            policy = PropensityPolicy(prop.get("variant", "mixed_logistic"),
                                      tuple(prop.get("covariate_columns", ())),
                                      tuple(prop.get("clamp", (0.01, 0.99))))
            naive_prop = d.get("naive_propensity", {})
            naive_policy = PropensityPolicy(naive_prop.get("variant", "marginal"),
                                            tuple(naive_prop.get("covariate_columns", ())),
                                            tuple(naive_prop.get("clamp", (0.01, 0.99))))
            cfg = cls(
                columns=cols,
                family=Family.parse(d.get("family", "gaussian")),
                estimators=tuple(normalize_estimator(e) for e in d.get("estimators", cls.estimators)),
                estimands=tuple(Estimand.parse(e) for e in d.get("estimands", ("treated", "control", "ate"))),
                weights=WeightScheme.parse(d.get("weights", "equal_centers")),
                methods=tuple(d.get("methods", METHODS)),
                level=float(d.get("level", 0.95)),
                quantile=str(d.get("quantile", "t")),
                draws=int(d.get("draws", 1000)),
                seed=int(d.get("seed", 0)),
                couple_arm_draws=bool(d.get("couple_arm_draws", True)),
                nagq=int(d.get("nagq", 1)),
                propensity=policy,
                naive_propensity=naive_policy,
                cluster_covariates=tuple(d.get("cluster_covariates", ())),
            )
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(f"invalid analysis config: {exc}") from exc
        for m in cfg.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown variance method {m!r}")
        if not 0 < cfg.level < 1:
            raise ConfigError("level must lie in (0, 1)")
        return cfg

    @classmethod
    def load(cls, path) -> "AnalysisConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                return cls.from_dict(json.load(fh))
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc


def normalize_estimator(label: str) -> str:
    """Accept roster labels case-insensitively, e.g. ``naive`` or ``mixed(1+a|c) sam adj``."""
    s = " ".join(str(label).split())
    adjusted = s.lower().endswith(" adj")
    base = s[:-4] if adjusted else s
    for name in ROSTER:
        if name.lower() == base.lower():
            return roster_label(name, adjusted)
    raise ConfigError(f"unknown estimator {label!r}; choose from {', '.join(ROSTER)} (optionally with ' adj')")


def _estimator_options(cfg: AnalysisConfig) -> EstimatorOptions:
    return EstimatorOptions(draws=cfg.draws, seed=cfg.seed, couple_arms=cfg.couple_arm_draws, nagq=cfg.nagq,
                            propensity=cfg.propensity, naive_propensity=cfg.naive_propensity)


def _interval_dict(inf):
    return {m: list(v) for m, v in inf.intervals.items()}


def analyze(data: TrialDataset, cfg: AnalysisConfig, cluster_randomized=False, hierarchical=False) -> dict:
    """Estimate every requested roster entry on ``data`` and collect a report."""
    if cluster_randomized:
        return analyze_cluster_randomized(data, cfg)
    if hierarchical and data.cluster is None:
        raise ConfigError("--hierarchical needs a cluster column")
    cache = FitCache(data)
    opts = _estimator_options(cfg)
    report = {"n": data.n, "k": data.k, "weights": cfg.weights.value, "level": cfg.level, "estimators": []}
    for label in cfg.estimators:
        name, adjusted = label.removesuffix(" adj"), label.endswith(" adj")
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            res = run_estimator(data, name, adjusted, cache, opts)
        entry = {"estimator": label, "propensity_clamped": res.n_clamped,
                 "warnings": sorted({str(w.message) for w in caught}), "estimands": {}}
        fit = res.outcome_fit
        if name == "Naive" and opts.naive_propensity.variant == "marginal":
            naive_ate = res.pooled(Estimand.ATE, cfg.weights).value
            entry["gcomputation_check"] = abs(naive_ate - gcomputation_ate(fit, data))
        if hasattr(fit, "variance_components"):
            entry["variance_components"] = dict(fit.variance_components)
            if fit.residual_variance is not None:
                entry["residual_variance"] = fit.residual_variance
        for estimand in cfg.estimands:
            pooled = res.pooled(estimand, cfg.weights)
            inf = total_inference(pooled, cfg.methods, cfg.level, cfg.quantile)
            block = {
                "estimate": inf.estimate,
                "se_naive": inf.se_naive,
                "se": inf.se_by_method,
                "df": inf.df_by_method or {"naive": inf.df},
                "rho": inf.rho_by_method,
                "intervals": _interval_dict(inf),
                "variance_fallbacks": inf.n_fallback,
                "size_effect_correlation": size_effect_correlation(pooled),
            }
            if inf.heterogeneity:
                block["sigma2_u"] = {m: h.sigma2_u for m, h in inf.heterogeneity.items()}
            if hierarchical:
                block["hierarchical"] = _hierarchical_block(data, res, estimand, cfg)
            if not pooled.naive:
                block["centers"] = [
                    {"center": c.center_id, "n": c.n_c, "n_treated": c.n_treated, "estimate": c.value(estimand),
                     "sigma2_c": float(inf.sigma2_c[i]), "fallback": bool(inf.fallback[i])}
                    for i, c in enumerate(pooled.per_center)
                ]
            entry["estimands"][estimand.value] = block
        report["estimators"].append(entry)
    return report


def _patient_if(data, res, estimand):
    a = data.treatment.astype(float)
    p, m1, m0 = res.p_hat, res.m1_hat, res.m0_hat
    if1 = a / p * (data.outcome - m1) + m1
    if0 = (1 - a) / (1 - p) * (data.outcome - m0) + m0
    return {Estimand.TREATED: if1, Estimand.CONTROL: if0, Estimand.ATE: if1 - if0}[estimand]


def _hierarchical_block(data, res, estimand, cfg):
    v = _patient_if(data, res, estimand)
    omega = hierarchical_weights(data.n_c, cfg.weights)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        hv = hierarchical_variance(v, data.center, data.cluster, omega)
    est = float(np.dot(omega[data.center], v) / np.dot(omega, data.n_c))
    df = data.k - 1
    q = stats.t.ppf(1 - (1 - cfg.level) / 2, df) if cfg.quantile == "t" else stats.norm.ppf(1 - (1 - cfg.level) / 2)
    return {
        "estimate": est,
        "se": hv.se,
        "df": df,
        "interval": [est - q * hv.se, est + q * hv.se],
        "var_center": hv.var_center,
        "var_cluster": hv.var_cluster,
        "var_residual": hv.var_residual,
        "warnings": sorted({str(w.message) for w in caught}),
    }


def analyze_cluster_randomized(data: TrialDataset, cfg: AnalysisConfig) -> dict:
    """Cluster-level AIPW with a covariate-adjusted GLM outcome model."""
    if data.cluster is None:
        raise ConfigError("--cluster-randomized needs a cluster column")
    names = list(data.covariate_names)
    try:
        ccols = tuple(names.index(c) for c in cfg.cluster_covariates)
    except ValueError as exc:
        raise ConfigError(f"unknown cluster covariate: {exc}") from exc
    p = cluster_propensity(data, ccols, cfg.propensity.clamp)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        fit = fit_glm(data, DesignSpec(covariate_columns=tuple(range(len(names)))))
    m1 = predict_counterfactual(fit, data, 1)
    m0 = predict_counterfactual(fit, data, 0)
    est = cluster_randomized_mean(data, p, m1, m0, Estimand.ATE)
    J = est.J
    df = J - 1
    q = stats.t.ppf(1 - (1 - cfg.level) / 2, df) if cfg.quantile == "t" else stats.norm.ppf(1 - (1 - cfg.level) / 2)
    out = {"n": data.n, "J": J, "level": cfg.level, "estimands": {}}
    values = {
        Estimand.TREATED: (float(np.mean(est.psi1)), cluster_variance(est.if_treated)),
        Estimand.CONTROL: (float(np.mean(est.psi0)), cluster_variance(est.if_control)),
        Estimand.ATE: (est.value, cluster_ate_variance(est.if_treated, est.if_control)),
    }
    for estimand in cfg.estimands:
        v, var = values[estimand]
        se = float(np.sqrt(var))
        out["estimands"][estimand.value] = {"estimate": v, "se": se, "df": df, "interval": [v - q * se, v + q * se]}
    return out
