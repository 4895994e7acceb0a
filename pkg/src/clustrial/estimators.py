"""AIPW point estimators: per-center, pooled, naive and cluster-randomized."""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass, field

import numpy as np

from .dataset import Family, TrialDataset, WeightScheme, weights_from_sizes
from .errors import ConfigError, DataError, ModelError
from .glm import DesignSpec, fit_glm, predict_counterfactual
from .mixedmodel import (
    PredictionMode,
    RandomEffectsSpec,
    fit_glmm_logit,
    fit_lmm,
    predict_counterfactual_mixed,
)
from .propensity import PropensityPolicy, PropensityResult, fit_propensity


class Estimand(str, enum.Enum):
    TREATED = "counterfactual_mean_treated"
    CONTROL = "counterfactual_mean_control"
    ATE = "ate"

    @classmethod
    def parse(cls, value) -> "Estimand":
        if isinstance(value, cls):
            return value
        aliases = {"tau1": cls.TREATED, "treated": cls.TREATED, "tau0": cls.CONTROL, "control": cls.CONTROL}
        v = str(value).strip().lower()
        if v in aliases:
            return aliases[v]
        return cls(v)


@dataclass(frozen=True, eq=False)
class CenterEstimate:
    center_id: str
    n_c: int
    tau1_hat: float
    tau0_hat: float
    tau_hat: float
    if_values_treated: np.ndarray
    if_values_control: np.ndarray
    if_values_ate: np.ndarray
    n_treated: int = 0
    cluster: np.ndarray | None = None

    @property
    def n_control(self) -> int:
        return self.n_c - self.n_treated

    def value(self, estimand) -> float:
        e = Estimand.parse(estimand)
        return {Estimand.TREATED: self.tau1_hat, Estimand.CONTROL: self.tau0_hat, Estimand.ATE: self.tau_hat}[e]

    def if_values(self, estimand) -> np.ndarray:
        e = Estimand.parse(estimand)
        if e is Estimand.TREATED:
            return self.if_values_treated
        if e is Estimand.CONTROL:
            return self.if_values_control
        return self.if_values_ate

    def has_required_arms(self, estimand) -> bool:
        e = Estimand.parse(estimand)
        if e is Estimand.TREATED:
            return self.n_treated > 0
        if e is Estimand.CONTROL:
            return self.n_control > 0
        return self.n_treated > 0 and self.n_control > 0


@dataclass(frozen=True, eq=False)
class PooledEstimate:
    estimand: Estimand
    weight_scheme: WeightScheme | None
    value: float
    per_center: tuple[CenterEstimate, ...]
    weights: np.ndarray
    if_values: np.ndarray | None = None  # patient-level, naive estimator only
    naive: bool = False

    @property
    def k(self) -> int:
        return len(self.per_center)

    @property
    def center_values(self) -> np.ndarray:
        return np.array([c.value(self.estimand) for c in self.per_center])

    @property
    def n_c(self) -> np.ndarray:
        return np.array([c.n_c for c in self.per_center])


def _influence(a, y, p, m1, m0):
    if1 = a / p * (y - m1) + m1
    if0 = (1 - a) / (1 - p) * (y - m0) + m0
    return if1, if0


def _check_inputs(n, *arrays):
    for v in arrays:
        if np.shape(v) != (n,):
            raise ValueError("length mismatch between treatment, outcome, propensity and predictions")


def aipw_center(center_id, treatment, outcome, p_hat, m1_hat, m0_hat) -> CenterEstimate:
    """AIPW counterfactual means and ATE for one center."""
    a = np.asarray(treatment, float)
    y = np.asarray(outcome, float)
    p = np.asarray(p_hat, float)
    m1 = np.asarray(m1_hat, float)
    m0 = np.asarray(m0_hat, float)
    _check_inputs(a.size, y, p, m1, m0)
    if a.size == 0:
        raise ValueError("empty center")
    if np.any((p <= 0) | (p >= 1)):
        raise ValueError("propensities must lie strictly inside (0, 1)")
    if1, if0 = _influence(a, y, p, m1, m0)
    t1 = float(np.mean(if1))
    t0 = float(np.mean(if0))
    return CenterEstimate(
        center_id=str(center_id),
        n_c=int(a.size),
        tau1_hat=t1,
        tau0_hat=t0,
        tau_hat=t1 - t0,
        if_values_treated=if1,
        if_values_control=if0,
        if_values_ate=if1 - if0,
        n_treated=int(a.sum()),
    )


def aipw_by_center(data: TrialDataset, p_hat, m1_hat, m0_hat) -> list[CenterEstimate]:
    """Per-center AIPW estimates in center-enumeration order."""
    n = data.n
    p, m1, m0 = (np.asarray(v, float) for v in (p_hat, m1_hat, m0_hat))
    _check_inputs(n, p, m1, m0)
    if np.any((p <= 0) | (p >= 1)):
        raise ValueError("propensities must lie strictly inside (0, 1)")
    order = np.argsort(data.center, kind="stable")
    bounds = np.concatenate([[0], np.cumsum(data.n_c)])
    a = data.treatment.astype(float)
    if1, if0 = _influence(a, data.outcome, p, m1, m0)
    out = []
    for c in range(data.k):
        idx = order[bounds[c]:bounds[c + 1]]
        i1, i0 = if1[idx], if0[idx]
        t1, t0 = float(np.mean(i1)), float(np.mean(i0))
        out.append(CenterEstimate(
            center_id=data.center_ids[c],
            n_c=int(idx.size),
            tau1_hat=t1,
            tau0_hat=t0,
            tau_hat=t1 - t0,
            if_values_treated=i1,
            if_values_control=i0,
            if_values_ate=i1 - i0,
            n_treated=int(a[idx].sum()),
            cluster=None if data.cluster is None else data.cluster[idx],
        ))
    return out


def pool(centers, scheme, estimand, weights=None) -> PooledEstimate:
    """Weighted average of per-center estimates.

    The ATE is formed as pooled treated mean minus pooled control mean so
    that additivity holds exactly.
    """
    centers = tuple(centers)
    if not centers:
        raise ValueError("no centers to pool")
    estimand = Estimand.parse(estimand)
    scheme = None if scheme is None else WeightScheme.parse(scheme)
    if weights is None:
        weights = weights_from_sizes([c.n_c for c in centers], scheme)
    weights = np.asarray(weights, float)
    if weights.shape != (len(centers),):
        raise ValueError("weights do not match centers")
    t1 = float(np.dot(weights, [c.tau1_hat for c in centers]))
    t0 = float(np.dot(weights, [c.tau0_hat for c in centers]))
    value = {Estimand.TREATED: t1, Estimand.CONTROL: t0, Estimand.ATE: t1 - t0}[estimand]
    return PooledEstimate(estimand, scheme, value, centers, weights)


def naive_aipw(data: TrialDataset, fit, policy: PropensityPolicy, estimand, p_hat=None) -> PooledEstimate:
    """AIPW that ignores centers: one sum over every patient.

    ``fit`` must be a GLM without center terms. Patient-level influence
    values are kept for the naive variance.
    """
    if getattr(fit.design, "center_indicators", False):
        raise ModelError("the naive estimator takes a GLM without center terms")
    if policy.variant not in ("marginal", "logistic_covariates"):
        raise ValueError("the naive estimator uses a marginal or covariate-logistic propensity")
    estimand = Estimand.parse(estimand)
    p = fit_propensity(data, policy).p_hat if p_hat is None else np.asarray(p_hat, float)
    m1 = predict_counterfactual(fit, data, 1)
    m0 = predict_counterfactual(fit, data, 0)
    return _naive_from_predictions(data, p, m1, m0, estimand)


def _naive_from_predictions(data, p, m1, m0, estimand):
    if1, if0 = _influence(data.treatment.astype(float), data.outcome, p, m1, m0)
    t1, t0 = float(np.mean(if1)), float(np.mean(if0))
    values = {Estimand.TREATED: (t1, if1), Estimand.CONTROL: (t0, if0), Estimand.ATE: (t1 - t0, if1 - if0)}
    value, ifv = values[estimand]
    centers = tuple(aipw_by_center(data, p, m1, m0))
    w = weights_from_sizes(data.n_c, WeightScheme.EQUAL_PATIENTS)
    return PooledEstimate(estimand, WeightScheme.EQUAL_PATIENTS, value, centers, w, if_values=ifv, naive=True)


def gcomputation_ate(fit, data: TrialDataset) -> float:
    """Standardization estimate: mean over patients of m1 - m0."""
    return float(np.mean(predict_counterfactual(fit, data, 1) - predict_counterfactual(fit, data, 0)))


# ---------------------------------------------------------------------------
# cluster-randomized designs


@dataclass(frozen=True, eq=False)
class ClusterEstimate:
    estimand: Estimand
    value: float
    psi1: np.ndarray  # per-cluster estimates under treatment
    psi0: np.ndarray
    if_treated: np.ndarray  # per-cluster influence values
    if_control: np.ndarray

    @property
    def J(self) -> int:
        return self.psi1.size


def cluster_randomized_mean(data: TrialDataset, p_cluster, m1_hat, m0_hat, estimand=Estimand.TREATED) -> ClusterEstimate:
    """AIPW for designs randomized by cluster, targeting a random cluster.

    ``p_cluster`` is indexed by cluster code and must lie strictly inside
    (0, 1). ``m1_hat``/``m0_hat`` are per-patient predictions.
    """
    if data.cluster is None:
        raise DataError("dataset has no cluster column")
    estimand = Estimand.parse(estimand)
    J = data.J
    p = np.asarray(p_cluster, float)
    if p.shape != (J,):
        raise ValueError("one propensity per cluster is required")
    if np.any((p <= 0) | (p >= 1)):
        raise ValueError("cluster propensities must lie strictly inside (0, 1)")
    m1 = np.asarray(m1_hat, float)
    m0 = np.asarray(m0_hat, float)
    _check_inputs(data.n, m1, m0)
    g = data.cluster
    size = np.bincount(g, minlength=J).astype(float)
    a = np.bincount(g, weights=data.treatment, minlength=J) / size
    if np.any((a != 0) & (a != 1)):
        raise DataError("treatment varies within a cluster")
    ybar = np.bincount(g, weights=data.outcome, minlength=J) / size
    m1bar = np.bincount(g, weights=m1, minlength=J) / size
    m0bar = np.bincount(g, weights=m0, minlength=J) / size
    # treatment and propensity are constant within a cluster, so the patient
    # average collapses onto cluster means
    psi1 = a / p * (ybar - m1bar) + m1bar
    psi0 = (1 - a) / (1 - p) * (ybar - m0bar) + m0bar
    t1, t0 = float(np.mean(psi1)), float(np.mean(psi0))
    value = {Estimand.TREATED: t1, Estimand.CONTROL: t0, Estimand.ATE: t1 - t0}[estimand]
    return ClusterEstimate(estimand, value, psi1, psi0, psi1.copy(), psi0.copy())


# ---------------------------------------------------------------------------
# estimator roster

ROSTER = ("Naive", "Fixed", "Mixed(1|c)", "Mixed(1|c) Sam", "Mixed(1+A|c)", "Mixed(1+A|c) Sam")
PROPOSED = ROSTER[1:]
MIXED = ROSTER[2:]


@dataclass(frozen=True)
class EstimatorOptions:
    draws: int = 1000
    seed: int = 0
    couple_arms: bool = True
    nagq: int = 1
    propensity: PropensityPolicy = field(default_factory=PropensityPolicy)
    naive_propensity: PropensityPolicy = field(default_factory=lambda: PropensityPolicy("marginal"))
    covariate_columns: tuple[int, ...] | None = None  # None: every covariate


@dataclass(frozen=True, eq=False)
class EstimatorResult:
    name: str
    adjusted: bool
    centers: tuple[CenterEstimate, ...]
    naive: bool
    p_hat: np.ndarray
    m1_hat: np.ndarray
    m0_hat: np.ndarray
    n_clamped: int = 0
    outcome_fit: object = None
    data: TrialDataset | None = None

    @property
    def label(self) -> str:
        return roster_label(self.name, self.adjusted)

    def pooled(self, estimand, scheme) -> PooledEstimate:
        estimand = Estimand.parse(estimand)
        if self.naive:
            return _naive_from_predictions(self.data, self.p_hat, self.m1_hat, self.m0_hat, estimand)
        return pool(self.centers, scheme, estimand)


def roster_label(name: str, adjusted: bool) -> str:
    return f"{name} adj" if adjusted else name


def parse_roster_label(label: str) -> tuple[str, bool]:
    label = label.strip()
    adjusted = label.endswith(" adj")
    name = label[:-4] if adjusted else label
    if name not in ROSTER:
        raise ConfigError(f"unknown estimator {label!r}; expected one of {', '.join(ROSTER)} (optionally with ' adj')")
    return name, adjusted


class FitCache:
    """Shares outcome and propensity fits across roster entries on one dataset."""

    def __init__(self, data: TrialDataset):
        self.data = data
        self._store = {}

    def get(self, key, build):
        if key not in self._store:
            try:
                self._store[key] = ("ok", build())
            except Exception as exc:  # cache failures so every dependent estimator reports them
                self._store[key] = ("err", exc)
        status, value = self._store[key]
        if status == "err":
            raise value
        return value


def _outcome_fit(data, name, covs, cache, options):
    if name == "Naive":
        design = DesignSpec(covariate_columns=covs)
        return cache.get(("glm", design), lambda: _quiet(fit_glm, data, design))
    if name == "Fixed":
        design = DesignSpec(covariate_columns=covs, center_indicators=True)
        return cache.get(("glm", design), lambda: _quiet(fit_glm, data, design))
    design = DesignSpec(covariate_columns=covs)
    re = RandomEffectsSpec(random_treatment_slope="1+A" in name)
    if data.family is Family.GAUSSIAN:
        return cache.get(("lmm", design, re), lambda: fit_lmm(data, design, re))
    return cache.get(("glmm", design, re, options.nagq), lambda: fit_glmm_logit(data, design, re, nagq=options.nagq))


def _quiet(fn, *args):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return fn(*args)


def run_estimator(data: TrialDataset, name: str, adjusted: bool = False, cache: FitCache | None = None,
                  options: EstimatorOptions | None = None) -> EstimatorResult:
    """Fit the models behind one roster entry and return its per-center estimates."""
    if name not in ROSTER:
        raise ValueError(f"unknown estimator {name!r}")
    options = EstimatorOptions() if options is None else options
    cache = FitCache(data) if cache is None else cache
    if adjusted:
        covs = tuple(range(data.covariates.shape[1])) if options.covariate_columns is None else options.covariate_columns
    else:
        covs = ()
    fit = _outcome_fit(data, name, covs, cache, options)
    naive = name == "Naive"
    policy = options.naive_propensity if naive else options.propensity
    prop: PropensityResult = cache.get(("propensity", policy), lambda: fit_propensity(data, policy))
    if name in ("Naive", "Fixed"):
        m1 = predict_counterfactual(fit, data, 1)
        m0 = predict_counterfactual(fit, data, 0)
    else:
        variant = "sampled" if name.endswith("Sam") else "blup"
        mode = PredictionMode(variant, options.draws, options.seed, options.couple_arms)
        m1 = predict_counterfactual_mixed(fit, data, 1, mode)
        m0 = predict_counterfactual_mixed(fit, data, 0, mode)
    centers = tuple(aipw_by_center(data, prop.p_hat, m1, m0))
    return EstimatorResult(name, adjusted, centers, naive, prop.p_hat, m1, m0, prop.n_clamped, fit, data)
