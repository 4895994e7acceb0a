"""Randomization-probability models: marginal, covariate logistic, mixed logistic."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .dataset import Family, TrialDataset
from .errors import DataError
from .glm import DesignSpec, _irls, fit_glm, predict_counterfactual
from .mixedmodel import RandomEffectsSpec, fit_glmm_logit, predict_counterfactual_mixed

VARIANTS = ("marginal", "logistic_covariates", "mixed_logistic")


@dataclass(frozen=True)
class PropensityPolicy:
    variant: str = "mixed_logistic"
    covariate_columns: tuple[int, ...] = ()
    clamp: tuple[float, float] = (0.01, 0.99)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown propensity variant {self.variant!r}")
        object.__setattr__(self, "covariate_columns", tuple(int(j) for j in self.covariate_columns))
        lo, hi = (float(v) for v in self.clamp)
        if not 0 < lo < hi < 1:
            raise ValueError("clamp bounds must satisfy 0 < low < high < 1")
        object.__setattr__(self, "clamp", (lo, hi))


@dataclass(frozen=True, eq=False)
class PropensityResult:
    p_hat: np.ndarray
    n_clamped: int
    variance: float | None = None


def _treatment_data(data: TrialDataset) -> TrialDataset:
    a = data.treatment
    if a.min() == a.max():
        raise DataError("both treatment arms must be present")
    return data.with_outcome(a.astype(float), Family.BINOMIAL)


def fit_propensity(data: TrialDataset, policy: PropensityPolicy) -> PropensityResult:
    """Fit the policy's treatment model and return clamped probabilities with diagnostics."""
    tdata = _treatment_data(data)
    var = None
    if policy.variant == "marginal":
        p = np.full(data.n, data.treatment.mean(), dtype=float)
    elif policy.variant == "logistic_covariates":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            fit = fit_glm(tdata, DesignSpec(include_treatment=False, covariate_columns=policy.covariate_columns))
        p = predict_counterfactual(fit, tdata, 0)
    else:
        design = DesignSpec(include_treatment=False, covariate_columns=policy.covariate_columns)
        fit = fit_glmm_logit(tdata, design, RandomEffectsSpec())
        # conditional predictions: each center's own BLUP enters the linear predictor
        p = predict_counterfactual_mixed(fit, tdata, 0)
        var = fit.variance_components["intercept"]
    lo, hi = policy.clamp
    n_clamped = int(np.sum((p < lo) | (p > hi)))
    return PropensityResult(np.clip(p, lo, hi), n_clamped, var)


def estimate_propensity(data: TrialDataset, policy: PropensityPolicy) -> np.ndarray:
    """Per-patient treatment probabilities, clamped to ``policy.clamp``."""
    return fit_propensity(data, policy).p_hat


def cluster_propensity(data: TrialDataset, covariate_columns=(), clamp=(0.01, 0.99)) -> np.ndarray:
    """Per-cluster treatment probabilities for cluster-randomized data.

    A logistic model for the cluster treatment indicator on cluster means of
    the chosen covariates; without covariates this is the treated fraction
    of clusters. The result is indexed by cluster code.
    """
    if data.cluster is None:
        raise DataError("dataset has no cluster column")
    J = data.J
    size = np.bincount(data.cluster, minlength=J)
    a = np.bincount(data.cluster, weights=data.treatment, minlength=J) / size
    if np.any((a != 0) & (a != 1)):
        raise DataError("treatment varies within a cluster")
    if a.min() == a.max():
        raise DataError("both treatment arms must be present among clusters")
    cols = [np.ones(J)]
    for j in covariate_columns:
        cols.append(np.bincount(data.cluster, weights=data.covariates[:, j], minlength=J) / size)
    X = np.column_stack(cols)
    beta, converged, _, _ = _irls(X, a)
    if not converged:
        warnings.warn("cluster-level propensity fit did not converge", stacklevel=2)
    lo, hi = clamp
    return np.clip(expit(X @ beta), lo, hi)
