"""Variance estimation for pooled AIPW estimators.

Per-center estimates are treated as a random-effects meta-analysis: each
center's estimate scatters around the overall effect with its own sampling
variance plus a shared heterogeneity variance. Three heterogeneity
estimators are offered (moment, iterated REML, debiased) together with
degrees-of-freedom rules, t intervals, a nested variance-components route
for data with clusters inside centers, and the cluster-level variance used
when clusters are the randomization unit.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .dataset import WeightScheme
from .estimators import Estimand, PooledEstimate
from .mixedmodel import fit_nested_lmm

METHODS = ("reml", "dl", "db")
REML_TOL = 1e-8
REML_MAX_ITER = 500
ZERO_SPREAD = 1e-10


@dataclass(frozen=True)
class HeterogeneityEstimate:
    method: str
    sigma2_u: float
    pre_truncation: float | None = None
    iterations: int = 0
    converged: bool = True


@dataclass(frozen=True, eq=False)
class PooledInference:
    estimand: Estimand
    estimate: float
    se_naive: float | None
    se_by_method: dict
    df: float
    rho_hat: float
    intervals: dict
    level: float = 0.95
    df_by_method: dict = field(default_factory=dict)
    rho_by_method: dict = field(default_factory=dict)
    heterogeneity: dict = field(default_factory=dict)
    sigma2_c: np.ndarray | None = None
    fallback: np.ndarray | None = None
    quantile: str = "t"

    @property
    def n_fallback(self) -> int:
        return 0 if self.fallback is None else int(self.fallback.sum())


def naive_variance(if_values) -> float:
    """Sample variance of patient-level influence values over n."""
    v = np.asarray(if_values, float)
    if v.size < 2:
        raise ValueError("need at least 2 influence values")
    return float(np.var(v, ddof=1) / v.size)


def _raw_center_variance(center, estimand) -> float:
    v = center.if_values(estimand)
    if v.size < 2 or not center.has_required_arms(estimand):
        return np.nan
    s = float(np.var(v, ddof=1) / v.size)
    # rounding noise on constant values counts as zero spread
    scale = float(np.max(np.abs(v)))
    return s if s > (ZERO_SPREAD * scale) ** 2 / v.size else 0.0


def within_center_variances(centers, estimand) -> tuple[np.ndarray, np.ndarray]:
    """Per-center variances of the center estimates, with fallback flags.

    Centers with a single patient, a missing arm, or zero spread get the mean
    of the well-defined values instead; the boolean mask marks them.
    """
    estimand = Estimand.parse(estimand)
    raw = np.array([_raw_center_variance(c, estimand) for c in centers])
    bad = ~np.isfinite(raw) | (raw <= 0)
    if bad.all():
        raise ValueError("no center has a usable within-center variance")
    out = raw.copy()
    out[bad] = np.mean(raw[~bad])
    return out, bad


def within_center_variance(center, estimand, fallback=None) -> tuple[float, bool]:
    """One center's variance; ``fallback`` is substituted (and flagged) when undefined.

    Zero spread is returned as 0 here; only the vector form above replaces it,
    since the heterogeneity estimators need positive variances.
    """
    v = _raw_center_variance(center, Estimand.parse(estimand))
    if np.isfinite(v):
        return v, False
    if fallback is None:
        raise ValueError("within-center variance undefined and no fallback given")
    return float(fallback), True


def _check(tau_hats, sigma2_cs):
    t = np.asarray(tau_hats, float)
    s = np.asarray(sigma2_cs, float)
    if t.size < 2:
        raise ValueError("need at least 2 centers")
    if s.shape != t.shape:
        raise ValueError("tau_hats and sigma2_cs differ in length")
    return t, s


def dl_heterogeneity(tau_hats, sigma2_cs) -> HeterogeneityEstimate:
    """Method-of-moments heterogeneity variance, truncated at zero."""
    t, s = _check(tau_hats, sigma2_cs)
    if np.any(s <= 0):
        raise ValueError("within-center variances must be positive")
    w = 1.0 / s
    sw = w.sum()
    t_star = np.dot(w, t) / sw
    Q = np.dot(w, (t - t_star) ** 2)
    raw = (Q - (t.size - 1)) / (sw - np.dot(w, w) / sw)
    return HeterogeneityEstimate("dl", max(0.0, float(raw)), pre_truncation=float(raw))


def reml_loglik(tau_hats, sigma2_cs, sigma2_u) -> float:
    """Restricted log-likelihood of the normal random-effects model."""
    t, s = _check(tau_hats, sigma2_cs)
    v = s + sigma2_u
    w = 1.0 / v
    t_star = np.dot(w, t) / w.sum()
    return float(-0.5 * t.size * np.log(2 * np.pi) - 0.5 * np.sum(np.log(v))
                 - 0.5 * np.sum((t - t_star) ** 2 * w) - 0.5 * np.log(w.sum()))


def reml_heterogeneity(tau_hats, sigma2_cs, tol=REML_TOL, max_iter=REML_MAX_ITER, exact=True) -> HeterogeneityEstimate:
    """REML by fixed-point iteration started at the moment estimate.

    With ``exact`` the update solves the REML score equation, so the limit
    maximizes ``reml_loglik`` on [0, inf). ``exact=False`` uses the cheaper
    k/(k-1) rescaled update, which agrees with it when all within-center
    variances are equal and is only approximate otherwise.
    """
    t, s = _check(tau_hats, sigma2_cs)
    k = t.size
    cur = dl_heterogeneity(t, s).sigma2_u
    for it in range(1, max_iter + 1):
        v = s + cur
        w = 1.0 / v
        t_star = np.dot(w, t) / w.sum()
        w2 = w * w
        if exact:
            new = float(np.dot(w2, (t - t_star) ** 2 - s) / w2.sum() + 1.0 / w.sum())
        else:
            new = float(np.dot(w2, k / (k - 1) * (t - t_star) ** 2 - s) / w2.sum())
        new = max(0.0, new)
        if abs(new - cur) <= tol:
            return HeterogeneityEstimate("reml", new, iterations=it)
        cur = new
    warnings.warn("REML heterogeneity iteration did not converge", stacklevel=2)
    return HeterogeneityEstimate("reml", cur, iterations=max_iter, converged=False)


def db_heterogeneity(tau_hats, sigma2_cs, pooled_tau) -> HeterogeneityEstimate:
    """Sample heterogeneity variance minus the expected estimation noise."""
    t, s = _check(tau_hats, sigma2_cs)
    k = t.size
    raw = float(np.mean((t - pooled_tau) ** 2) - (k - 1) / k ** 2 * np.sum(s))
    return HeterogeneityEstimate("db", max(0.0, raw), pre_truncation=raw)


def heterogeneity(method, tau_hats, sigma2_cs, pooled_tau=None) -> HeterogeneityEstimate:
    if method == "dl":
        return dl_heterogeneity(tau_hats, sigma2_cs)
    if method == "reml":
        return reml_heterogeneity(tau_hats, sigma2_cs)
    if method == "db":
        if pooled_tau is None:
            raise ValueError("the debiased estimator needs the pooled estimate")
        return db_heterogeneity(tau_hats, sigma2_cs, pooled_tau)
    raise ValueError(f"unknown heterogeneity method {method!r}")


def degrees_of_freedom(n_c, rho) -> float:
    """Effective degrees of freedom under intraclass correlation ``rho``."""
    n_c = np.asarray(n_c, float)
    return float(np.sum(n_c / (1.0 + (n_c - 1.0) * rho)) - 1.0)


def _quantile(level, df, quantile):
    q = 1 - (1 - level) / 2
    if quantile == "normal":
        return float(stats.norm.ppf(q))
    return float(stats.t.ppf(q, df))


def total_inference(pooled: PooledEstimate, methods=METHODS, level=0.95, quantile="t") -> PooledInference:
    """Standard errors, degrees of freedom and intervals for a pooled estimate.

    For the naive estimator only the patient-level variance is reported. For
    the proposed estimators each method's heterogeneity variance is added to
    the within-center variances, weighted by the squared pooling weights.
    ``quantile='normal'`` swaps the t quantile for the normal one.
    """
    if quantile not in ("t", "normal"):
        raise ValueError("quantile must be 't' or 'normal'")
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    est = pooled.value
    if pooled.naive:
        se = float(np.sqrt(naive_variance(pooled.if_values)))
        df = float(pooled.if_values.size - 1)
        h = _quantile(level, df, quantile) * se
        return PooledInference(pooled.estimand, est, se, {}, df, 0.0, {"naive": (est - h, est + h)},
                               level, quantile=quantile)
    methods = tuple(methods)
    if not methods:
        raise ValueError("no variance method requested")
    s2c, flag = within_center_variances(pooled.per_center, pooled.estimand)
    tau = pooled.center_values
    w2 = pooled.weights ** 2
    n_c = pooled.n_c
    sig2 = float(np.mean(s2c))
    se_by, df_by, rho_by, het, ci = {}, {}, {}, {}, {}
    for m in methods:
        h_est = heterogeneity(m, tau, s2c, est)
        s2u = h_est.sigma2_u
        se = float(np.sqrt(np.dot(w2, s2c + s2u)))
        rho = s2u / (s2u + sig2)
        df = degrees_of_freedom(n_c, rho)
        half = _quantile(level, df, quantile) * se
        het[m], se_by[m], rho_by[m], df_by[m] = h_est, se, rho, df
        ci[m] = (est - half, est + half)
    first = methods[0]
    return PooledInference(
        estimand=pooled.estimand,
        estimate=est,
        se_naive=None,
        se_by_method=se_by,
        df=df_by[first],
        rho_hat=rho_by[first],
        intervals=ci,
        level=level,
        df_by_method=df_by,
        rho_by_method=rho_by,
        heterogeneity=het,
        sigma2_c=s2c,
        fallback=flag,
        quantile=quantile,
    )


def size_effect_correlation(pooled: PooledEstimate) -> float:
    """Pearson correlation between center size and center estimate (a diagnostic)."""
    n = pooled.n_c.astype(float)
    t = pooled.center_values
    if np.ptp(n) == 0 or np.ptp(t) == 0:
        return float("nan")
    return float(np.corrcoef(n, t)[0, 1])


# ---------------------------------------------------------------------------
# clusters within centers


@dataclass(frozen=True)
class HierarchicalVariance:
    variance: float
    var_center: float
    var_cluster: float
    var_residual: float
    cluster_dropped: bool = False

    @property
    def se(self) -> float:
        return float(np.sqrt(self.variance))


def hierarchical_components(var_center, var_cluster, var_residual, center, cluster, omega) -> float:
    """Variance of the weighted mean under a center + cluster + residual decomposition.

    ``omega`` holds one weight per center code; ``center``/``cluster`` are
    per-patient integer codes with clusters unique across centers.
    """
    center = np.asarray(center, np.int64)
    cluster = np.asarray(cluster, np.int64)
    omega = np.asarray(omega, float)
    k = omega.size
    n_c = np.bincount(center, minlength=k).astype(float)
    n_j = np.bincount(cluster).astype(float)
    center_of = np.zeros(n_j.size, dtype=np.int64)
    center_of[cluster] = center
    sum_nj2 = np.bincount(center_of, weights=n_j ** 2, minlength=k)
    wn = np.dot(omega, n_c)
    w2n2 = np.dot(omega ** 2, n_c ** 2)
    w2nt2 = np.dot(omega ** 2, sum_nj2)
    w2n = np.dot(omega ** 2, n_c)
    return float((var_center * w2n2 + var_cluster * w2nt2 + var_residual * w2n) / wn ** 2)


def hierarchical_variance(if_values, center, cluster, omega) -> HierarchicalVariance:
    """Variance of a weighted mean of influence values with clusters nested in centers.

    Variance components are estimated by REML on the influence values. When
    no center holds two or more clusters the cluster level cannot be
    separated from the center level and is dropped with a warning.
    """
    v = np.asarray(if_values, float)
    center = np.asarray(center, np.int64)
    cluster = np.asarray(cluster, np.int64)
    k = int(center.max()) + 1
    center_of = np.zeros(int(cluster.max()) + 1, dtype=np.int64)
    center_of[cluster] = center
    J_c = np.bincount(center_of, minlength=k)
    drop = bool(np.all(J_c < 2))
    if drop:
        warnings.warn("no center has two or more clusters; cluster variance dropped", stacklevel=2)
    fit = fit_nested_lmm(v, center, cluster, drop_cluster=drop)
    var = hierarchical_components(fit.var_center, fit.var_cluster, fit.var_residual, center, cluster, omega)
    return HierarchicalVariance(var, fit.var_center, fit.var_cluster, fit.var_residual, drop)


def hierarchical_weights(n_c, scheme) -> np.ndarray:
    """Per-patient weights omega_c: 1/(k n_c) for centers, 1/n for patients."""
    n_c = np.asarray(n_c, float)
    if WeightScheme.parse(scheme) is WeightScheme.EQUAL_CENTERS:
        return 1.0 / (n_c.size * n_c)
    return np.full(n_c.size, 1.0 / n_c.sum())


def cluster_variance(cluster_if_values, J=None) -> float:
    """Sample variance of cluster-level influence values over J."""
    v = np.asarray(cluster_if_values, float)
    J = v.size if J is None else int(J)
    if J < 2 or v.size < 2:
        raise ValueError("need at least 2 clusters")
    return float(np.var(v, ddof=1) / J)


def cluster_ate_variance(if_treated, if_control) -> float:
    """Variance of the cluster-randomized ATE: arm variances summed, clusters independent."""
    a = np.asarray(if_treated, float)
    b = np.asarray(if_control, float)
    J = a.size
    if J < 2 or b.size != J:
        raise ValueError("need matching cluster vectors with at least 2 clusters")
    return float((J * np.var(a, ddof=1) + J * np.var(b, ddof=1)) / J ** 2)
