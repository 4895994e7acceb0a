"""Synthetic multi-center trials with center-level random effects.

Covariates are drawn from configurable parametric laws; outcomes follow
linear (continuous) or logistic (binary) mixed models with random
intercept, treatment-slope and covariate-slope terms, in a correctly
specified and a misspecified-truth variant each.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import integrate, stats
from scipy.special import expit

from .dataset import TrialDataset, WeightScheme
from .errors import ConfigError
from .estimators import Estimand
from .rng import stream


@dataclass(frozen=True)
class SizeSetting:
    k: int
    avg: float
    min: int
    max: int

    def __post_init__(self):
        if self.k < 2 or not (1 <= self.min <= self.avg <= self.max):
            raise ConfigError(f"invalid center-size setting {self}")

    @property
    def p_star(self) -> float:
        return 0.0 if self.max == self.min else (self.avg - self.min) / (self.max - self.min)


SETTINGS = {
    1: SizeSetting(100, 5, 1, 24),
    2: SizeSetting(50, 10, 2, 48),
    3: SizeSetting(10, 50, 25, 80),
    4: SizeSetting(5, 100, 50, 150),
    5: SizeSetting(100, 100, 50, 145),
}

# random-effect variance triples (intercept, treatment, covariate slope)
CONTINUOUS_GRID = (
    (0.0, 0.0, 0.0), (0.05, 0.0, 0.0), (0.10, 0.0, 0.0), (0.15, 0.0, 0.0),
    (0.10, 0.10, 0.0), (0.15, 0.15, 0.0), (0.15, 0.15, 4e-6),
)
BINARY_GRID = (
    (0.0, 0.0, 0.0), (0.25, 0.0, 0.0), (0.5, 0.0, 0.0), (0.5, 0.25, 0.0),
    (0.5, 0.25, 0.25), (0.5, 0.5, 0.0), (0.75, 0.5, 0.5),
)


@dataclass(frozen=True)
class ContinuousCovariates:
    z30_p: float = 0.55
    age_mean: float = 35.0
    age_sd: float = 8.7
    cd40_mean: float = 350.0
    cd40_sd: float = 119.0
    wt_mean: float = 75.0
    wt_sd: float = 13.3

    names = ("z30", "age", "CD40", "wt")

    def draw(self, rng, n):
        z30 = (rng.random(n) < self.z30_p).astype(float)
        age = rng.normal(self.age_mean, self.age_sd, n)
        cd40 = _truncnorm0(rng, self.cd40_mean, self.cd40_sd, n)
        wt = rng.normal(self.wt_mean, self.wt_sd, n)
        return np.column_stack([z30, age, cd40, wt])

    @property
    def cd40_law(self):
        a = -self.cd40_mean / self.cd40_sd
        return stats.truncnorm(a, np.inf, loc=self.cd40_mean, scale=self.cd40_sd)


@dataclass(frozen=True)
class BinaryCovariates:
    p_severe: float = 0.3
    p_moderate: float = 0.4
    age_mean: float = 61.0
    age_sd: float = 12.0
    ichv_mean: float = 45.0
    ichv_sd: float = 18.0

    names = ("severe", "moderate", "age", "ichv")

    def __post_init__(self):
        if self.p_severe < 0 or self.p_moderate < 0 or self.p_severe + self.p_moderate > 1:
            raise ConfigError("GCS category probabilities must be nonnegative and sum to at most 1")

    def draw(self, rng, n):
        u = rng.random(n)
        severe = (u < self.p_severe).astype(float)
        moderate = ((u >= self.p_severe) & (u < self.p_severe + self.p_moderate)).astype(float)
        age = rng.normal(self.age_mean, self.age_sd, n)
        ichv = _truncnorm0(rng, self.ichv_mean, self.ichv_sd, n)
        return np.column_stack([severe, moderate, age, ichv])


def _truncnorm0(rng, mean, sd, n):
    """Normal(mean, sd) truncated to [0, inf), by inverse CDF."""
    lo = stats.norm.cdf(-mean / sd)
    u = lo + (1 - lo) * rng.random(n)
    return mean + sd * stats.norm.ppf(u)


@dataclass(frozen=True)
class DgmSpec:
    endpoint: str = "continuous"
    misspecified: bool = False
    sigma2_b0: float = 0.0
    sigma2_b1: float = 0.0
    sigma2_b2: float = 0.0
    setting: int | SizeSetting = 1
    informative_size: bool = False
    kendall_tau: float = 0.5
    seed: int = 0
    continuous_covariates: ContinuousCovariates = field(default_factory=ContinuousCovariates)
    binary_covariates: BinaryCovariates = field(default_factory=BinaryCovariates)

    def __post_init__(self):
        if self.endpoint not in ("continuous", "binary"):
            raise ConfigError(f"endpoint must be 'continuous' or 'binary', got {self.endpoint!r}")
        if isinstance(self.setting, int) and self.setting not in SETTINGS:
            raise ConfigError(f"setting must be one of 1-5, got {self.setting}")
        if min(self.sigma2_b0, self.sigma2_b1, self.sigma2_b2) < 0:
            raise ConfigError("random-effect variances must be nonnegative")
        if not -1 < self.kendall_tau < 1:
            raise ConfigError("kendall_tau must lie in (-1, 1)")

    @property
    def sizes(self) -> SizeSetting:
        return SETTINGS[self.setting] if isinstance(self.setting, int) else self.setting

    @property
    def family(self) -> str:
        return "gaussian" if self.endpoint == "continuous" else "binomial"

    @property
    def covariate_law(self):
        return self.continuous_covariates if self.endpoint == "continuous" else self.binary_covariates

    @property
    def covariate_names(self) -> tuple[str, ...]:
        return self.covariate_law.names

    def with_seed(self, seed) -> "DgmSpec":
        return replace(self, seed=int(seed))


@dataclass(frozen=True, eq=False)
class SimulatedTrial:
    data: TrialDataset
    b: np.ndarray  # (k, 3) center effects on intercept, treatment, covariate slope
    sizes: np.ndarray


def _copula_rho(tau):
    # Kendall's tau to the Pearson correlation of a Gaussian copula
    return float(np.sin(np.pi * tau / 2))


def draw_centers(spec: DgmSpec, rng, k=None):
    """Center sizes and random effects for ``k`` centers."""
    s = spec.sizes
    k = s.k if k is None else k
    z = rng.standard_normal((k, 3))
    b = z * np.sqrt([spec.sigma2_b0, spec.sigma2_b1, spec.sigma2_b2])
    span = s.max - s.min
    if spec.informative_size:
        rho = _copula_rho(spec.kendall_tau)
        zs = rho * z[:, 1] + np.sqrt(1 - rho ** 2) * rng.standard_normal(k)
        u = np.clip(stats.norm.cdf(zs), 1e-15, 1 - 1e-15)
        sizes = s.min + stats.binom.ppf(u, span, s.p_star).astype(np.int64)
    else:
        sizes = s.min + rng.binomial(span, s.p_star, k)
    return np.asarray(sizes, dtype=np.int64), b


def linear_predictor(spec: DgmSpec, X, a, b_rows):
    """Outcome linear predictor (mean for continuous, logit for binary)."""
    b0, b1, b2 = b_rows[:, 0], b_rows[:, 1], b_rows[:, 2]
    if spec.endpoint == "continuous":
        z30, age, cd40, wt = X.T
        if not spec.misspecified:
            return (4.06 + b0 + (0.29 + b1) * a + (4e-3 + b2) * cd40 - 0.15 * z30
                    - 4e-4 * age + 5e-3 * wt)
        return (3.71 + b0 + (0.29 + b1) * a + (8e-2 + b2) * np.sqrt(cd40) - 0.14 * z30
                - 2e-4 * age - 1e-3 * wt + 1e-5 * cd40 * wt)
    severe, moderate, age, ichv = X.T
    if not spec.misspecified:
        return (3.22 + b0 + (0.28 + b1) * a - (1.71 + b2) * severe - 0.72 * moderate
                - 4e-2 * age - 7e-3 * ichv)
    return (5.52 + b0 + (0.29 + b1) * a - (1.72 + b2) * severe - 0.72 * moderate
            - 0.12 * age + 7e-4 * age ** 2 - 7e-3 * ichv)


def generate_with_truth(spec: DgmSpec, seed=None) -> SimulatedTrial:
    """Draw one trial and return it with its center effects."""
    rng = stream(spec.seed if seed is None else seed)
    sizes, b = draw_centers(spec, rng)
    k = sizes.size
    center = np.repeat(np.arange(k), sizes)
    n = center.size
    X = spec.covariate_law.draw(rng, n)
    a = (rng.random(n) < 0.5).astype(np.int8)
    eta = linear_predictor(spec, X, a, b[center])
    if spec.endpoint == "continuous":
        y = eta + rng.standard_normal(n)
    else:
        y = (rng.random(n) < expit(eta)).astype(float)
    labels = [f"c{c + 1:03d}" for c in range(k)]
    data = TrialDataset.from_arrays(
        np.asarray(labels, dtype=object)[center], a, y, X,
        family=spec.family, covariate_names=spec.covariate_names,
    )
    return SimulatedTrial(data, b, sizes)


def generate(spec: DgmSpec, seed=None) -> TrialDataset:
    """Draw one trial under ``spec`` (``seed`` overrides ``spec.seed``)."""
    return generate_with_truth(spec, seed).data


# ---------------------------------------------------------------------------
# true estimands


@dataclass(frozen=True)
class TrueEstimand:
    estimand: Estimand
    scheme: WeightScheme
    value: float
    method: str
    mc_se: float | None = None


def _closed_form_mean(spec: DgmSpec, arm: int) -> float | None:
    if spec.endpoint != "continuous":
        return None
    law = spec.continuous_covariates
    cd40 = law.cd40_law
    if not spec.misspecified:
        return (4.06 + 0.29 * arm + 4e-3 * cd40.mean() - 0.15 * law.z30_p
                - 4e-4 * law.age_mean + 5e-3 * law.wt_mean)
    e_sqrt = integrate.quad(lambda x: np.sqrt(x) * cd40.pdf(x), 0, np.inf, epsabs=1e-12, epsrel=1e-12)[0]
    return (3.71 + 0.29 * arm + 8e-2 * e_sqrt - 0.14 * law.z30_p - 2e-4 * law.age_mean
            - 1e-3 * law.wt_mean + 1e-5 * cd40.mean() * law.wt_mean)


def true_estimand(spec: DgmSpec, estimand=Estimand.ATE, scheme=WeightScheme.EQUAL_CENTERS,
                  draws: int = 10_000_000, seed: int = 20240101, method: str = "auto") -> TrueEstimand:
    """Population value of a counterfactual mean or the ATE.

    Continuous endpoints with non-informative sizes have exact values (the
    ATE is the treatment coefficient). Everything else is integrated by Monte
    Carlo over centers, covariates and random effects: each draw is one
    center with one patient, and patient weighting weights by center size.
    """
    estimand = Estimand.parse(estimand)
    scheme = WeightScheme.parse(scheme)
    if method not in ("auto", "monte_carlo"):
        raise ConfigError("method must be 'auto' or 'monte_carlo'")
    if method == "auto" and not spec.informative_size and spec.endpoint == "continuous":
        if estimand is Estimand.ATE:
            return TrueEstimand(estimand, scheme, 0.29, "closed_form")
        arm = 1 if estimand is Estimand.TREATED else 0
        return TrueEstimand(estimand, scheme, float(_closed_form_mean(spec, arm)), "closed_form")
    return _mc_truth(spec, estimand, scheme, draws, seed)


def _mc_truth(spec, estimand, scheme, draws, seed, chunk=1_000_000):
    inv = (lambda e: e) if spec.endpoint == "continuous" else expit
    sw = swv = sw2 = swv2 = 0.0
    s_w_wv = 0.0
    m = 0
    for i, start in enumerate(range(0, draws, chunk)):
        size = min(chunk, draws - start)
        rng = stream(seed, i)
        sizes, b = draw_centers(spec, rng, k=size)
        X = spec.covariate_law.draw(rng, size)
        if estimand is Estimand.TREATED:
            v = inv(linear_predictor(spec, X, 1.0, b))
        elif estimand is Estimand.CONTROL:
            v = inv(linear_predictor(spec, X, 0.0, b))
        else:
            v = inv(linear_predictor(spec, X, 1.0, b)) - inv(linear_predictor(spec, X, 0.0, b))
        w = np.ones(size) if scheme is WeightScheme.EQUAL_CENTERS else sizes.astype(float)
        sw += w.sum()
        swv += np.dot(w, v)
        sw2 += np.dot(w, w)
        swv2 += np.dot(w * v, w * v)
        s_w_wv += np.dot(w, w * v)
        m += size
    value = swv / sw
    # delta-method standard error of a ratio of means
    mw, mwv = sw / m, swv / m
    var_wv = swv2 / m - mwv ** 2
    var_w = sw2 / m - mw ** 2
    cov = s_w_wv / m - mw * mwv
    r = mwv / mw
    se = np.sqrt(max(var_wv - 2 * r * cov + r * r * var_w, 0.0) / m) / mw
    return TrueEstimand(estimand, scheme, float(value), "monte_carlo", float(se))


# ---------------------------------------------------------------------------
# cluster-randomized and three-level fixtures


@dataclass(frozen=True)
class ClusterDgm:
    """Clusters randomized 1:1; outcome with a random cluster intercept."""

    J: int = 60
    mean_size: float = 20.0
    min_size: int = 5
    sigma2_b: float = 0.3
    alpha: float = 1.0
    beta: float = 0.5
    gamma: float = 0.4
    delta: float = 0.3  # cluster-level covariate effect
    endpoint: str = "continuous"
    seed: int = 0

    def __post_init__(self):
        if self.J < 4:
            raise ConfigError("need at least 4 clusters")
        if self.endpoint not in ("continuous", "binary"):
            raise ConfigError("endpoint must be 'continuous' or 'binary'")


def generate_cluster_randomized(spec: ClusterDgm, seed=None) -> TrialDataset:
    """One cluster-randomized trial; each cluster is its own center.

    Covariates: ``x`` (individual, standard normal) and ``w`` (cluster
    level, standard normal). Exactly half the clusters are treated.
    """
    rng = stream(spec.seed if seed is None else seed)
    J = spec.J
    sizes = spec.min_size + rng.poisson(spec.mean_size - spec.min_size, J)
    a_j = np.zeros(J, dtype=np.int8)
    a_j[rng.permutation(J)[: J // 2]] = 1
    b = rng.normal(0.0, np.sqrt(spec.sigma2_b), J)
    w_j = rng.standard_normal(J)
    g = np.repeat(np.arange(J), sizes)
    n = g.size
    x = rng.standard_normal(n)
    eta = spec.alpha + b[g] + spec.beta * a_j[g] + spec.gamma * x + spec.delta * w_j[g]
    if spec.endpoint == "continuous":
        y = eta + rng.standard_normal(n)
        family = "gaussian"
    else:
        y = (rng.random(n) < expit(eta)).astype(float)
        family = "binomial"
    labels = np.array([f"k{j + 1:03d}" for j in range(J)], dtype=object)[g]
    return TrialDataset.from_arrays(labels, a_j[g], y, np.column_stack([x, w_j[g]]), family=family,
                                    covariate_names=("x", "w"), cluster=labels)


def cluster_truth(spec: ClusterDgm, estimand=Estimand.TREATED, draws=2_000_000, seed=7) -> float:
    """Mean counterfactual outcome in a random cluster (exact for continuous)."""
    estimand = Estimand.parse(estimand)
    if spec.endpoint == "continuous":
        m1, m0 = spec.alpha + spec.beta, spec.alpha
    else:
        rng = stream(seed)
        base = (spec.alpha + rng.normal(0, np.sqrt(spec.sigma2_b), draws)
                + spec.gamma * rng.standard_normal(draws) + spec.delta * rng.standard_normal(draws))
        m1, m0 = float(np.mean(expit(base + spec.beta))), float(np.mean(expit(base)))
    return {Estimand.TREATED: m1, Estimand.CONTROL: m0, Estimand.ATE: m1 - m0}[estimand]


@dataclass(frozen=True)
class ThreeLevelFixture:
    """Values = mu + center effect + cluster effect + residual, sizes fixed."""

    k: int = 40
    clusters_per_center: tuple[int, ...] = (2, 3, 4, 5)
    cluster_sizes: tuple[int, ...] = (4, 8, 12, 20)
    mu: float = 0.5
    var_center: float = 0.2
    var_cluster: float = 0.1
    var_residual: float = 1.0
    layout_seed: int = 11

    def layout(self):
        """Fixed (center, cluster) codes per value, drawn once from ``layout_seed``."""
        rng = stream(self.layout_seed)
        J_c = rng.choice(self.clusters_per_center, self.k)
        n_j = rng.choice(self.cluster_sizes, int(J_c.sum()))
        cluster_center = np.repeat(np.arange(self.k), J_c)
        cluster = np.repeat(np.arange(n_j.size), n_j)
        return cluster_center[cluster], cluster

    def draw(self, rng, center, cluster):
        J = int(cluster.max()) + 1
        alpha = rng.normal(0, np.sqrt(self.var_center), self.k)
        b = rng.normal(0, np.sqrt(self.var_cluster), J)
        eps = rng.normal(0, np.sqrt(self.var_residual), center.size)
        return self.mu + alpha[center] + b[cluster] + eps
