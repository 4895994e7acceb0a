import dataclasses

import numpy as np
import pytest
from scipy.special import expit, logit

from clustrial.dataset import TrialDataset
from clustrial.errors import DataError
from clustrial.propensity import PropensityPolicy, cluster_propensity, estimate_propensity, fit_propensity


def trial(a, center=None, x=None, seed=0):
    n = len(a)
    rng = np.random.default_rng(seed)
    center = np.arange(n) % 2 if center is None else center
    x = rng.normal(size=(n, 1)) if x is None else x
    return TrialDataset.from_arrays(center, a, rng.normal(size=n), x, "gaussian", ("x",))


def test_marginal_proportion():
    p = estimate_propensity(trial([1, 1, 1, 1, 0, 0, 0, 0, 0, 0]), PropensityPolicy("marginal"))
    np.testing.assert_allclose(p, 0.4)


def test_policy_validation():
    with pytest.raises(ValueError):
        PropensityPolicy("oracle")
    with pytest.raises(ValueError):
        PropensityPolicy("marginal", clamp=(0.5, 0.2))


def test_single_arm_rejected():
    with pytest.raises(DataError):
        estimate_propensity(trial([1] * 6), PropensityPolicy("marginal"))


def test_clamp_counts():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(400, 1)) * 3
    a = (rng.random(400) < expit(3 * x[:, 0])).astype(int)
    res = fit_propensity(trial(a, x=x), PropensityPolicy("logistic_covariates", (0,), clamp=(0.05, 0.95)))
    assert res.n_clamped > 0
    assert res.p_hat.min() >= 0.05 and res.p_hat.max() <= 0.95


def test_mixed_with_zero_variance_equals_fixed_logistic():
    # treatment independent of center: the center variance is estimated at 0
    rng = np.random.default_rng(2)
    center = np.repeat(np.arange(20), 15)
    x = rng.normal(size=(300, 1))
    a = np.tile([0, 1, 0, 1, 1, 0, 1, 0, 0, 1, 1, 0, 1, 0, 1], 20)
    d = trial(a, center=center, x=x)
    mixed = fit_propensity(d, PropensityPolicy("mixed_logistic", (0,)))
    assert mixed.variance == 0.0
    fixed = estimate_propensity(d, PropensityPolicy("logistic_covariates", (0,)))
    np.testing.assert_allclose(mixed.p_hat, fixed, atol=1e-6)


def test_all_treated_center_is_shrunk():
    rng = np.random.default_rng(0)
    k, m = 30, 10
    center = np.repeat(np.arange(k), m)
    v = rng.normal(scale=0.6, size=k)
    a = (rng.random(k * m) < expit(v[center])).astype(int)
    a[center == 0] = 1
    d = trial(a, center=center)
    res = fit_propensity(d, PropensityPolicy("mixed_logistic"))
    p_marg = a.mean()
    p0 = res.p_hat[center == 0][0]
    assert p_marg < p0 < 0.99
    # linear-probability approximation of the shrunken center effect:
    # lambda_c = s2 / (s2 + 1 / (n_c p (1 - p))) applied to the working residual
    lam = res.variance / (res.variance + 1 / (m * p_marg * (1 - p_marg)))
    approx = expit(logit(p_marg) + lam * (1 - p_marg) / (p_marg * (1 - p_marg)))
    assert p0 == pytest.approx(approx, abs=0.02)


def cluster_trial(a_cluster, sizes, x=None):
    cluster = np.repeat(np.arange(len(sizes)), sizes)
    a = np.asarray(a_cluster)[cluster]
    n = cluster.size
    x = np.zeros((n, 1)) if x is None else x
    return TrialDataset.from_arrays(cluster, a, np.zeros(n), x, "gaussian", ("x",), cluster=cluster)


def test_cluster_propensity_fraction_without_covariates():
    d = cluster_trial([1, 0, 0, 1, 1, 0, 0, 0], [3, 2, 4, 5, 2, 2, 3, 1])
    np.testing.assert_allclose(cluster_propensity(d), 3 / 8)


def test_cluster_propensity_rejects_mixed_treatment():
    d = cluster_trial([1, 0, 1, 0], [2, 2, 2, 2])
    d = dataclasses.replace(d, treatment=np.array([1, 0, 0, 0, 1, 1, 0, 0]))
    with pytest.raises(DataError, match="varies"):
        cluster_propensity(d)


def test_cluster_propensity_rejects_single_arm():
    with pytest.raises(DataError):
        cluster_propensity(cluster_trial([1, 1, 1], [2, 2, 2]))
