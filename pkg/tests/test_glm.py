import dataclasses
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import optimize
from scipy.special import expit

from clustrial.dataset import TrialDataset
from clustrial.glm import DesignSpec, design_matrix, fit_glm, predict_counterfactual

INTERCEPT = DesignSpec(include_treatment=False)


def dataset(y, family="gaussian", a=None, x=None, center=None):
    n = len(y)
    a = np.zeros(n, int) if a is None else a
    center = [i % 2 for i in range(n)] if center is None else center
    x = np.zeros((n, 0)) if x is None else np.asarray(x, float).reshape(n, -1)
    names = tuple(f"x{j}" for j in range(x.shape[1]))
    return TrialDataset.from_arrays(center, a, np.asarray(y, float), x, family, names)


def fixture(n=20, seed=0, family="gaussian"):
    rng = np.random.default_rng(seed)
    a = rng.integers(0, 2, n)
    x = rng.normal(size=(n, 2))
    eta = 0.3 + 0.8 * a + x @ [0.5, -0.4]
    if family == "gaussian":
        y = eta + rng.normal(size=n)
    else:
        y = (rng.random(n) < expit(eta)).astype(float)
    center = rng.integers(0, 4, n)
    return TrialDataset.from_arrays(center, a, y, x, family, ("x0", "x1"))


def test_gaussian_intercept_is_mean():
    fit = fit_glm(dataset([1, 2, 3]), INTERCEPT)
    assert fit.coefficients == pytest.approx([2.0])


def test_binomial_symmetric_intercept_zero():
    fit = fit_glm(dataset([1, 1, 0, 0], "binomial"), INTERCEPT)
    assert fit.converged
    assert fit.coefficients[0] == pytest.approx(0.0, abs=1e-12)


def test_gaussian_matches_normal_equations():
    d = fixture(20)
    spec = DesignSpec(covariate_columns=(0,))
    fit = fit_glm(d, spec)
    X = np.column_stack([np.ones(d.n), d.treatment, d.covariates[:, 0]])
    oracle = np.linalg.solve(X.T @ X, X.T @ d.outcome)
    np.testing.assert_allclose(fit.coefficients, oracle, rtol=1e-10, atol=1e-12)


def test_logistic_matches_direct_likelihood_maximization():
    d = fixture(300, seed=2, family="binomial")
    spec = DesignSpec(covariate_columns=(0, 1))
    fit = fit_glm(d, spec)
    X, _ = design_matrix(d, spec)
    y = d.outcome

    def nll(b):
        eta = X @ b
        return np.sum(np.logaddexp(0, eta) - y * eta)

    def grad(b):
        return X.T @ (expit(X @ b) - y)

    ref = optimize.minimize(nll, np.zeros(X.shape[1]), jac=grad, method="BFGS", options={"gtol": 1e-10})
    np.testing.assert_allclose(fit.coefficients, ref.x, atol=1e-6)


def test_predict_gaussian_direct_evaluation():
    d = fixture(10)
    fit = fit_glm(d, DesignSpec(covariate_columns=(0,)))
    fit = dataclasses.replace(fit, coefficients=np.array([1.0, 2.0, 0.0]))
    np.testing.assert_allclose(predict_counterfactual(fit, d, 1), 3.0)


def test_predict_binomial_zero_coefficients():
    d = fixture(60, family="binomial")
    fit = fit_glm(d, DesignSpec(covariate_columns=(0, 1)))
    fit = dataclasses.replace(fit, coefficients=np.zeros(4))
    np.testing.assert_array_equal(predict_counterfactual(fit, d, 0), 0.5)


def test_gaussian_arm_contrast_is_constant_beta():
    d = fixture(30)
    fit = fit_glm(d, DesignSpec(covariate_columns=(0, 1)))
    diff = predict_counterfactual(fit, d, 1) - predict_counterfactual(fit, d, 0)
    np.testing.assert_allclose(diff, fit.coefficients[1], rtol=0, atol=1e-12)


def test_center_indicators_match_per_center_means():
    # with only intercept + centers the fitted values are the center means
    rng = np.random.default_rng(5)
    center = np.repeat(np.arange(5), 6)
    y = rng.normal(size=30) + center
    d = TrialDataset.from_arrays(center, np.zeros(30, int), y)
    fit = fit_glm(d, DesignSpec(include_treatment=False, center_indicators=True))
    pred = predict_counterfactual(fit, d, 0)
    means = np.array([y[center == c].mean() for c in range(5)])
    np.testing.assert_allclose(pred, means[center], atol=1e-10)


def test_per_arm_fit_equals_separate_fits():
    d = fixture(80, seed=4)
    both = fit_glm(d, DesignSpec(covariate_columns=(0,), fit_per_arm=True))
    for arm in (0, 1):
        rows = d.treatment == arm
        X = np.column_stack([np.ones(rows.sum()), d.covariates[rows, 0]])
        oracle = np.linalg.lstsq(X, d.outcome[rows], rcond=None)[0]
        np.testing.assert_allclose(both.arm_fits[arm].coefficients, oracle, atol=1e-10)


def test_aliased_column_dropped_with_warning():
    d = fixture(25)
    x = np.column_stack([d.covariates[:, 0], 2 * d.covariates[:, 0]])
    d2 = TrialDataset.from_arrays(d.center_labels, d.treatment, d.outcome, x, "gaussian", ("u", "v"))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        fit = fit_glm(d2, DesignSpec(covariate_columns=(0, 1)))
    assert caught
    assert fit.dropped
    pred = predict_counterfactual(fit, d2, 1)
    assert np.all(np.isfinite(pred))


@given(st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_logistic_score_equations_hold(seed):
    d = fixture(120, seed=seed, family="binomial")
    if d.outcome.min() == d.outcome.max():
        return
    spec = DesignSpec(covariate_columns=(0,))
    fit = fit_glm(d, spec)
    if not fit.converged:
        return
    X, _ = design_matrix(d, spec)
    score = X.T @ (d.outcome - expit(X @ fit.coefficients))
    assert np.max(np.abs(score)) < 1e-6
