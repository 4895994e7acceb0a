import numpy as np
import pytest
from scipy import stats
from scipy.special import expit

from clustrial.dataset import WeightScheme
from clustrial.errors import ConfigError
from clustrial.estimators import Estimand
from clustrial.harness import compute_if_icc
from clustrial.rng import stream
from clustrial.simgen import (
    BINARY_GRID,
    CONTINUOUS_GRID,
    SETTINGS,
    BinaryCovariates,
    ClusterDgm,
    DgmSpec,
    SizeSetting,
    ThreeLevelFixture,
    cluster_truth,
    draw_centers,
    generate,
    generate_cluster_randomized,
    generate_with_truth,
    linear_predictor,
    true_estimand,
)


def test_settings_table():
    # k, average, minimum, maximum center size of the five simulation settings
    assert [(s.k, s.avg, s.min, s.max) for s in SETTINGS.values()] == [
        (100, 5, 1, 24), (50, 10, 2, 48), (10, 50, 25, 80), (5, 100, 50, 150), (100, 100, 50, 145)]


def test_variance_grids():
    assert CONTINUOUS_GRID[-1] == (0.15, 0.15, 4e-6)
    assert (0.5, 0.5, 0.0) in BINARY_GRID
    assert BINARY_GRID[-1] == (0.75, 0.5, 0.5)
    assert len(CONTINUOUS_GRID) == len(BINARY_GRID) == 7


def test_no_random_effects_means_no_clustering():
    d = generate(DgmSpec(endpoint="continuous", setting=5), 1)
    assert d.k == 100
    assert compute_if_icc(d.outcome, d.center) < 0.02


def test_setting_one_sizes():
    d = generate(DgmSpec(setting=1), 2)
    assert d.k == 100
    assert 4 <= d.n_c.mean() <= 6
    assert d.n_c.min() >= 1


def test_sizes_within_bounds_for_every_setting():
    for i, s in SETTINGS.items():
        sizes, _ = draw_centers(DgmSpec(setting=i), stream(i))
        assert sizes.size == s.k
        assert sizes.min() >= s.min and sizes.max() <= s.max


def test_binary_linear_predictor_hand_evaluation():
    spec = DgmSpec(endpoint="binary")
    law = BinaryCovariates()
    X = np.array([[law.p_severe, law.p_moderate, law.age_mean, law.ichv_mean]])
    eta = linear_predictor(spec, X, 1.0, np.zeros((1, 3)))[0]
    hand = 3.22 + 0.28 - 1.71 * 0.3 - 0.72 * 0.4 - 0.04 * 61 - 0.007 * 45
    assert expit(eta) == pytest.approx(expit(hand), abs=1e-12)


def test_continuous_intercept_and_treatment_contribution():
    eta = linear_predictor(DgmSpec(), np.zeros((1, 4)), 1.0, np.zeros((1, 3)))[0]
    assert eta == pytest.approx(4.06 + 0.29)


def test_continuous_ate_is_treatment_coefficient():
    for scheme in WeightScheme:
        for mis in (False, True):
            t = true_estimand(DgmSpec(misspecified=mis, sigma2_b0=0.1, sigma2_b1=0.1), Estimand.ATE, scheme)
            assert t.value == 0.29


def test_closed_form_means_match_monte_carlo():
    for mis in (False, True):
        spec = DgmSpec(misspecified=mis, sigma2_b0=0.15, sigma2_b1=0.15, sigma2_b2=4e-6)
        exact = true_estimand(spec, Estimand.TREATED)
        mc = true_estimand(spec, Estimand.TREATED, draws=2_000_000, seed=3, method="monte_carlo")
        assert abs(exact.value - mc.value) < 4 * mc.mc_se


def test_correct_model_treated_mean():
    # E[CD40] of the truncated normal enters; 6.0310 to four places
    assert true_estimand(DgmSpec(), Estimand.TREATED).value == pytest.approx(6.0310, abs=5e-5)


def test_binary_schemes_agree_without_treatment_heterogeneity():
    spec = DgmSpec(endpoint="binary", sigma2_b0=0.5)
    a = true_estimand(spec, Estimand.ATE, WeightScheme.EQUAL_CENTERS, draws=1_000_000, seed=5)
    b = true_estimand(spec, Estimand.ATE, WeightScheme.EQUAL_PATIENTS, draws=1_000_000, seed=6)
    assert abs(a.value - b.value) < 3 * np.hypot(a.mc_se, b.mc_se)


def test_informative_sizes_follow_treatment_effects():
    spec = DgmSpec(sigma2_b1=0.15, setting=SizeSetting(3000, 10, 2, 48), informative_size=True, kendall_tau=0.5)
    sizes, b = draw_centers(spec, stream(8))
    tau = stats.kendalltau(sizes, b[:, 1]).statistic
    assert 0.35 < tau < 0.55
    plain, b2 = draw_centers(DgmSpec(sigma2_b1=0.15, setting=spec.setting), stream(8))
    assert abs(stats.kendalltau(plain, b2[:, 1]).statistic) < 0.05


def test_informative_sizes_shift_patient_weighted_truth():
    spec = DgmSpec(endpoint="binary", sigma2_b0=0.5, sigma2_b1=0.5, informative_size=True)
    ec = true_estimand(spec, Estimand.ATE, WeightScheme.EQUAL_CENTERS, draws=1_000_000, seed=1)
    ep = true_estimand(spec, Estimand.ATE, WeightScheme.EQUAL_PATIENTS, draws=1_000_000, seed=1)
    assert ep.value > ec.value + 5 * ep.mc_se


def test_generation_is_seed_deterministic():
    spec = DgmSpec(endpoint="binary", sigma2_b0=0.5)
    a, b, c = generate(spec, 11), generate(spec, 11), generate(spec, 12)
    np.testing.assert_array_equal(a.outcome, b.outcome)
    np.testing.assert_array_equal(a.covariates, b.covariates)
    assert a.n != c.n or not np.array_equal(a.outcome, c.outcome)


def test_generated_random_effects_have_requested_variance():
    spec = DgmSpec(sigma2_b0=0.15, sigma2_b1=0.1, setting=SizeSetting(5000, 5, 1, 24))
    b = generate_with_truth(spec, 3).b
    np.testing.assert_allclose(b.var(axis=0), [0.15, 0.1, 0.0], atol=0.01)


def test_invalid_spec():
    with pytest.raises(ConfigError):
        DgmSpec(endpoint="ordinal")
    with pytest.raises(ConfigError):
        DgmSpec(sigma2_b0=-1)
    with pytest.raises(ConfigError):
        DgmSpec(setting=9)


def test_cluster_randomized_generator():
    spec = ClusterDgm(J=40)
    d = generate_cluster_randomized(spec, 4)
    assert d.J == 40 and d.k == 40
    a = np.bincount(d.cluster, weights=d.treatment) / np.bincount(d.cluster)
    assert set(np.unique(a)) == {0.0, 1.0}
    assert a.sum() == 20
    assert cluster_truth(spec, Estimand.ATE) == pytest.approx(0.5)


def test_three_level_layout_is_fixed():
    fx = ThreeLevelFixture()
    c1, b1 = fx.layout()
    c2, b2 = fx.layout()
    np.testing.assert_array_equal(c1, c2)
    np.testing.assert_array_equal(b1, b2)
    assert c1.max() == fx.k - 1
    # every cluster sits in exactly one center
    pairs = {(int(b), int(c)) for b, c in zip(b1, c1)}
    assert len(pairs) == b1.max() + 1


def test_outcome_icc_nondecreasing_in_intercept_variance():
    big = SizeSetting(2000, 10, 2, 48)
    iccs = []
    for s2 in (0.0, 0.05, 0.10, 0.15):
        d = generate(DgmSpec(sigma2_b0=s2, setting=big), 21)
        iccs.append(compute_if_icc(d.outcome, d.center))
    assert all(b >= a for a, b in zip(iccs, iccs[1:]))


def test_informative_size_significant_at_500_centers():
    setting = SizeSetting(500, 10, 2, 48)
    sizes, b = draw_centers(DgmSpec(sigma2_b1=0.15, setting=setting, informative_size=True), stream(2))
    res = stats.kendalltau(sizes, b[:, 1])
    assert res.statistic > 0 and res.pvalue < 1e-6
    sizes, b = draw_centers(DgmSpec(sigma2_b1=0.15, setting=setting), stream(2))
    assert stats.kendalltau(sizes, b[:, 1]).pvalue > 0.01
