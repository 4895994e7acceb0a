"""Acceptance suite. Each criterion prints one PASS/FAIL line, then asserts.

Run alone with ``pytest tests/test_acceptance.py -v -s``; the full suite
takes roughly half an hour on one core; ``-m 'not slow'`` skips the
simulation criteria.
"""

import time

import numpy as np
import pytest

from clustrial.cli import main
from clustrial.dataset import WeightScheme
from clustrial.estimators import (
    MIXED,
    PROPOSED,
    ROSTER,
    Estimand,
    cluster_randomized_mean,
    gcomputation_ate,
    naive_aipw,
    roster_label,
)
from clustrial.glm import DesignSpec, design_matrix, fit_glm, predict_counterfactual
from clustrial.harness import ScenarioConfig, run_scenario, within_center_covariance
from clustrial.mixedmodel import RandomEffectsSpec, fit_lmm
from clustrial.propensity import PropensityPolicy, cluster_propensity
from clustrial.rng import stream
from clustrial.simgen import (
    ClusterDgm,
    DgmSpec,
    SizeSetting,
    ThreeLevelFixture,
    cluster_truth,
    generate,
    generate_cluster_randomized,
)
from clustrial.variance import (
    db_heterogeneity,
    degrees_of_freedom,
    dl_heterogeneity,
    hierarchical_components,
    hierarchical_variance,
    hierarchical_weights,
    reml_heterogeneity,
    reml_loglik,
)

MAIN_EFFECTS = DesignSpec(covariate_columns=(0, 1, 2, 3))
MARGINAL = PropensityPolicy("marginal")


@pytest.fixture
def report(capsys):
    start = time.perf_counter()

    def emit(cid, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} {cid}: {detail} ({time.perf_counter() - start:.1f}s)")
        return ok

    return emit


def scenario(cid, dgm, estimators, replications, **extra):
    cfg = ScenarioConfig.from_dict(
        {"id": cid, "dgm": dgm, "estimators": list(estimators), "replications": replications,
         "seed": 20250101, "draws": 1000, **extra},
        env={},
    )
    return run_scenario(cfg)


def cov(result, estimator, estimand, method):
    for row in result.rows:
        if row["estimator"] == estimator and row["estimand"] == estimand:
            return row[f"coverage_{method}"]
    raise KeyError(estimator)


def test_c1_gcomputation_identity(report):
    worst = 0.0
    for endpoint in ("continuous", "binary"):
        for seed in range(50):
            d = generate(DgmSpec(endpoint=endpoint, sigma2_b0=0.25, setting=2), seed)
            fit = fit_glm(d, MAIN_EFFECTS)
            worst = max(worst, abs(naive_aipw(d, fit, MARGINAL, Estimand.ATE).value - gcomputation_ate(fit, d)))
    assert report("C1", worst <= 1e-8, f"max |AIPW - G-comp| = {worst:.2e} over 100 fixtures")


def test_c2_blup_closed_form(report):
    worst = 0.0
    for seed in range(20):
        d = generate(DgmSpec(sigma2_b0=0.3, setting=2), 100 + seed)
        fit = fit_lmm(d, MAIN_EFFECTS, RandomEffectsSpec())
        s2u, s2 = fit.variance_components["intercept"], fit.residual_variance
        X, _ = design_matrix(d, MAIN_EFFECTS)
        r = d.outcome - X @ fit.fixed_coefficients
        for c in range(d.k):
            m = d.center == c
            expected = s2u / (s2u + s2 / m.sum()) * r[m].mean()
            worst = max(worst, abs(fit.blups[c, 0] - expected))
    assert report("C2", worst <= 1e-6, f"max BLUP deviation = {worst:.2e} over 20 fits")


def test_c3_heterogeneity_oracles(report):
    dl = dl_heterogeneity([0.0, 2.0], [1.0, 1.0]).sigma2_u
    dl_ok = abs(dl - 1.0) <= 1e-12

    gap = np.inf
    for seed in range(20):
        rng = np.random.default_rng(seed)
        s = rng.uniform(0.05, 0.5, 25)
        t = rng.normal(0, np.sqrt(0.2 + s))
        h = reml_heterogeneity(t, s).sigma2_u
        grid = np.linspace(0, 2, 400)
        gap = min(gap, reml_loglik(t, s, h) - max(reml_loglik(t, s, g) for g in grid))
    reml_ok = gap >= -1e-8

    rng = np.random.default_rng(3)
    s2c = 0.2
    raw = []
    for _ in range(2000):
        t = rng.normal(0, np.sqrt(0.15), 100) + rng.normal(0, np.sqrt(s2c), 100)
        raw.append(db_heterogeneity(t, np.full(100, s2c), t.mean()).pre_truncation)
    raw = np.array(raw)
    mc_se = raw.std(ddof=1) / np.sqrt(raw.size)
    db_ok = abs(raw.mean() - 0.15) < 3 * mc_se
    ok = dl_ok and reml_ok and db_ok
    assert report("C3", ok, f"DL={dl!r}; REML-grid margin {gap:.2e}; DB mean {raw.mean():.4f} "
                            f"(|dev| {abs(raw.mean() - 0.15):.4f} vs 3 MC SE {3 * mc_se:.4f})")


def test_c4_df_boundaries(report):
    n_c = np.array([5, 1, 12, 7, 3, 9])
    lo, hi = degrees_of_freedom(n_c, 0.0), degrees_of_freedom(n_c, 1.0)
    ok = lo == n_c.sum() - 1 and hi == n_c.size - 1
    assert report("C4", ok, f"df(0) = {lo}, df(1) = {hi}")


@pytest.mark.slow
def test_c5_table_one_setting_one(report):
    runs = {}
    for grid in ((0.0, 0.0, 0.0), (0.15, 0.15, 0.0)):
        runs[grid] = scenario("c5", {"sigma2": list(grid), "setting": 1}, ROSTER, 500)
    bad = []
    for grid, res in runs.items():
        for name in MIXED:
            for estimand in ("counterfactual_mean_treated", "ate"):
                for m in ("reml", "dl", "db"):
                    c = cov(res, name, estimand, m)
                    if not 0.92 <= c <= 0.98:
                        bad.append(f"{name} {estimand} {m} {grid} {c:.3f}")
    het, null = runs[(0.15, 0.15, 0.0)], runs[(0.0, 0.0, 0.0)]
    naive_cf = cov(het, "Naive", "counterfactual_mean_treated", "naive")
    naive_ate, naive_ate0 = cov(het, "Naive", "ate", "naive"), cov(null, "Naive", "ate", "naive")
    fixed = [f"{m} {cov(res, 'Fixed', e, m):.3f}" for res in runs.values()
             for e in ("counterfactual_mean_treated", "ate") for m in ("reml", "dl", "db")]
    ok = not bad and naive_cf <= 0.92 and naive_ate <= 0.95 and naive_ate < naive_ate0
    detail = (f"mixed out of [92,98]: {bad or 'none'}; naive cf {naive_cf:.3f}; naive ATE {naive_ate:.3f} "
              f"vs {naive_ate0:.3f} at null; Fixed (informational): {', '.join(fixed)}")
    assert report("C5", ok, detail)


@pytest.mark.slow
def test_c6_table_two_setting_five(report):
    proposed = [roster_label(n, a) for a in (False, True) for n in PROPOSED]
    res = scenario("c6", {"sigma2": [0.15, 0.15, 4e-6], "setting": 5}, ["Naive"] + proposed, 300)
    naive_cf = cov(res, "Naive", "counterfactual_mean_treated", "naive")
    naive_ate = cov(res, "Naive", "ate", "naive")
    bad = [f"{r['estimator']} {r['estimand']} {m} {r[f'coverage_{m}']:.3f}"
           for r in res.rows if r["estimator"] != "Naive" for m in ("reml", "dl", "db")
           if not 0.92 <= r[f"coverage_{m}"] <= 0.98]
    ok = naive_cf <= 0.55 and naive_ate <= 0.80 and not bad
    assert report("C6", ok, f"naive cf {naive_cf:.3f}, naive ATE {naive_ate:.3f}; proposed out of [92,98]: "
                            f"{bad or 'none'}")


@pytest.mark.slow
def test_c7_binary_setting_one(report):
    res = scenario("c7", {"endpoint": "binary", "sigma2": [0.5, 0.5, 0.0], "setting": 1}, ROSTER, 300,
                   truth={"draws": 10_000_000})
    naive_cf = cov(res, "Naive", "counterfactual_mean_treated", "naive")
    bad = [f"{n} {m} {cov(res, n, 'ate', m):.3f}" for n in PROPOSED for m in ("reml", "dl", "db")
           if not 0.91 <= cov(res, n, "ate", m) <= 0.98]
    ok = naive_cf <= 0.93 and not bad
    assert report("C7", ok, f"naive cf {naive_cf:.3f}; proposed ATE out of [91,98]: {bad or 'none'}")


@pytest.mark.slow
def test_c8_misspecified_outcome_model(report):
    mixed = [roster_label(n, True) for n in MIXED]
    res = scenario("c8", {"misspecified": True, "sigma2": [0.15, 0.15, 4e-6], "setting": 1}, mixed, 300)
    lines, ok = [], True
    for r in res.rows:
        if r["estimand"] != "ate":
            continue
        mc_se = r["mc_sd"] / np.sqrt(r["replications"])
        ok &= abs(r["bias"]) < 3 * mc_se
        lines.append(f"{r['estimator']} {r['bias']:+.4f} ({abs(r['bias']) / mc_se:.2f} MC SE)")
    assert report("C8", ok, "; ".join(lines))


def if_covariance(spec, seed, estimand):
    d = generate(spec, seed)
    fit = fit_glm(d, MAIN_EFFECTS)
    pooled = naive_aipw(d, fit, MARGINAL, estimand)
    v = np.concatenate([c.if_values(estimand) for c in pooled.per_center])
    return within_center_covariance(v, np.repeat(np.arange(pooled.k), pooled.n_c))


def test_c9_influence_covariance_invariants(report):
    big = SizeSetting(10_000, 10, 2, 48)
    intercept = DgmSpec(sigma2_b0=0.15, setting=big)
    slope = DgmSpec(sigma2_b0=0.15, sigma2_b1=0.15, setting=big)
    checks = [
        ("ATE, intercept only", *if_covariance(intercept, 1, Estimand.ATE), 0.0),
        ("ATE, random slope", *if_covariance(slope, 2, Estimand.ATE), 0.15),
    ]
    # same trial as the slope check, so 200000 patients in total
    checks.append(("treated, random slope", *if_covariance(slope, 2, Estimand.TREATED), 0.30))
    ok = all(abs(est - target) < 3 * se for _, est, se, target in checks)
    detail = "; ".join(f"{name} {est:.4f} vs {target} (SE {se:.4f})" for name, est, se, target in checks)
    assert report("C9", ok, detail)


@pytest.mark.slow
def test_c10_cluster_and_hierarchical(report):
    spec = ClusterDgm()
    est = []
    for r in range(500):
        d = generate_cluster_randomized(spec, 1000 + r)
        fit = fit_glm(d, DesignSpec(covariate_columns=(0, 1)))
        p = cluster_propensity(d)
        est.append(cluster_randomized_mean(d, p, predict_counterfactual(fit, d, 1),
                                           predict_counterfactual(fit, d, 0), Estimand.ATE).value)
    est = np.array(est)
    truth = cluster_truth(spec, Estimand.ATE)
    mc_se = est.std(ddof=1) / np.sqrt(est.size)
    cr_ok = abs(est.mean() - truth) < 3 * mc_se

    fx = ThreeLevelFixture()
    center, cluster = fx.layout()
    omega = hierarchical_weights(np.bincount(center), WeightScheme.EQUAL_CENTERS)
    w = omega[center]
    rng = stream(77)
    draws = [fx.draw(rng, center, cluster) for _ in range(10_000)]
    direct = np.var([np.dot(w, v) / w.sum() for v in draws], ddof=1)
    closed = hierarchical_components(fx.var_center, fx.var_cluster, fx.var_residual, center, cluster, omega)
    fitted = np.mean([hierarchical_variance(v, center, cluster, omega).variance for v in draws[:1000]])
    h_ok = abs(closed / direct - 1) < 0.05 and abs(fitted / direct - 1) < 0.05
    detail = (f"cluster ATE bias {est.mean() - truth:+.4f} (3 MC SE {3 * mc_se:.4f}); hierarchical "
              f"closed/direct {closed / direct:.4f}, fitted/direct {fitted / direct:.4f}")
    assert report("C10", cr_ok and h_ok, detail)


def test_c11_determinism_across_workers(report, tmp_path):
    cfg = tmp_path / "det.json"
    cfg.write_text(
        '{"id": "det", "dgm": {"endpoint": "binary", "sigma2": [0.5, 0.5, 0], "setting": 2},'
        ' "estimators": ["Naive", "Mixed(1+A|c) Sam", "Fixed adj"], "replications": 16, "seed": 5,'
        ' "draws": 200, "truth": {"draws": 200000}}'
    )
    outs = {}
    for jobs in (1, 8):
        out = tmp_path / f"j{jobs}"
        assert main(["simulate", "--config", str(cfg), "--jobs", str(jobs), "--out", str(out), "--quiet"]) == 0
        outs[jobs] = [(out / n).read_bytes() for n in ("det.csv", "det_replications.csv")]
    ok = outs[1] == outs[8]
    assert report("C11", ok, "summary and replication CSVs byte-identical at 1 and 8 workers" if ok
                  else "CSV output differs between 1 and 8 workers")
