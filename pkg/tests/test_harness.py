import csv
import io
import json

import numpy as np
import pytest

from clustrial.errors import ConfigError, FailureFractionExceeded
from clustrial.estimators import Estimand
from clustrial.harness import (
    ScenarioConfig,
    ScenarioResult,
    check_failures,
    compute_if_icc,
    coverage,
    metrics,
    replication_seed,
    result_json,
    run_scenario,
    summary_csv,
    within_center_covariance,
    write_outputs,
)


def test_icc_constant_within_centers():
    assert compute_if_icc([1, 1, 2, 2, 3, 3], [0, 0, 1, 1, 2, 2]) == 1.0


def test_icc_two_center_hand_anova():
    # means 2 and 5, MSB = 10.8, MSW = 4/3, n0 = 2.4
    assert compute_if_icc([1, 2, 3, 4, 6], ["a", "a", "a", "b", "b"]) == pytest.approx(71 / 95, abs=1e-12)


def test_icc_independent_values_near_zero():
    rng = np.random.default_rng(0)
    g = np.repeat(np.arange(200), 10)
    assert abs(compute_if_icc(rng.normal(size=2000), g)) < 0.03


def test_within_center_covariance_pairs():
    # centered values -1, 1 | -1, 1: each center contributes 2 * (-1) over 2 ordered pairs
    est, _ = within_center_covariance([0, 2, 0, 2], [0, 0, 1, 1])
    assert est == pytest.approx(-1.0)


def test_coverage_with_infinite_interval():
    assert coverage([-np.inf] * 4, [np.inf] * 4, 0.3) == 1.0
    assert coverage([0, 0, 1], [1, 1, 2], 0.5) == pytest.approx(2 / 3)


def test_metrics_oracle_and_bias_bound():
    m = metrics([0.29] * 5, 0.29)
    assert m["bias"] == 0 and m["mse"] == 0
    x = np.random.default_rng(1).normal(0.3, 0.1, 40)
    m = metrics(x, 0.29)
    assert m["mse"] >= m["bias"] ** 2
    assert m["mse"] == pytest.approx(m["bias"] ** 2 + np.var(x), rel=1e-12)


def test_replication_seeds_distinct_and_stable():
    seeds = {replication_seed(7, r, p) for r in range(200) for p in (0, 1)}
    assert len(seeds) == 400
    assert replication_seed(7, 3, 1) == replication_seed(7, 3, 1)


def base_config(**over):
    d = {
        "id": "smoke",
        "dgm": {"endpoint": "continuous", "sigma2": [0.1, 0.1, 0], "setting": 2},
        "estimators": ["Naive", "Fixed adj", "Mixed(1|c)"],
        "replications": 10,
        "seed": 3,
        "draws": 50,
    }
    d.update(over)
    return ScenarioConfig.from_dict(d, env={})


@pytest.mark.parametrize(
    "bad",
    [
        {"replications": 0},
        {"estimators": ["Bayes"]},
        {"methods": ["hks"]},
        {"level": 1.5},
        {"dgm": {"sigma2": [0.1, 0.1]}},
        {"dgm": {"endpoint": "ordinal"}},
        {"quantiles": "t"},
        {"id": "../x"},
    ],
)
def test_config_errors(bad):
    with pytest.raises(ConfigError):
        base_config(**bad)


def test_seed_environment_override():
    d = {"id": "s", "seed": 3}
    assert ScenarioConfig.from_dict(d, env={"CLUSTRIAL_SEED": "99"}).seed == 99
    assert ScenarioConfig.from_dict(d, env={}).seed == 3


def test_load_rejects_bad_json(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        ScenarioConfig.load(p)


@pytest.fixture(scope="module")
def smoke():
    return run_scenario(base_config())


def test_smoke_run_recovers_ate(smoke):
    assert smoke.truths[(Estimand.ATE, smoke.config.weights[0])] == 0.29
    for row in smoke.rows:
        assert row["replications"] + row["failures"] == 10
        if row["estimand"] == "ate":
            assert abs(row["estimate"] - 0.29) < 0.2
    assert smoke.failure_fraction == 0.0
    check_failures(smoke)


def test_smoke_outputs(smoke, tmp_path):
    paths = write_outputs(smoke, tmp_path)
    assert sorted(p.name for p in paths) == ["smoke.csv", "smoke.json", "smoke_replications.csv"]
    rows = list(csv.DictReader(io.StringIO(summary_csv(smoke))))
    assert len(rows) == 3 * 2
    assert {"se_reml", "se_dl", "se_db", "coverage_naive", "mean_icc"} <= set(rows[0])
    payload = json.loads(result_json(smoke))
    assert payload["scenario"] == "smoke"
    assert payload["config"]["replications"] == 10


def test_repeat_run_is_identical(smoke):
    again = run_scenario(base_config())
    assert summary_csv(again) == summary_csv(smoke)


def test_failure_fraction_exceeded(smoke):
    strict = base_config(max_failure_fraction=0.0)
    rows = [dict(r, failures=1) for r in smoke.rows]
    res = ScenarioResult(strict, smoke.truths, rows, smoke.replications, {})
    with pytest.raises(FailureFractionExceeded) as err:
        check_failures(res)
    assert err.value.exit_code == 4
