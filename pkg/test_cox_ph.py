#!/usr/bin/env python3
"""
Test the Cox proportional-hazards fitter, hazard ratios and risk scores
"""

import math
import os
import sys

import numpy as np
import pytest

sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from dynrisk.cox_ph import (
    CoxModel,
    CoxOptions,
    SurvivalSample,
    TiesMethod,
    cox_risk_score,
    cox_risk_scores,
    fit_cox,
    hazard_ratio_report,
    hazard_ratios,
    neg_log_partial_likelihood,
    stack_samples,
)
from dynrisk.evaluation import roc_curve
from dynrisk.exceptions import (
    ConfigurationError,
    DimensionError,
    MetricDomainError,
    NotConvergedError,
    RankDeficiencyError,
    SeparationError,
    TrainingError,
)
from dynrisk.synth_cohort import FeatureSpec, GeneratorConfig, PlantedEffect, simulate_arrays

HAND_FIXTURE = [
    SurvivalSample(x=(1.0,), time_days=1, event=True),
    SurvivalSample(x=(0.0,), time_days=2, event=True),
    SurvivalSample(x=(1.0,), time_days=3, event=True),
]


def random_survival(seed: int, n: int = 30, p: int = 3, tied: bool = True):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, p))
    if tied:
        time = rng.integers(1, 8, size=n).astype(float)
    else:
        time = rng.permutation(n).astype(float) + 1.0
    event = rng.random(n) < 0.7
    event[0] = event[1] = True
    return X, time, event


def make_model(beta, covariance, converged=True, names=None):
    beta = np.asarray(beta, dtype=float)
    return CoxModel(
        beta=beta,
        covariance=np.asarray(covariance, dtype=float),
        n_iterations=3,
        converged=converged,
        log_partial_likelihood=-1.0,
        ties_method=TiesMethod.EFRON,
        feature_names=tuple(names or [f"x{j}" for j in range(len(beta))]),
    )


# ---------------------------------------------------------------------------
# Partial likelihood
# ---------------------------------------------------------------------------


def test_hand_fixture_gradient_at_zero():
    X, time, event = stack_samples(HAND_FIXTURE)
    value, gradient, _ = neg_log_partial_likelihood(np.zeros(1), X, time, event)
    assert gradient[0] == pytest.approx(1.0 / 6.0, abs=1e-12)
    # risk sets of size 3, 2, 1
    assert value == pytest.approx(math.log(3) + math.log(2) + math.log(1), abs=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_gradient_matches_finite_differences(seed):
    X, time, event = random_survival(seed)
    rng = np.random.default_rng(100 + seed)
    h = 1e-5
    for ties in TiesMethod:
        beta = rng.normal(scale=0.5, size=X.shape[1])
        _, gradient, hessian = neg_log_partial_likelihood(beta, X, time, event, ties)
        numeric = np.zeros_like(gradient)
        numeric_hessian = np.zeros_like(hessian)
        for j in range(len(beta)):
            step = np.zeros_like(beta)
            step[j] = h
            up = neg_log_partial_likelihood(beta + step, X, time, event, ties)
            down = neg_log_partial_likelihood(beta - step, X, time, event, ties)
            numeric[j] = (up[0] - down[0]) / (2 * h)
            numeric_hessian[:, j] = (up[1] - down[1]) / (2 * h)
        scale = max(1.0, np.max(np.abs(gradient)))
        assert np.max(np.abs(gradient - numeric)) / scale < 1e-6
        assert np.allclose(hessian, numeric_hessian, rtol=1e-5, atol=1e-6)


@pytest.mark.parametrize("seed", range(10))
def test_hessian_positive_semidefinite(seed):
    X, time, event = random_survival(seed, n=25, p=4)
    beta = np.random.default_rng(seed).normal(size=4)
    _, _, hessian = neg_log_partial_likelihood(beta, X, time, event)
    assert np.allclose(hessian, hessian.T)
    assert np.linalg.eigvalsh(hessian).min() >= -1e-9


def test_breslow_equals_efron_without_ties():
    X, time, event = random_survival(3, tied=False)
    beta = np.array([0.3, -0.2, 0.1])
    efron = neg_log_partial_likelihood(beta, X, time, event, TiesMethod.EFRON)
    breslow = neg_log_partial_likelihood(beta, X, time, event, TiesMethod.BRESLOW)
    assert efron[0] == breslow[0]
    assert np.array_equal(efron[1], breslow[1])
    assert np.array_equal(efron[2], breslow[2])


def test_constant_covariate_has_zero_gradient():
    X, time, event = random_survival(4, p=2)
    X[:, 1] = 2.5
    for beta in ([0.0, 0.0], [0.4, -1.0], [-0.7, 3.0]):
        _, gradient, _ = neg_log_partial_likelihood(np.array(beta), X, time, event)
        assert gradient[1] == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize(
    "time, event, error",
    [
        ([1.0, 2.0, 3.0], [False, False, False], MetricDomainError),
        ([-1.0, 2.0, 3.0], [True, True, False], MetricDomainError),
        ([0.0, 2.0, 3.0], [False, True, True], MetricDomainError),
    ],
)
def test_partial_likelihood_domain(time, event, error):
    with pytest.raises(error):
        neg_log_partial_likelihood(np.zeros(1), np.ones((3, 1)), np.array(time), np.array(event))


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------


def test_hand_fixture_maximum():
    X, time, event = stack_samples(HAND_FIXTURE)
    model = fit_cox(X, time, event, ["x"])
    assert model.converged
    assert model.beta[0] == pytest.approx(-0.5 * math.log(2.0), abs=1e-6)
    assert model.beta[0] == pytest.approx(-0.34657, abs=1e-5)


def test_covariance_is_inverse_hessian():
    X, time, event = random_survival(5, n=60, p=2)
    model = fit_cox(X, time, event)
    _, gradient, hessian = neg_log_partial_likelihood(model.beta, X, time, event)
    assert np.max(np.abs(gradient)) <= 1e-8
    assert np.allclose(model.covariance @ hessian, np.eye(2), atol=1e-8)
    assert np.linalg.eigvalsh(model.covariance).min() >= 0.0


def test_separation_names_the_covariate():
    """The three earliest deaths all carry the exposure: monotone likelihood."""
    X = np.array([[1.0], [1.0], [1.0], [0.0], [0.0], [0.0]])
    time = np.arange(1.0, 7.0)
    event = np.ones(6, dtype=bool)
    with pytest.raises(SeparationError) as info:
        fit_cox(X, time, event, ["exposure"])
    assert info.value.feature == "exposure"


def test_collinear_covariates_are_rank_deficient():
    X, time, event = random_survival(6, p=2)
    X[:, 1] = 2.0 * X[:, 0]
    with pytest.raises(RankDeficiencyError):
        fit_cox(X, time, event)


def test_too_few_events():
    X = np.ones((3, 1))
    with pytest.raises(TrainingError):
        fit_cox(X, np.array([1.0, 2.0, 3.0]), np.array([True, False, False]))


def test_translation_and_scaling_invariance():
    cases = 0
    for seed in range(200):
        X, time, event = random_survival(1000 + seed, n=40, p=2)
        base = fit_cox(X, time, event)

        shifted = X.copy()
        shifted[:, 0] += 3.7
        assert np.allclose(fit_cox(shifted, time, event).beta, base.beta, atol=1e-6)

        scaled = X.copy()
        scaled[:, 1] *= 2.5
        model = fit_cox(scaled, time, event)
        assert model.beta[1] == pytest.approx(base.beta[1] / 2.5, abs=1e-6)
        assert roc_curve(cox_risk_scores(model, scaled), event).auc == pytest.approx(
            roc_curve(cox_risk_scores(base, X), event).auc, abs=1e-12
        )
        cases += 1
    assert cases >= 200


def simulated(seed: int, log_hr: float):
    config = GeneratorConfig(
        n_subjects=5000,
        target_event_rate=0.3,
        planted_effects=(PlantedEffect("exposure", log_hr),),
        feature_specs=(FeatureSpec("exposure", "binary", prevalence=0.5),),
        seed=seed,
    )
    arrays = simulate_arrays(config)
    return arrays.X, arrays.survival_days.astype(float), arrays.died


def test_planted_effect_recovered():
    """
    beta = 0.7, n = 5,000, ~30% events over 100 seeds: the 95% interval covers exp(0.7)
    at least 93 times, and the estimate lands in [0.55, 0.85] at least 98 times (about 2.9 SE each side).
    """
    covered = 0
    in_range = 0
    for seed in range(100):
        X, time, event = simulated(seed, 0.7)
        (ratio,) = hazard_ratios(fit_cox(X, time, event, ["exposure"]))
        in_range += int(0.55 <= ratio.beta <= 0.85)
        covered += int(ratio.ci_low <= math.exp(0.7) <= ratio.ci_high)
    assert in_range >= 98
    assert covered >= 93


def test_null_effect_not_detected():
    within = 0
    for seed in range(100):
        X, time, event = simulated(500 + seed, 0.0)
        model = fit_cox(X, time, event, ["exposure"])
        within += int(abs(model.beta[0]) <= 1.96 * model.standard_errors[0])
    assert within >= 93


def test_options_from_config():
    options = CoxOptions.from_config({"ties": "breslow", "max_iter": 5})
    assert options.ties_method is TiesMethod.BRESLOW
    assert options.max_iter == 5
    with pytest.raises(ConfigurationError):
        CoxOptions.from_config({"ties": "exact"})


def test_saved_model_round_trip(tmp_path):
    X, time, event = random_survival(7, n=50, p=2)
    model = fit_cox(X, time, event, ["a", "b"])
    model.save(tmp_path / "cox_model.json")
    loaded = CoxModel.load(tmp_path / "cox_model.json")
    assert np.array_equal(loaded.beta, model.beta)
    assert np.array_equal(loaded.covariance, model.covariance)
    assert loaded.feature_names == ("a", "b")
    assert loaded.converged


# ---------------------------------------------------------------------------
# Hazard ratios and scores
# ---------------------------------------------------------------------------


def test_hazard_ratio_interval():
    (ratio,) = hazard_ratios(make_model([math.log(2.0)], [[0.01]]))
    assert ratio.hr == pytest.approx(2.0)
    assert ratio.ci_low == pytest.approx(1.644, abs=1e-3)
    assert ratio.ci_high == pytest.approx(2.433, abs=1e-3)


def test_null_and_protective_ratios():
    low, null = hazard_ratios(make_model([-1.0, 0.0], [[0.04, 0.0], [0.0, 0.04]]))
    assert null.hr == 1.0
    assert low.hr < 1.0 and low.ci_high < 1.0


def test_other_levels_use_normal_quantile():
    (ratio,) = hazard_ratios(make_model([0.0], [[1.0]]), level=0.9)
    assert ratio.ci_high == pytest.approx(math.exp(1.6448536), rel=1e-6)


def test_non_converged_model_refused():
    with pytest.raises(NotConvergedError):
        hazard_ratios(make_model([0.1], [[0.01]], converged=False))


def test_report_sorted_by_effect_size():
    model = make_model([0.2, -0.9, 0.9], np.eye(3) * 0.01, names=["b", "c", "a"])
    report = hazard_ratio_report(model)
    assert list(report["feature"]) == ["a", "c", "b"]
    assert list(report.columns) == ["feature", "hr", "ci_low", "ci_high", "beta", "se"]


def test_risk_scores():
    assert cox_risk_score(make_model([0.5, -0.25], np.eye(2)), [2.0, 4.0]) == 0.0
    assert cox_risk_score(make_model([0.0, 0.0], np.eye(2)), [7.0, -3.0]) == 0.0
    with pytest.raises(DimensionError):
        cox_risk_score(make_model([0.5, -0.25], np.eye(2)), [1.0])
