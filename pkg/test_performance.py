"""Exceedance probabilities, class aggregation and classification."""

import json
from pathlib import Path

import numpy as np
import pytest

from post_earthquake_assessment.errors import ValidationError
from post_earthquake_assessment.observer import ErrorCovariance, FeedbackGain, ObserverSolution, SensorLayout
from post_earthquake_assessment.performance import (
    DriftEstimate,
    PerformanceLevel,
    PerformanceThresholds,
    assess_performance,
    building_class_probs,
    building_exceedance,
    classify,
    estimate_drifts,
    exceedance,
    load_story_exceedance,
    pdf_table,
    report_from_exceedance,
    story_class_probs,
    story_exceedance,
)
from post_earthquake_assessment.structure import BuildingModel, ResponseHistory

DATA = Path(__file__).parent / "data"
LIMITS = PerformanceThresholds(0.01, 0.02, 0.04)


def test_northridge_building_table():
    story_p = load_story_exceedance(DATA / "northridge_story_exceedance.json")
    building = building_exceedance(story_p)
    np.testing.assert_allclose(building, [1.0, 0.81, 0.01], atol=0.01)
    classes = building_class_probs(building)
    np.testing.assert_allclose(classes, [0.0, 0.19, 0.80, 0.01], atol=0.01)
    assert classify(classes) == PerformanceLevel.CP


def test_northridge_story_three_bands():
    story_p = load_story_exceedance(DATA / "northridge_story_exceedance.json")
    np.testing.assert_allclose(story_class_probs(story_p[2]), [0.0, 0.34, 0.65, 0.01], atol=1e-12)


def test_big_bear_is_immediate_occupancy():
    story_p = load_story_exceedance(DATA / "big_bear_story_exceedance.json")
    report = report_from_exceedance(story_p, LIMITS)
    np.testing.assert_array_equal(report.building_p_class, [1.0, 0.0, 0.0, 0.0])
    assert report.level == PerformanceLevel.IO
    assert report.level_probability == 1.0


def test_gaussian_exceedance_values():
    assert exceedance(0.02, 0.004, [0.02])[0] == pytest.approx(0.5)
    assert exceedance(0.028, 0.004, [0.02])[0] == pytest.approx(0.97725, abs=1e-5)
    np.testing.assert_array_equal(exceedance(0.02, 0.0, LIMITS.values), [1.0, 1.0, 0.0])


def test_truncation_raises_exceedance():
    plain = exceedance(0.002, 0.004, LIMITS.values)
    truncated = exceedance(0.002, 0.004, LIMITS.values, truncate_at_zero=True)
    assert np.all(truncated >= plain)
    assert np.all(truncated <= 1.0)


def test_class_input_validation():
    with pytest.raises(ValidationError, match="non-increasing"):
        story_class_probs([0.5, 0.7, 0.1])
    with pytest.raises(ValidationError):
        story_class_probs([1.2, 0.5, 0.1])
    with pytest.raises(ValidationError):
        story_class_probs([0.5, 0.1])


def test_ties_go_to_more_severe_level():
    assert classify(np.array([0.4, 0.4, 0.2, 0.0])) == PerformanceLevel.LS
    assert classify(story_class_probs([1.0, 1.0, 1.0])) == PerformanceLevel.C


def test_building_exceedance_dominates_stories():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        story_p = -np.sort(-rng.uniform(size=(5, 3)), axis=1)
        building = building_exceedance(story_p)
        assert np.all(building >= story_p.max(axis=0) - 1e-12)
        classes = building_class_probs(building)
        assert np.all(classes >= -1e-12)
        assert classes.sum() == pytest.approx(1.0)


def test_class_probabilities_match_sampled_maximum_drift():
    rng = np.random.default_rng(1)
    est = DriftEstimate(mean_isd=[0.012, 0.018, 0.009], sigma_isd=[0.004, 0.006, 0.002])
    report = assess_performance(est, LIMITS)

    draws = rng.normal(est.mean_isd, est.sigma_isd, size=(100_000, 3)).max(axis=1)
    band = np.searchsorted(LIMITS.values, draws, side="right")
    sampled = np.bincount(band, minlength=4) / len(draws)
    np.testing.assert_allclose(report.building_p_class, sampled, atol=0.01)


def _solution(q, p_isd):
    history = ResponseHistory(dt=0.01, q=q, qdot=np.zeros_like(q), qddot=np.zeros_like(q), z=np.zeros_like(q))
    cov = ErrorCovariance(P=np.diag(p_isd), P_isd=np.asarray(p_isd))
    return ObserverSolution(q_hat=history, covariance=cov, gain=FeedbackGain([1.0]), layout=SensorLayout((1,)))


def test_drift_ratios_from_observer_history():
    model = BuildingModel(story_mass=[1.0, 1.0], story_stiffness=[1.0, 1.0], story_height=[4.0, 3.0])
    q = np.array([[0.0, 0.0], [0.08, 0.14], [-0.04, -0.01]])
    est = estimate_drifts(_solution(q, [1.6e-5, 9e-6]), model)
    np.testing.assert_allclose(est.mean_isd, [0.02, 0.02])
    np.testing.assert_allclose(est.sigma_isd, [0.001, 0.001])

    p = story_exceedance(est, LIMITS, story=2)
    assert p[1] == pytest.approx(0.5)


def test_quiet_history_has_zero_mean_drift():
    model = BuildingModel(story_mass=[1.0, 1.0], story_stiffness=[1.0, 1.0], story_height=[4.0, 3.0])
    est = estimate_drifts(_solution(np.zeros((10, 2)), [1e-8, 1e-8]), model)
    np.testing.assert_array_equal(est.mean_isd, [0.0, 0.0])


def test_empty_history_rejected():
    model = BuildingModel(story_mass=[1.0, 1.0], story_stiffness=[1.0, 1.0], story_height=[4.0, 3.0])
    with pytest.raises(ValidationError, match="empty"):
        estimate_drifts(_solution(np.zeros((0, 2)), [1e-8, 1e-8]), model)


def test_story_index_is_one_based():
    est = DriftEstimate(mean_isd=[0.01], sigma_isd=[0.001])
    with pytest.raises(ValidationError):
        story_exceedance(est, LIMITS, story=0)


def test_pdf_table_columns():
    est = DriftEstimate(mean_isd=[0.01, 0.03], sigma_isd=[0.002, 0.0])
    header, table = pdf_table(est, LIMITS, points=201)
    assert header == ["drift_ratio", "pdf_story_1", "cdf_story_1", "pdf_story_2", "cdf_story_2"]
    assert table.shape == (201, 5)
    assert table[-1, 2] == pytest.approx(1.0)
    assert np.all(np.diff(table[:, 2]) >= 0)


def test_thresholds_must_increase(tmp_path):
    with pytest.raises(ValidationError):
        PerformanceThresholds(0.02, 0.01, 0.04)
    named = PerformanceThresholds.load("fema356-rc-frame")
    np.testing.assert_array_equal(named.values, [0.01, 0.02, 0.04])
    path = tmp_path / "limits.json"
    path.write_text(json.dumps({"io": 0.005, "ls": 0.015, "cp": 0.025}), encoding="utf-8")
    assert PerformanceThresholds.load(path).cp == 0.025
    with pytest.raises(ValidationError):
        PerformanceThresholds.load(tmp_path / "missing.json")


def test_report_serialises_stories():
    est = DriftEstimate(mean_isd=[0.012, 0.005], sigma_isd=[0.003, 0.001])
    report = assess_performance(est, LIMITS, covariance_metadata={"provenance": "design-stage"})
    data = report.to_dict()
    assert [s["story"] for s in data["stories"]] == [1, 2]
    assert data["classification"]["level"] == report.level.value
    assert data["covariance"]["provenance"] == "design-stage"
    assert sum(data["building"]["p_class"].values()) == pytest.approx(1.0)
