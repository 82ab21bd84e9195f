"""Sensor placement strategies."""

import math
from itertools import combinations
from pathlib import Path

import numpy as np
import pytest

from post_earthquake_assessment.errors import PlacementError, UnitsError, ValidationError
from post_earthquake_assessment.observer import (
    FrequencyGrid,
    OptimizerConfig,
    SensorLayout,
    estimation_covariance,
    optimize_gain,
)
from post_earthquake_assessment.placement import (
    PlacementProblem,
    evaluate_layout,
    parse_sigma2,
    place,
    place_exhaustive,
    place_greedy,
)
from post_earthquake_assessment.structure import BuildingModel

DATA = Path(__file__).parent / "data"
FAST_OPTIMIZER = OptimizerConfig(max_iter=200)
FAST_GRID = FrequencyGrid(points=512, refine_check=False)


@pytest.fixture(scope="module")
def model():
    return BuildingModel.load(DATA / "model_4story.json")


def _problem(model, m=2, sigma2_max=math.inf, candidates=None, **kwargs):
    return PlacementProblem(
        model=model,
        candidate_dofs=candidates or tuple(range(1, model.n + 1)),
        m=m,
        sigma2_max=sigma2_max,
        phi_ww=2e-3,
        phi_vv=6e-9,
        optimizer=FAST_OPTIMIZER,
        freq_grid=FAST_GRID,
        **kwargs,
    )


def _independent_scores(model, m):
    scores = {}
    for subset in combinations(range(1, model.n + 1), m):
        layout = SensorLayout(subset)
        gain = optimize_gain(model, layout, 2e-3, 6e-9, optimizer_cfg=FAST_OPTIMIZER, freq_grid=FAST_GRID)
        cov = estimation_covariance(model, layout, gain, 2e-3, 6e-9, FAST_GRID)
        scores[subset] = (cov.trace, float(np.max(cov.P_isd)))
    return scores


def test_parse_sigma2_requires_units():
    assert parse_sigma2("1e-6m2") == (1e-6, "m2")
    assert parse_sigma2("2.5e-5 ratio") == (2.5e-5, "ratio")
    assert parse_sigma2("inf m2") == (math.inf, "m2")
    with pytest.raises(UnitsError):
        parse_sigma2("5")
    with pytest.raises(UnitsError):
        parse_sigma2("1e-6 in2")


def test_problem_validation(model):
    with pytest.raises(ValidationError):
        _problem(model, m=0)
    with pytest.raises(ValidationError):
        _problem(model, m=5)
    with pytest.raises(ValidationError):
        _problem(model, sigma2_max=-1.0)
    with pytest.raises(ValidationError):
        _problem(model, candidates=(1, 6))


def test_problem_file_needs_units(model):
    with pytest.raises(UnitsError):
        PlacementProblem.from_dict({"m": 2, "phi_ww": 1e-3, "sigma2_max": 1e-4}, model)


def test_problem_file_resolves_model():
    problem = PlacementProblem.load(DATA / "placement_4story.json")
    assert problem.model.n == 4
    assert problem.m == 2
    assert problem.sigma2_max == 1e-4
    assert problem.sigma2_units == "m2"


def test_exhaustive_matches_independent_enumeration(model):
    scores = _independent_scores(model, 2)
    bound = float(np.median([isd for _, isd in scores.values()]))
    result = place_exhaustive(_problem(model, sigma2_max=bound))

    feasible = {layout: trace for layout, (trace, isd) in scores.items() if isd < bound}
    expected = min(feasible, key=lambda layout: (feasible[layout], layout))
    assert result.layout.measured_dofs == expected
    assert result.trace_P == pytest.approx(feasible[expected], rel=1e-9)
    assert result.feasible
    assert result.evaluated_count == 6


def test_unbounded_picks_smallest_trace(model):
    result = place_exhaustive(_problem(model))
    best = min(item.objective_value for item in result.audit)
    assert result.trace_P == best
    assert result.feasible


def test_zero_bound_returns_smallest_violation(model):
    result = place_exhaustive(_problem(model, sigma2_max=0.0))
    assert not result.feasible
    assert result.max_isd_var == min(item.max_isd_var for item in result.audit)


def test_all_candidates_measured(model):
    result = place_exhaustive(_problem(model, m=4))
    assert result.layout.measured_dofs == (1, 2, 3, 4)
    assert result.evaluated_count == 1


def test_enumeration_cap(model):
    with pytest.raises(PlacementError, match="greedy"):
        place_exhaustive(_problem(model, enumeration_cap=5))


def test_candidate_order_does_not_matter(model):
    a = place_exhaustive(_problem(model, candidates=(4, 2, 3, 1)))
    b = place_exhaustive(_problem(model, candidates=(1, 2, 3, 4)))
    assert a.layout == b.layout
    assert a.trace_P == b.trace_P


def test_feasibility_rechecked_from_covariance(model):
    problem = _problem(model, sigma2_max=0.0)
    for subset in combinations(range(1, 5), 2):
        evaluate_layout(problem, SensorLayout(subset)).feasible = True
    result = place_exhaustive(problem)
    assert not result.feasible


def test_greedy_path_and_gap(model):
    exhaustive = place_exhaustive(_problem(model))
    greedy = place_greedy(_problem(model))
    assert greedy.trace_P >= exhaustive.trace_P * (1.0 - 1e-9)
    assert len(greedy.objective_path) == 2

    full = place_greedy(_problem(model, m=4))
    path = np.array(full.objective_path)
    assert np.all(path[1:] <= path[:-1] * 1.01)
    assert full.layout.measured_dofs == (1, 2, 3, 4)


def test_more_sensors_do_not_hurt():
    model = BuildingModel(story_mass=[1.0e5, 1.0e5, 0.9e5], story_stiffness=[1.2e8, 1.0e8, 0.8e8],
                          story_height=[3.5, 3.0, 3.0])
    problem = _problem(model, m=3)
    everything = evaluate_layout(problem, SensorLayout((1, 2, 3)))
    for subset in combinations(range(1, 4), 2):
        assert everything.trace_P <= evaluate_layout(problem, SensorLayout(subset)).trace_P * 1.02


def test_single_story_building():
    model = BuildingModel(story_mass=[1.0e5], story_stiffness=[4.0e7], story_height=[3.0])
    result = place(_problem(model, m=1), "greedy")
    assert result.layout.measured_dofs == (1,)


def test_unknown_strategy(model):
    with pytest.raises(ValidationError):
        place(_problem(model), "random")


def test_threaded_evaluation_matches_serial(model):
    serial = place_exhaustive(_problem(model))
    threaded = place_exhaustive(_problem(model, workers=3))
    assert serial.layout == threaded.layout
    assert serial.trace_P == pytest.approx(threaded.trace_P, rel=1e-12)
