"""Sensor placement: choose measured stories that minimise the estimation
error subject to an upper bound on every story's drift-error variance.

Each candidate layout gets its own optimised feedback gain before it is
scored, so a layout evaluation is a full gain optimisation. Evaluations are
cached per problem and keyed by layout.
"""

from __future__ import annotations

import concurrent.futures
import json
import logging
import math
import re
import threading
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np

from .errors import PlacementError, UnitsError, ValidationError
from .observer import (
    OBJECTIVES,
    TRACE_P,
    Density,
    ErrorCovariance,
    FeedbackGain,
    FrequencyGrid,
    OptimizerConfig,
    SensorLayout,
    estimation_covariance,
    optimize_gain,
)
from .structure import BuildingModel

logger = logging.getLogger(__name__)

SIGMA2_UNITS = ("m2", "ratio")
EXHAUSTIVE = "exhaustive"
GREEDY = "greedy"

_SIGMA2_PATTERN = re.compile(r"^\s*([-+]?(?:inf|[0-9]*\.?[0-9]+(?:[eE][-+]?[0-9]+)?))\s*(m2|ratio)\s*$")


def parse_sigma2(text: str) -> tuple[float, str]:
    """Parse a bound such as ``1e-6m2`` or ``2.5e-5ratio``."""
    match = _SIGMA2_PATTERN.match(text)
    if not match:
        raise UnitsError(
            f"sigma2_max '{text}' needs a value followed by a units tag ({' or '.join(SIGMA2_UNITS)})"
        )
    return float(match.group(1)), match.group(2)


@dataclass
class PlacementProblem:
    """Placement inputs.

    ``sigma2_max`` is an absolute drift variance (``m2``) or a drift-ratio
    variance (``ratio``, i.e. divided by the story height squared).
    ``phi_vv`` is a scalar density or one density per story; each layout
    takes the entries of its measured stories.
    """

    model: BuildingModel
    candidate_dofs: tuple[int, ...]
    m: int
    sigma2_max: float
    phi_ww: Density
    phi_vv: float | np.ndarray
    sigma2_units: str = "m2"
    objective: str = TRACE_P
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    freq_grid: FrequencyGrid = field(default_factory=lambda: FrequencyGrid(refine_check=False))
    enumeration_cap: int = 10_000
    workers: int = 1

    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        n = self.model.n
        self.candidate_dofs = tuple(sorted(int(k) for k in self.candidate_dofs))
        if len(set(self.candidate_dofs)) != len(self.candidate_dofs):
            raise ValidationError(f"duplicate candidate stories {self.candidate_dofs}")
        for k in self.candidate_dofs:
            if not 1 <= k <= n:
                raise ValidationError(f"candidate story {k} outside 1..{n}")
        if not 1 <= self.m <= len(self.candidate_dofs):
            raise ValidationError(
                f"sensor budget m={self.m} must lie in 1..{len(self.candidate_dofs)}"
            )
        if math.isnan(self.sigma2_max) or self.sigma2_max < 0:
            raise ValidationError(f"sigma2_max must be non-negative, got {self.sigma2_max}")
        if self.sigma2_units not in SIGMA2_UNITS:
            raise UnitsError(f"sigma2_max units must be one of {SIGMA2_UNITS}, got '{self.sigma2_units}'")
        if self.objective not in OBJECTIVES:
            raise ValidationError(f"objective must be one of {OBJECTIVES}, got '{self.objective}'")
        phi_vv = np.asarray(self.phi_vv, dtype=float)
        if phi_vv.ndim > 1 or (phi_vv.ndim == 1 and len(phi_vv) != n):
            raise ValidationError(f"phi_vv must be a scalar or have {n} entries")
        if self.workers < 1:
            raise ValidationError("workers must be >= 1")

    def channel_noise(self, layout: SensorLayout) -> float | np.ndarray:
        phi_vv = np.asarray(self.phi_vv, dtype=float)
        if phi_vv.ndim == 0:
            return float(phi_vv)
        return phi_vv[np.array(layout.measured_dofs) - 1]

    def isd_variances(self, covariance: ErrorCovariance) -> np.ndarray:
        """Drift-error variances in the units of ``sigma2_max``."""
        if self.sigma2_units == "ratio":
            return covariance.isd_variance_ratio(self.model.story_height)
        return covariance.P_isd

    @classmethod
    def from_dict(cls, data: dict, model: BuildingModel, phi_ww: Density | None = None) -> PlacementProblem:
        bound = data.get("sigma2_max", {"value": math.inf, "units": "m2"})
        if isinstance(bound, str):
            value, units = parse_sigma2(bound)
        elif isinstance(bound, dict) and "units" in bound:
            value, units = float(bound["value"]), bound["units"]
        else:
            raise UnitsError("sigma2_max needs an explicit units tag")
        if phi_ww is None:
            if "phi_ww" not in data:
                raise ValidationError("placement problem needs 'phi_ww' or a ground-motion spec")
            phi_ww = float(data["phi_ww"])
        return cls(
            model=model,
            candidate_dofs=tuple(data.get("candidate_dofs") or range(1, model.n + 1)),
            m=int(data["m"]),
            sigma2_max=value,
            sigma2_units=units,
            phi_ww=phi_ww,
            phi_vv=np.asarray(data.get("phi_vv", 0.0), dtype=float),
            objective=data.get("objective", TRACE_P),
            enumeration_cap=int(data.get("enumeration_cap", 10_000)),
        )

    @classmethod
    def load(
        cls, path: Path, model: BuildingModel | None = None, phi_ww: Density | None = None
    ) -> PlacementProblem:
        """Load a problem file; its ``model`` entry is resolved next to the file."""
        path = Path(path)
        data = json.loads(path.read_text(encoding="utf-8"))
        if model is None:
            if "model" not in data:
                raise ValidationError(f"{path.name}: no 'model' entry and no model given")
            model = BuildingModel.load(path.parent / data["model"])
        return cls.from_dict(data, model, phi_ww)


@dataclass
class LayoutEvaluation:
    layout: SensorLayout
    gain: FeedbackGain
    covariance: ErrorCovariance
    trace_P: float
    max_isd_var: float
    objective_value: float
    feasible: bool

    def to_dict(self) -> dict:
        return {
            "layout": list(self.layout.measured_dofs),
            "objective": self.objective_value,
            "trace_P": self.trace_P,
            "max_isd_var": self.max_isd_var,
            "feasible": self.feasible,
            "E_diag": self.gain.E_diag.tolist(),
            "gain_converged": self.gain.converged,
        }


@dataclass
class PlacementResult:
    layout: SensorLayout
    gain: FeedbackGain
    trace_P: float
    max_isd_var: float
    feasible: bool
    evaluated_count: int
    strategy: str
    objective: str
    sigma2_max: float
    sigma2_units: str
    audit: list[LayoutEvaluation] = field(default_factory=list)
    objective_path: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "objective": self.objective,
            "layout": list(self.layout.measured_dofs),
            "gain": self.gain.to_dict(),
            "trace_P": self.trace_P,
            "max_isd_var": self.max_isd_var,
            "sigma2_max": {"value": self.sigma2_max, "units": self.sigma2_units},
            "feasible": self.feasible,
            "evaluated_count": self.evaluated_count,
            "objective_path": self.objective_path,
            "audit": [item.to_dict() for item in self.audit],
        }


# ── Evaluation ────────────────────────────────────────────────────


def evaluate_layout(problem: PlacementProblem, layout: SensorLayout) -> LayoutEvaluation:
    """Optimise the gain for ``layout`` and score it."""
    key = tuple(sorted(layout.measured_dofs))
    with problem._lock:
        cached = problem._cache.get(key)
    if cached is not None:
        return cached

    missing = set(key) - set(problem.candidate_dofs)
    if missing:
        raise ValidationError(f"layout {key} uses non-candidate stories {sorted(missing)}")
    layout = SensorLayout(key)
    phi_vv = problem.channel_noise(layout)
    gain = optimize_gain(
        problem.model,
        layout,
        problem.phi_ww,
        phi_vv,
        objective=problem.objective,
        optimizer_cfg=problem.optimizer,
        freq_grid=problem.freq_grid,
    )
    covariance = estimation_covariance(
        problem.model, layout, gain, problem.phi_ww, phi_vv, problem.freq_grid
    )
    isd = problem.isd_variances(covariance)
    max_isd_var = float(np.max(isd))
    evaluation = LayoutEvaluation(
        layout=layout,
        gain=gain,
        covariance=covariance,
        trace_P=covariance.trace,
        max_isd_var=max_isd_var,
        objective_value=covariance.trace if problem.objective == TRACE_P else covariance.trace_isd,
        feasible=bool(max_isd_var < problem.sigma2_max),
    )
    logger.debug(
        "Layout %s: trace(P)=%.4g, max ISD variance=%.4g, feasible=%s",
        list(key), evaluation.trace_P, max_isd_var, evaluation.feasible,
    )
    with problem._lock:
        problem._cache[key] = evaluation
    return evaluation


def _evaluate_all(problem: PlacementProblem, layouts: list[SensorLayout]) -> list[LayoutEvaluation]:
    if problem.workers == 1 or len(layouts) == 1:
        return [evaluate_layout(problem, layout) for layout in layouts]
    with concurrent.futures.ThreadPoolExecutor(max_workers=problem.workers) as executor:
        return list(executor.map(lambda layout: evaluate_layout(problem, layout), layouts))


def _rank(evaluation: LayoutEvaluation) -> tuple:
    return (evaluation.objective_value, evaluation.layout.measured_dofs)


def _result(
    problem: PlacementProblem,
    best: LayoutEvaluation,
    audit: list[LayoutEvaluation],
    strategy: str,
    objective_path: list[float] | None = None,
) -> PlacementResult:
    # Feasibility comes from the raw covariance, not the cached flag.
    max_isd_var = float(np.max(problem.isd_variances(best.covariance)))
    return PlacementResult(
        layout=best.layout,
        gain=best.gain,
        trace_P=best.trace_P,
        max_isd_var=max_isd_var,
        feasible=bool(max_isd_var < problem.sigma2_max),
        evaluated_count=len(audit),
        strategy=strategy,
        objective=problem.objective,
        sigma2_max=problem.sigma2_max,
        sigma2_units=problem.sigma2_units,
        audit=audit,
        objective_path=objective_path or [],
    )


# ── Strategies ────────────────────────────────────────────────────


def place_exhaustive(problem: PlacementProblem) -> PlacementResult:
    """Evaluate every size-m subset of the candidates."""
    count = math.comb(len(problem.candidate_dofs), problem.m)
    if count > problem.enumeration_cap:
        raise PlacementError(
            f"{count} layouts exceed the enumeration cap of {problem.enumeration_cap}; "
            "use the greedy strategy"
        )
    layouts = [SensorLayout(subset) for subset in combinations(problem.candidate_dofs, problem.m)]
    logger.info("Exhaustive placement: %d layouts of %d sensors", count, problem.m)
    audit = _evaluate_all(problem, layouts)

    feasible = [item for item in audit if item.feasible]
    if feasible:
        best = min(feasible, key=_rank)
    else:
        best = min(audit, key=lambda item: (item.max_isd_var,) + _rank(item))
        logger.warning(
            "No layout satisfies sigma2_max=%g %s; returning the smallest violation %s",
            problem.sigma2_max, problem.sigma2_units, list(best.layout.measured_dofs),
        )
    result = _result(problem, best, audit, EXHAUSTIVE)
    logger.info(
        "Best layout %s: trace(P)=%.4g, feasible=%s",
        list(result.layout.measured_dofs), result.trace_P, result.feasible,
    )
    return result


def place_greedy(problem: PlacementProblem) -> PlacementResult:
    """Forward selection: add the story that most reduces the objective."""
    selected: list[int] = []
    remaining = list(problem.candidate_dofs)
    audit: list[LayoutEvaluation] = []
    path: list[LayoutEvaluation] = []

    while len(selected) < problem.m:
        trials = [SensorLayout(tuple(sorted(selected + [k]))) for k in remaining]
        evaluations = _evaluate_all(problem, trials)
        audit.extend(evaluations)
        best = min(evaluations, key=_rank)
        added = next(k for k in best.layout.measured_dofs if k not in selected)
        selected.append(added)
        remaining.remove(added)
        path.append(best)
        logger.info("Greedy step %d: add story %d, objective %.4g", len(selected), added, best.objective_value)

    result = _result(problem, path[-1], audit, GREEDY, [item.objective_value for item in path])
    if not result.feasible:
        logger.warning(
            "Greedy layout %s violates sigma2_max=%g %s (max %.4g)",
            list(result.layout.measured_dofs), problem.sigma2_max, problem.sigma2_units,
            result.max_isd_var,
        )
    return result


def place(problem: PlacementProblem, strategy: str = EXHAUSTIVE) -> PlacementResult:
    if strategy == EXHAUSTIVE:
        return place_exhaustive(problem)
    if strategy == GREEDY:
        return place_greedy(problem)
    raise ValidationError(f"unknown placement strategy '{strategy}'")
