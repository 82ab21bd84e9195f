"""Damage measures and decision variables from the observer solution.

Maximum story drift ratios are treated as independent Gaussians. Story
exceedance probabilities for the IO/LS/CP limits give four-class band
probabilities, and the building-level values follow from the union over
stories.

Class probabilities use the band reading: p[LS] = p(>=IO) - p(>=LS), and so
on. The literal difference in the opposite order is non-positive.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from scipy import stats

from .errors import ValidationError
from .observer import ObserverSolution
from .structure import BuildingModel

logger = logging.getLogger(__name__)


class PerformanceLevel(str, Enum):
    IO = "IO"
    LS = "LS"
    CP = "CP"
    C = "C"


LIMIT_LEVELS = (PerformanceLevel.IO, PerformanceLevel.LS, PerformanceLevel.CP)
CLASS_LEVELS = LIMIT_LEVELS + (PerformanceLevel.C,)

# name → (io, ls, cp, provenance)
THRESHOLD_SETS = {
    "fema356-rc-frame": (
        0.01,
        0.02,
        0.04,
        "FEMA-356-style transient drift limits, reinforced-concrete frames",
    ),
}
DEFAULT_THRESHOLDS = "fema356-rc-frame"


@dataclass
class PerformanceThresholds:
    """Drift-ratio limits, strictly increasing."""

    io: float
    ls: float
    cp: float
    provenance: str = "user"

    def __post_init__(self) -> None:
        if not 0 < self.io < self.ls < self.cp:
            raise ValidationError(
                f"thresholds must satisfy 0 < io < ls < cp, got ({self.io}, {self.ls}, {self.cp})"
            )

    @property
    def values(self) -> np.ndarray:
        return np.array([self.io, self.ls, self.cp])

    @classmethod
    def named(cls, name: str) -> PerformanceThresholds:
        if name not in THRESHOLD_SETS:
            raise ValidationError(f"unknown threshold set '{name}' (known: {sorted(THRESHOLD_SETS)})")
        io, ls, cp, source = THRESHOLD_SETS[name]
        return cls(io=io, ls=ls, cp=cp, provenance=f"{name}: {source}")

    def to_dict(self) -> dict:
        return {"io": self.io, "ls": self.ls, "cp": self.cp, "provenance": self.provenance}

    @classmethod
    def load(cls, source: str | Path) -> PerformanceThresholds:
        """Load a threshold file, or resolve a named set."""
        if str(source) in THRESHOLD_SETS:
            return cls.named(str(source))
        path = Path(source)
        if not path.is_file():
            raise ValidationError(f"thresholds '{source}' is neither a file nor a named set")
        data = json.loads(path.read_text(encoding="utf-8"))
        if "set" in data:
            return cls.named(data["set"])
        return cls(
            io=float(data["io"]),
            ls=float(data["ls"]),
            cp=float(data["cp"]),
            provenance=data.get("provenance", path.name),
        )


@dataclass
class DriftEstimate:
    """Per-story expected maximum drift ratio and its standard deviation."""

    mean_isd: np.ndarray
    sigma_isd: np.ndarray

    def __post_init__(self) -> None:
        self.mean_isd = np.atleast_1d(np.asarray(self.mean_isd, dtype=float))
        self.sigma_isd = np.atleast_1d(np.asarray(self.sigma_isd, dtype=float))
        if self.mean_isd.shape != self.sigma_isd.shape:
            raise ValidationError("mean_isd and sigma_isd must have the same length")
        if np.any(self.mean_isd < 0) or np.any(self.sigma_isd < 0):
            raise ValidationError("drift means and standard deviations must be non-negative")

    @property
    def n(self) -> int:
        return len(self.mean_isd)

    def to_dict(self) -> dict:
        return {"mean_isd": self.mean_isd.tolist(), "sigma_isd": self.sigma_isd.tolist()}


@dataclass
class PerformanceReport:
    story_p_exceed: np.ndarray  # (n, 3): >=IO, >=LS, >=CP
    story_p_class: np.ndarray  # (n, 4): IO, LS, CP, C
    building_p_exceed: np.ndarray
    building_p_class: np.ndarray
    thresholds: PerformanceThresholds
    level: PerformanceLevel
    drift: DriftEstimate | None = None
    covariance_metadata: dict = field(default_factory=dict)
    truncate_at_zero: bool = False

    @property
    def level_probability(self) -> float:
        return float(self.building_p_class[CLASS_LEVELS.index(self.level)])

    def to_dict(self) -> dict:
        stories = []
        for k in range(len(self.story_p_exceed)):
            entry = {
                "story": k + 1,
                "p_exceed": dict(zip([lv.value for lv in LIMIT_LEVELS], self.story_p_exceed[k].tolist())),
                "p_class": dict(zip([lv.value for lv in CLASS_LEVELS], self.story_p_class[k].tolist())),
            }
            if self.drift is not None:
                entry["mean_isd"] = float(self.drift.mean_isd[k])
                entry["sigma_isd"] = float(self.drift.sigma_isd[k])
            stories.append(entry)
        return {
            "thresholds": self.thresholds.to_dict(),
            "truncate_at_zero": self.truncate_at_zero,
            "stories": stories,
            "building": {
                "p_exceed": dict(zip([lv.value for lv in LIMIT_LEVELS], self.building_p_exceed.tolist())),
                "p_class": dict(zip([lv.value for lv in CLASS_LEVELS], self.building_p_class.tolist())),
            },
            "classification": {"level": self.level.value, "probability": self.level_probability},
            "covariance": self.covariance_metadata,
        }


# ── Drift estimates ───────────────────────────────────────────────


def estimate_drifts(solution: ObserverSolution, model: BuildingModel) -> DriftEstimate:
    """Expected maximum drift ratio max|q_k - q_{k-1}| / h_k and its
    standard deviation sqrt(P_isd(k)) / h_k."""
    history = solution.q_hat
    if history.steps == 0:
        raise ValidationError("observer history is empty")
    if history.n != model.n:
        raise ValidationError(f"observer history has {history.n} stories, model has {model.n}")
    if solution.covariance is None:
        raise ValidationError("observer solution carries no error covariance")
    p_isd = solution.covariance.P_isd
    if len(p_isd) != model.n:
        raise ValidationError(f"covariance has {len(p_isd)} stories, model has {model.n}")

    heights = model.story_height
    mean = np.max(np.abs(history.story_drift()), axis=0) / heights
    sigma = np.sqrt(np.clip(p_isd, 0.0, None)) / heights
    return DriftEstimate(mean_isd=mean, sigma_isd=sigma)


# ── Probabilities ─────────────────────────────────────────────────


def exceedance(mean: float, sigma: float, limits: np.ndarray, truncate_at_zero: bool = False) -> np.ndarray:
    """P(ISD >= limit) for a Gaussian drift; a step function when sigma = 0."""
    limits = np.asarray(limits, dtype=float)
    if sigma == 0:
        return (mean >= limits).astype(float)
    p = stats.norm.sf(limits, loc=mean, scale=sigma)
    if truncate_at_zero:
        # condition on ISD >= 0; limits are positive
        p = p / stats.norm.sf(0.0, loc=mean, scale=sigma)
    return np.clip(p, 0.0, 1.0)


def story_exceedance(
    est: DriftEstimate,
    thresholds: PerformanceThresholds,
    story: int,
    truncate_at_zero: bool = False,
) -> np.ndarray:
    """Exceedance probabilities (>=IO, >=LS, >=CP) of a 1-based story."""
    if not 1 <= story <= est.n:
        raise ValidationError(f"story {story} outside 1..{est.n}")
    k = story - 1
    return exceedance(est.mean_isd[k], est.sigma_isd[k], thresholds.values, truncate_at_zero)


def story_class_probs(p_exceed: np.ndarray) -> np.ndarray:
    """Band probabilities (IO, LS, CP, C) from exceedance probabilities."""
    p = np.asarray(p_exceed, dtype=float)
    if p.shape != (3,):
        raise ValidationError(f"expected three exceedance probabilities, got shape {p.shape}")
    if np.any(p < 0) or np.any(p > 1):
        raise ValidationError(f"exceedance probabilities must lie in [0, 1], got {p.tolist()}")
    if np.any(np.diff(p) > 0):
        raise ValidationError(f"exceedance probabilities must be non-increasing IO→LS→CP, got {p.tolist()}")
    return np.array([1.0 - p[0], p[0] - p[1], p[1] - p[2], p[2]])


def building_exceedance(story_p_exceed: np.ndarray) -> np.ndarray:
    """1 - prod_k (1 - p_k) per level, stories independent."""
    p = np.asarray(story_p_exceed, dtype=float)
    if p.ndim != 2 or p.shape[1] != 3:
        raise ValidationError(f"story exceedance must be (n, 3), got shape {p.shape}")
    return 1.0 - np.prod(1.0 - p, axis=0)


building_class_probs = story_class_probs


def classify(report: PerformanceReport | np.ndarray) -> PerformanceLevel:
    """Most probable building class; ties go to the more severe level."""
    p = report.building_p_class if isinstance(report, PerformanceReport) else np.asarray(report, dtype=float)
    best = np.flatnonzero(p == p.max())[-1]
    return CLASS_LEVELS[best]


def report_from_exceedance(
    story_p_exceed: np.ndarray,
    thresholds: PerformanceThresholds,
    *,
    drift: DriftEstimate | None = None,
    covariance_metadata: dict | None = None,
    truncate_at_zero: bool = False,
) -> PerformanceReport:
    """Aggregate story exceedance probabilities into a report."""
    story_p_exceed = np.asarray(story_p_exceed, dtype=float)
    building = building_exceedance(story_p_exceed)
    story_class = np.array([story_class_probs(row) for row in story_p_exceed])
    building_class = building_class_probs(building)
    report = PerformanceReport(
        story_p_exceed=story_p_exceed,
        story_p_class=story_class,
        building_p_exceed=building,
        building_p_class=building_class,
        thresholds=thresholds,
        level=classify(building_class),
        drift=drift,
        covariance_metadata=covariance_metadata or {},
        truncate_at_zero=truncate_at_zero,
    )
    logger.info(
        "Building classified as %s (p=%.2f); class probabilities %s",
        report.level.value, report.level_probability, np.round(building_class, 3).tolist(),
    )
    return report


def assess_performance(
    est: DriftEstimate,
    thresholds: PerformanceThresholds,
    *,
    truncate_at_zero: bool = False,
    covariance_metadata: dict | None = None,
) -> PerformanceReport:
    story_p = np.array(
        [story_exceedance(est, thresholds, k, truncate_at_zero) for k in range(1, est.n + 1)]
    )
    return report_from_exceedance(
        story_p,
        thresholds,
        drift=est,
        covariance_metadata=covariance_metadata,
        truncate_at_zero=truncate_at_zero,
    )


def pdf_table(
    est: DriftEstimate,
    thresholds: PerformanceThresholds,
    points: int = 401,
) -> tuple[list[str], np.ndarray]:
    """Plot-ready drift-ratio grid with the PDF and CDF of every story.

    Returns the column names and a (points, 1 + 2n) array.
    """
    reach = est.mean_isd + 5.0 * est.sigma_isd
    upper = max(1.5 * thresholds.cp, float(np.max(reach)))
    grid = np.linspace(0.0, upper, points)
    columns = [grid]
    header = ["drift_ratio"]
    for k in range(est.n):
        mean, sigma = est.mean_isd[k], est.sigma_isd[k]
        if sigma > 0:
            pdf = stats.norm.pdf(grid, loc=mean, scale=sigma)
            cdf = stats.norm.cdf(grid, loc=mean, scale=sigma)
        else:
            pdf = np.zeros_like(grid)
            cdf = (grid >= mean).astype(float)
        columns.extend([pdf, cdf])
        header.extend([f"pdf_story_{k + 1}", f"cdf_story_{k + 1}"])
    return header, np.column_stack(columns)


def load_story_exceedance(path: Path) -> np.ndarray:
    """Story exceedance fixture: {"IO": [...], "LS": [...], "CP": [...]}."""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    try:
        rows = [data[level.value] for level in LIMIT_LEVELS]
    except KeyError as exc:
        raise ValidationError(f"{Path(path).name}: missing level {exc}") from None
    lengths = {len(row) for row in rows}
    if len(lengths) != 1:
        raise ValidationError(f"{Path(path).name}: levels have different story counts")
    return np.array(rows, dtype=float).T
