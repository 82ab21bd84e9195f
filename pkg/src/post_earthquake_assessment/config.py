"""Load pipeline configuration from config.toml and .env."""

from __future__ import annotations

import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

from dotenv import load_dotenv

from .errors import ValidationError
from .observer import FrequencyGrid, OptimizerConfig
from .records import FilterSpec
from .structure import IntegratorSettings

# Load .env from project root
_PROJECT_ROOT = Path(__file__).resolve().parents[2]
load_dotenv(_PROJECT_ROOT / ".env")

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib  # type: ignore[no-redef]

LOG_LEVEL_ENV = "PE_ASSESS_LOG_LEVEL"


@dataclass
class InputsConfig:
    model: Path | None = None
    layout: Path | None = None
    gm_spec: Path | None = None
    thresholds: str = "fema356-rc-frame"
    records: str | None = None  # glob
    problem: Path | None = None
    gain: Path | None = None


@dataclass
class IntegratorConfig:
    beta: float = 0.25
    gamma: float = 0.5
    substeps: int = 1
    newton_tol: float = 1e-8
    max_iter: int = 50

    def settings(self, record_dt: float) -> IntegratorSettings:
        if self.substeps < 1:
            raise ValidationError(f"integrator substeps must be >= 1, got {self.substeps}")
        return IntegratorSettings(
            beta=self.beta,
            gamma=self.gamma,
            dt=None if self.substeps == 1 else record_dt / self.substeps,
            newton_tol=self.newton_tol,
            max_iter=self.max_iter,
        )


@dataclass
class ObserverConfig:
    objective: str | None = None
    points: int = 2048
    omega_factor: float = 5.0
    bounds: tuple[float, float] = (1e-2, 1e9)
    initial_range: tuple[float, float] = (1e2, 1e6)
    max_iter: int = 500
    tolerance: float = 1e-4
    noise_rms_ratio: float = 0.02
    process_noise_scaling: str = "envelope-peak"

    def frequency_grid(self) -> FrequencyGrid:
        return FrequencyGrid(points=self.points, omega_factor=self.omega_factor)

    def optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(
            initial_range=self.initial_range,
            bounds=self.bounds,
            max_iter=self.max_iter,
            tolerance=self.tolerance,
        )


@dataclass
class PlacementConfig:
    strategy: str = "exhaustive"
    enumeration_cap: int = 10_000
    sigma2_max: str | None = None
    workers: int = 1


@dataclass
class GroundMotionConfig:
    ensemble_size: int = 200
    coverage_target: float = 0.95
    stationary: bool = False


@dataclass
class PipelineConfig:
    """Pipeline configuration. CLI flags override these values."""

    inputs: InputsConfig = field(default_factory=InputsConfig)
    integrator: IntegratorConfig = field(default_factory=IntegratorConfig)
    filter: FilterSpec = field(default_factory=FilterSpec)
    observer: ObserverConfig = field(default_factory=ObserverConfig)
    placement: PlacementConfig = field(default_factory=PlacementConfig)
    ground_motion: GroundMotionConfig = field(default_factory=GroundMotionConfig)
    output_dir: Path = field(default_factory=lambda: _PROJECT_ROOT / "output")
    seed: int = 0
    log_level: str = "INFO"

    # Directory of config.toml; relative input paths resolve against it
    project_root: Path = field(default_factory=lambda: _PROJECT_ROOT)


def _path(base: Path, value: str | None) -> Path | None:
    if not value:
        return None
    path = Path(value)
    return path if path.is_absolute() else base / path


def load_config(config_path: Path | None = None) -> PipelineConfig:
    """Load configuration from config.toml and environment variables.

    Relative paths in the file resolve against the file's directory.
    """
    if config_path is None:
        config_path = _PROJECT_ROOT / "config.toml"
    base = config_path.parent

    # Read TOML
    toml_data: dict = {}
    if config_path.exists():
        with open(config_path, "rb") as f:
            toml_data = tomllib.load(f)

    inputs = toml_data.get("inputs", {})
    integrator = toml_data.get("integrator", {})
    filt = toml_data.get("filter", {})
    observer = toml_data.get("observer", {})
    placement = toml_data.get("placement", {})
    ground_motion = toml_data.get("ground_motion", {})
    output = toml_data.get("output", {})

    records = inputs.get("records")
    thresholds = inputs.get("thresholds", "fema356-rc-frame")
    if (base / thresholds).is_file():
        thresholds = str(base / thresholds)

    return PipelineConfig(
        inputs=InputsConfig(
            model=_path(base, inputs.get("model")),
            layout=_path(base, inputs.get("layout")),
            gm_spec=_path(base, inputs.get("gm_spec")),
            thresholds=thresholds,
            records=str(base / records) if records and not Path(records).is_absolute() else records,
            problem=_path(base, inputs.get("problem")),
            gain=_path(base, inputs.get("gain")),
        ),
        integrator=IntegratorConfig(
            beta=integrator.get("beta", 0.25),
            gamma=integrator.get("gamma", 0.5),
            substeps=integrator.get("substeps", 1),
            newton_tol=integrator.get("newton_tol", 1e-8),
            max_iter=integrator.get("max_iter", 50),
        ),
        filter=FilterSpec(
            order=filt.get("order", 4),
            cutoff_hz=filt.get("cutoff_hz", 0.1),
        ),
        observer=ObserverConfig(
            objective=observer.get("objective"),
            points=observer.get("points", 2048),
            omega_factor=observer.get("omega_factor", 5.0),
            bounds=tuple(observer.get("bounds", (1e-2, 1e9))),
            initial_range=tuple(observer.get("initial_range", (1e2, 1e6))),
            max_iter=observer.get("max_iter", 500),
            tolerance=observer.get("tolerance", 1e-4),
            noise_rms_ratio=observer.get("noise_rms_ratio", 0.02),
            process_noise_scaling=observer.get("process_noise_scaling", "envelope-peak"),
        ),
        placement=PlacementConfig(
            strategy=placement.get("strategy", "exhaustive"),
            enumeration_cap=placement.get("enumeration_cap", 10_000),
            sigma2_max=placement.get("sigma2_max"),
            workers=placement.get("workers", 1),
        ),
        ground_motion=GroundMotionConfig(
            ensemble_size=ground_motion.get("ensemble_size", 200),
            coverage_target=ground_motion.get("coverage_target", 0.95),
            stationary=ground_motion.get("stationary", False),
        ),
        output_dir=_path(base, output.get("directory")) or _PROJECT_ROOT / "output",
        seed=toml_data.get("seed", 0),
        log_level=os.environ.get(LOG_LEVEL_ENV) or toml_data.get("log_level", "INFO"),
        project_root=base,
    )
