"""Main CLI entry point: orchestrates placement, reconstruction and assessment."""

from __future__ import annotations

import argparse
import glob
import json
import logging
import re
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import PipelineConfig, load_config
from .errors import AssessmentError, ValidationError
from .ground_motion import (
    GroundMotionSpec,
    NoiseSpec,
    calibrate_g0,
    generate_realization,
    noise_psd,
    psd_function,
)
from .observer import (
    TRACE_P,
    TRACE_P_ISD,
    FeedbackGain,
    ObserverSolution,
    SensorLayout,
    estimation_covariance,
    optimize_gain,
    run_nmbo,
)
from .performance import (
    DriftEstimate,
    PerformanceThresholds,
    assess_performance,
    estimate_drifts,
    load_story_exceedance,
    pdf_table,
    report_from_exceedance,
)
from .placement import PlacementProblem, parse_sigma2, place
from .records import ACCELERATION, VELOCITY, Record, accel_to_velocity, read_record, write_record
from .structure import BuildingModel
from .writer import RunManifest, write_csv, write_json

logger = logging.getLogger(__name__)

OBJECTIVE_FLAGS = {"trace-p": TRACE_P, "trace-p-isd": TRACE_P_ISD}
_STORY_CHANNEL = re.compile(r"^story-(\d+)$")


def _setup_logging(level: str = "INFO") -> None:
    logging.basicConfig(
        format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
        datefmt="%H:%M:%S",
    )
    # basicConfig leaves an already configured root alone; the level still applies
    logging.getLogger().setLevel(getattr(logging, level.upper(), logging.INFO))


def _banner(title: str) -> None:
    logger.info("=" * 60)
    logger.info(title)
    logger.info("=" * 60)


# ── Input resolution ──────────────────────────────────────────────


def _require(path: Path | None, flag: str) -> Path:
    if path is None:
        raise ValidationError(f"missing required input {flag}")
    if not Path(path).is_file():
        raise FileNotFoundError(f"{flag}: {path} does not exist")
    return Path(path)


def _record_paths(pattern: str | None) -> list[Path]:
    if not pattern:
        raise ValidationError("missing required input --records")
    paths = [Path(p) for p in sorted(glob.glob(pattern))]
    if not paths:
        raise FileNotFoundError(f"--records: no files match '{pattern}'")
    return paths


def _gm_spec(config: PipelineConfig, manifest: RunManifest) -> GroundMotionSpec:
    path = _require(config.inputs.gm_spec, "--gm-spec")
    manifest.add_input(path)
    spec = GroundMotionSpec.load(path)
    spec.validate()
    return spec


def _objective(config: PipelineConfig) -> str:
    flag = config.observer.objective or "trace-p"
    if flag not in OBJECTIVE_FLAGS:
        raise ValidationError(f"objective must be one of {sorted(OBJECTIVE_FLAGS)}, got '{flag}'")
    return OBJECTIVE_FLAGS[flag]


def _measured_velocities(
    records: list[Record], layout: SensorLayout, config: PipelineConfig
) -> list[Record]:
    """One velocity record per measured story, in layout order.

    Channels are labelled ``story-<k>``; acceleration records are integrated
    and high-pass filtered.
    """
    by_story: dict[int, Record] = {}
    for record in records:
        match = _STORY_CHANNEL.match(record.channel)
        if not match:
            logger.info("Ignoring channel '%s'", record.channel)
            continue
        story = int(match.group(1))
        if story in by_story:
            raise ValidationError(f"more than one record for story {story}")
        by_story[story] = record

    velocities = []
    for story in layout.measured_dofs:
        if story not in by_story:
            raise ValidationError(f"no record for measured story {story}")
        record = by_story[story]
        if record.units == ACCELERATION:
            record = accel_to_velocity(record, config.filter)
        record.require_units(VELOCITY)
        velocities.append(record)
    unused = sorted(set(by_story) - set(layout.measured_dofs))
    if unused:
        logger.warning("Records for unmeasured stories %s are ignored", unused)
    return velocities


# ── Pipelines ─────────────────────────────────────────────────────


def _observer_solution(
    config: PipelineConfig, manifest: RunManifest
) -> tuple[BuildingModel, ObserverSolution]:
    model_path = _require(config.inputs.model, "--model")
    layout_path = _require(config.inputs.layout, "--layout")
    manifest.add_input(model_path)
    manifest.add_input(layout_path)
    model = BuildingModel.load(model_path)
    layout = SensorLayout.load(layout_path)
    layout.validate(model.n)
    spec = _gm_spec(config, manifest)

    record_paths = _record_paths(config.inputs.records)
    for path in record_paths:
        manifest.add_input(path)
    velocities = _measured_velocities([read_record(p) for p in record_paths], layout, config)

    phi_ww = psd_function(spec, config.observer.process_noise_scaling)
    noise = NoiseSpec(rms_ratio=config.observer.noise_rms_ratio)
    phi_vv = np.array([noise_psd(v, noise) for v in velocities])
    grid = config.observer.frequency_grid()

    if config.inputs.gain is not None:
        gain_path = _require(config.inputs.gain, "--gain")
        manifest.add_input(gain_path)
        gain = FeedbackGain.load(gain_path)
    else:
        _banner("Optimising feedback gain")
        gain = optimize_gain(
            model, layout, phi_ww, phi_vv,
            objective=_objective(config),
            optimizer_cfg=config.observer.optimizer(),
            freq_grid=grid,
        )

    _banner("Estimation-error covariance")
    covariance = estimation_covariance(model, layout, gain, phi_ww, phi_vv, grid)

    _banner(f"Running observer on stories {list(layout.measured_dofs)}")
    settings = config.integrator.settings(velocities[0].dt)
    solution = run_nmbo(model, gain, layout, velocities, settings, covariance=covariance)
    return model, solution


def _write_reconstruction(
    model: BuildingModel, solution: ObserverSolution, out: Path, manifest: RunManifest
) -> DriftEstimate:
    history = solution.q_hat
    header = ["time"] + [f"q_{k}" for k in range(1, model.n + 1)]
    manifest.add_output(write_csv(header, np.column_stack([history.time, history.q]),
                                  out / "q_hat.csv"))
    manifest.add_output(write_json(solution.gain.to_dict(), out / "gain.json"))
    manifest.add_output(write_json(solution.covariance.to_dict(), out / "covariance.json"))
    estimate = estimate_drifts(solution, model)
    manifest.add_output(write_json(
        {
            "layout": list(solution.layout.measured_dofs),
            "drift": estimate.to_dict(),
            "covariance": solution.covariance.metadata,
        },
        out / "reconstruction.json",
    ))
    return estimate


def cmd_place(config: PipelineConfig, args: argparse.Namespace, manifest: RunManifest) -> None:
    problem_path = _require(config.inputs.problem, "--problem")
    manifest.add_input(problem_path)
    model = None
    if config.inputs.model is not None:
        model_path = _require(config.inputs.model, "--model")
        manifest.add_input(model_path)
        model = BuildingModel.load(model_path)
    phi_ww = None
    if config.inputs.gm_spec is not None:
        phi_ww = psd_function(_gm_spec(config, manifest), config.observer.process_noise_scaling)
    problem = PlacementProblem.load(problem_path, model=model, phi_ww=phi_ww)

    grid = config.observer.frequency_grid()
    overrides: dict = {
        "optimizer": config.observer.optimizer(),
        "freq_grid": replace(grid, refine_check=False),
        "enumeration_cap": config.placement.enumeration_cap,
        "workers": config.placement.workers,
    }
    if config.observer.objective:
        overrides["objective"] = _objective(config)
    bound = args.sigma2_max or config.placement.sigma2_max
    if bound is not None:
        overrides["sigma2_max"], overrides["sigma2_units"] = parse_sigma2(bound)
    if args.budget is not None:
        overrides["m"] = args.budget
    # re-validated, with an empty evaluation cache
    problem = replace(problem, **overrides)

    _banner(f"Sensor placement ({config.placement.strategy}, m={problem.m})")
    result = place(problem, config.placement.strategy)
    out = config.output_dir
    manifest.add_output(write_json(result.to_dict(), out / "placement.json"))
    result.layout.save(out / "layout.json")
    manifest.add_output(out / "layout.json")
    result.gain.save(out / "gain.json")
    manifest.add_output(out / "gain.json")


def cmd_optimize_gain(config: PipelineConfig, args: argparse.Namespace, manifest: RunManifest) -> None:
    model_path = _require(config.inputs.model, "--model")
    layout_path = _require(config.inputs.layout, "--layout")
    manifest.add_input(model_path)
    manifest.add_input(layout_path)
    model = BuildingModel.load(model_path)
    layout = SensorLayout.load(layout_path)
    spec = _gm_spec(config, manifest)
    phi_ww = psd_function(spec, config.observer.process_noise_scaling)

    if config.inputs.records:
        record_paths = _record_paths(config.inputs.records)
        for path in record_paths:
            manifest.add_input(path)
        velocities = _measured_velocities([read_record(p) for p in record_paths], layout, config)
        noise = NoiseSpec(rms_ratio=config.observer.noise_rms_ratio)
        phi_vv: float | np.ndarray = np.array([noise_psd(v, noise) for v in velocities])
    elif config.inputs.problem is not None:
        problem_path = _require(config.inputs.problem, "--problem")
        manifest.add_input(problem_path)
        problem = PlacementProblem.load(problem_path, model=model, phi_ww=phi_ww)
        phi_vv = problem.channel_noise(layout)
    else:
        raise ValidationError("measurement-noise density needs --records or --problem")

    _banner(f"Optimising feedback gain for stories {list(layout.measured_dofs)}")
    grid = config.observer.frequency_grid()
    gain = optimize_gain(
        model, layout, phi_ww, phi_vv,
        objective=_objective(config),
        optimizer_cfg=config.observer.optimizer(),
        freq_grid=grid,
    )
    covariance = estimation_covariance(model, layout, gain, phi_ww, phi_vv, grid)
    out = config.output_dir
    gain.save(out / "gain.json")
    manifest.add_output(out / "gain.json")
    covariance.save(out / "covariance.json")
    manifest.add_output(out / "covariance.json")


def cmd_reconstruct(config: PipelineConfig, args: argparse.Namespace, manifest: RunManifest) -> None:
    model, solution = _observer_solution(config, manifest)
    _write_reconstruction(model, solution, config.output_dir, manifest)


def cmd_report(config: PipelineConfig, args: argparse.Namespace, manifest: RunManifest) -> None:
    model, solution = _observer_solution(config, manifest)
    out = config.output_dir
    estimate = _write_reconstruction(model, solution, out, manifest)

    _banner("Performance assessment")
    thresholds = _thresholds(config, manifest)
    report = assess_performance(estimate, thresholds,
                                covariance_metadata=solution.covariance.metadata)
    manifest.add_output(write_json(report.to_dict(), out / "report.json"))
    header, rows = pdf_table(estimate, thresholds)
    manifest.add_output(write_csv(header, rows, out / "drift_pdf.csv"))


def _thresholds(config: PipelineConfig, manifest: RunManifest) -> PerformanceThresholds:
    source = config.inputs.thresholds
    if Path(source).is_file():
        manifest.add_input(Path(source))
    return PerformanceThresholds.load(source)


def cmd_classify(config: PipelineConfig, args: argparse.Namespace, manifest: RunManifest) -> None:
    thresholds = _thresholds(config, manifest)
    out = config.output_dir
    if args.exceedance:
        path = _require(Path(args.exceedance), "--exceedance")
        manifest.add_input(path)
        report = report_from_exceedance(load_story_exceedance(path), thresholds)
    elif args.drifts:
        path = _require(Path(args.drifts), "--drifts")
        manifest.add_input(path)
        payload = json.loads(path.read_text(encoding="utf-8"))
        drift = payload.get("drift", payload)
        estimate = DriftEstimate(mean_isd=drift["mean_isd"], sigma_isd=drift["sigma_isd"])
        report = assess_performance(estimate, thresholds,
                                    covariance_metadata=payload.get("covariance", {}))
    else:
        raise ValidationError("classify needs --exceedance or --drifts")
    manifest.add_output(write_json(report.to_dict(), out / "classification.json"))


def cmd_generate_gm(config: PipelineConfig, args: argparse.Namespace, manifest: RunManifest) -> None:
    spec = _gm_spec(config, manifest)
    stationary = config.ground_motion.stationary
    record = generate_realization(spec, config.seed, stationary=stationary)
    path = config.output_dir / "ground_accel.csv"
    write_record(record, path)
    manifest.add_output(path)
    logger.info("Generated %d samples (PGA %.4g m/s^2)", len(record), np.max(np.abs(record.samples)))


def cmd_calibrate_gm(config: PipelineConfig, args: argparse.Namespace, manifest: RunManifest) -> None:
    spec = _gm_spec(config, manifest)
    record_paths = _record_paths(config.inputs.records)
    if len(record_paths) != 1:
        raise ValidationError(f"calibrate-gm needs exactly one ground record, got {len(record_paths)}")
    manifest.add_input(record_paths[0])
    measured = read_record(record_paths[0])

    _banner(f"Calibrating G0 against '{measured.channel}'")
    gm = config.ground_motion
    result = calibrate_g0(
        measured, spec,
        ensemble_size=gm.ensemble_size,
        coverage_target=gm.coverage_target,
        seed=config.seed,
        stationary=gm.stationary,
    )
    out = config.output_dir
    manifest.add_output(write_json(asdict(result), out / "calibration.json"))
    calibrated = spec.with_g0(result.g0)
    calibrated.save(out / "gm_spec.json")
    manifest.add_output(out / "gm_spec.json")


COMMANDS = {
    "place": cmd_place,
    "optimize-gain": cmd_optimize_gain,
    "reconstruct": cmd_reconstruct,
    "classify": cmd_classify,
    "generate-gm": cmd_generate_gm,
    "calibrate-gm": cmd_calibrate_gm,
    "report": cmd_report,
}


# ── Argument handling ─────────────────────────────────────────────


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="Path to config.toml")
    common.add_argument("--model", default=None, help="Building model JSON")
    common.add_argument("--layout", default=None, help="Sensor layout JSON")
    common.add_argument("--gm-spec", dest="gm_spec", default=None, help="Ground-motion spec JSON")
    common.add_argument("--records", default=None, help="Glob of record CSV files")
    common.add_argument("--thresholds", default=None, help="Threshold JSON or named set")
    common.add_argument("--objective", choices=sorted(OBJECTIVE_FLAGS), default=None)
    common.add_argument("--sigma2-max", dest="sigma2_max", default=None,
                        help="Drift-variance bound with units, e.g. 1e-6m2 or 2e-5ratio")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", default=None, help="Output directory")
    common.add_argument("--problem", default=None, help="Placement problem JSON")
    common.add_argument("--strategy", choices=["exhaustive", "greedy"], default=None)
    common.add_argument("--budget", type=int, default=None, help="Number of sensors")
    common.add_argument("--gain", default=None, help="Feedback gain JSON")
    common.add_argument("--stationary", action="store_true", default=None,
                        help="Stationary ground-motion realisations")

    parser = argparse.ArgumentParser(
        prog="pe-assess",
        description="Post-earthquake assessment of instrumented buildings",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        command = sub.add_parser(name, parents=[common])
        if name == "classify":
            command.add_argument("--exceedance", default=None, help="Story exceedance JSON")
            command.add_argument("--drifts", default=None, help="Drift estimate JSON")
    return parser


def _apply_overrides(config: PipelineConfig, args: argparse.Namespace) -> None:
    inputs = config.inputs
    for name in ("model", "layout", "gm_spec", "problem", "gain"):
        value = getattr(args, name)
        if value is not None:
            setattr(inputs, name, Path(value))
    if args.records is not None:
        inputs.records = args.records
    if args.thresholds is not None:
        inputs.thresholds = args.thresholds
    if args.objective is not None:
        config.observer.objective = args.objective
    if args.seed is not None:
        config.seed = args.seed
    if args.out is not None:
        config.output_dir = Path(args.out)
    if args.strategy is not None:
        config.placement.strategy = args.strategy
    if args.stationary:
        config.ground_motion.stationary = True


def run(argv: list[str] | None = None) -> int:
    """Run one command and return its exit code."""
    parser = _build_parser()
    args = parser.parse_args(argv)

    try:
        config = load_config(Path(args.config) if args.config else None)
        _apply_overrides(config, args)
        _setup_logging(config.log_level)
    except AssessmentError as e:
        logger.error("Failed to load configuration: %s", e)
        return e.exit_code
    except Exception as e:
        logger.error("Failed to load configuration: %s", e)
        return 1

    logger.info("Post-earthquake assessment v%s: %s", __version__, args.command)
    manifest = RunManifest(
        command=args.command,
        seed=config.seed,
        input_root=config.project_root,
        output_root=config.output_dir,
        settings={
            "integrator": asdict(config.integrator),
            "filter": asdict(config.filter),
            "observer": asdict(config.observer),
            "placement": asdict(config.placement),
            "ground_motion": asdict(config.ground_motion),
            "thresholds": Path(config.inputs.thresholds).name,
        },
    )
    try:
        COMMANDS[args.command](config, args, manifest)
        manifest.save(config.output_dir)
    except KeyboardInterrupt:
        logger.info("\nInterrupted by user.")
        return 130
    except AssessmentError as e:
        logger.error("%s failed: %s", args.command, e)
        return e.exit_code
    except FileNotFoundError as e:
        logger.error("%s failed: missing input %s", args.command, e)
        return 3
    except Exception as e:
        logger.error("%s failed: %s", args.command, e, exc_info=True)
        return 1

    _banner(f"DONE! Output files in: {config.output_dir}")
    for name in sorted(manifest.outputs):
        size_kb = (config.output_dir / name).stat().st_size / 1024
        logger.info("  %s (%.1f KB)", name, size_kb)
    return 0


def main() -> None:
    """CLI entry point."""
    sys.exit(run())


if __name__ == "__main__":
    main()
