"""Kanai-Tajimi stochastic ground motion and measurement-noise densities.

All spectral densities are two-sided: the variance of a process is the
integral of its density over (-inf, inf) in rad/s.
"""

from __future__ import annotations

import json
import logging
import math
from collections.abc import Callable
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .errors import CalibrationError, ValidationError
from .records import ACCELERATION, Record

logger = logging.getLogger(__name__)

STATIONARY = "stationary"
ENVELOPE_PEAK = "envelope-peak"


@dataclass
class GroundMotionSpec:
    """Kanai-Tajimi filtered white noise with a t*exp(-alpha*t) envelope."""

    G0: float = 1.0  # (m/s^2)^2 s
    omega_g: float = 6.0 * math.pi  # rad/s
    xi_g: float = 0.35
    alpha: float = 0.12  # 1/s
    duration: float = 30.0  # s
    dt: float = 0.01  # s

    def validate(self) -> None:
        if not self.G0 > 0:
            raise ValidationError(f"G0 must be positive, got {self.G0}")
        if not self.omega_g > 0:
            raise ValidationError(f"omega_g must be positive, got {self.omega_g}")
        if not 0 < self.xi_g < 1:
            raise ValidationError(f"xi_g must lie in (0, 1), got {self.xi_g}")
        if not self.alpha > 0:
            raise ValidationError(f"alpha must be positive, got {self.alpha}")
        if not self.duration > 0 or not self.dt > 0:
            raise ValidationError("duration and dt must be positive")

    @property
    def samples(self) -> int:
        return int(round(self.duration / self.dt)) + 1

    def with_g0(self, g0: float) -> GroundMotionSpec:
        return replace(self, G0=g0)

    def save(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Path) -> GroundMotionSpec:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        data.pop("units", None)
        return cls(**data)


@dataclass
class NoiseSpec:
    """White Gaussian measurement noise as a fraction of signal RMS."""

    kind: str = "white-gaussian"
    rms_ratio: float = 0.02

    def __post_init__(self) -> None:
        if self.rms_ratio < 0:
            raise ValidationError(f"rms_ratio must be >= 0, got {self.rms_ratio}")


@dataclass
class G0Calibration:
    g0: float
    coverage: float
    evaluations: int
    ensemble_size: int


# ── Densities and envelope ────────────────────────────────────────


def kanai_tajimi_psd(omega: np.ndarray | float, spec: GroundMotionSpec) -> np.ndarray | float:
    """S(w) = G0 (1 + 4 xi^2 r^2) / ((1 - r^2)^2 + 4 xi^2 r^2), r = w / w_g."""
    r2 = (np.asarray(omega, dtype=float) / spec.omega_g) ** 2
    damping = 4.0 * spec.xi_g**2 * r2
    return spec.G0 * (1.0 + damping) / ((1.0 - r2) ** 2 + damping)


def modulating(t: np.ndarray | float, alpha: float) -> np.ndarray | float:
    """Envelope I(t) = t exp(-alpha t)."""
    t = np.asarray(t, dtype=float)
    return t * np.exp(-alpha * t)


def variance(spec: GroundMotionSpec) -> float:
    """Stationary variance over the unbounded band, pi G0 w_g (1 + 4 xi^2) / (2 xi)."""
    return math.pi * spec.G0 * spec.omega_g * (1.0 + 4.0 * spec.xi_g**2) / (2.0 * spec.xi_g)


def psd_function(spec: GroundMotionSpec, scaling: str = STATIONARY) -> Callable[[np.ndarray], np.ndarray]:
    """Process-noise density w -> S(w) for the observer error analysis.

    ``envelope-peak`` scales S by the squared peak of the envelope,
    (1 / (alpha e))^2, so the stationary density bounds the strong phase.
    """
    if scaling == STATIONARY:
        factor = 1.0
    elif scaling == ENVELOPE_PEAK:
        factor = (1.0 / (spec.alpha * math.e)) ** 2
    else:
        raise ValidationError(f"unknown process-noise scaling '{scaling}'")

    def density(omega: np.ndarray) -> np.ndarray:
        return factor * kanai_tajimi_psd(omega, spec)

    return density


# ── Synthesis ─────────────────────────────────────────────────────


def _check_resolution(spec: GroundMotionSpec) -> None:
    if math.pi / spec.dt < 3.0 * spec.omega_g:
        raise ValidationError(
            f"dt={spec.dt} s too coarse: Nyquist {math.pi / spec.dt:.3g} rad/s "
            f"is below 3 omega_g = {3.0 * spec.omega_g:.3g} rad/s"
        )


def _synthesize(spec: GroundMotionSpec, n: int, rng: np.random.Generator, stationary: bool) -> np.ndarray:
    # Circular complex-Gaussian coefficients on the DFT grid of the record
    # (DC and Nyquist excluded) with E|X_k|^2 = n^2 S(w_k) dw, so each
    # Fourier magnitude is Rayleigh distributed across the ensemble.
    k = np.arange(1, (n - 1) // 2 + 1)
    d_omega = 2.0 * math.pi / (n * spec.dt)
    scale = 0.5 * n * math.sqrt(2.0) * np.sqrt(kanai_tajimi_psd(k * d_omega, spec) * d_omega)
    coefficients = rng.standard_normal(len(k)) + 1j * rng.standard_normal(len(k))
    spectrum = np.zeros(n // 2 + 1, dtype=complex)
    spectrum[k] = scale * coefficients
    x = np.fft.irfft(spectrum, n=n)
    if not stationary:
        x = x * modulating(np.arange(n) * spec.dt, spec.alpha)
    return x


def generate_realization(spec: GroundMotionSpec, seed: int, *, stationary: bool = False) -> Record:
    """One seeded realization of the (modulated) Kanai-Tajimi process."""
    spec.validate()
    _check_resolution(spec)
    rng = np.random.default_rng(seed)
    x = _synthesize(spec, spec.samples, rng, stationary)
    return Record(dt=spec.dt, samples=x, channel="kanai-tajimi", units=ACCELERATION)


def ensemble_seeds(seed: int, size: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(size)]


# ── G0 calibration ────────────────────────────────────────────────


def _band(n: int, dt: float) -> np.ndarray:
    omega = 2.0 * math.pi * np.fft.rfftfreq(n, dt)
    return (omega > 0.0) & (omega <= 0.5 * math.pi / dt)


class _CoverageCurve:
    """Coverage of the measured Fourier amplitudes as a function of G0.

    Realizations are linear in sqrt(G0), so the unit-G0 ensemble statistics
    are computed once and rescaled for every candidate.
    """

    def __init__(
        self,
        measured: Record,
        spec: GroundMotionSpec,
        ensemble_size: int,
        seed: int,
        stationary: bool,
    ) -> None:
        n = len(measured)
        unit = replace(spec, G0=1.0, dt=measured.dt, duration=measured.duration)
        unit.validate()
        _check_resolution(unit)
        band = _band(n, measured.dt)

        magnitudes = np.empty((ensemble_size, int(band.sum())))
        for i, s in enumerate(ensemble_seeds(seed, ensemble_size)):
            x = _synthesize(unit, n, np.random.default_rng(s), stationary)
            magnitudes[i] = np.abs(np.fft.rfft(x))[band]
        self.mean = magnitudes.mean(axis=0)
        self.std = magnitudes.std(axis=0, ddof=1)
        self.target = np.abs(np.fft.rfft(measured.samples))[band]
        self.unit_energy = float(np.mean(np.sum(magnitudes**2, axis=1)))
        self.evaluations = 0

    def __call__(self, g0: float) -> float:
        self.evaluations += 1
        scale = math.sqrt(g0)
        lower = scale * (self.mean - 2.0 * self.std)
        upper = scale * (self.mean + 2.0 * self.std)
        inside = (self.target >= lower) & (self.target <= upper)
        return float(np.mean(inside))

    def initial_guess(self) -> float:
        return float(np.sum(self.target**2)) / self.unit_energy


def coverage(
    measured: Record,
    spec: GroundMotionSpec,
    g0_values: np.ndarray,
    *,
    ensemble_size: int = 200,
    seed: int = 0,
    stationary: bool = False,
) -> np.ndarray:
    """Coverage fraction at each candidate G0."""
    curve = _CoverageCurve(measured, spec, ensemble_size, seed, stationary)
    return np.array([curve(g) for g in np.atleast_1d(g0_values)])


def calibrate_g0(
    measured: Record,
    spec: GroundMotionSpec,
    *,
    ensemble_size: int = 200,
    coverage_target: float = 0.95,
    seed: int = 0,
    stationary: bool = False,
    bounds: tuple[float, float] = (1e-12, 1e6),
    rel_tol: float = 1e-4,
) -> G0Calibration:
    """Smallest G0 whose ensemble +/- 2 std band covers ``coverage_target``
    of the measured Fourier amplitudes over (0, Nyquist/2]; the DC bin is
    left out.

    The G0 of ``spec`` is ignored. Amplitudes are compared as magnitudes.
    """
    measured.require_units(ACCELERATION)
    cycles = measured.duration * spec.omega_g / (2.0 * math.pi)
    if cycles < 3.0:
        raise ValidationError(
            f"measured record spans {cycles:.2f} cycles of omega_g; at least 3 are needed"
        )
    lo_bound, hi_bound = bounds

    curve = _CoverageCurve(measured, spec, ensemble_size, seed, stationary)
    if not np.any(curve.target):
        logger.info("Measured record is silent; returning lower G0 bound %g", lo_bound)
        return G0Calibration(g0=lo_bound, coverage=1.0, evaluations=0, ensemble_size=ensemble_size)

    best = 0.0

    def evaluate(g0: float) -> float:
        nonlocal best
        value = curve(g0)
        best = max(best, value)
        return value

    if evaluate(lo_bound) >= coverage_target:
        logger.info("Coverage target met at lower G0 bound %g", lo_bound)
        return G0Calibration(lo_bound, curve(lo_bound), curve.evaluations, ensemble_size)

    # Bracket by doubling / halving from the energy-ratio guess.
    guess = min(max(curve.initial_guess(), lo_bound), hi_bound)
    if evaluate(guess) >= coverage_target:
        lo, hi = guess / 2.0, guess
        while lo > lo_bound and evaluate(lo) >= coverage_target:
            lo, hi = lo / 2.0, lo
        lo = max(lo, lo_bound)
    else:
        lo, hi = guess, guess * 2.0
        while evaluate(hi) < coverage_target:
            if hi >= hi_bound:
                raise CalibrationError(
                    f"coverage target {coverage_target} not reached below G0={hi_bound:g}", best
                )
            lo, hi = hi, min(hi * 2.0, hi_bound)
    logger.info("G0 bracket: [%.4g, %.4g]", lo, hi)

    while hi / lo > 1.0 + rel_tol:
        mid = math.sqrt(lo * hi)
        if evaluate(mid) >= coverage_target:
            hi = mid
        else:
            lo = mid

    result = G0Calibration(g0=hi, coverage=curve(hi), evaluations=curve.evaluations,
                           ensemble_size=ensemble_size)
    logger.info("Calibrated G0 = %.6g (coverage %.3f, %d evaluations)",
                result.g0, result.coverage, result.evaluations)
    return result


# ── Measurement noise ─────────────────────────────────────────────


def noise_psd(signal: Record, noise: NoiseSpec) -> float:
    """Flat two-sided density whose variance over |w| < pi/dt is (ratio * RMS)^2."""
    if len(signal) == 0:
        raise ValidationError(f"record '{signal.channel}' is empty")
    sigma = noise.rms_ratio * signal.rms()
    return sigma**2 * signal.dt / (2.0 * math.pi)


def add_measurement_noise(record: Record, noise: NoiseSpec, seed: int | None = None) -> Record:
    """Copy of ``record`` with white Gaussian noise at the configured RMS ratio."""
    rng = np.random.default_rng(seed)
    sigma = noise.rms_ratio * record.rms()
    noisy = record.samples + rng.normal(0.0, sigma, size=len(record))
    return replace(record, samples=noisy)
