"""Kanai-Tajimi densities, synthesis, G0 calibration and noise."""

import math

import numpy as np
import pytest
from scipy import integrate

from post_earthquake_assessment.errors import CalibrationError, ValidationError
from post_earthquake_assessment.ground_motion import (
    ENVELOPE_PEAK,
    GroundMotionSpec,
    NoiseSpec,
    add_measurement_noise,
    calibrate_g0,
    coverage,
    generate_realization,
    kanai_tajimi_psd,
    modulating,
    noise_psd,
    psd_function,
    variance,
)
from post_earthquake_assessment.records import VELOCITY, Record

NORTHRIDGE = GroundMotionSpec(G0=2e-3, omega_g=6.0 * math.pi, xi_g=0.35, alpha=0.12)


def test_density_at_zero_and_at_ground_frequency():
    spec = NORTHRIDGE
    assert kanai_tajimi_psd(0.0, spec) == pytest.approx(spec.G0)
    peak = spec.G0 * (1.0 + 4.0 * spec.xi_g**2) / (4.0 * spec.xi_g**2)
    assert kanai_tajimi_psd(spec.omega_g, spec) == pytest.approx(peak)


def test_closed_form_variance():
    spec = NORTHRIDGE
    half, _ = integrate.quad(lambda w: kanai_tajimi_psd(w, spec), 0.0, np.inf, limit=200)
    assert variance(spec) == pytest.approx(2.0 * half, rel=1e-6)


def test_envelope_peaks_at_inverse_alpha():
    alpha = 0.12
    assert modulating(1.0 / alpha, alpha) == pytest.approx(1.0 / (alpha * math.e))
    scaled = psd_function(NORTHRIDGE, ENVELOPE_PEAK)
    assert scaled(np.array([0.0]))[0] == pytest.approx(NORTHRIDGE.G0 / (alpha * math.e) ** 2)


def test_stationary_ensemble_periodogram_matches_density():
    spec = NORTHRIDGE
    n = spec.samples
    omega = 2.0 * math.pi * np.fft.rfftfreq(n, spec.dt)
    total = np.zeros(len(omega))
    runs = 500
    for seed in range(runs):
        x = generate_realization(spec, seed, stationary=True).samples
        total += spec.dt / (2.0 * math.pi * n) * np.abs(np.fft.rfft(x)) ** 2
    periodogram = total / runs
    band = (omega >= 0.2 * spec.omega_g) & (omega <= 3.0 * spec.omega_g)
    # neighbouring bins are independent, so average them before comparing
    window = np.ones(16) / 16.0
    smoothed = np.convolve(periodogram[band], window, mode="valid")
    target = np.convolve(kanai_tajimi_psd(omega[band], spec), window, mode="valid")
    assert np.max(np.abs(smoothed / target - 1.0)) < 0.06


def test_ensemble_fourier_magnitudes_are_rayleigh():
    n = NORTHRIDGE.samples
    omega = 2.0 * math.pi * np.fft.rfftfreq(n, NORTHRIDGE.dt)
    band = (omega > 0.0) & (omega <= 0.5 * math.pi / NORTHRIDGE.dt)
    magnitudes = np.array(
        [np.abs(np.fft.rfft(generate_realization(NORTHRIDGE, seed).samples))[band] for seed in range(200)]
    )
    spread = magnitudes.std(axis=0, ddof=1) / magnitudes.mean(axis=0)
    # std / mean of a Rayleigh variable is sqrt(4 / pi - 1) = 0.523
    assert 0.45 < np.median(spread) < 0.60


def test_realization_is_seeded_and_enveloped():
    a = generate_realization(NORTHRIDGE, 11)
    b = generate_realization(NORTHRIDGE, 11)
    np.testing.assert_array_equal(a.samples, b.samples)
    assert a.samples[0] == 0.0
    assert len(a) == NORTHRIDGE.samples


def test_coarse_dt_rejected():
    spec = GroundMotionSpec(omega_g=6.0 * math.pi, dt=0.1)
    with pytest.raises(ValidationError, match="too coarse"):
        generate_realization(spec, 0)


@pytest.mark.parametrize("seed", range(10))
def test_g0_calibration_round_trip(seed):
    measured = generate_realization(NORTHRIDGE, 1000 + seed)
    result = calibrate_g0(measured, NORTHRIDGE.with_g0(1.0), seed=seed)
    assert NORTHRIDGE.G0 / 2.0 <= result.g0 <= NORTHRIDGE.G0 * 2.0
    assert result.coverage >= 0.95


def test_coverage_grows_with_g0_until_target():
    measured = generate_realization(NORTHRIDGE, 5)
    values = coverage(measured, NORTHRIDGE, np.geomspace(1e-5, 1e-2, 10))
    reached = int(np.argmax(values >= 0.95))
    assert values[reached] >= 0.95
    assert np.all(np.diff(values[: reached + 1]) >= 0), values


def test_silent_record_returns_lower_bound():
    silent = Record(dt=0.01, samples=np.zeros(3001))
    result = calibrate_g0(silent, NORTHRIDGE, ensemble_size=20, bounds=(1e-9, 1e3))
    assert result.g0 == 1e-9


def test_short_record_rejected():
    short = Record(dt=0.01, samples=np.ones(20))
    with pytest.raises(ValidationError, match="cycles"):
        calibrate_g0(short, NORTHRIDGE)


def test_unreachable_target_reports_best_coverage():
    measured = generate_realization(NORTHRIDGE, 2)
    with pytest.raises(CalibrationError) as info:
        calibrate_g0(measured, NORTHRIDGE, ensemble_size=30, coverage_target=1.01)
    assert 0.0 < info.value.best_coverage <= 1.0


def test_noise_density_and_rms_ratio():
    rng = np.random.default_rng(0)
    signal = Record(dt=0.01, samples=rng.normal(0.0, 0.3, 200_000), units=VELOCITY)
    noise = NoiseSpec(rms_ratio=0.02)
    density = noise_psd(signal, noise)
    # white density over |w| < pi/dt integrates back to the noise variance
    assert density * 2.0 * math.pi / signal.dt == pytest.approx((0.02 * signal.rms()) ** 2)

    noisy = add_measurement_noise(signal, noise, seed=1)
    added = noisy.samples - signal.samples
    assert np.sqrt(np.mean(added**2)) == pytest.approx(0.02 * signal.rms(), rel=0.02)
    assert noisy.units == VELOCITY


def test_density_is_even_and_decays_above_ground_frequency():
    omega = np.linspace(0.0, 10.0 * NORTHRIDGE.omega_g, 301)
    np.testing.assert_array_equal(kanai_tajimi_psd(-omega, NORTHRIDGE), kanai_tajimi_psd(omega, NORTHRIDGE))
    assert kanai_tajimi_psd(100.0 * NORTHRIDGE.omega_g, NORTHRIDGE) < 1e-3 * NORTHRIDGE.G0


def test_four_times_g0_doubles_the_realization():
    base = generate_realization(NORTHRIDGE, 3)
    scaled = generate_realization(NORTHRIDGE.with_g0(4.0 * NORTHRIDGE.G0), 3)
    np.testing.assert_allclose(scaled.samples, 2.0 * base.samples, rtol=1e-12, atol=0.0)
    assert scaled.rms() == pytest.approx(2.0 * base.rms(), rel=1e-12)


def test_ensemble_has_zero_mean():
    runs = 200
    ensemble = np.array([generate_realization(NORTHRIDGE, seed).samples for seed in range(runs)])
    mean = ensemble.mean(axis=0)
    spread = ensemble.std(axis=0, ddof=1)
    assert np.all(np.abs(mean) <= 5.0 * spread / math.sqrt(runs))


def test_doubled_measurement_raises_calibrated_g0():
    measured = generate_realization(NORTHRIDGE, 21)
    louder = Record(dt=measured.dt, samples=2.0 * measured.samples)
    quiet = calibrate_g0(measured, NORTHRIDGE, ensemble_size=100, seed=1)
    loud = calibrate_g0(louder, NORTHRIDGE, ensemble_size=100, seed=1)
    assert loud.g0 > quiet.g0
    assert loud.g0 == pytest.approx(4.0 * quiet.g0, rel=0.05)
