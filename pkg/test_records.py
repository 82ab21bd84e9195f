"""Record codec and acceleration-to-velocity conversion."""

import math

import numpy as np
import pytest

from post_earthquake_assessment.errors import RecordFormatError, UnitsError, ValidationError
from post_earthquake_assessment.records import (
    ACCELERATION,
    VELOCITY,
    FilterSpec,
    Record,
    accel_to_velocity,
    read_record,
    write_record,
)


def test_write_then_read_keeps_dt_and_samples(tmp_path):
    rng = np.random.default_rng(3)
    record = Record(dt=0.005, samples=rng.normal(size=500), channel="story-3")
    path = tmp_path / "story-3.csv"
    write_record(record, path)
    back = read_record(path)
    assert back.dt == record.dt
    assert back.channel == "story-3"
    assert back.units == ACCELERATION
    np.testing.assert_allclose(back.samples, record.samples, rtol=1e-12)


def test_missing_units_tag_names_the_tag(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("# dt=0.01 channel=ground\n0.0\n1.0\n", encoding="utf-8")
    with pytest.raises(RecordFormatError, match="units") as info:
        read_record(path)
    assert info.value.line == 1


def test_non_positive_dt_is_a_parse_error(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("# dt=0 units=m/s^2 channel=ground\n0.0\n", encoding="utf-8")
    with pytest.raises(RecordFormatError, match="dt"):
        read_record(path)


def test_bad_sample_reports_its_line(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("# dt=0.01 units=m/s^2 channel=ground\n0.0\n0.5\nabc\n", encoding="utf-8")
    with pytest.raises(RecordFormatError, match="line 4"):
        read_record(path)


def test_unknown_units_rejected():
    with pytest.raises(UnitsError):
        Record(dt=0.01, samples=np.zeros(3), units="g")


def test_sine_integrates_to_shifted_cosine():
    dt, amplitude, omega = 0.005, 1.5, 2.0 * math.pi * 2.0
    t = np.arange(0.0, 60.0 + dt / 2, dt)
    accel = Record(dt=dt, samples=amplitude * np.sin(omega * t))
    velocity = accel_to_velocity(accel)
    assert velocity.units == VELOCITY

    expected = -amplitude / omega * np.cos(omega * t)
    middle = (t > 10.0) & (t < 50.0)
    error = np.max(np.abs(velocity.samples[middle] - expected[middle]))
    assert error < 0.01 * amplitude / omega


def test_zero_phase_pass_band_tone():
    dt, omega = 0.01, 2.0 * math.pi * 1.0
    t = np.arange(0.0, 80.0, dt)
    # velocity of the tone: its integral is (1 - cos) / omega, the DC part filters out
    accel = Record(dt=dt, samples=np.sin(omega * t))
    velocity = accel_to_velocity(accel).samples
    middle = (t > 20.0) & (t < 60.0)
    reference = -np.cos(omega * t[middle]) / omega
    # phase of the filtered tone relative to the reference
    cross = np.sum(velocity[middle] * reference)
    quadrature = np.sum(velocity[middle] * np.sin(omega * t[middle]) / omega)
    shift = math.degrees(math.atan2(abs(quadrature), cross))
    assert shift < 0.5


def test_constant_bias_drift_is_removed():
    dt, bias, duration = 0.01, 0.2, 60.0
    accel = Record(dt=dt, samples=np.full(int(duration / dt) + 1, bias))
    velocity = accel_to_velocity(accel)
    assert velocity.rms() < 0.01 * bias * duration


def test_zero_in_zero_out():
    velocity = accel_to_velocity(Record(dt=0.01, samples=np.zeros(1000)))
    assert np.all(velocity.samples == 0.0)


def test_cutoff_above_nyquist_rejected():
    accel = Record(dt=0.01, samples=np.zeros(100))
    with pytest.raises(ValidationError, match="cutoff"):
        accel_to_velocity(accel, FilterSpec(cutoff_hz=60.0))


def test_velocity_record_cannot_be_integrated_again():
    record = Record(dt=0.01, samples=np.zeros(10), units=VELOCITY)
    with pytest.raises(UnitsError):
        accel_to_velocity(record)


def test_integrated_tone_has_no_offset_or_edge_transient():
    dt, amplitude, omega = 0.005, 1.5, 2.0 * math.pi * 2.0
    t = np.arange(0.0, 60.0 + dt / 2, dt)
    velocity = accel_to_velocity(Record(dt=dt, samples=amplitude * np.sin(omega * t))).samples
    assert abs(np.mean(velocity)) < 1e-3 * amplitude / omega
    # the first and last cycles carry no start-up step
    edges = (t < 0.5) | (t > 59.5)
    expected = -amplitude / omega * np.cos(omega * t[edges])
    assert np.max(np.abs(velocity[edges] - expected)) < 0.02 * amplitude / omega
