"""Time-series records: CSV codec and acceleration-to-velocity conversion.

Record files are plain text. The first line is a header of ``key=value``
tags, followed by one sample per line::

    # dt=0.01 units=m/s^2 channel=story-3
    0.0
    0.0132
    ...
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import integrate, signal

from .errors import RecordFormatError, UnitsError, ValidationError

logger = logging.getLogger(__name__)

ACCELERATION = "m/s^2"
VELOCITY = "m/s"
KNOWN_UNITS = (ACCELERATION, VELOCITY)

_REQUIRED_TAGS = ("dt", "units", "channel")


@dataclass
class Record:
    """A uniformly sampled channel."""

    dt: float
    samples: np.ndarray
    channel: str = "ground"
    units: str = ACCELERATION

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=float)
        if not self.dt > 0:
            raise ValidationError(f"record '{self.channel}': dt must be positive, got {self.dt}")
        if self.samples.ndim != 1:
            raise ValidationError(f"record '{self.channel}': samples must be one-dimensional")
        if not np.all(np.isfinite(self.samples)):
            raise ValidationError(f"record '{self.channel}': samples must be finite")
        if self.units not in KNOWN_UNITS:
            raise UnitsError(f"record '{self.channel}': unknown units '{self.units}'")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return self.dt * max(len(self.samples) - 1, 0)

    @property
    def time(self) -> np.ndarray:
        return np.arange(len(self.samples)) * self.dt

    def rms(self) -> float:
        if len(self.samples) == 0:
            return 0.0
        return float(np.sqrt(np.mean(self.samples**2)))

    def require_units(self, units: str) -> None:
        """Raise UnitsError unless the record carries ``units``."""
        if self.units != units:
            raise UnitsError(
                f"record '{self.channel}' has units '{self.units}', expected '{units}'"
            )


@dataclass
class FilterSpec:
    """Zero-phase Butterworth high-pass used for baseline correction."""

    order: int = 4
    cutoff_hz: float = 0.1
    kind: str = "highpass"
    scheme: str = "forward-backward"

    def validate(self, dt: float) -> None:
        nyquist = 0.5 / dt
        if self.order < 1:
            raise ValidationError(f"filter order must be >= 1, got {self.order}")
        if not 0 < self.cutoff_hz < nyquist:
            raise ValidationError(
                f"filter cutoff {self.cutoff_hz} Hz must lie in (0, {nyquist:g}) Hz"
            )


# ── CSV codec ─────────────────────────────────────────────────────


def _parse_header(line: str) -> dict[str, str]:
    text = line.strip()
    if not text.startswith("#"):
        raise RecordFormatError("header must start with '#'", line=1)
    tags: dict[str, str] = {}
    for token in text[1:].split():
        if "=" not in token:
            raise RecordFormatError(f"malformed header tag '{token}'", line=1)
        key, value = token.split("=", 1)
        tags[key.strip()] = value.strip()
    for name in _REQUIRED_TAGS:
        if name not in tags:
            raise RecordFormatError(f"missing '{name}' tag in header", line=1)
    return tags


def read_record(path: Path) -> Record:
    """Read a record CSV file."""
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise RecordFormatError(f"{path.name}: empty file", line=1)

    tags = _parse_header(lines[0])
    try:
        dt = float(tags["dt"])
    except ValueError:
        raise RecordFormatError(f"dt '{tags['dt']}' is not a number", line=1) from None
    if not dt > 0:
        raise RecordFormatError(f"dt must be positive, got {tags['dt']}", line=1)
    units = tags["units"]
    if units not in KNOWN_UNITS:
        raise RecordFormatError(
            f"units '{units}' not one of {', '.join(KNOWN_UNITS)}", line=1
        )

    samples: list[float] = []
    for lineno, raw in enumerate(lines[1:], start=2):
        text = raw.strip()
        if not text:
            continue
        try:
            value = float(text)
        except ValueError:
            raise RecordFormatError(f"cannot parse sample '{text}'", line=lineno) from None
        if not math.isfinite(value):
            raise RecordFormatError(f"non-finite sample '{text}'", line=lineno)
        samples.append(value)

    record = Record(dt=dt, samples=np.array(samples), channel=tags["channel"], units=units)
    logger.debug("Read %s: %d samples at dt=%g (%s)", path.name, len(record), dt, units)
    return record


def write_record(record: Record, path: Path) -> None:
    """Write a record CSV file (full double precision)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"# dt={record.dt!r} units={record.units} channel={record.channel}"]
    lines.extend(f"{x:.17g}" for x in record.samples)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# ── Acceleration → velocity ───────────────────────────────────────


def _pad_length(n: int, dt: float, cutoff_hz: float) -> int:
    # Three cutoff periods of padding keep the filter
    # start-up transient outside the returned window.
    wanted = int(round(3.0 / (cutoff_hz * dt)))
    return max(0, min(n - 1, wanted))


def highpass(samples: np.ndarray, dt: float, spec: FilterSpec) -> np.ndarray:
    """Zero-phase Butterworth high-pass of the linearly detrended ``samples``.

    Even-extension padding keeps the detrended edges continuous, so no
    start-up step is fed to the filter.
    """
    spec.validate(dt)
    sos = signal.butter(spec.order, spec.cutoff_hz, btype="highpass", fs=1.0 / dt, output="sos")
    padlen = _pad_length(len(samples), dt, spec.cutoff_hz)
    detrended = signal.detrend(samples, type="linear")
    return signal.sosfiltfilt(sos, detrended, padtype="even", padlen=padlen)


def accel_to_velocity(accel: Record, spec: FilterSpec | None = None) -> Record:
    """Integrate an acceleration record and remove baseline drift.

    Trapezoidal integration from zero initial velocity, followed by a
    linear detrend and a forward-backward Butterworth high-pass.
    """
    spec = spec or FilterSpec()
    accel.require_units(ACCELERATION)
    spec.validate(accel.dt)
    if len(accel) == 0:
        return Record(dt=accel.dt, samples=np.zeros(0), channel=accel.channel, units=VELOCITY)

    velocity = integrate.cumulative_trapezoid(accel.samples, dx=accel.dt, initial=0.0)
    if len(velocity) > 1:
        velocity = highpass(velocity, accel.dt, spec)
    return Record(dt=accel.dt, samples=velocity, channel=accel.channel, units=VELOCITY)
