"""PPG record handling: loading, resampling, normalisation, derivatives, windowing."""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, NumericalError

STD_TOL = 1e-12


@dataclass(frozen=True)
class PpgRecord:
    """A uniformly sampled 1-D PPG signal.

    Attributes:
        samples: signal values (arbitrary units).
        rate: sampling rate in Hz.
        label: optional physiological target (HR, SpO2, ...).
    """

    samples: np.ndarray
    rate: float
    label: float | None = None

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size == 0:
            raise DataError("record samples must be a non-empty 1-D array")
        if not np.all(np.isfinite(samples)):
            raise DataError("record contains non-finite samples")
        if not (self.rate > 0 and math.isfinite(self.rate)):
            raise DataError(f"sampling rate must be positive, got {self.rate}")
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.rate


@dataclass(frozen=True)
class DerivativeStack:
    """First, second and third backward differences of a record (same length)."""

    vpg: np.ndarray
    apg: np.ndarray
    jpg: np.ndarray

    def as_array(self) -> np.ndarray:
        return np.stack([self.vpg, self.apg, self.jpg])


@dataclass(frozen=True)
class PafPartition:
    """Past / anchor / future split of a channel-major matrix."""

    past: np.ndarray
    anchor: np.ndarray
    future: np.ndarray
    gamma: float = field(default=0.4)

    @property
    def columns(self) -> int:
        return self.past.shape[1] + self.anchor.shape[1] + self.future.shape[1]


_HEADER_RE = re.compile(r"^\s*([A-Za-z_]+)\s*=\s*(\S+)\s*$")


def _parse_csv(text: str, rate: float | None) -> PpgRecord:
    header: dict[str, str] = {}
    values: list[float] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        for chunk in line.split(";"):
            chunk = chunk.strip()
            if not chunk or chunk.startswith("#"):
                continue
            if "=" in chunk:
                for pair in chunk.split(","):
                    m = _HEADER_RE.match(pair)
                    if m is None:
                        raise DataError(f"line {lineno}: malformed header field {pair!r}")
                    header[m.group(1).lower()] = m.group(2)
                continue
            for token in re.split(r"[,\s]+", chunk):
                if not token:
                    continue
                try:
                    v = float(token)
                except ValueError:
                    raise DataError(f"line {lineno}: cannot parse sample {token!r}") from None
                if not math.isfinite(v):
                    raise DataError(f"line {lineno}: non-finite sample {token!r}")
                values.append(v)
    if not values:
        raise DataError("no samples found")
    if "rate" in header:
        try:
            rate = float(header["rate"])
        except ValueError:
            raise DataError(f"bad rate header {header['rate']!r}") from None
    if rate is None:
        raise DataError("sampling rate missing: add a 'rate=<Hz>' header or pass it explicitly")
    label = float(header["label"]) if "label" in header else None
    return PpgRecord(np.array(values), rate, label)


def load_record(path, format: str = "csv", rate: float | None = None) -> PpgRecord:
    """Read a record from ``path``.

    CSV files may carry ``key=value`` header fields (``rate``, ``label``)
    followed by samples, one per line or comma separated. ``raw-f64`` files are
    little-endian float64 blobs and need ``rate`` from the caller.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    if format == "csv":
        return _parse_csv(path.read_text(), rate)
    if format == "raw-f64":
        blob = path.read_bytes()
        if not blob or len(blob) % 8:
            raise DataError(f"{path}: raw-f64 size {len(blob)} is not a positive multiple of 8")
        data = np.frombuffer(blob, dtype="<f8").astype(np.float64)
        bad = np.flatnonzero(~np.isfinite(data))
        if bad.size:
            raise DataError(f"{path}: non-finite sample at index {bad[0]}")
        if rate is None:
            raise DataError("raw-f64 input requires an explicit sampling rate")
        return PpgRecord(data, rate)
    raise DataError(f"unknown record format {format!r}")


def save_record(record: PpgRecord, path) -> None:
    lines = [f"rate={record.rate:g}"]
    if record.label is not None:
        lines.append(f"label={record.label!r}")
    lines.extend(repr(float(v)) for v in record.samples)
    Path(path).write_text("\n".join(lines) + "\n")


def resample(record: PpgRecord, target_rate: float) -> PpgRecord:
    """Linear-interpolation resampling to ``target_rate``.

    Output length is ``round(len * target_rate / rate)``.
    """
    if not target_rate > 0:
        raise DataError(f"target rate must be positive, got {target_rate}")
    if target_rate == record.rate:
        return PpgRecord(record.samples.copy(), record.rate, record.label)
    n_out = int(round(len(record) * target_rate / record.rate))
    if n_out < 1:
        raise DataError("resampled record would be empty")
    t_out = np.arange(n_out) / target_rate
    t_in = np.arange(len(record)) / record.rate
    return PpgRecord(np.interp(t_out, t_in, record.samples), target_rate, record.label)


def zscore(record: PpgRecord) -> PpgRecord:
    x = record.samples
    sd = x.std()
    if sd <= STD_TOL:
        raise NumericalError("z-score undefined: signal variance is (numerically) zero")
    return PpgRecord((x - x.mean()) / sd, record.rate, record.label)


def derivatives(record: PpgRecord | np.ndarray) -> DerivativeStack:
    """Backward differences of orders 1-3; the left edge is replicated to keep length."""
    x = record.samples if isinstance(record, PpgRecord) else np.asarray(record, dtype=np.float64)
    if x.size < 4:
        raise DataError("derivatives need at least 4 samples")
    padded = np.concatenate([np.full(3, x[0]), x])
    vpg = np.diff(padded, 1)[2:]
    apg = np.diff(padded, 2)[1:]
    jpg = np.diff(padded, 3)
    return DerivativeStack(vpg, apg, jpg)


def window_slide(record: PpgRecord, window_s: float, step_s: float) -> list[PpgRecord]:
    W = int(round(window_s * record.rate))
    S = int(round(step_s * record.rate))
    if W < 1 or S < 1:
        raise DataError("window and step must each span at least one sample")
    if len(record) < W:
        raise DataError(f"record of {len(record)} samples is shorter than one window ({W})")
    count = (len(record) - W) // S + 1
    return [
        PpgRecord(record.samples[i * S : i * S + W].copy(), record.rate, record.label)
        for i in range(count)
    ]


def partition_sizes(cols: int, gamma: float) -> tuple[int, int, int]:
    if not 0 < gamma < 0.5:
        raise DataError(f"gamma must lie in (0, 0.5), got {gamma}")
    # the small epsilon keeps 0.4 * 700 from flooring to 279
    side = int(math.floor(gamma * cols + 1e-9))
    return side, cols - 2 * side, side


def partition_paf(dilated: np.ndarray, gamma: float) -> PafPartition:
    dilated = np.atleast_2d(np.asarray(dilated, dtype=np.float64))
    side, mid, _ = partition_sizes(dilated.shape[1], gamma)
    if side < 1 or mid < 1:
        raise DataError(f"gamma={gamma} leaves an empty segment for {dilated.shape[1]} columns")
    return PafPartition(
        past=dilated[:, :side],
        anchor=dilated[:, side : side + mid],
        future=dilated[:, side + mid :],
        gamma=gamma,
    )


def _synth_rngs(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    shape_ss, noise_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(shape_ss), np.random.default_rng(noise_ss)


def synth_noise(seed: int, n: int) -> np.ndarray:
    """Unit-variance noise stream used by :func:`synth_ppg` for ``seed``."""
    return _synth_rngs(seed)[1].standard_normal(n)


def synth_ppg(
    heart_rate_bpm: float,
    noise_std: float = 0.0,
    length_s: float = 5.6,
    rate: float = 125.0,
    seed: int = 0,
    label: float | None = None,
) -> PpgRecord:
    """Quasi-periodic pulse: fundamental + two decaying harmonics + slow wander + noise."""
    if not 30 <= heart_rate_bpm <= 220:
        raise DataError(f"heart rate {heart_rate_bpm} bpm outside [30, 220]")
    n = int(round(length_s * rate))
    shape_rng, _ = _synth_rngs(seed)
    t = np.arange(n) / rate
    f0 = heart_rate_bpm / 60.0
    phase = shape_rng.uniform(0, 2 * np.pi, size=3)
    x = np.zeros(n)
    for h, amp in enumerate((1.0, 0.5, 0.25), start=1):
        x += amp * np.sin(2 * np.pi * h * f0 * t + phase[h - 1])
    wander_f = shape_rng.uniform(0.05, 0.15)
    wander_phase = shape_rng.uniform(0, 2 * np.pi)
    x += 0.2 * np.sin(2 * np.pi * wander_f * t + wander_phase)
    if noise_std:
        x = x + noise_std * synth_noise(seed, n)
    return PpgRecord(x, rate, heart_rate_bpm if label is None else label)
