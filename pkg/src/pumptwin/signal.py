"""Uniformly sampled signals and the preprocessing / augmentation primitives.

All operations are pure: they never modify their inputs and always return a
new :class:`Signal`.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class Signal:
    samples: np.ndarray
    sample_rate: float
    start_time: float = 0.0
    channel_id: str = "ch0"
    unit: str = "Pa"

    def __post_init__(self):
        x = np.array(self.samples, dtype=np.float64, copy=True).ravel()
        if x.size == 0:
            raise ValidationError("signal must contain at least one sample")
        if not np.all(np.isfinite(x)):
            raise ValidationError(f"signal {self.channel_id!r} contains non-finite samples")
        if not self.sample_rate > 0:
            raise ValidationError(f"sample_rate must be positive, got {self.sample_rate}")
        x.setflags(write=False)
        object.__setattr__(self, "samples", x)

    def __len__(self):
        return self.samples.size

    @property
    def dt(self) -> float:
        return 1.0 / self.sample_rate

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    @property
    def time(self) -> np.ndarray:
        return self.start_time + np.arange(self.samples.size) / self.sample_rate

    def with_samples(self, samples) -> "Signal":
        return replace(self, samples=samples)

    def rms(self) -> float:
        return float(np.sqrt(np.mean(self.samples ** 2)))


@dataclass(frozen=True)
class MultiChannelSignal:
    channels: tuple = field(default_factory=tuple)

    def __post_init__(self):
        chans = tuple(self.channels)
        if not chans:
            raise ValidationError("MultiChannelSignal needs at least one channel")
        n, fs = len(chans[0]), chans[0].sample_rate
        for c in chans[1:]:
            if len(c) != n or c.sample_rate != fs:
                raise ValidationError("all channels must share length and sample rate")
        object.__setattr__(self, "channels", chans)

    def __len__(self):
        return len(self.channels[0])

    @property
    def sample_rate(self) -> float:
        return self.channels[0].sample_rate

    def as_array(self) -> np.ndarray:
        return np.stack([c.samples for c in self.channels])


class RngStream:
    """Counter-based random stream (Philox-4x64 via numpy) with Box-Muller normals.

    The uniform stream is ``Generator(Philox(seed)).random()``, whose output is
    fixed by numpy's stream-compatibility policy for bit generators. Normal
    deviates are produced from consecutive uniform pairs (u1, u2) as
    ``sqrt(-2 ln(1 - u1)) * cos(2 pi u2)`` and the matching sine branch.
    """

    def __init__(self, seed: int):
        seed = int(seed)
        if not 0 <= seed < 2 ** 64:
            raise ValidationError(f"seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = seed
        self._gen = np.random.Generator(np.random.Philox(seed))

    def uniform(self, size=None) -> np.ndarray:
        return self._gen.random(size)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        # floor(u * span) keeps the mapping documented and platform independent
        span = high - low
        u = np.asarray(self._gen.random(size))
        out = low + np.minimum((u * span).astype(np.int64), span - 1)
        return out if size is not None else int(out)

    def normal(self, size: int) -> np.ndarray:
        m = (int(size) + 1) // 2
        u = self._gen.random(2 * m).reshape(m, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        theta = 2.0 * np.pi * u[:, 1]
        z = np.empty(2 * m)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return z[:size]

    def permutation(self, n: int) -> np.ndarray:
        # Fisher-Yates driven by the uniform stream
        idx = np.arange(n)
        u = self._gen.random(max(n - 1, 0))
        for i in range(n - 1, 0, -1):
            j = int(u[n - 1 - i] * (i + 1))
            idx[i], idx[j] = idx[j], idx[i]
        return idx

    def spawn(self, key: int) -> "RngStream":
        """Independent child stream derived from (seed, key)."""
        mixed = np.random.SeedSequence([self.seed & 0xFFFFFFFF, self.seed >> 32, int(key)])
        return RngStream(int(mixed.generate_state(1, np.uint64)[0]))


def remove_mean(s: Signal) -> Signal:
    return s.with_samples(s.samples - s.samples.mean())


def cyclic_shift(s: Signal, k: int) -> Signal:
    n = len(s)
    if not 0 <= k < n:
        raise IndexError(f"shift {k} outside [0, {n})")
    return s.with_samples(np.roll(s.samples, -k))


def add_gaussian_noise(s: Signal, sigma: float, seed: int | RngStream) -> Signal:
    if sigma < 0:
        raise ValidationError(f"noise sigma must be non-negative, got {sigma}")
    if sigma == 0:
        return s.with_samples(s.samples)
    rng = seed if isinstance(seed, RngStream) else RngStream(seed)
    return s.with_samples(s.samples + sigma * rng.normal(len(s)))


def segment_windows(s: Signal, window_len: int, hop: int) -> list[Signal]:
    n = len(s)
    if window_len > n or window_len < 1:
        raise ValidationError(f"window length {window_len} invalid for signal of length {n}")
    if hop < 1:
        raise ValidationError(f"hop must be >= 1, got {hop}")
    count = (n - window_len) // hop + 1
    out = []
    for i in range(count):
        a = i * hop
        out.append(replace(s, samples=s.samples[a:a + window_len],
                           start_time=s.start_time + a / s.sample_rate))
    return out


def resample_array(x: np.ndarray, new_len: int, axis: int = -1) -> np.ndarray:
    """Endpoint-preserving linear interpolation of ``x`` along ``axis``."""
    if new_len < 2:
        raise ValidationError(f"new_len must be >= 2, got {new_len}")
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[axis]
    if n == new_len:
        return x.copy()
    x = np.moveaxis(x, axis, -1)
    if n == 1:
        out = np.repeat(x, new_len, axis=-1)
    else:
        pos = np.linspace(0.0, n - 1, new_len)
        lo = np.minimum(np.floor(pos).astype(int), n - 2)
        w = pos - lo
        out = x[..., lo] * (1.0 - w) + x[..., lo + 1] * w
    return np.moveaxis(out, -1, axis)


def linear_resample(s: Signal, new_len: int) -> Signal:
    """Resample to ``new_len`` points spanning the same time interval."""
    y = resample_array(s.samples, new_len)
    n = len(s)
    span = (n - 1) / s.sample_rate if n > 1 else 1.0 / s.sample_rate
    return replace(s, samples=y, sample_rate=(new_len - 1) / span)


# -- file I/O ---------------------------------------------------------------

def write_signal_csv(s: Signal, path: str | Path) -> Path:
    """Write ``time_s,value`` CSV plus a ``.json`` metadata sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time_s", "value"])
        for t, v in zip(s.time, s.samples):
            w.writerow([f"{t:.17g}", f"{v:.17g}"])
    meta = {"sample_rate": s.sample_rate, "unit": s.unit,
            "channel_id": s.channel_id, "start_time": s.start_time}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2))
    return path


def read_signal_csv(path: str | Path) -> Signal:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header != ["time_s", "value"]:
            raise ValidationError(f"{path}: unexpected header {header}")
        values = [float(row[1]) for row in r]
    return Signal(np.array(values), float(meta["sample_rate"]),
                  start_time=float(meta.get("start_time", 0.0)),
                  channel_id=meta.get("channel_id", "ch0"), unit=meta.get("unit", "Pa"))


def stack_channels(signals: Sequence[Signal]) -> np.ndarray:
    return MultiChannelSignal(tuple(signals)).as_array()
