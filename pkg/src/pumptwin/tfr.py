"""Continuous wavelet transform, synchrosqueezing and spectrogram images.

Wavelets are defined directly in the frequency domain (analytic, so only
positive frequencies carry weight) and coefficients are computed with FFTs.
The time derivative of the coefficients uses the same filter multiplied by
``i*omega``, which is exact for the discrete periodic transform.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import ShapeError, ValidationError
from .signal import Signal, resample_array

IMAGE_SIZE = 256
_SPEC_MAGIC = b"SPEC"


@dataclass(frozen=True)
class SSTConfig:
    wavelet: str = "morlet"          # "morlet" or "morse"
    voices_per_octave: int = 32
    freq_min: float = 10.0
    freq_max: float = 1600.0
    epsilon: float = 1e-8            # absolute |W| threshold, in signal units
    omega0: float = 6.0              # Morlet centre (rad per unit scale)
    morse_beta: float = 30.0
    morse_gamma: float = 3.0
    padding: str = "reflect"         # "reflect" or "periodic"

    def __post_init__(self):
        if self.wavelet not in ("morlet", "morse"):
            raise ValidationError(f"unknown wavelet {self.wavelet!r}")
        if self.voices_per_octave < 8:
            raise ValidationError("voices_per_octave must be >= 8")
        if not 0 < self.freq_min < self.freq_max:
            raise ValidationError("need 0 < freq_min < freq_max")
        if not self.epsilon > 0:
            raise ValidationError("epsilon must be positive")
        if self.padding not in ("reflect", "periodic"):
            raise ValidationError(f"unknown padding {self.padding!r}")
        if self.wavelet == "morse" and not (self.morse_beta > 0 and self.morse_gamma > 0):
            raise ValidationError("Morse beta and gamma must be positive")

    @property
    def peak_omega(self) -> float:
        """Dimensionless angular frequency at which the mother wavelet peaks."""
        if self.wavelet == "morlet":
            return self.omega0
        return (self.morse_beta / self.morse_gamma) ** (1.0 / self.morse_gamma)

    def frequencies(self) -> np.ndarray:
        n = int(np.floor(self.voices_per_octave * np.log2(self.freq_max / self.freq_min) + 1e-9))
        return self.freq_min * 2.0 ** (np.arange(n + 1) / self.voices_per_octave)

    def time_spread(self, freq: float) -> float:
        """Standard deviation (s) of the wavelet envelope at centre frequency ``freq``."""
        scale = self.peak_omega / (2.0 * np.pi * freq)
        if self.wavelet == "morlet":
            return scale
        # Morse: sqrt(beta*gamma) / peak_omega is the dimensionless duration
        return scale * np.sqrt(self.morse_beta * self.morse_gamma) / self.peak_omega

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass(frozen=True)
class WaveletCoefficients:
    W: np.ndarray          # [n_freqs, n_samples] complex
    dW: np.ndarray         # time derivative of W, same shape
    freqs: np.ndarray      # centre frequency of each scale row (Hz)
    sample_rate: float
    start_time: float = 0.0

    @property
    def scales(self) -> np.ndarray:
        return 1.0 / self.freqs

    @property
    def time_axis(self) -> np.ndarray:
        return self.start_time + np.arange(self.W.shape[1]) / self.sample_rate


@dataclass(frozen=True)
class Spectrogram:
    magnitudes: np.ndarray   # [freq_bins, time_bins]
    freq_axis: np.ndarray
    time_axis: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.magnitudes, dtype=np.float64)
        if m.shape != (len(self.freq_axis), len(self.time_axis)):
            raise ShapeError(f"magnitudes {m.shape} do not match axes "
                             f"({len(self.freq_axis)}, {len(self.time_axis)})")
        if not np.all(np.isfinite(m)) or np.any(m < 0):
            raise ValidationError("spectrogram magnitudes must be finite and non-negative")
        for name in ("freq_axis", "time_axis"):
            ax = np.asarray(getattr(self, name), dtype=np.float64)
            if ax.size > 1 and not np.all(np.diff(ax) > 0):
                raise ValidationError(f"{name} must be strictly increasing")
            object.__setattr__(self, name, ax)
        object.__setattr__(self, "magnitudes", m)


@dataclass(frozen=True)
class SpectroImage:
    pixels: np.ndarray   # [channels, size, size]
    size: int = IMAGE_SIZE

    def __post_init__(self):
        p = np.asarray(self.pixels, dtype=np.float64)
        if p.ndim == 2:
            p = p[None]
        if p.ndim != 3 or p.shape[1:] != (self.size, self.size):
            raise ShapeError(f"spectro image must be C x {self.size} x {self.size}, got {p.shape}")
        if not np.all(np.isfinite(p)):
            raise ValidationError("spectro image contains non-finite values")
        object.__setattr__(self, "pixels", p)

    @property
    def channels(self) -> int:
        return self.pixels.shape[0]


# -- transform ----------------------------------------------------------------

def _mother_hat(xi: np.ndarray, cfg: SSTConfig) -> np.ndarray:
    out = np.zeros_like(xi)
    pos = xi > 0
    if cfg.wavelet == "morlet":
        out[pos] = np.exp(-0.5 * (xi[pos] - cfg.omega0) ** 2)
    else:
        b, g, xp = cfg.morse_beta, cfg.morse_gamma, cfg.peak_omega
        # normalized so that the peak value is 1
        out[pos] = np.exp(b * np.log(xi[pos] / xp) - (xi[pos] ** g - xp ** g))
    return out


@lru_cache(maxsize=8)
def _filter_bank(n: int, sample_rate: float, cfg: SSTConfig):
    freqs = cfg.frequencies()
    omega = 2.0 * np.pi * np.fft.fftfreq(n, d=1.0 / sample_rate)
    scales = cfg.peak_omega / (2.0 * np.pi * freqs)
    bank = _mother_hat(scales[:, None] * omega[None, :], cfg)
    bank.setflags(write=False)
    omega.setflags(write=False)
    return freqs, omega, bank


def cwt(s: Signal, cfg: SSTConfig = SSTConfig()) -> WaveletCoefficients:
    """Wavelet coefficients on log-spaced scales spanning [freq_min, freq_max].

    With unit-peak filters a tone ``A cos(2 pi f t)`` produces a ridge of
    magnitude ``A/2`` at the scale whose centre frequency is ``f``.
    """
    nyq = 0.5 * s.sample_rate
    if cfg.freq_max > nyq:
        raise ValidationError(f"freq_max {cfg.freq_max} Hz exceeds Nyquist {nyq} Hz")
    n = len(s)
    x = s.samples
    if cfg.padding == "reflect":
        need = 2.0 * cfg.time_spread(cfg.freq_min) * s.sample_rate
        if n < need:
            raise ValidationError(
                f"signal of {n} samples shorter than twice the {cfg.freq_min} Hz wavelet support "
                f"({need:.0f} samples)")
        pad = min(n - 1, int(np.ceil(need)))
        x = np.pad(x, pad, mode="reflect")
    else:
        pad = 0
    freqs, omega, bank = _filter_bank(len(x), float(s.sample_rate), cfg)
    X = np.fft.fft(x)
    spec = bank * X[None, :]
    W = np.fft.ifft(spec, axis=1)
    dW = np.fft.ifft(spec * (1j * omega)[None, :], axis=1)
    if pad:
        W, dW = W[:, pad:pad + n], dW[:, pad:pad + n]
    return WaveletCoefficients(W, dW, freqs, s.sample_rate, s.start_time)


def instantaneous_frequency(coef: WaveletCoefficients) -> np.ndarray:
    """Re(dW / (2 pi i W)) in Hz; NaN where W vanishes."""
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.real(coef.dW / (2j * np.pi * coef.W))


def synchrosqueeze(coef: WaveletCoefficients, cfg: SSTConfig = SSTConfig()) -> Spectrogram:
    freqs = coef.freqs
    n_f, n_t = coef.W.shape
    mag = np.abs(coef.W)
    keep = mag > cfg.epsilon
    inst = instantaneous_frequency(coef)
    keep &= np.isfinite(inst) & (inst > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        pos = cfg.voices_per_octave * np.log2(np.where(keep, inst, 1.0) / cfg.freq_min)
    bins = np.rint(pos).astype(np.int64)
    keep &= (bins >= 0) & (bins < n_f)
    cols = np.broadcast_to(np.arange(n_t), (n_f, n_t))
    flat = (bins[keep] * n_t + cols[keep])
    w = coef.W[keep]
    re = np.bincount(flat, weights=w.real, minlength=n_f * n_t)
    im = np.bincount(flat, weights=w.imag, minlength=n_f * n_t)
    T = np.hypot(re, im).reshape(n_f, n_t)
    return Spectrogram(T, freqs.copy(), coef.time_axis)


def sst(s: Signal, cfg: SSTConfig = SSTConfig()) -> Spectrogram:
    return synchrosqueeze(cwt(s, cfg), cfg)


# -- image post-processing ----------------------------------------------------

def crop_band(sg: Spectrogram, f_max: float) -> Spectrogram:
    if sg.freq_axis[-1] < f_max * (1.0 - 1e-9):
        raise ValidationError(
            f"spectrogram tops out at {sg.freq_axis[-1]:.1f} Hz, below the {f_max:.1f} Hz crop")
    rows = sg.freq_axis <= f_max * (1.0 + 1e-9)
    if rows.sum() < 2:
        raise ValidationError("fewer than two frequency bins below the crop frequency")
    return Spectrogram(sg.magnitudes[rows], sg.freq_axis[rows], sg.time_axis)


def dataset_scale_k(spectrograms, pump_freq: float, percentile: float = 99.0) -> float:
    """Scale that maps the given percentile of cropped magnitudes to 1.0."""
    vals = np.concatenate([crop_band(sg, 10.0 * pump_freq).magnitudes.ravel()
                           for sg in spectrograms])
    q = float(np.percentile(vals, percentile))
    return 1.0 / q if q > 0 else 1.0


def _log_frequency_resample(mag: np.ndarray, freqs: np.ndarray) -> np.ndarray:
    target = np.geomspace(freqs[0], freqs[-1], len(freqs))
    lf, lt = np.log(freqs), np.log(target)
    idx = np.clip(np.searchsorted(lf, lt, side="right") - 1, 0, len(lf) - 2)
    w = ((lt - lf[idx]) / (lf[idx + 1] - lf[idx]))[:, None]
    return mag[idx] * (1.0 - w) + mag[idx + 1] * w


def postprocess_spectrogram(sg: Spectrogram, pump_freq: float, scale_k: float,
                            size: int = IMAGE_SIZE) -> np.ndarray:
    """Crop at ten times the pumping frequency, exp-scale, log-frequency, resize.

    Returns one ``size`` x ``size`` channel, row 0 at the lowest frequency.
    """
    if not scale_k > 0:
        raise ValidationError("scale_k must be positive")
    band = crop_band(sg, 10.0 * pump_freq)
    img = np.exp(scale_k * band.magnitudes)
    img = _log_frequency_resample(img, band.freq_axis)
    img = resample_array(resample_array(img, size, axis=0), size, axis=1)
    return img


def spectro_image(sgs, pump_freq: float, scale_k: float, size: int = IMAGE_SIZE) -> SpectroImage:
    return SpectroImage(np.stack([postprocess_spectrogram(sg, pump_freq, scale_k, size)
                                  for sg in sgs]), size)


# -- persistence ----------------------------------------------------------------

def write_spec(pixels: np.ndarray, path: str | Path) -> Path:
    """``SPEC`` binary: magic, u32 width, u32 height, u32 channels, f32 LE data."""
    p = np.asarray(pixels, dtype="<f4")
    if p.ndim == 2:
        p = p[None]
    if p.ndim != 3:
        raise ShapeError(f"SPEC grids are [channels, height, width], got {p.shape}")
    c, h, w = p.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_SPEC_MAGIC + struct.pack("<III", w, h, c))
        fh.write(np.ascontiguousarray(p).tobytes())
    return path


def read_spec(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != _SPEC_MAGIC:
        raise ValidationError(f"{path}: not a SPEC file")
    w, h, c = struct.unpack("<III", raw[4:16])
    data = np.frombuffer(raw, dtype="<f4", offset=16)
    if data.size != w * h * c:
        raise ValidationError(f"{path}: payload size {data.size} != {c}x{h}x{w}")
    return data.reshape(c, h, w).astype(np.float64)


def write_pgm(grid: np.ndarray, path: str | Path) -> Path:
    """8-bit binary graymap, min-max scaled, lowest frequency at the bottom."""
    g = np.asarray(grid, dtype=np.float64)
    lo, hi = g.min(), g.max()
    scaled = np.zeros_like(g) if hi <= lo else (g - lo) / (hi - lo)
    img = np.flipud(np.rint(255 * scaled).astype(np.uint8))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        fh.write(img.tobytes())
    return path
