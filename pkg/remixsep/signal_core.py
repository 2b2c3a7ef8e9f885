"""Waveform and spectrogram data model, STFT analysis/synthesis and WAV I/O."""

import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Union

import numpy as np
import scipy.signal
import soundfile as sf
from numpy.lib.stride_tricks import sliding_window_view

from remixsep.errors import SignalError

logger = logging.getLogger(__name__)

DEFAULT_SAMPLE_RATE = 16000
DEFAULT_N_FFT = 512
DEFAULT_HOP = 128
WAV_SUBTYPES = ("PCM_16", "FLOAT")


@dataclass(frozen=True, eq=False)
class Waveform:
    """Real multichannel signal, ``samples`` shaped (channels, time)."""

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim == 1:
            samples = samples[None, :]
        if samples.ndim != 2:
            raise SignalError(f"Waveform samples must be 1-D or 2-D, got shape {samples.shape}")
        if self.sample_rate <= 0:
            raise SignalError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise SignalError("Waveform contains non-finite samples")
        object.__setattr__(self, "samples", samples)

    @property
    def n_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.n_samples / self.sample_rate

    def channel(self, index: int) -> "Waveform":
        return Waveform(self.samples[index:index + 1], self.sample_rate)


@dataclass(frozen=True, eq=False)
class Spectrogram:
    """One-sided complex STFT, ``bins`` shaped (channel, frequency, frame)."""

    bins: np.ndarray
    n_fft: int = DEFAULT_N_FFT
    hop: int = DEFAULT_HOP
    window: str = "hann"
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        bins = np.asarray(self.bins, dtype=np.complex128)
        if bins.ndim == 2:
            bins = bins[None]
        if bins.ndim != 3:
            raise SignalError(f"Spectrogram bins must be (channel, freq, frame), got {bins.shape}")
        if bins.shape[1] != self.n_fft // 2 + 1:
            raise SignalError(
                f"Frequency dimension {bins.shape[1]} does not match n_fft={self.n_fft} "
                f"(expected {self.n_fft // 2 + 1})"
            )
        if not np.all(np.isfinite(bins)):
            raise SignalError("Spectrogram contains non-finite bins")
        object.__setattr__(self, "bins", bins)

    @property
    def n_channels(self) -> int:
        return self.bins.shape[0]

    @property
    def n_freq(self) -> int:
        return self.bins.shape[1]

    @property
    def n_frames(self) -> int:
        return self.bins.shape[2]

    @property
    def metadata(self) -> tuple:
        return (self.n_fft, self.hop, self.window, self.sample_rate)

    def check_compatible(self, other: "Spectrogram") -> None:
        if self.metadata != other.metadata:
            raise SignalError(f"Spectrogram metadata mismatch: {self.metadata} vs {other.metadata}")
        if self.bins.shape != other.bins.shape:
            raise SignalError(f"Spectrogram shape mismatch: {self.bins.shape} vs {other.bins.shape}")

    def with_bins(self, bins: np.ndarray) -> "Spectrogram":
        return replace(self, bins=bins)

    def channel(self, index: int) -> "Spectrogram":
        return self.with_bins(self.bins[index:index + 1])

    def __add__(self, other: "Spectrogram") -> "Spectrogram":
        self.check_compatible(other)
        return self.with_bins(self.bins + other.bins)

    def __sub__(self, other: "Spectrogram") -> "Spectrogram":
        self.check_compatible(other)
        return self.with_bins(self.bins - other.bins)

    def __mul__(self, scalar: complex) -> "Spectrogram":
        return self.with_bins(self.bins * scalar)

    __rmul__ = __mul__


def _is_power_of_two(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


def analysis_window(n_fft: int, window: str = "hann") -> np.ndarray:
    """Periodic (DFT-even) window of length ``n_fft``."""
    return scipy.signal.get_window(window, n_fft, fftbins=True)


def stft(w: Waveform, n_fft: int = DEFAULT_N_FFT, hop: int = DEFAULT_HOP,
         window: str = "hann") -> Spectrogram:
    """Reflect-padded one-sided STFT of every channel of ``w``.

    Frame ``t`` is centred on sample ``t * hop``; there are ``1 + n_samples // hop``
    frames.
    """
    if not _is_power_of_two(n_fft):
        raise SignalError(f"n_fft must be a power of two, got {n_fft}")
    if not 0 < hop <= n_fft:
        raise SignalError(f"hop must satisfy 0 < hop <= n_fft, got hop={hop}, n_fft={n_fft}")
    if w.n_samples == 0:
        raise SignalError("Cannot analyse an empty waveform")
    if w.n_samples < n_fft:
        raise SignalError(f"Waveform length {w.n_samples} is shorter than n_fft={n_fft}")

    pad = n_fft // 2
    padded = np.pad(w.samples, ((0, 0), (pad, pad)), mode="reflect")
    frames = sliding_window_view(padded, n_fft, axis=-1)[:, ::hop]
    spec = np.fft.rfft(frames * analysis_window(n_fft, window), axis=-1)
    return Spectrogram(
        bins=np.transpose(spec, (0, 2, 1)),
        n_fft=n_fft,
        hop=hop,
        window=window,
        sample_rate=w.sample_rate,
    )


def istft(s: Spectrogram, length: Optional[int] = None) -> Waveform:
    """Weighted overlap-add inverse of :func:`stft`.

    ``length`` defaults to ``(n_frames - 1) * hop``, the longest signal whose
    analysis yields ``n_frames`` frames.
    """
    win = analysis_window(s.n_fft, s.window)
    if not scipy.signal.check_COLA(win, s.n_fft, s.n_fft - s.hop):
        raise SignalError(
            f"Window '{s.window}' with n_fft={s.n_fft} and hop={s.hop} violates the "
            f"constant overlap-add condition"
        )

    n_frames = s.n_frames
    pad = s.n_fft // 2
    frames = np.fft.irfft(np.transpose(s.bins, (0, 2, 1)), n=s.n_fft, axis=-1) * win
    total = s.n_fft + s.hop * (n_frames - 1)
    out = np.zeros((s.n_channels, total))
    norm = np.zeros(total)
    win_sq = win ** 2
    for t in range(n_frames):
        start = t * s.hop
        out[:, start:start + s.n_fft] += frames[:, t]
        norm[start:start + s.n_fft] += win_sq

    nonzero = norm > 1e-10
    out[:, nonzero] /= norm[nonzero]
    if length is None:
        length = s.hop * (n_frames - 1)
    out = out[:, pad:pad + length]
    if out.shape[1] < length:
        out = np.pad(out, ((0, 0), (0, length - out.shape[1])))
    return Waveform(out, s.sample_rate)


def read_wav(path: Union[str, Path]) -> Waveform:
    samples, sample_rate = sf.read(str(path), dtype="float64", always_2d=True)
    return Waveform(samples.T, int(sample_rate))


def write_wav(path: Union[str, Path], w: Waveform, subtype: str = "FLOAT") -> Path:
    """Write ``w`` as little-endian RIFF WAV, PCM 16-bit or 32-bit float."""
    if subtype not in WAV_SUBTYPES:
        raise SignalError(f"Unsupported WAV subtype '{subtype}', expected one of {WAV_SUBTYPES}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = w.samples.T
    if subtype == "PCM_16":
        peak = np.max(np.abs(data)) if data.size else 0.0
        if peak > 1.0:
            logger.warning(f"Clipping {path.name}: peak {peak:.3f} exceeds PCM_16 full scale")
            data = np.clip(data, -1.0, 1.0)
    sf.write(str(path), data, w.sample_rate, subtype=subtype, endian="LITTLE", format="WAV")
    return path
