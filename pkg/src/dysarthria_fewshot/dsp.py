"""Audio ingestion and 80-channel log-Mel feature extraction.

Default framing: 16 kHz audio, 25 ms Hann windows (n_fft = 400) every
10 ms (hop = 160), padded or trimmed to 30 s, giving an 80 x 3000 matrix.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.io import wavfile
from scipy.signal import resample_poly

from .errors import (
    DegenerateFilter,
    InvalidConfig,
    SampleRateMismatch,
    UnreadableAudio,
    UnsupportedEncoding,
    ZeroLengthAudio,
)
from .fsutil import atomic_write_bytes

LOG_FLOOR = 1e-10
DYNAMIC_RANGE = 8.0


@dataclass(frozen=True, eq=False)
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"AudioClip expects mono 1-D samples, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("AudioClip samples must be finite")
        if samples.size and np.max(np.abs(samples)) > 1.0:
            raise ValueError("AudioClip samples must lie in [-1, 1]")
        if int(self.sample_rate) != self.sample_rate or self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be a positive integer, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class FeatureConfig:
    sample_rate: int = 16000
    window_ms: float = 25.0
    hop_ms: float = 10.0
    n_fft: int = 400
    n_mels: int = 80
    f_min: float = 0.0
    f_max: float = 8000.0
    target_duration_s: float = 30.0

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise InvalidConfig("sample_rate must be positive")
        if self.n_mels < 1:
            raise InvalidConfig("n_mels must be >= 1")
        win = self.sample_rate * self.window_ms / 1000.0
        if not math.isclose(win, self.n_fft):
            raise InvalidConfig(
                f"window of {self.window_ms} ms at {self.sample_rate} Hz is {win} samples, "
                f"but n_fft = {self.n_fft}"
            )
        hop = self.sample_rate * self.hop_ms / 1000.0
        if hop < 1 or not math.isclose(hop, round(hop)):
            raise InvalidConfig(f"hop of {self.hop_ms} ms is not a whole number of samples")
        if not (0 <= self.f_min < self.f_max <= self.sample_rate / 2):
            raise InvalidConfig("need 0 <= f_min < f_max <= sample_rate / 2")
        if self.target_duration_s <= 0:
            raise InvalidConfig("target_duration_s must be positive")

    @property
    def hop_length(self) -> int:
        return int(round(self.sample_rate * self.hop_ms / 1000.0))

    @property
    def n_samples(self) -> int:
        return int(round(self.target_duration_s * self.sample_rate))

    @property
    def n_frames(self) -> int:
        return -(-self.n_samples // self.hop_length)

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1


@dataclass(frozen=True, eq=False)
class MelSpectrogram:
    values: np.ndarray
    utterance_id: str = ""

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        if values.ndim != 2:
            raise ValueError(f"MelSpectrogram must be 2-D, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("MelSpectrogram contains NaN or Inf")
        object.__setattr__(self, "values", values)

    @property
    def n_mels(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


def load_wav(path: str | Path) -> AudioClip:
    """Read a PCM WAV file into a mono clip at the file's native rate.

    Integer PCM is scaled to [-1, 1] (uint8 is offset-binary); stereo and
    multichannel audio is downmixed by averaging channels.
    """
    path = Path(path)
    try:
        rate, data = wavfile.read(path)
    except FileNotFoundError as exc:
        raise UnreadableAudio(f"{path}: no such file") from exc
    except ValueError as exc:
        msg = str(exc)
        if "format" in msg.lower() or "unsupported" in msg.lower():
            raise UnsupportedEncoding(f"{path}: {msg}") from exc
        raise UnreadableAudio(f"{path}: {msg}") from exc
    except (OSError, EOFError) as exc:
        raise UnreadableAudio(f"{path}: {exc}") from exc

    if data.dtype == np.uint8:
        samples = (data.astype(np.float64) - 128.0) / 128.0
    elif data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        samples = data.astype(np.float64) / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    else:
        raise UnsupportedEncoding(f"{path}: sample type {data.dtype} is not supported")

    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    if samples.shape[0] == 0:
        raise ZeroLengthAudio(f"{path}: file contains no samples")
    if not np.all(np.isfinite(samples)):
        raise UnreadableAudio(f"{path}: non-finite samples")
    return AudioClip(np.clip(samples, -1.0, 1.0), int(rate))


def write_wav(path: str | Path, clip: AudioClip) -> None:
    """Write a clip as 16-bit PCM mono."""
    pcm = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype("<i2")
    buf = io.BytesIO()
    wavfile.write(buf, clip.sample_rate, pcm)
    atomic_write_bytes(Path(path), buf.getvalue())


def resample(clip: AudioClip, target_rate: int) -> AudioClip:
    """Band-limited polyphase resampling to ``target_rate``.

    Output length is ``round(len * target / source)``. A clip already at the
    target rate is returned as-is.
    """
    if target_rate <= 0 or int(target_rate) != target_rate:
        raise ValueError(f"target_rate must be a positive integer, got {target_rate}")
    target_rate = int(target_rate)
    if clip.sample_rate == target_rate:
        return clip
    n_out = int(round(len(clip) * target_rate / clip.sample_rate))
    if len(clip) == 0 or n_out == 0:
        return AudioClip(np.zeros(n_out), target_rate)
    ratio = Fraction(target_rate, clip.sample_rate)
    out = resample_poly(clip.samples, ratio.numerator, ratio.denominator)
    if out.shape[0] >= n_out:
        out = out[:n_out]
    else:
        out = np.pad(out, (0, n_out - out.shape[0]))
    return AudioClip(np.clip(out, -1.0, 1.0), target_rate)


def pad_or_trim(clip: AudioClip, target_duration_s: float) -> AudioClip:
    n = int(round(target_duration_s * clip.sample_rate))
    if len(clip) == n:
        return clip
    if len(clip) > n:
        return AudioClip(clip.samples[:n], clip.sample_rate)
    return AudioClip(np.pad(clip.samples, (0, n - len(clip))), clip.sample_rate)


def hann_window(n: int) -> np.ndarray:
    # periodic form, as used for spectral analysis
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def stft_magnitude(samples: np.ndarray, config: FeatureConfig) -> np.ndarray:
    """Centered Hann STFT magnitudes, shape ``(n_fft // 2 + 1, ceil(len / hop))``.

    The signal is reflect-padded by ``n_fft // 2`` on both sides so frame
    ``t`` is centered on sample ``t * hop``.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] < 1:
        raise ValueError("stft_magnitude needs a non-empty 1-D signal")
    hop = config.hop_length
    n_frames = -(-x.shape[0] // hop)
    padded = np.pad(x, config.n_fft // 2, mode="reflect")
    frames = sliding_window_view(padded, config.n_fft)[::hop][:n_frames]
    spectrum = np.fft.rfft(frames * hann_window(config.n_fft), axis=-1)
    return np.abs(spectrum).T


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(config: FeatureConfig) -> np.ndarray:
    """Triangular mel filters, shape ``(n_mels, n_fft // 2 + 1)``.

    Centers are uniform on the mel scale between f_min and f_max; each
    triangle has unit area over Hz (peak height 2 / (f_hi - f_lo)).
    """
    edges = mel_to_hz(np.linspace(hz_to_mel(config.f_min), hz_to_mel(config.f_max), config.n_mels + 2))
    freqs = np.arange(config.n_bins) * config.sample_rate / config.n_fft
    lo, center, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (center - lo)
    falling = (hi - freqs) / (hi - center)
    weights = np.maximum(0.0, np.minimum(rising, falling)) * (2.0 / (hi - lo))
    empty = np.flatnonzero(~np.any(weights > 0, axis=1))
    if empty.size:
        raise DegenerateFilter(
            f"{empty.size} of {config.n_mels} mel filters cover no FFT bin "
            f"(first empty filter {int(empty[0])}); lower n_mels or raise n_fft"
        )
    return weights


def log_mel_power(samples: np.ndarray, config: FeatureConfig) -> np.ndarray:
    """log10 mel power with the 1e-10 floor, before range clamp and rescaling."""
    power = stft_magnitude(samples, config) ** 2
    return np.log10(np.maximum(mel_filterbank(config) @ power, LOG_FLOOR))


def normalize_log_mel(log_spec: np.ndarray) -> np.ndarray:
    log_spec = np.maximum(log_spec, log_spec.max() - DYNAMIC_RANGE)
    return (log_spec + 4.0) / 4.0


def log_mel(clip: AudioClip, config: FeatureConfig | None = None, utterance_id: str = "") -> MelSpectrogram:
    """Model input features for one clip already at ``config.sample_rate``."""
    config = config or FeatureConfig()
    if clip.sample_rate != config.sample_rate:
        raise SampleRateMismatch(
            f"clip is at {clip.sample_rate} Hz but features expect {config.sample_rate} Hz; resample first"
        )
    fixed = pad_or_trim(clip, config.target_duration_s)
    values = normalize_log_mel(log_mel_power(fixed.samples, config))
    return MelSpectrogram(values.astype(np.float32), utterance_id)


def wav_to_log_mel(path: str | Path, config: FeatureConfig | None = None, utterance_id: str = "") -> MelSpectrogram:
    config = config or FeatureConfig()
    clip = resample(load_wav(path), config.sample_rate)
    return log_mel(clip, config, utterance_id)
