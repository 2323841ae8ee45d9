"""Deterministic audio DSP: WAV I/O, resampling, segmentation, mel analysis,
and Griffin-Lim synthesis.

Everything here is a pure function of its inputs (no RNG, no global state),
so all operations are safe to call concurrently.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from math import gcd, ceil
from pathlib import Path

import numpy as np
import scipy.signal
from scipy.io import wavfile

PEAK_NORM = 0.95
LOG_FLOOR = 1e-5  # -100 dB; compressed value 0.0

MEL_MAGIC = b"MEL1"


class SignalError(Exception):
    """Base for signal-processing failures."""


class IngestError(SignalError):
    """Audio file could not be read or decoded."""


class EmptyInputError(SignalError):
    """Audio contained no usable samples."""


class ConfigMismatchError(SignalError):
    """Input does not match the configured sample rate / geometry."""


@dataclass(frozen=True)
class SignalConfig:
    sample_rate: int = 16000
    window: int = 800
    hop: int = 200
    n_mels: int = 80
    clip_samples: int = 25600  # 1.6 s
    griffin_lim_iters: int = 60
    fmin: float = 0.0
    fmax: float = 8000.0

    def __post_init__(self):
        if not (self.window > self.hop > 0):
            raise ValueError("window must exceed hop and both must be positive")
        if self.clip_samples % self.hop != 0:
            raise ValueError("clip_samples must be divisible by hop")
        if self.n_mels > self.window // 2 + 1:
            raise ValueError("n_mels exceeds the number of FFT bins")

    @property
    def n_freqs(self) -> int:
        return self.window // 2 + 1

    @property
    def clip_frames(self) -> int:
        return self.clip_samples // self.hop

    @property
    def hop_seconds(self) -> float:
        return self.hop / self.sample_rate

    def content_hash(self) -> str:
        """Stable hash used to refuse inference under a mismatched config."""
        blob = json.dumps(
            {
                "sample_rate": self.sample_rate,
                "window": self.window,
                "hop": self.hop,
                "n_mels": self.n_mels,
                "clip_samples": self.clip_samples,
                "fmin": self.fmin,
                "fmax": self.fmax,
            },
            sort_keys=True,
        ).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class AudioClip:
    """Mono waveform with amplitudes in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError("AudioClip requires a 1-D sample array")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if samples.size and not np.all(np.isfinite(samples)):
            raise ValueError("samples must be finite")
        object.__setattr__(self, "samples", samples)

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    def __len__(self) -> int:
        return self.samples.size


@dataclass(frozen=True)
class MelSpectrogram:
    """Compressed mel magnitudes in [0, 1], one row per mel band."""

    values: np.ndarray
    hop_seconds: float = 200 / 16000

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        if values.ndim != 2:
            raise ValueError("mel values must be a 2-D matrix")
        if values.shape[1] < 1:
            raise ValueError("mel spectrogram needs at least one frame")
        if not np.all(np.isfinite(values)):
            raise ValueError("mel values must be finite")
        if values.size and (values.min() < 0.0 or values.max() > 1.0):
            raise ValueError("mel values must lie in [0, 1]")
        object.__setattr__(self, "values", values)

    @property
    def n_mels(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


def hz_to_mel(f):
    """HTK mel scale."""
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: SignalConfig) -> np.ndarray:
    """Triangular mel filterbank, rows L1-normalized, every FFT bin covered.

    The first and last filters get a mirrored outer foot so the DC and
    Nyquist bins fall inside a triangle instead of on a zero-weight edge.
    """
    freqs = np.fft.rfftfreq(cfg.window, d=1.0 / cfg.sample_rate)
    pts = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    weights = np.zeros((cfg.n_mels, freqs.size), dtype=np.float64)
    for i in range(cfg.n_mels):
        left, center, right = pts[i], pts[i + 1], pts[i + 2]
        if i == 0:
            left = 2.0 * pts[0] - pts[1]
        if i == cfg.n_mels - 1:
            right = 2.0 * pts[-1] - pts[-2]
        rising = (freqs - left) / (center - left)
        falling = (right - freqs) / (right - center)
        weights[i] = np.clip(np.minimum(rising, falling), 0.0, None)
    weights /= weights.sum(axis=1, keepdims=True)
    return weights


def filter_center_frequencies(cfg: SignalConfig) -> np.ndarray:
    """Peak frequency (Hz) of each mel filter."""
    pts = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    return pts[1:-1]


def _frame_count(n_samples: int, hop: int) -> int:
    return max(1, ceil(n_samples / hop))


def _pad_centered(samples: np.ndarray, window: int) -> np.ndarray:
    pad = window // 2
    if samples.size > 1:
        return np.pad(samples, pad, mode="reflect")
    return np.pad(samples, pad, mode="edge")


def _magnitude_scale(cfg: SignalConfig) -> float:
    """Normalization so a full-scale sine peaks near 1.0 in magnitude."""
    window = scipy.signal.get_window("hann", cfg.window, fftbins=True)
    return 2.0 / window.sum()


def stft_magnitude(samples: np.ndarray, cfg: SignalConfig) -> np.ndarray:
    """Normalized magnitude STFT with centered Hann frames; ceil(n/hop) columns."""
    spec = _stft(samples, cfg)
    return np.abs(spec) * _magnitude_scale(cfg)


def _stft(samples: np.ndarray, cfg: SignalConfig) -> np.ndarray:
    samples = np.asarray(samples, dtype=np.float64)
    n_frames = _frame_count(samples.size, cfg.hop)
    padded = _pad_centered(samples, cfg.window)
    window = scipy.signal.get_window("hann", cfg.window, fftbins=True)
    frames = np.stack(
        [padded[t * cfg.hop : t * cfg.hop + cfg.window] for t in range(n_frames)]
    )
    return np.fft.rfft(frames * window, axis=1).T  # (n_freqs, n_frames)


def _istft(spec: np.ndarray, n_samples: int, cfg: SignalConfig) -> np.ndarray:
    """Weighted overlap-add inverse of `_stft`, trimmed to n_samples."""
    window = scipy.signal.get_window("hann", cfg.window, fftbins=True)
    frames = np.fft.irfft(spec.T, n=cfg.window, axis=1)
    pad = cfg.window // 2
    total = (spec.shape[1] - 1) * cfg.hop + cfg.window
    acc = np.zeros(total)
    norm = np.zeros(total)
    for t in range(spec.shape[1]):
        start = t * cfg.hop
        acc[start : start + cfg.window] += frames[t] * window
        norm[start : start + cfg.window] += window**2
    acc /= np.maximum(norm, 1e-12)
    return acc[pad : pad + n_samples]


def compress(mel_linear: np.ndarray) -> np.ndarray:
    """log10 with a -100 dB floor, then affinely mapped [-5, 0] -> [0, 1]."""
    db = np.log10(np.maximum(mel_linear, LOG_FLOOR))
    return np.clip(db / 5.0 + 1.0, 0.0, 1.0)


def decompress(values: np.ndarray) -> np.ndarray:
    """Invert `compress`; exact zeros map back to exact silence."""
    out = 10.0 ** ((np.asarray(values, dtype=np.float64) - 1.0) * 5.0)
    out[np.asarray(values) <= 0.0] = 0.0
    return out


def mel_spectrogram(clip: AudioClip, cfg: SignalConfig) -> MelSpectrogram:
    """Magnitude-only mel analysis of a clip at the configured rate."""
    if clip.sample_rate != cfg.sample_rate:
        raise ConfigMismatchError(
            f"clip is at {clip.sample_rate} Hz, config expects {cfg.sample_rate} Hz"
        )
    if len(clip) == 0:
        raise EmptyInputError("cannot analyse an empty clip")
    magnitude = stft_magnitude(clip.samples, cfg)
    mel_linear = mel_filterbank(cfg) @ magnitude
    return MelSpectrogram(compress(mel_linear), hop_seconds=cfg.hop_seconds)


def griffin_lim(
    mel: MelSpectrogram, cfg: SignalConfig, return_errors: bool = False
):
    """Reconstruct a waveform from a compressed mel spectrogram.

    Decompresses to linear mel, inverts the mel projection with a
    pseudo-inverse (negatives clamped to zero), then runs
    cfg.griffin_lim_iters rounds of alternating phase projection starting
    from zero phase. Output is always len = n_frames * hop samples.

    With return_errors=True also returns the per-iteration spectral
    convergence error (non-increasing by construction of the algorithm).
    """
    target = decompress(mel.values)
    inv = np.linalg.pinv(mel_filterbank(cfg), rcond=1e-8)
    # Back to raw STFT units so the output waveform has the right amplitude.
    magnitude = np.clip(inv @ target, 0.0, None) / _magnitude_scale(cfg)
    n_samples = mel.n_frames * cfg.hop

    mag_norm = np.linalg.norm(magnitude)
    errors = []
    angles = np.zeros_like(magnitude)
    samples = _istft(magnitude * np.exp(1j * angles), n_samples, cfg)
    for _ in range(cfg.griffin_lim_iters):
        spec = _stft(samples, cfg)
        if return_errors:
            err = np.linalg.norm(np.abs(spec) - magnitude) / max(mag_norm, 1e-12)
            errors.append(float(err))
        phase = np.angle(spec)
        samples = _istft(magnitude * np.exp(1j * phase), n_samples, cfg)
    clip = AudioClip(np.clip(samples, -1.0, 1.0), cfg.sample_rate)
    if return_errors:
        return clip, errors
    return clip


def load_audio(path, target_rate: int = 16000) -> AudioClip:
    """Load a WAV file as a mono, peak-normalized clip at target_rate."""
    if target_rate <= 0:
        raise ValueError("target_rate must be positive")
    path = Path(path)
    try:
        rate, data = wavfile.read(path)
    except FileNotFoundError:
        raise IngestError(f"audio file not found: {path}") from None
    except Exception as exc:
        raise IngestError(f"could not decode audio file {path}: {exc}") from exc

    data = np.asarray(data)
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        samples = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        samples = (data.astype(np.float64) - 128.0) / 128.0
    else:
        samples = data.astype(np.float64)
    if samples.ndim == 2:
        samples = samples.mean(axis=1)

    if samples.size == 0:
        raise EmptyInputError(f"empty or silent input: {path}")

    if rate != target_rate:
        g = gcd(int(target_rate), int(rate))
        samples = scipy.signal.resample_poly(samples, target_rate // g, rate // g)

    peak = np.max(np.abs(samples)) if samples.size else 0.0
    if peak <= 0.0:
        raise EmptyInputError(f"empty or silent input: {path}")
    samples = samples * (PEAK_NORM / peak)
    return AudioClip(samples, target_rate)


def save_audio(clip: AudioClip, path) -> None:
    """Write a clip as 16-bit PCM mono WAV."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pcm = np.clip(clip.samples, -1.0, 1.0)
    wavfile.write(path, clip.sample_rate, (pcm * 32767.0).astype(np.int16))


def segment_clips(clip: AudioClip, cfg: SignalConfig) -> list[AudioClip]:
    """Cut a clip into consecutive fixed-length training clips.

    A trailing remainder of at least half a clip is reflect-padded up to
    full length; anything shorter is dropped.
    """
    if clip.sample_rate != cfg.sample_rate:
        raise ConfigMismatchError(
            f"clip is at {clip.sample_rate} Hz, config expects {cfg.sample_rate} Hz"
        )
    n = cfg.clip_samples
    half = n // 2
    out = []
    full = len(clip) // n
    for i in range(full):
        out.append(AudioClip(clip.samples[i * n : (i + 1) * n], cfg.sample_rate))
    rem = clip.samples[full * n :]
    if rem.size >= half:
        padded = np.pad(rem, (0, n - rem.size), mode="reflect")
        out.append(AudioClip(padded, cfg.sample_rate))
    return out


def save_mel(mel: MelSpectrogram, path) -> None:
    """Serialize a mel matrix: "MEL1" magic, u16 rows, u16 cols, f32 LE row-major."""
    rows, cols = mel.values.shape
    if rows > 0xFFFF or cols > 0xFFFF:
        raise ValueError("mel matrix too large for the MEL1 header")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MEL_MAGIC)
        fh.write(struct.pack("<HH", rows, cols))
        fh.write(np.ascontiguousarray(mel.values, dtype="<f4").tobytes())


def load_mel(path) -> MelSpectrogram:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MEL_MAGIC:
            raise IngestError(f"not a MEL1 file: {path}")
        rows, cols = struct.unpack("<HH", fh.read(4))
        data = np.frombuffer(fh.read(rows * cols * 4), dtype="<f4")
    if data.size != rows * cols:
        raise IngestError(f"truncated MEL1 file: {path}")
    return MelSpectrogram(data.reshape(rows, cols))
