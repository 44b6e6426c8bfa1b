"""Log-mel spectrograms, model-range scaling and Griffin-Lim inversion."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.io import wavfile

MELSPEC_MAGIC = b"MELS"
MELSPEC_VERSION = 1


@dataclass(frozen=True)
class SpecConfig:
    sample_rate: int = 16000
    hop: int = 320
    frame_size: int = 640
    n_fft: int = 640
    mel_bins: int = 128
    fmin: float = 0.0
    fmax: float = 8000.0
    log_floor: float = 1e-5

    def __post_init__(self):
        if self.fmax > self.sample_rate / 2:
            raise ValueError("fmax above Nyquist")
        if self.n_fft < self.frame_size:
            raise ValueError("n_fft must be at least the frame size")

    @property
    def frame_seconds(self) -> float:
        return self.hop / self.sample_rate

    @property
    def min_value(self) -> float:
        return float(np.log(self.log_floor))


DEFAULT_SPEC = SpecConfig()


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(cfg: SpecConfig = DEFAULT_SPEC) -> np.ndarray:
    """Triangular (peak 1) HTK-mel filters, shape (mel_bins, n_fft // 2 + 1)."""
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.mel_bins + 2))
    freqs = np.fft.rfftfreq(cfg.n_fft, 1.0 / cfg.sample_rate)
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lower) / (center - lower)
    falling = (upper - freqs) / (upper - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb[:, (freqs < cfg.fmin) | (freqs > cfg.fmax)] = 0.0
    fb.setflags(write=False)
    return fb


def mel_centers(cfg: SpecConfig = DEFAULT_SPEC) -> np.ndarray:
    return mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.mel_bins + 2))[1:-1]


def num_frames(num_samples: int, cfg: SpecConfig = DEFAULT_SPEC) -> int:
    return -(-num_samples // cfg.hop)


@lru_cache(maxsize=8)
def _window(cfg: SpecConfig) -> np.ndarray:
    # periodic Hann
    n = np.arange(cfg.frame_size)
    return 0.5 - 0.5 * np.cos(2 * np.pi * n / cfg.frame_size)


def stft(audio: np.ndarray, cfg: SpecConfig = DEFAULT_SPEC) -> np.ndarray:
    """Centered Hann STFT with reflect padding, shape (frames, n_fft // 2 + 1)."""
    audio = np.asarray(audio, dtype=np.float64)
    frames = num_frames(len(audio), cfg)
    half = cfg.frame_size // 2
    needed = (frames - 1) * cfg.hop + cfg.frame_size
    right = needed - len(audio) - half
    mode = "reflect" if len(audio) > max(half, right) else "constant"
    padded = np.pad(audio, (half, right), mode=mode)
    idx = np.arange(cfg.frame_size)[None, :] + cfg.hop * np.arange(frames)[:, None]
    return np.fft.rfft(padded[idx] * _window(cfg), n=cfg.n_fft, axis=1)


def istft(spec: np.ndarray, cfg: SpecConfig = DEFAULT_SPEC) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft`; returns frames * hop samples."""
    frames = spec.shape[0]
    win = _window(cfg)
    chunks = np.fft.irfft(spec, n=cfg.n_fft, axis=1)[:, :cfg.frame_size] * win
    total = (frames - 1) * cfg.hop + cfg.frame_size
    out = np.zeros(total)
    norm = np.zeros(total)
    for i in range(frames):
        sl = slice(i * cfg.hop, i * cfg.hop + cfg.frame_size)
        out[sl] += chunks[i]
        norm[sl] += win ** 2
    out /= np.maximum(norm, 1e-8)
    half = cfg.frame_size // 2
    return out[half:half + frames * cfg.hop]


def compute_mel(audio: np.ndarray, cfg: SpecConfig = DEFAULT_SPEC) -> np.ndarray:
    """Log-magnitude mel spectrogram, shape (ceil(len / hop), mel_bins)."""
    audio = np.asarray(audio, dtype=np.float64)
    if audio.ndim != 1:
        raise ValueError("expected mono audio")
    if audio.size == 0:
        raise ValueError("cannot analyse empty audio")
    mag = np.abs(stft(audio, cfg))
    mel = mag @ mel_filterbank(cfg).T
    return np.log(np.maximum(mel, cfg.log_floor))


# ------------------------------------------------------------------ scaling

class ClipStats:
    """Counts cells pushed outside [lo, hi] by :func:`scale_to_model_range`."""

    def __init__(self):
        self.clipped = 0
        self.total = 0

    @property
    def fraction(self) -> float:
        return self.clipped / self.total if self.total else 0.0


def scale_to_model_range(mel, lo: float, hi: float, stats: ClipStats | None = None):
    if not lo < hi:
        raise ValueError("need lo < hi")
    mel = np.asarray(mel)
    if stats is not None:
        stats.clipped += int(np.count_nonzero((mel < lo) | (mel > hi)))
        stats.total += mel.size
    return np.clip(2.0 * (mel - lo) / (hi - lo) - 1.0, -1.0, 1.0)


def unscale_from_model_range(x, lo: float, hi: float):
    return (np.asarray(x) + 1.0) * 0.5 * (hi - lo) + lo


def range_constants(mels, low_pct: float = 1.0, high_pct: float = 99.9) -> tuple[float, float]:
    """Dataset-wide (lo, hi) from percentiles of all log-mel cells."""
    values = np.concatenate([np.ravel(m) for m in mels])
    lo, hi = np.percentile(values, [low_pct, high_pct])
    if hi <= lo:
        hi = lo + 1.0
    return float(lo), float(hi)


# ---------------------------------------------------------------- inversion

def mel_to_linear(mel: np.ndarray, cfg: SpecConfig = DEFAULT_SPEC) -> np.ndarray:
    """Log-mel -> non-negative linear magnitude via the filterbank pseudo-inverse."""
    mag = np.exp(np.asarray(mel, dtype=np.float64))
    mag[mel <= cfg.min_value + 1e-9] = 0.0
    return np.maximum(mag @ _pinv(cfg).T, 0.0)


@lru_cache(maxsize=8)
def _pinv(cfg: SpecConfig) -> np.ndarray:
    return np.linalg.pinv(mel_filterbank(cfg))


def griffin_lim(magnitude: np.ndarray, iters: int = 64, momentum: float = 0.99,
                cfg: SpecConfig = DEFAULT_SPEC, seed: int = 0) -> np.ndarray:
    """Fast Griffin-Lim phase recovery (momentum variant)."""
    if iters < 1:
        raise ValueError("iters must be >= 1")
    rng = np.random.default_rng(seed)
    angles = np.exp(2j * np.pi * rng.random(magnitude.shape))
    rebuilt = np.zeros_like(angles)
    for _ in range(iters):
        previous = rebuilt
        audio = istft(magnitude * angles, cfg)
        rebuilt = stft(audio, cfg)
        angles = rebuilt - (momentum / (1 + momentum)) * previous
        angles /= np.abs(angles) + 1e-16
    return istft(magnitude * angles, cfg)


def invert_mel(mel: np.ndarray, iters: int = 64, cfg: SpecConfig = DEFAULT_SPEC,
               momentum: float = 0.99, seed: int = 0) -> np.ndarray:
    """Log-mel spectrogram -> audio of length frames * hop."""
    if iters < 1:
        raise ValueError("iters must be >= 1")
    mag = mel_to_linear(mel, cfg)
    if not mag.any():
        return np.zeros(mel.shape[0] * cfg.hop)
    return griffin_lim(mag, iters, momentum, cfg, seed)


# ---------------------------------------------------------------------- I/O

def write_matrix(path, matrix: np.ndarray) -> None:
    Path(path).write_bytes(matrix_to_bytes(matrix))


def matrix_to_bytes(matrix: np.ndarray) -> bytes:
    """16-byte header (magic, version, rows, cols) + row-major float32 LE."""
    m = np.asarray(matrix, dtype="<f4")
    if m.ndim != 2:
        raise ValueError("expected a 2-D matrix")
    header = MELSPEC_MAGIC + struct.pack("<III", MELSPEC_VERSION, m.shape[0], m.shape[1])
    return header + np.ascontiguousarray(m).tobytes()


def matrix_from_bytes(data: bytes) -> np.ndarray:
    if len(data) < 16 or data[:4] != MELSPEC_MAGIC:
        raise ValueError("not a MelSpec dump (bad magic)")
    version, rows, cols = struct.unpack("<III", data[4:16])
    if version != MELSPEC_VERSION:
        raise ValueError(f"unsupported MelSpec dump version {version}")
    if len(data) != 16 + 4 * rows * cols:
        raise ValueError("MelSpec dump size does not match header")
    return np.frombuffer(data, dtype="<f4", offset=16).reshape(rows, cols).astype(np.float32)


def read_matrix(path) -> np.ndarray:
    return matrix_from_bytes(Path(path).read_bytes())


def write_wav(path, audio: np.ndarray, sample_rate: int = 16000) -> None:
    pcm = np.clip(np.round(np.asarray(audio) * 32767.0), -32768, 32767).astype("<i2")
    wavfile.write(path, sample_rate, pcm)


def read_wav(path, expected_rate: int = 16000) -> np.ndarray:
    rate, data = wavfile.read(path)
    if rate != expected_rate:
        raise ValueError(f"{path}: sample rate {rate}, expected {expected_rate}")
    if data.ndim != 1:
        raise ValueError(f"{path}: expected mono audio")
    if data.dtype == np.int16:
        return data.astype(np.float64) / 32767.0
    return data.astype(np.float64)
