"""WAV ingestion and the per-video-frame power spectrogram frontend.

Each video frame maps to the 4224 most recent audio samples (past-only; a
frame never sees audio beyond its own boundary, so the same code serves live
streaming). The window is analyzed as 32 Hann-windowed 256-point DFT frames
hopped by 128 samples, keeping power in bins 0..127.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, ParseError, RangeError, ShapeError

SAMPLE_RATE = 44100
FFT_SIZE = 256
HOP = 128
NUM_BANDS = 128
NUM_COLUMNS = 32
WINDOW_SAMPLES = FFT_SIZE + (NUM_COLUMNS - 1) * HOP  # 4224, ~95.8 ms at 44.1 kHz

# periodic Hann, the standard analysis window for hopped DFTs
_HANN = (0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(FFT_SIZE) / FFT_SIZE)).astype(np.float64)


@dataclass
class AudioClip:
    """Mono waveform with samples in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE
    resampled: bool = False

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ShapeError(f"AudioClip needs a 1-d sample array, got shape {self.samples.shape}")
        if self.sample_rate <= 0:
            raise ConfigError(f"sample rate must be positive, got {self.sample_rate}")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class Spectrogram:
    """128 frequency bands x 32 time columns of signal power for one video frame."""

    bands: np.ndarray
    frame_index: int = 0

    def __post_init__(self):
        self.bands = np.asarray(self.bands, dtype=np.float64)
        if self.bands.shape != (NUM_BANDS, NUM_COLUMNS):
            raise ShapeError(
                f"spectrogram must be {NUM_BANDS}x{NUM_COLUMNS}, got {self.bands.shape}")


@dataclass
class NormStats:
    """Per-band mean and standard deviation pooled over time and corpus."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != (NUM_BANDS,) or self.std.shape != (NUM_BANDS,):
            raise ShapeError("normalization stats must have one mean and std per band")
        if not np.all(self.std > 0):
            raise DataError("normalization std entries must be strictly positive")

    @classmethod
    def identity(cls) -> "NormStats":
        return cls(np.zeros(NUM_BANDS), np.ones(NUM_BANDS))


# ---------------------------------------------------------------------------
# WAV I/O


def _scan_chunks(raw: bytes, path):
    pos = 12
    fmt = None
    data = None
    while pos + 8 <= len(raw):
        cid = raw[pos:pos + 4]
        (size,) = struct.unpack_from("<I", raw, pos + 4)
        body_start = pos + 8
        if body_start + size > len(raw):
            raise ParseError(f"{path}: chunk {cid!r} at byte {pos} overruns file end")
        if cid == b"fmt ":
            if size < 16:
                raise ParseError(f"{path}: fmt chunk at byte {pos} too short ({size} bytes)")
            fmt = struct.unpack_from("<HHIIHH", raw, body_start) + (pos,)
        elif cid == b"data":
            data = (body_start, size)
        pos = body_start + size + (size & 1)  # chunks are word-aligned
    return fmt, data


def load_wav(path) -> AudioClip:
    """Read a RIFF/WAVE file into a mono clip at 44.1 kHz.

    Accepts 16-bit integer or 32-bit float PCM with 1 or 2 channels. Stereo is
    averaged to mono; integer samples are scaled by 1/32768; other sample
    rates are linearly resampled to 44100 and flagged on the clip.
    """
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[0:4] != b"RIFF":
        raise ParseError(f"{path}: not a RIFF file (bad magic at byte 0)")
    if raw[8:12] != b"WAVE":
        raise ParseError(f"{path}: not a WAVE form (bad type at byte 8)")

    fmt, data = _scan_chunks(raw, path)
    if fmt is None:
        raise ParseError(f"{path}: no fmt chunk found")
    if data is None:
        raise ParseError(f"{path}: no data chunk found")
    codec, channels, rate, _byte_rate, _align, bits, fmt_pos = fmt
    if channels not in (1, 2):
        raise ParseError(f"{path}: unsupported channel count {channels} (fmt chunk at byte {fmt_pos})")

    start, size = data
    if codec == 1 and bits == 16:
        count = size // 2
        samples = np.frombuffer(raw, dtype="<i2", count=count, offset=start)
        samples = samples.astype(np.float64) / 32768.0
    elif codec == 3 and bits == 32:
        count = size // 4
        samples = np.frombuffer(raw, dtype="<f4", count=count, offset=start).astype(np.float64)
        samples = np.clip(samples, -1.0, 1.0)
    else:
        raise ParseError(
            f"{path}: unsupported codec (format {codec}, {bits}-bit; fmt chunk at byte {fmt_pos})")

    if channels == 2:
        samples = samples[: (len(samples) // 2) * 2].reshape(-1, 2).mean(axis=1)

    resampled = False
    if rate != SAMPLE_RATE:
        samples = resample_linear(samples, rate, SAMPLE_RATE)
        resampled = True
    return AudioClip(samples, SAMPLE_RATE, resampled)


def write_wav(path, samples: np.ndarray, sample_rate: int = SAMPLE_RATE,
              fmt: str = "pcm16") -> None:
    """Write a mono or (n, channels) waveform as 16-bit PCM or 32-bit float."""
    arr = np.asarray(samples, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    channels = arr.shape[1]
    arr = np.clip(arr, -1.0, 1.0)
    if fmt == "pcm16":
        payload = np.round(arr * 32767.0).astype("<i2").tobytes()
        codec, bits = 1, 16
    elif fmt == "float32":
        payload = arr.astype("<f4").tobytes()
        codec, bits = 3, 32
    else:
        raise ConfigError(f"unsupported wav format {fmt!r}")
    block = channels * bits // 8
    header = b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE"
    header += b"fmt " + struct.pack("<IHHIIHH", 16, codec, channels, sample_rate,
                                    sample_rate * block, block, bits)
    header += b"data" + struct.pack("<I", len(payload))
    Path(path).write_bytes(header + payload)


def resample_linear(samples: np.ndarray, src_rate: int, dst_rate: int) -> np.ndarray:
    """Linear-interpolation resampling; output spans the same time range."""
    if src_rate == dst_rate:
        return np.asarray(samples, dtype=np.float64)
    n = len(samples)
    if n == 0:
        return np.zeros(0)
    new_len = (n - 1) * dst_rate // src_rate + 1
    t_new = np.arange(new_len) / dst_rate
    t_old = np.arange(n) / src_rate
    return np.interp(t_new, t_old, samples)


# ---------------------------------------------------------------------------
# frame windows and spectrograms


def frame_boundary(t: int, fps: float, sample_rate: int = SAMPLE_RATE) -> int:
    """Sample index just past video frame t: round((t+1) * rate / fps)."""
    return int(round((t + 1) * sample_rate / fps))


def frame_count(clip: AudioClip, fps: float) -> int:
    """Number of whole video frames covered by the clip."""
    if fps <= 0:
        raise ConfigError(f"fps must be positive, got {fps}")
    n = len(clip.samples)
    count = max(0, int(n * fps / clip.sample_rate) + 2)
    while count > 0 and frame_boundary(count - 1, fps, clip.sample_rate) > n:
        count -= 1
    return count


def extract_frame_window(clip: AudioClip, t: int, fps: float) -> np.ndarray:
    """The 4224 samples ending at frame t's boundary, zero-padded on the left.

    Never reads any sample at or beyond the boundary, so outputs are valid in
    a live stream where later samples do not exist yet.
    """
    if t < 0:
        raise RangeError(f"frame index must be non-negative, got {t}")
    if fps <= 0:
        raise ConfigError(f"fps must be positive, got {fps}")
    if clip.sample_rate != SAMPLE_RATE:
        raise ConfigError(f"clip must be at {SAMPLE_RATE} Hz, got {clip.sample_rate}")
    end = frame_boundary(t, fps)
    n = len(clip.samples)
    if end > n:
        raise RangeError(f"frame {t} ends at sample {end} but clip has only {n} samples")
    start = end - WINDOW_SAMPLES
    window = np.zeros(WINDOW_SAMPLES, dtype=np.float64)
    lo = max(start, 0)
    window[lo - start:] = clip.samples[lo:end]
    return window


def compute_spectrogram(window: np.ndarray, frame_index: int = 0) -> Spectrogram:
    """Power spectrogram of one 4224-sample window: 128 bands x 32 columns.

    Columns are 256-point DFTs at hop 128 under a periodic Hann window; band k
    holds |X[k]|^2 for k = 0..127 (the Nyquist bin is dropped).
    """
    window = np.asarray(window, dtype=np.float64)
    if window.shape != (WINDOW_SAMPLES,):
        raise ShapeError(f"window must have {WINDOW_SAMPLES} samples, got {window.shape}")
    offsets = np.arange(NUM_COLUMNS) * HOP
    frames = window[offsets[:, None] + np.arange(FFT_SIZE)]  # (32, 256)
    spectrum = np.fft.rfft(frames * _HANN, axis=1)[:, :NUM_BANDS]
    power = (spectrum.real ** 2 + spectrum.imag ** 2)
    return Spectrogram(power.T.copy(), frame_index)


def clip_spectrograms(clip: AudioClip, fps: float) -> list[Spectrogram]:
    """One raw spectrogram per whole video frame of the clip."""
    return [compute_spectrogram(extract_frame_window(clip, t, fps), t)
            for t in range(frame_count(clip, fps))]


def fit_normalization(specs) -> NormStats:
    """Per-band mean/std pooled over all time columns of all spectrograms."""
    specs = list(specs)
    if len(specs) == 0:
        raise DataError("cannot fit normalization on an empty dataset")
    if len(specs) < 2:
        raise DataError("normalization needs at least 2 spectrograms")
    pooled = np.concatenate([s.bands for s in specs], axis=1)
    mean = pooled.mean(axis=1)
    std = np.sqrt(((pooled - mean[:, None]) ** 2).mean(axis=1))
    return NormStats(mean, np.maximum(std, 1e-6))


def normalize(spec: Spectrogram, stats: NormStats) -> Spectrogram:
    """Standardize each band: (value - mean[band]) / std[band]."""
    return Spectrogram((spec.bands - stats.mean[:, None]) / stats.std[:, None],
                       spec.frame_index)
