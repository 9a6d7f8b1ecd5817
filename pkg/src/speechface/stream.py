"""Real-time streaming inference and latency measurement.

A StreamingSession accepts audio in arbitrary-size chunks and emits one
FaceFrame per video-frame interval, each computed from exactly the 4224
samples ending at that frame's boundary. Nothing is ever read past the
boundary, so output depends only on already-heard audio.
"""

from __future__ import annotations

import time

import numpy as np

from .audio import SAMPLE_RATE, WINDOW_SAMPLES, compute_spectrogram, frame_boundary, normalize
from .errors import ConfigError
from .model import Model, forward


class StreamingSession:
    """Stateful per-stream decoder: push samples, collect FaceFrames.

    Audio must already be mono at 44100 Hz. The session keeps only the most
    recent window of samples plus the recurrent state, so memory use is
    constant regardless of stream length.
    """

    def __init__(self, model: Model, fps: float = 30.0):
        if fps <= 0:
            raise ConfigError(f"fps must be positive, got {fps}")
        self.model = model
        self.fps = float(fps)
        self.state = model.initial_state()
        self.frames_emitted = 0
        self._tail = np.zeros(WINDOW_SAMPLES)  # last 4224 samples, zero-primed
        self._heard = 0  # absolute sample count pushed so far

    def push(self, samples) -> list:
        """Consume a chunk; return the FaceFrames whose boundaries it crossed."""
        samples = np.asarray(samples, dtype=np.float64).reshape(-1)
        emitted = []
        pos = 0
        while True:
            boundary = frame_boundary(self.frames_emitted, self.fps)
            take = min(len(samples) - pos, boundary - self._heard)
            if take > 0:
                self._append(samples[pos:pos + take])
                pos += take
            if self._heard == boundary:
                emitted.append(self._emit())
            elif pos >= len(samples):
                return emitted

    def _append(self, chunk) -> None:
        n = len(chunk)
        if n >= WINDOW_SAMPLES:
            self._tail = chunk[-WINDOW_SAMPLES:].copy()
        else:
            self._tail = np.concatenate([self._tail[n:], chunk])
        self._heard += n

    def _emit(self):
        spec = compute_spectrogram(self._tail, frame_index=self.frames_emitted)
        spec = normalize(spec, self.model.norm_stats)
        frame, self.state = forward(self.model, spec, self.state)
        self.frames_emitted += 1
        return frame


def bench(model: Model, iters: int = 100, fps: float = 30.0, seed: int = 0,
          warmup: int = 5) -> dict:
    """Median/p95 wall time of one frame's work (spectrogram + forward).

    Feeds random audio windows through the per-frame pipeline with carried
    recurrent state, mirroring what a live session does each frame.
    """
    if iters < 1:
        raise ConfigError(f"iters must be positive, got {iters}")
    rng = np.random.default_rng(seed)
    windows = rng.standard_normal((warmup + iters, WINDOW_SAMPLES)) * 0.1
    state = model.initial_state()
    times = []
    for i in range(warmup + iters):
        t0 = time.perf_counter()
        spec = normalize(compute_spectrogram(windows[i], frame_index=i), model.norm_stats)
        _, state = forward(model, spec, state)
        times.append(time.perf_counter() - t0)
    kept = np.array(times[warmup:])
    median = float(np.median(kept))
    return {
        "variant": model.variant,
        "iters": iters,
        "median_ms": median * 1000.0,
        "p95_ms": float(np.percentile(kept, 95)) * 1000.0,
        "fps": (1.0 / median) if median > 0 else float("inf"),
        "budget_ms": 1000.0 / fps,
    }
