"""Dataset and parameter-CSV persistence.

A prepared dataset (``.sfd``) carries normalized spectrograms with per-frame
target vectors, grouped into contiguous sequences, plus optional emotion and
actor labels parsed from RAVDESS-style filenames. Normalization statistics
are stored alongside the dataset in a small ``.norm`` sidecar.

Parameter CSVs are the interchange format for ground truth and inference
output: a header row, then one row per frame with the 3 rotation parameters
and 46 expression weights at 6 decimal places.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import NUM_BANDS, NUM_COLUMNS, NormStats
from .errors import DataError, ParseError
from .face import NUM_EXPRESSIONS, NUM_ROTATION, FaceFrame

DATASET_MAGIC = b"SFDS"
DATASET_VERSION = 1
NORM_MAGIC = b"SFNS"

LABEL_ABSENT = 255

EMOTION_NAMES = {
    1: "neutral", 2: "calm", 3: "happy", 4: "sad",
    5: "angry", 6: "fearful", 7: "disgust", 8: "surprised",
}

_TARGET_DIM = NUM_ROTATION + NUM_EXPRESSIONS


@dataclass
class Dataset:
    """Column-wise record storage; rows sharing a sequence id are contiguous."""

    seq_ids: np.ndarray        # (N,) uint32
    frame_indices: np.ndarray  # (N,) uint32
    spectrograms: np.ndarray   # (N, 128, 32) float32, already normalized
    targets: np.ndarray        # (N, 49) float32
    emotions: np.ndarray       # (N,) uint8, 255 = absent
    actors: np.ndarray         # (N,) uint8, 255 = absent

    def __post_init__(self):
        n = len(self.seq_ids)
        self.seq_ids = np.asarray(self.seq_ids, dtype=np.uint32)
        self.frame_indices = np.asarray(self.frame_indices, dtype=np.uint32)
        self.spectrograms = np.asarray(self.spectrograms, dtype=np.float32)
        self.targets = np.asarray(self.targets, dtype=np.float32)
        self.emotions = np.asarray(self.emotions, dtype=np.uint8)
        self.actors = np.asarray(self.actors, dtype=np.uint8)
        for name, arr in (("frame_indices", self.frame_indices),
                          ("emotions", self.emotions), ("actors", self.actors)):
            if arr.shape != (n,):
                raise DataError(f"{name} length {arr.shape} does not match {n} records")
        if self.spectrograms.shape != (n, NUM_BANDS, NUM_COLUMNS):
            raise DataError(f"spectrograms must be (N, {NUM_BANDS}, {NUM_COLUMNS}), "
                            f"got {self.spectrograms.shape}")
        if self.targets.shape != (n, _TARGET_DIM):
            raise DataError(f"targets must be (N, {_TARGET_DIM}), got {self.targets.shape}")
        self._check_invariants()

    def _check_invariants(self):
        r, e = self.targets[:, :NUM_ROTATION], self.targets[:, NUM_ROTATION:]
        if self.targets.size and (np.abs(r).max() > 1.0 or e.min() < 0.0 or e.max() > 1.0):
            raise DataError("targets out of range: rotation in [-1,1], weights in [0,1]")
        for start, stop in self.sequence_spans():
            fi = self.frame_indices[start:stop].astype(np.int64)
            if np.any(np.diff(fi) != 1):
                raise DataError(f"sequence {int(self.seq_ids[start])}: "
                                "frame indices are not consecutive")

    def __len__(self) -> int:
        return len(self.seq_ids)

    def sequence_spans(self) -> list:
        """Contiguous [start, stop) index ranges, one per sequence."""
        n = len(self)
        if n == 0:
            return []
        breaks = np.flatnonzero(np.diff(self.seq_ids)) + 1
        bounds = [0, *breaks.tolist(), n]
        return list(zip(bounds[:-1], bounds[1:]))


def save_dataset(dataset: Dataset, path) -> None:
    out = bytearray()
    out += DATASET_MAGIC
    out += struct.pack("<II", DATASET_VERSION, len(dataset))
    for i in range(len(dataset)):
        out += struct.pack("<II", int(dataset.seq_ids[i]), int(dataset.frame_indices[i]))
        out += dataset.spectrograms[i].astype("<f4").tobytes()
        out += dataset.targets[i].astype("<f4").tobytes()
        out += struct.pack("<BB", int(dataset.emotions[i]), int(dataset.actors[i]))
    Path(path).write_bytes(bytes(out))


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != DATASET_MAGIC:
        raise ParseError(f"{path}: dataset magic mismatch at byte 0")
    if len(raw) < 12:
        raise ParseError(f"{path}: dataset header truncated")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != DATASET_VERSION:
        raise ParseError(f"{path}: unsupported dataset version {version}")
    spec_len = NUM_BANDS * NUM_COLUMNS
    record = 8 + 4 * spec_len + 4 * _TARGET_DIM + 2
    if len(raw) != 12 + count * record:
        raise ParseError(f"{path}: expected {12 + count * record} bytes for "
                         f"{count} records, found {len(raw)}")
    seq_ids = np.empty(count, dtype=np.uint32)
    frames = np.empty(count, dtype=np.uint32)
    specs = np.empty((count, NUM_BANDS, NUM_COLUMNS), dtype=np.float32)
    targets = np.empty((count, _TARGET_DIM), dtype=np.float32)
    emotions = np.empty(count, dtype=np.uint8)
    actors = np.empty(count, dtype=np.uint8)
    pos = 12
    for i in range(count):
        seq_ids[i], frames[i] = struct.unpack_from("<II", raw, pos)
        pos += 8
        specs[i] = np.frombuffer(raw, "<f4", spec_len, pos).reshape(NUM_BANDS, NUM_COLUMNS)
        pos += 4 * spec_len
        targets[i] = np.frombuffer(raw, "<f4", _TARGET_DIM, pos)
        pos += 4 * _TARGET_DIM
        emotions[i], actors[i] = raw[pos], raw[pos + 1]
        pos += 2
    try:
        return Dataset(seq_ids, frames, specs, targets, emotions, actors)
    except DataError as err:
        raise ParseError(f"{path}: {err}") from None


def norm_sidecar_path(dataset_path) -> Path:
    return Path(str(dataset_path) + ".norm")


def save_norm_stats(stats: NormStats, path) -> None:
    out = NORM_MAGIC + struct.pack("<I", 1)
    out += stats.mean.astype("<f4").tobytes() + stats.std.astype("<f4").tobytes()
    Path(path).write_bytes(out)


def load_norm_stats(path) -> NormStats:
    raw = Path(path).read_bytes()
    expected = 8 + 2 * NUM_BANDS * 4
    if len(raw) < 4 or raw[:4] != NORM_MAGIC:
        raise ParseError(f"{path}: normalization file magic mismatch at byte 0")
    if len(raw) != expected:
        raise ParseError(f"{path}: expected {expected} bytes, found {len(raw)}")
    mean = np.frombuffer(raw, "<f4", NUM_BANDS, 8).astype(np.float64)
    std = np.frombuffer(raw, "<f4", NUM_BANDS, 8 + NUM_BANDS * 4).astype(np.float64)
    return NormStats(mean, std)


# ---------------------------------------------------------------------------
# parameter CSV

CSV_HEADER = "frame,r1,r2,r3," + ",".join(f"e{i:02d}" for i in range(1, NUM_EXPRESSIONS + 1))


def write_param_csv(path, frames) -> None:
    """Write FaceFrames as CSV rows with 6-decimal values."""
    lines = [CSV_HEADER]
    for frame in frames:
        vals = ",".join(f"{v:.6f}" for v in frame.vector)
        lines.append(f"{frame.frame_index},{vals}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_param_csv(path) -> list:
    """Parse a parameter CSV back into FaceFrames, validating as it goes."""
    text = Path(path).read_text()
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ParseError(f"{path}: empty file")
    if lines[0].strip() != CSV_HEADER:
        raise ParseError(f"{path}: line 1: unexpected header")
    frames = []
    prev_index = None
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != 1 + _TARGET_DIM:
            raise ParseError(f"{path}: line {lineno}: expected {1 + _TARGET_DIM} "
                             f"columns, found {len(parts)}")
        try:
            index = int(parts[0])
            vec = np.array([float(p) for p in parts[1:]])
            frame = FaceFrame.from_vector(vec, index)
        except (ValueError, DataError) as err:
            raise ParseError(f"{path}: line {lineno}: {err}") from None
        if prev_index is not None and index <= prev_index:
            raise ParseError(f"{path}: line {lineno}: frame indices must be "
                             f"strictly increasing ({prev_index} then {index})")
        prev_index = index
        frames.append(frame)
    return frames


def parse_ravdess_stem(stem: str):
    """Best-effort (emotion, actor) from a 7-field RAVDESS-style stem.

    Returns (None, None) when the stem does not follow the convention.
    """
    parts = stem.split("-")
    if len(parts) != 7:
        return None, None
    try:
        emotion = int(parts[2])
        actor = int(parts[6])
    except ValueError:
        return None, None
    if emotion not in EMOTION_NAMES or not 1 <= actor <= 254:
        return None, None
    return emotion, actor
