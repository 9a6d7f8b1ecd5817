"""The time-frequency CNN + recurrent network and its checkpoint format.

The spectrogram is convolved and pooled on the frequency axis (downsampling
by two per step) until that axis collapses to one, then convolved and pooled
along time, followed by a dense layer, an optional unidirectional recurrent
layer (LSTM or GRU), a second dense layer and two output heads: a tanh head
for the 3 rotation parameters and a sigmoid head for the 46 expression
weights.

Three variants share the convolutional trunk: ``cnn_static`` (no recurrent
layer, frame-by-frame), ``cnn_lstm`` and ``cnn_gru``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autograd as ag
from .audio import NUM_BANDS, NUM_COLUMNS, NormStats, Spectrogram
from .autograd import BatchNormState, GRUParams, LSTMParams, Parameter, Tensor
from .errors import ConfigError, ParseError, ShapeError
from .face import NUM_EXPRESSIONS, NUM_ROTATION, FaceFrame

VARIANTS = ("cnn_static", "cnn_lstm", "cnn_gru")

CHECKPOINT_MAGIC = b"SFCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ConvSpec:
    name: str
    out_channels: int
    kernel: tuple
    stride: tuple
    pad: tuple
    batch_norm: bool = True


@dataclass(frozen=True)
class PoolSpec:
    name: str
    window: tuple
    stride: tuple


@dataclass(frozen=True)
class Architecture:
    """Layer stack description; the default is the production configuration."""

    input_bands: int = NUM_BANDS
    input_columns: int = NUM_COLUMNS
    stack: tuple = (
        ConvSpec("conv1", 64, (3, 1), (2, 1), (1, 0)),
        PoolSpec("pool1", (2, 1), (2, 1)),
        ConvSpec("conv2", 96, (3, 1), (2, 1), (1, 0)),
        PoolSpec("pool2", (2, 1), (2, 1)),
        ConvSpec("conv3", 128, (3, 1), (2, 1), (1, 0)),
        ConvSpec("conv4", 160, (3, 1), (2, 1), (1, 0)),
        ConvSpec("conv5", 256, (2, 1), (2, 1), (0, 0)),
        PoolSpec("pool5", (1, 2), (1, 2)),
        ConvSpec("conv6", 256, (1, 3), (1, 2), (0, 1)),
        ConvSpec("conv7", 256, (1, 3), (1, 2), (0, 1)),
        ConvSpec("conv8", 256, (1, 4), (1, 4), (0, 0), batch_norm=False),
    )
    hidden: int = 256
    rot_dim: int = NUM_ROTATION
    expr_dim: int = NUM_EXPRESSIONS

    def stack_shapes(self):
        """Per-layer (channels, freq, time) output dims, input row first."""
        shapes = [("input", (1, self.input_bands, self.input_columns))]
        c, f, t = shapes[0][1]
        for spec in self.stack:
            if isinstance(spec, ConvSpec):
                (kf, kt), (sf, st), (pf, pt) = spec.kernel, spec.stride, spec.pad
                c = spec.out_channels
                f = (f + 2 * pf - kf) // sf + 1
                t = (t + 2 * pt - kt) // st + 1
            else:
                (wf, wt), (sf, st) = spec.window, spec.stride
                f = (f - wf) // sf + 1
                t = (t - wt) // st + 1
            shapes.append((spec.name, (c, f, t)))
        return shapes

    @property
    def flat_dim(self) -> int:
        c, f, t = self.stack_shapes()[-1][1]
        return c * f * t


STANDARD_ARCH = Architecture()


@dataclass
class RecurrentState:
    """Per-stream recurrent state; zero at stream start, None entries unused."""

    h: np.ndarray | None = None
    c: np.ndarray | None = None


class Model:
    """A built network: variant tag, parameters and input normalization."""

    def __init__(self, variant: str, arch: Architecture, dtype=np.float32):
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}, expected one of {VARIANTS}")
        self.variant = variant
        self.arch = arch
        self.dtype = dtype
        self.norm_stats = NormStats.identity()
        self._convs = []  # (ConvSpec, w, b, BatchNormState | None)
        self._pools = {}  # name -> PoolSpec
        for spec in arch.stack:
            if isinstance(spec, ConvSpec):
                self._convs.append(spec)
            else:
                self._pools[spec.name] = spec
        self.conv_w = {}
        self.conv_b = {}
        self.conv_bn = {}
        self.dense1_w = self.dense1_b = None
        self.cell = None
        self.dense2_w = self.dense2_b = None
        self.head_r_w = self.head_r_b = None
        self.head_e_w = self.head_e_b = None

    # -- parameter bookkeeping ------------------------------------------------

    def parameters(self) -> list:
        """All trainable parameters in a stable order."""
        params = []
        for spec in self.arch.stack:
            if not isinstance(spec, ConvSpec):
                continue
            params += [self.conv_w[spec.name], self.conv_b[spec.name]]
            bn = self.conv_bn.get(spec.name)
            if bn is not None:
                params += [bn.gamma, bn.beta]
        params += [self.dense1_w, self.dense1_b]
        if self.cell is not None:
            params += list(self.cell)
        params += [self.dense2_w, self.dense2_b,
                   self.head_r_w, self.head_r_b, self.head_e_w, self.head_e_b]
        return params

    def param_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def named_arrays(self):
        """Parameters plus batch-norm running statistics, for persistence."""
        entries = [(p.name, p.data) for p in self.parameters()]
        for spec in self.arch.stack:
            bn = self.conv_bn.get(spec.name) if isinstance(spec, ConvSpec) else None
            if bn is not None:
                entries.append((f"{spec.name}.bn.running_mean", bn.running_mean))
                entries.append((f"{spec.name}.bn.running_var", bn.running_var))
        return entries

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    # -- forward pieces ---------------------------------------------------------

    def trunk(self, x: Tensor, training: bool, trace: list | None = None,
              capture: dict | None = None) -> Tensor:
        """Conv/pool stack plus the first dense layer: (B,1,F,T) -> (B,hidden).

        ``trace`` collects (layer, output dims); ``capture`` collects raw
        output arrays by layer name, for numeric diagnostics.
        """
        expect = (1, self.arch.input_bands, self.arch.input_columns)
        if x.ndim != 4 or x.shape[1:] != expect:
            raise ShapeError(f"input: expected (B,) + {expect}, got {x.shape}")
        if trace is not None:
            trace.append(("input", x.shape[1:]))
        if capture is not None:
            capture["input"] = x.data
        for spec in self.arch.stack:
            try:
                if isinstance(spec, ConvSpec):
                    x = ag.conv2d(x, self.conv_w[spec.name], self.conv_b[spec.name],
                                  spec.stride, spec.pad)
                    bn = self.conv_bn.get(spec.name)
                    if bn is not None:
                        x = ag.batch_norm(x, bn, training)
                    x = ag.relu(x)
                else:
                    x = ag.max_pool2d(x, spec.window, spec.stride)
            except ShapeError as err:
                raise ShapeError(f"layer {spec.name}: {err}") from None
            if trace is not None:
                trace.append((spec.name, x.shape[1:]))
            if capture is not None:
                capture[spec.name] = x.data
        x = ag.reshape(x, (x.shape[0], self.arch.flat_dim))
        x = ag.tanh(ag.dense(x, self.dense1_w, self.dense1_b))
        if trace is not None:
            trace.append(("dense1", x.shape[1:]))
        if capture is not None:
            capture["dense1"] = x.data
        return x

    def recur(self, x: Tensor, h: Tensor | None, c: Tensor | None):
        """One recurrent step on (B,hidden) features; identity for cnn_static."""
        if self.variant == "cnn_static":
            return x, None, None
        if self.variant == "cnn_lstm":
            h2, c2 = ag.lstm_step(x, (h, c), self.cell)
            return h2, h2, c2
        h2 = ag.gru_step(x, h, self.cell)
        return h2, h2, None

    def head_out(self, x: Tensor, trace: list | None = None):
        """Second dense layer and the two output heads: (B,hidden) -> (B,3),(B,46)."""
        x = ag.tanh(ag.dense(x, self.dense2_w, self.dense2_b))
        if trace is not None:
            trace.append(("dense2", x.shape[1:]))
        y_r = ag.tanh(ag.dense(x, self.head_r_w, self.head_r_b))
        y_e = ag.sigmoid(ag.dense(x, self.head_e_w, self.head_e_b))
        if trace is not None:
            trace.append(("output", (y_r.shape[1] + y_e.shape[1],)))
        return y_r, y_e

    def initial_state(self) -> RecurrentState:
        h = self.arch.hidden
        if self.variant == "cnn_lstm":
            return RecurrentState(np.zeros(h), np.zeros(h))
        if self.variant == "cnn_gru":
            return RecurrentState(np.zeros(h), None)
        return RecurrentState(None, None)


def _glorot(rng, shape, fan_in, fan_out, dtype):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape).astype(dtype)


def build_model(variant: str, seed: int = 0, dtype=np.float32,
                arch: Architecture = STANDARD_ARCH) -> Model:
    """Deterministically initialize a model from a seed.

    Conv/dense/head weights use uniform Glorot fan-in/fan-out limits; recurrent
    matrices are Glorot per gate block; biases start at zero except the LSTM
    forget gate, which starts at 1.
    """
    model = Model(variant, arch, dtype)
    rng = np.random.default_rng(seed)
    hid = arch.hidden

    in_ch = 1
    for spec in arch.stack:
        if not isinstance(spec, ConvSpec):
            continue
        kf, kt = spec.kernel
        shape = (spec.out_channels, in_ch, kf, kt)
        model.conv_w[spec.name] = Parameter(
            f"{spec.name}.w", _glorot(rng, shape, in_ch * kf * kt, spec.out_channels * kf * kt, dtype))
        model.conv_b[spec.name] = Parameter(
            f"{spec.name}.b", np.zeros(spec.out_channels, dtype=dtype))
        if spec.batch_norm:
            model.conv_bn[spec.name] = BatchNormState(
                f"{spec.name}.bn", spec.out_channels, dtype=dtype)
        in_ch = spec.out_channels

    flat = arch.flat_dim
    model.dense1_w = Parameter("dense1.w", _glorot(rng, (hid, flat), flat, hid, dtype))
    model.dense1_b = Parameter("dense1.b", np.zeros(hid, dtype=dtype))

    if variant == "cnn_lstm":
        w_x = np.vstack([_glorot(rng, (hid, hid), hid, hid, dtype) for _ in range(4)])
        w_h = np.vstack([_glorot(rng, (hid, hid), hid, hid, dtype) for _ in range(4)])
        b = np.zeros(4 * hid, dtype=dtype)
        b[hid:2 * hid] = 1.0  # forget gate starts open
        model.cell = LSTMParams(Parameter("rnn.w_x", w_x), Parameter("rnn.w_h", w_h),
                                Parameter("rnn.b", b))
    elif variant == "cnn_gru":
        w_x = np.vstack([_glorot(rng, (hid, hid), hid, hid, dtype) for _ in range(3)])
        w_h = np.vstack([_glorot(rng, (hid, hid), hid, hid, dtype) for _ in range(2)])
        w_c = _glorot(rng, (hid, hid), hid, hid, dtype)
        model.cell = GRUParams(Parameter("rnn.w_x", w_x), Parameter("rnn.w_h", w_h),
                               Parameter("rnn.w_c", w_c),
                               Parameter("rnn.b", np.zeros(3 * hid, dtype=dtype)))

    model.dense2_w = Parameter("dense2.w", _glorot(rng, (hid, hid), hid, hid, dtype))
    model.dense2_b = Parameter("dense2.b", np.zeros(hid, dtype=dtype))
    model.head_r_w = Parameter("head_r.w", _glorot(rng, (arch.rot_dim, hid), hid, arch.rot_dim, dtype))
    model.head_r_b = Parameter("head_r.b", np.zeros(arch.rot_dim, dtype=dtype))
    model.head_e_w = Parameter("head_e.w", _glorot(rng, (arch.expr_dim, hid), hid, arch.expr_dim, dtype))
    model.head_e_b = Parameter("head_e.b", np.zeros(arch.expr_dim, dtype=dtype))
    return model


# ---------------------------------------------------------------------------
# inference
#
# Inference arithmetic runs in 64-bit (parameters upcast on the fly), so
# batched and one-frame-at-a-time passes agree far below the float32 noise
# floor while the trained parameters stay 32-bit on disk and in training.


def _spec_bands(spec) -> np.ndarray:
    return spec.bands if isinstance(spec, Spectrogram) else np.asarray(spec)


def _state_tensors(model: Model, state: RecurrentState | None):
    if model.variant == "cnn_static":
        return None, None
    if state is None or state.h is None:
        state = model.initial_state()
    h = Tensor(np.atleast_2d(np.asarray(state.h, dtype=np.float64)))
    c = None
    if model.variant == "cnn_lstm":
        if state.c is None:
            raise ConfigError("LSTM state needs a cell vector")
        c = Tensor(np.atleast_2d(np.asarray(state.c, dtype=np.float64)))
    return h, c


def forward(model: Model, spec, state: RecurrentState | None = None,
            mode: str = "infer", trace: list | None = None):
    """Run one normalized spectrogram through the network.

    Returns (FaceFrame, advanced RecurrentState). ``mode`` selects batch-norm
    behaviour; inference uses running statistics.
    """
    if mode not in ("train", "infer"):
        raise ConfigError(f"mode must be 'train' or 'infer', got {mode!r}")
    bands = _spec_bands(spec)
    frame_index = spec.frame_index if isinstance(spec, Spectrogram) else 0
    x = Tensor(bands[None, None, :, :].astype(np.float64))
    h, c = _state_tensors(model, state)
    with ag.no_grad():
        feat = model.trunk(x, training=(mode == "train"), trace=trace)
        out, h2, c2 = model.recur(feat, h, c)
        if trace is not None and model.variant != "cnn_static":
            trace.append(("rnn", (out.shape[1],)))
        y_r, y_e = model.head_out(out, trace=trace)
    new_state = RecurrentState(
        None if h2 is None else h2.data[0].copy(),
        None if c2 is None else c2.data[0].copy(),
    )
    frame = FaceFrame(y_r.data[0].astype(np.float64), y_e.data[0].astype(np.float64),
                      frame_index)
    return frame, new_state


def forward_sequence(model: Model, specs, initial_state: RecurrentState | None = None):
    """Fold :func:`forward` over a spectrogram sequence, carrying state.

    The convolutional trunk runs batched over all frames; the recurrence then
    advances frame by frame, which is arithmetically identical to streaming.
    """
    specs = list(specs)
    if not specs:
        raise ShapeError("forward_sequence needs a non-empty spectrogram list")
    bands = np.stack([_spec_bands(s) for s in specs]).astype(np.float64)
    indices = [s.frame_index if isinstance(s, Spectrogram) else i
               for i, s in enumerate(specs)]
    with ag.no_grad():
        feats = model.trunk(Tensor(bands[:, None, :, :]), training=False)
        h, c = _state_tensors(model, initial_state)
        frames = []
        for i in range(len(specs)):
            xt = Tensor(feats.data[i:i + 1])
            out, h, c = model.recur(xt, h, c)
            y_r, y_e = model.head_out(out)
            frames.append(FaceFrame(y_r.data[0].astype(np.float64),
                                    y_e.data[0].astype(np.float64), indices[i]))
    return frames


def forward_trace(model: Model, spec=None) -> list:
    """Layer-by-layer output dims of a single-frame pass (batch dim stripped)."""
    if spec is None:
        spec = np.zeros((model.arch.input_bands, model.arch.input_columns))
    trace: list = []
    forward(model, spec, None, "infer", trace=trace)
    return trace


# ---------------------------------------------------------------------------
# checkpoint persistence

_VARIANT_IDS = {name: i for i, name in enumerate(VARIANTS)}


def save_checkpoint(model: Model, path) -> None:
    """Serialize variant tag, normalization stats and every named array."""
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += struct.pack("<IB", CHECKPOINT_VERSION, _VARIANT_IDS[model.variant])
    out += model.norm_stats.mean.astype("<f4").tobytes()
    out += model.norm_stats.std.astype("<f4").tobytes()
    entries = model.named_arrays()
    out += struct.pack("<I", len(entries))
    for name, arr in entries:
        encoded = name.encode("utf-8")
        out += struct.pack("<H", len(encoded)) + encoded
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.astype("<f4").tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path) -> Model:
    """Rebuild a model from a checkpoint written by :func:`save_checkpoint`."""
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != CHECKPOINT_MAGIC:
        raise ParseError(f"{path}: checkpoint magic mismatch at byte 0")
    if len(raw) < 9:
        raise ParseError(f"{path}: checkpoint header truncated")
    version, variant_id = struct.unpack_from("<IB", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ParseError(f"{path}: unsupported checkpoint version {version}")
    if variant_id >= len(VARIANTS):
        raise ParseError(f"{path}: unknown variant id {variant_id}")
    pos = 9
    stats_bytes = NUM_BANDS * 4
    if pos + 2 * stats_bytes + 4 > len(raw):
        raise ParseError(f"{path}: normalization stats truncated")
    mean = np.frombuffer(raw, dtype="<f4", count=NUM_BANDS, offset=pos).astype(np.float64)
    pos += stats_bytes
    std = np.frombuffer(raw, dtype="<f4", count=NUM_BANDS, offset=pos).astype(np.float64)
    pos += stats_bytes
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4

    loaded = {}
    for _ in range(count):
        if pos + 2 > len(raw):
            raise ParseError(f"{path}: parameter table truncated at byte {pos}")
        (name_len,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos:pos + name_len].decode("utf-8")
        pos += name_len
        if pos + 1 > len(raw):
            raise ParseError(f"{path}: field {name!r} truncated")
        rank = raw[pos]
        pos += 1
        if pos + 4 * rank > len(raw):
            raise ParseError(f"{path}: dims of field {name!r} truncated")
        dims = struct.unpack_from(f"<{rank}I", raw, pos)
        pos += 4 * rank
        numel = int(np.prod(dims)) if rank else 1
        if pos + 4 * numel > len(raw):
            raise ParseError(f"{path}: values of field {name!r} truncated")
        loaded[name] = np.frombuffer(raw, dtype="<f4", count=numel, offset=pos).reshape(dims)
        pos += 4 * numel

    model = build_model(VARIANTS[variant_id], seed=0)
    model.norm_stats = NormStats(mean, std)
    expected = dict(model.named_arrays())
    if set(loaded) != set(expected):
        missing = sorted(set(expected) - set(loaded))
        extra = sorted(set(loaded) - set(expected))
        raise ParseError(f"{path}: parameter set mismatch (missing {missing}, unexpected {extra})")
    for name, arr in loaded.items():
        target = expected[name]
        if target.shape != arr.shape:
            raise ParseError(f"{path}: field {name!r} has dims {arr.shape}, expected {target.shape}")
    for p in model.parameters():
        p.data = loaded[p.name].astype(model.dtype).copy()
    for spec in model.arch.stack:
        bn = model.conv_bn.get(spec.name) if isinstance(spec, ConvSpec) else None
        if bn is not None:
            bn.running_mean = loaded[f"{spec.name}.bn.running_mean"].astype(model.dtype).copy()
            bn.running_var = loaded[f"{spec.name}.bn.running_var"].astype(model.dtype).copy()
    return model
