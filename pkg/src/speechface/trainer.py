"""Training: squared-error objective, Adam, sequence minibatching, evaluation.

The objective is the plain sum of squared output errors over every frame and
all 49 components. Recurrent variants train with truncated backpropagation
through time: contiguous subsequences of at most ``bptt_len`` frames, hidden
state zeroed at each subsequence start. The static variant trains on shuffled
individual frames.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import EMOTION_NAMES, LABEL_ABSENT, Dataset
from .errors import ConfigError, DataError, NumericError, ShapeError
from .face import FaceFrame, landmark_rmse, weights_mse
from .model import VARIANTS, Model, build_model, forward_sequence

ROT_DIM = 3


@dataclass
class TrainConfig:
    variant: str = "cnn_lstm"
    learning_rate: float = 0.0001
    minibatch_frames: int = 300
    epoch_frames: int = 150000
    epochs: int = 300
    bptt_len: int = 32
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        for name in ("minibatch_frames", "epoch_frames", "epochs", "bptt_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")


# ---------------------------------------------------------------------------
# objective


def loss(pred, target) -> float:
    """Sum of squared differences over frames and all 49 components."""
    pred = np.stack([p.vector if isinstance(p, FaceFrame) else np.asarray(p, float)
                     for p in pred]) if len(pred) else np.zeros((0, 49))
    target = np.stack([t.vector if isinstance(t, FaceFrame) else np.asarray(t, float)
                       for t in target]) if len(target) else np.zeros((0, 49))
    if pred.shape != target.shape:
        raise ShapeError(f"length mismatch: {pred.shape} predictions vs "
                         f"{target.shape} targets")
    return float(((pred - target) ** 2).sum())


def loss_op(pred: Tensor, target) -> Tensor:
    """The same objective as a differentiable graph node."""
    diff = ag.sub(pred, Tensor(np.asarray(target, dtype=pred.dtype)))
    return ag.sum_all(ag.mul(diff, diff))


def _masked_head_loss(y_r, y_e, target, mask_col, dtype):
    """Squared error of both heads, rows weighted 0/1 by ``mask_col``."""
    t_r = Tensor(target[:, :ROT_DIM].astype(dtype))
    t_e = Tensor(target[:, ROT_DIM:].astype(dtype))
    total = None
    for y, t in ((y_r, t_r), (y_e, t_e)):
        d = ag.sub(y, t)
        sq = ag.mul(d, d)
        if mask_col is not None:
            sq = ag.mul(sq, Tensor(np.broadcast_to(
                mask_col[:, None], sq.shape).astype(dtype).copy()))
        term = ag.sum_all(sq)
        total = term if total is None else ag.add(total, term)
    return total


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    @classmethod
    def for_params(cls, params) -> "AdamState":
        state = cls()
        for p in params:
            state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        return state


def adam_step(params, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place; missing gradients count as 0."""
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m[p.name]
        v = state.v[p.name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + epsilon)


# ---------------------------------------------------------------------------
# minibatching


def make_batches(dataset: Dataset, config: TrainConfig, epoch_seed) -> list:
    """One epoch's minibatches, deterministic in ``epoch_seed``.

    For recurrent variants each batch is a list of (start, stop) row ranges:
    contiguous subsequences of at most ``bptt_len`` frames, never crossing a
    sequence boundary, bundled to about ``minibatch_frames`` frames. For
    cnn_static each batch is an index array of shuffled frames. About
    ``epoch_frames`` frames are drawn without replacement per epoch, cycling
    with fresh shuffles when the dataset is smaller.
    """
    if len(dataset) == 0:
        raise DataError("cannot batch an empty dataset")
    rng = np.random.default_rng(epoch_seed)

    if config.variant == "cnn_static":
        stream: list = []
        while len(stream) < config.epoch_frames:
            stream.extend(rng.permutation(len(dataset)).tolist())
        stream = stream[:config.epoch_frames]
        step = config.minibatch_frames
        batches = [np.asarray(stream[i:i + step], dtype=np.int64)
                   for i in range(0, len(stream), step)]
        if len(batches) > 1 and len(batches[-1]) < 2:
            batches[-2] = np.concatenate([batches[-2], batches.pop()])
        return batches

    segments = []
    for a, b in dataset.sequence_spans():
        for s in range(a, b, config.bptt_len):
            segments.append((s, min(s + config.bptt_len, b)))
    batches, current, cur_frames, total = [], [], 0, 0
    order = iter(())
    while total < config.epoch_frames:
        pick = next(order, None)
        if pick is None:
            order = iter(rng.permutation(len(segments)).tolist())
            continue
        seg = segments[pick]
        n = seg[1] - seg[0]
        if current and cur_frames + n > config.minibatch_frames:
            batches.append(current)
            current, cur_frames = [], 0
        current.append(seg)
        cur_frames += n
        total += n
    if current:
        batches.append(current)
    return batches


# ---------------------------------------------------------------------------
# forward + loss over one minibatch


def _static_batch_loss(model: Model, dataset: Dataset, rows, training=True) -> Tensor:
    x = dataset.spectrograms[rows][:, None, :, :].astype(model.dtype)
    feats = model.trunk(Tensor(x), training=training)
    y_r, y_e = model.head_out(feats)
    return _masked_head_loss(y_r, y_e, dataset.targets[rows], None, model.dtype)


def _recurrent_batch_loss(model: Model, dataset: Dataset, segments, training=True) -> Tensor:
    rows = np.concatenate([np.arange(a, b) for a, b in segments])
    lengths = [b - a for a, b in segments]
    n_seg, max_len = len(segments), max(lengths)

    x = dataset.spectrograms[rows][:, None, :, :].astype(model.dtype)
    feats = model.trunk(Tensor(x), training=training)

    # Pad ragged segments to a rectangle; padded slots index row 0 and carry
    # zero loss weight, so they contribute nothing to the gradient.
    idx = np.zeros((n_seg, max_len), dtype=np.int64)
    mask = np.zeros((n_seg, max_len), dtype=model.dtype)
    offset = 0
    for s, n in enumerate(lengths):
        idx[s, :n] = offset + np.arange(n)
        mask[s, :n] = 1.0
        offset += n

    h = Tensor(np.zeros((n_seg, model.arch.hidden), dtype=model.dtype))
    c = Tensor(np.zeros((n_seg, model.arch.hidden), dtype=model.dtype)) \
        if model.variant == "cnn_lstm" else None
    total = None
    for t in range(max_len):
        xt = ag.take_rows(feats, idx[:, t])
        out, h, c = model.recur(xt, h, c)
        y_r, y_e = model.head_out(out)
        target = dataset.targets[rows[idx[:, t]]]
        term = _masked_head_loss(y_r, y_e, target, mask[:, t], model.dtype)
        total = term if total is None else ag.add(total, term)
    return total


def _batch_loss(model: Model, dataset: Dataset, batch, training=True) -> Tensor:
    if model.variant == "cnn_static":
        return _static_batch_loss(model, dataset, batch, training)
    return _recurrent_batch_loss(model, dataset, batch, training)


def _first_nonfinite_layer(model: Model, dataset: Dataset, batch) -> str:
    """Name the earliest source of non-finite values for a diagnostic."""
    for p in model.parameters():
        if not np.all(np.isfinite(p.data)):
            return f"parameter {p.name}"
    if model.variant == "cnn_static":
        rows = np.asarray(batch)
    else:
        rows = np.concatenate([np.arange(a, b) for a, b in batch])
    x = dataset.spectrograms[rows][:, None, :, :].astype(model.dtype)
    capture: dict = {}
    with ag.no_grad():
        feats = model.trunk(Tensor(x), training=False, capture=capture)
    for name, arr in capture.items():
        if not np.all(np.isfinite(arr)):
            return name
    if model.variant != "cnn_static":
        h, c = Tensor(np.zeros((len(rows), model.arch.hidden), dtype=model.dtype)), None
        if model.variant == "cnn_lstm":
            c = Tensor(np.zeros_like(h.data))
        with ag.no_grad():
            out, _, _ = model.recur(feats, h, c)
        if not np.all(np.isfinite(out.data)):
            return "rnn"
    return "loss"


# ---------------------------------------------------------------------------
# training loop


def train(config: TrainConfig, dataset: Dataset, rig=None, model: Model | None = None,
          on_step=None):
    """Run the training loop; returns (model, per-epoch mean minibatch loss).

    ``on_step(step, loss_value)`` is called after every optimizer step; a
    truthy return stops training early (the trace still covers the partial
    epoch). Aborts with a diagnostic if the loss goes non-finite.
    """
    if len(dataset) == 0:
        raise DataError("cannot train on an empty dataset")
    if model is None:
        model = build_model(config.variant, config.seed)
    elif model.variant != config.variant:
        raise ConfigError(f"model variant {model.variant!r} does not match "
                          f"config variant {config.variant!r}")
    params = model.parameters()
    opt = AdamState.for_params(params)
    trace = []
    step = 0
    for epoch in range(config.epochs):
        losses = []
        for batch in make_batches(dataset, config, (config.seed, epoch)):
            model.zero_grad()
            total = _batch_loss(model, dataset, batch)
            value = float(total.data)
            if not np.isfinite(value):
                where = _first_nonfinite_layer(model, dataset, batch)
                raise NumericError(
                    f"non-finite loss at step {step}; first non-finite values in {where}")
            total.backward()
            adam_step(params, opt, config.learning_rate,
                      config.beta1, config.beta2, config.epsilon)
            losses.append(value)
            step += 1
            if on_step is not None and on_step(step, value):
                trace.append(float(np.mean(losses)))
                return model, trace
        trace.append(float(np.mean(losses)))
    return model, trace


# ---------------------------------------------------------------------------
# evaluation


def _subset(frames, keep):
    return [f for f, k in zip(frames, keep) if k]


def metric_report(pred, truth, rig=None, emotions=None, actors=None,
                  metrics=("landmark_rmse", "weights_mse")) -> dict:
    """Grouped metric table over aligned frame lists.

    Groups with no labeled frames are omitted; emotion/actor arrays use 255
    for "absent". Landmark RMSE needs a rig.
    """
    if len(pred) != len(truth):
        raise DataError(f"length mismatch: {len(pred)} predicted frames vs "
                        f"{len(truth)} ground-truth frames")
    if "landmark_rmse" in metrics and rig is None:
        raise ConfigError("landmark_rmse requested but no rig given")

    def compute(metric, p, t):
        if metric == "landmark_rmse":
            return landmark_rmse(p, t, rig)
        if metric == "weights_mse":
            return weights_mse(p, t)
        raise ConfigError(f"unknown metric {metric!r}")

    report = {"frames": len(pred), "metrics": {}}
    for metric in metrics:
        entry = {"mean": compute(metric, pred, truth), "by_emotion": {}, "by_actor": {}}
        if emotions is not None:
            emotions = np.asarray(emotions)
            for code in sorted(int(c) for c in np.unique(emotions) if c != LABEL_ABSENT):
                keep = emotions == code
                entry["by_emotion"][EMOTION_NAMES.get(code, str(code))] = \
                    compute(metric, _subset(pred, keep), _subset(truth, keep))
        if actors is not None:
            actors = np.asarray(actors)
            for actor in sorted(int(a) for a in np.unique(actors) if a != LABEL_ABSENT):
                keep = actors == actor
                entry["by_actor"][str(actor)] = \
                    compute(metric, _subset(pred, keep), _subset(truth, keep))
        report["metrics"][metric] = entry
    return report


def evaluate(model: Model, dataset: Dataset, rig=None,
             metrics=("landmark_rmse", "weights_mse")) -> dict:
    """Run inference over every sequence and report grouped metrics."""
    if len(dataset) == 0:
        raise DataError("cannot evaluate on an empty dataset")
    pred, truth = [], []
    for a, b in dataset.sequence_spans():
        pred += forward_sequence(model, [dataset.spectrograms[i] for i in range(a, b)])
        truth += [FaceFrame.from_vector(dataset.targets[i], int(dataset.frame_indices[i]))
                  for i in range(a, b)]
    return metric_report(pred, truth, rig, dataset.emotions, dataset.actors, metrics)
