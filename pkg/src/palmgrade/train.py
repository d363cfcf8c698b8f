"""Cross-entropy loss and the Adam epoch loop with per-epoch logging."""
from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field

import numpy as np

from .data import batch_iter
from .errors import ConfigError, DataError, NumericError, ShapeError
from .layers import LayerGraph, Mode
from .tensor import make_rng

LOG_HEADER = ("epoch", "train_loss", "train_acc", "eval_loss", "eval_acc", "seconds")
PROB_FLOOR = 1e-12


def cross_entropy(probs: np.ndarray, labels: np.ndarray):
    """Mean categorical cross-entropy and its gradient w.r.t. the logits.

    The gradient is the fused softmax + cross-entropy form ``(probs - labels) / N``.
    """
    if probs.shape != labels.shape or probs.ndim != 2:
        raise ShapeError(f"probs {probs.shape} and labels {labels.shape} must both be N x K")
    rowsum = labels.sum(axis=1)
    if not (np.all((labels == 0) | (labels == 1)) and np.all(rowsum == 1)):
        bad = int(np.flatnonzero(~(np.all((labels == 0) | (labels == 1), axis=1) & (rowsum == 1)))[0])
        raise DataError(f"label row {bad} is not one-hot")
    n = probs.shape[0]
    picked = np.clip((probs * labels).sum(axis=1, dtype=np.float64), PROB_FLOOR, None)
    loss = float(-np.log(picked).mean())
    grad = ((probs - labels) / n).astype(probs.dtype, copy=False)
    return loss, grad


def one_hot(labels, num_classes: int, dtype=np.float32) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise DataError(f"labels must lie in [0, {num_classes})")
    out = np.zeros((labels.size, num_classes), dtype=dtype)
    out[np.arange(labels.size), labels] = 1
    return out


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 64
    epochs: int = 40
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7
    # wall-clock times break byte-identical logs, so they are opt-in
    record_time: bool = False

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float):
    """One bias-corrected Adam update, applied in place to ``params``.

    Only parameters named in ``grads`` move; anything else (e.g. frozen
    layers) is left byte-identical.
    """
    for name, g in grads.items():
        if name not in params:
            raise ShapeError(f"gradient for unknown parameter {name!r}")
        if params[name].shape != g.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} != parameter shape "
                             f"{params[name].shape}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p -= (lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)).astype(p.dtype, copy=False)
    return params, state


@dataclass
class EpochRow:
    epoch: int
    train_loss: float
    train_acc: float
    eval_loss: float
    eval_acc: float
    seconds: float


@dataclass
class TrainLog:
    rows: list[EpochRow] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(LOG_HEADER) + "\n")
        for r in self.rows:
            buf.write(f"{r.epoch},{r.train_loss:.6f},{r.train_acc:.6f},{r.eval_loss:.6f},"
                      f"{r.eval_acc:.6f},{r.seconds:.6f}\n")
        return buf.getvalue()

    def save(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())

    @classmethod
    def from_csv(cls, text: str) -> "TrainLog":
        reader = csv.DictReader(io.StringIO(text))
        if tuple(reader.fieldnames or ()) != LOG_HEADER:
            raise DataError(f"unexpected train log header {reader.fieldnames}")
        rows = [EpochRow(int(r["epoch"]), *(float(r[k]) for k in LOG_HEADER[1:]))
                for r in reader]
        return cls(rows)

    @classmethod
    def load(cls, path) -> "TrainLog":
        with open(path) as fh:
            return cls.from_csv(fh.read())


def _check_data(graph, x, y, what):
    if x is None or len(x) == 0:
        raise DataError(f"{what} dataset is empty")
    if tuple(x.shape[1:]) != graph.input_shape:
        raise ShapeError(f"{what} images {x.shape[1:]} do not match graph input "
                         f"{graph.input_shape}")
    if y.ndim != 2 or y.shape[0] != x.shape[0] or y.shape[1] != graph.output_shape[0]:
        raise ShapeError(f"{what} labels {y.shape} do not match {x.shape[0]} x "
                         f"{graph.output_shape[0]}")


def fit(graph: LayerGraph, train, eval_data, config: TrainConfig, progress=None):
    """Train ``graph`` in place with Adam; returns ``(graph, TrainLog)``.

    ``train`` and ``eval_data`` are ``(images, one_hot_labels)`` pairs.
    Each epoch reshuffles the training set by ``(seed, epoch)``
    and keeps the final partial batch. The eval split is scored after every
    epoch in Eval mode.
    """
    x, y = train
    _check_data(graph, x, y, "train")
    _check_data(graph, eval_data[0], eval_data[1], "eval")
    state = AdamState(config.beta1, config.beta2, config.epsilon)
    dropout_rng = make_rng([config.seed, 0xD0])
    log = TrainLog()
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        total_loss = 0.0
        correct = 0
        for b, batch in enumerate(batch_iter(x, y, config.batch_size, config.seed, epoch)):
            xb, yb = batch.images, batch.labels
            try:
                probs, cache = graph.forward(xb, Mode.TRAIN, dropout_rng)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch + 1}, batch {b}: {exc}") from None
            loss, grad = cross_entropy(probs, yb)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch + 1}, batch {b}")
            grads = graph.backward(cache, grad)
            for name, g in grads.items():
                if not np.isfinite(g).all():
                    raise NumericError(f"non-finite gradient for {name} at epoch {epoch + 1}, "
                                       f"batch {b}")
            adam_step(graph.named_params(), grads, state, config.learning_rate)
            total_loss += loss * len(xb)
            correct += int((probs.argmax(1) == yb.argmax(1)).sum())
        ev = evaluate(graph, eval_data, config.batch_size)
        elapsed = time.perf_counter() - t0 if config.record_time else 0.0
        row = EpochRow(epoch + 1, total_loss / len(x), correct / len(x), ev.loss, ev.accuracy,
                       elapsed)
        log.rows.append(row)
        if progress is not None:
            progress(row)
    return graph, log


@dataclass
class EvalResult:
    scores: np.ndarray
    predicted: np.ndarray
    true: np.ndarray
    accuracy: float
    loss: float


def evaluate(graph: LayerGraph, data, batch_size: int = 64) -> EvalResult:
    """Score ``(images, labels)`` in Eval mode; labels may be one-hot or integer."""
    x, y = data
    if x is None or len(x) == 0:
        raise DataError("eval dataset is empty")
    y = np.asarray(y)
    onehot = y if y.ndim == 2 else one_hot(y, graph.output_shape[0])
    scores = np.concatenate([graph.predict(x[i:i + batch_size])
                             for i in range(0, len(x), batch_size)])
    pred = scores.argmax(axis=1)
    true = onehot.argmax(axis=1)
    loss, _ = cross_entropy(scores, onehot.astype(scores.dtype))
    return EvalResult(scores, pred, true, int((pred == true).sum()) / len(true), loss)
