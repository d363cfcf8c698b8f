"""Layers with explicit forward/backward passes and the DAG that wires them.

Every layer works on a per-sample shape (batch axis excluded) at build time
and on full NHWC / NxD arrays at run time. Parameters live in each layer's
``params`` dict and are exposed graph-wide under ``"<node id>.<slot>"``.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable

import numpy as np

from . import tensor as T
from .errors import ConfigError, GraphError, ShapeError


SWITCH_KINDS = ("ReLU", "MaxPool2D")


class Mode(str, Enum):
    TRAIN = "train"
    EVAL = "eval"


def _glorot(rng, shape, fan_in, fan_out, dtype=T.FLOAT):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Layer:
    kind = "Layer"
    buffers: tuple[str, ...] = ()

    def __init__(self, trainable: bool = True):
        self.trainable = trainable
        self.params: dict[str, np.ndarray] = {}

    def build(self, in_shapes: list[tuple], rng) -> tuple:
        """Allocate parameters for ``in_shapes`` and return the output shape."""
        raise NotImplementedError

    def forward(self, xs, train: bool, rng, ref=None, update_stats=True):
        raise NotImplementedError

    def backward(self, dout, cache, need_dx):
        raise NotImplementedError

    def trainable_slots(self) -> list[str]:
        if not self.trainable:
            return []
        return [k for k in self.params if k not in self.buffers]

    def config(self) -> dict:
        return {}

    def __repr__(self):
        args = ", ".join(f"{k}={v}" for k, v in self.config().items())
        return f"{self.kind}({args})"


def _single(in_shapes, kind):
    if len(in_shapes) != 1:
        raise ShapeError(f"{kind} takes exactly one input, got {len(in_shapes)}")
    return in_shapes[0]


class Conv2D(Layer):
    kind = "Conv2D"

    def __init__(self, filters: int, kernel_size: int, stride: int = 1, padding: int | str = "same",
                 use_bias: bool = True, trainable: bool = True):
        super().__init__(trainable)
        if filters < 1 or kernel_size < 1 or stride < 1:
            raise ConfigError(f"invalid Conv2D({filters}, {kernel_size}, stride={stride})")
        if padding == "same":
            padding = (kernel_size - 1) // 2
        elif padding == "valid":
            padding = 0
        self.filters, self.kernel_size, self.stride = filters, kernel_size, stride
        self.padding = int(padding)
        self.use_bias = use_bias

    def config(self):
        return dict(filters=self.filters, kernel_size=self.kernel_size, stride=self.stride,
                    padding=self.padding, use_bias=self.use_bias)

    def build(self, in_shapes, rng):
        shape = _single(in_shapes, self.kind)
        if len(shape) != 3:
            raise ShapeError(f"Conv2D expects HxWxC input, got {shape}")
        h, w, c = shape
        k, p = self.kernel_size, self.padding
        if k > h + 2 * p or k > w + 2 * p:
            raise ShapeError(f"kernel {k}x{k} larger than padded input {h + 2 * p}x{w + 2 * p}")
        self.params["kernel"] = _glorot(rng, (self.filters, k, k, c), k * k * c, k * k * self.filters)
        if self.use_bias:
            self.params["bias"] = np.zeros(self.filters, dtype=T.FLOAT)
        return (T.conv_output_size(h, k, self.stride, p), T.conv_output_size(w, k, self.stride, p),
                self.filters)

    def forward(self, xs, train, rng, ref=None, update_stats=True):
        x = xs[0]
        out, cols = T.conv2d(x, self.params["kernel"], self.params.get("bias"), self.stride,
                             self.padding, return_cols=True)
        return out, (x.shape, cols)

    def backward(self, dout, cache, need_dx):
        x_shape, cols = cache
        dx, dk, db = T.conv2d_backward(dout, x_shape, cols, self.params["kernel"], self.stride,
                                       self.padding, need_dx=need_dx[0])
        grads = {"kernel": dk}
        if self.use_bias:
            grads["bias"] = db
        return [dx], grads


class MaxPool2D(Layer):
    kind = "MaxPool2D"

    def __init__(self, pool: int = 2, stride: int | None = None, padding: int = 0):
        super().__init__(trainable=True)
        self.pool = pool
        self.stride = pool if stride is None else stride
        self.padding = padding

    def config(self):
        return dict(pool=self.pool, stride=self.stride, padding=self.padding)

    def build(self, in_shapes, rng):
        h, w, c = _single(in_shapes, self.kind)
        p = self.padding
        if self.pool > h + 2 * p or self.pool > w + 2 * p:
            raise ShapeError(f"pool {self.pool} exceeds input {h}x{w}")
        return (T.conv_output_size(h, self.pool, self.stride, p),
                T.conv_output_size(w, self.pool, self.stride, p), c)

    def forward(self, xs, train, rng, ref=None, update_stats=True):
        if ref is not None:
            out = T.maxpool2d_gather(xs[0], ref[1], self.pool, self.stride, self.padding)
            return out, ref
        out, argmax = T.maxpool2d(xs[0], self.pool, self.stride, self.padding)
        return out, (xs[0].shape, argmax)

    def backward(self, dout, cache, need_dx):
        x_shape, argmax = cache
        if not need_dx[0]:
            return [None], {}
        return [T.maxpool2d_backward(dout, argmax, x_shape, self.pool, self.stride,
                                     self.padding)], {}


class GlobalAvgPool(Layer):
    kind = "GlobalAvgPool"

    def build(self, in_shapes, rng):
        shape = _single(in_shapes, self.kind)
        if len(shape) != 3:
            raise ShapeError(f"GlobalAvgPool expects HxWxC input, got {shape}")
        return (shape[2],)

    def forward(self, xs, train, rng, ref=None, update_stats=True):
        x = xs[0]
        return x.mean(axis=(1, 2)), x.shape

    def backward(self, dout, cache, need_dx):
        n, h, w, c = cache
        dx = np.broadcast_to(dout[:, None, None, :] / (h * w), cache)
        return [np.ascontiguousarray(dx)], {}


class Flatten(Layer):
    kind = "Flatten"

    def build(self, in_shapes, rng):
        return (int(np.prod(_single(in_shapes, self.kind))),)

    def forward(self, xs, train, rng, ref=None, update_stats=True):
        x = xs[0]
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dout, cache, need_dx):
        return [dout.reshape(cache)], {}


class Dense(Layer):
    kind = "Dense"

    def __init__(self, units: int, trainable: bool = True):
        super().__init__(trainable)
        if units < 1:
            raise ConfigError(f"Dense units must be >= 1, got {units}")
        self.units = units

    def config(self):
        return dict(units=self.units)

    def build(self, in_shapes, rng):
        shape = _single(in_shapes, self.kind)
        if len(shape) != 1:
            raise ShapeError(f"Dense expects a flat feature vector, got {shape}; add Flatten")
        d = shape[0]
        self.params["kernel"] = _glorot(rng, (d, self.units), d, self.units)
        self.params["bias"] = np.zeros(self.units, dtype=T.FLOAT)
        return (self.units,)

    def forward(self, xs, train, rng, ref=None, update_stats=True):
        x = xs[0]
        return T.matmul(x, self.params["kernel"]) + self.params["bias"], x

    def backward(self, dout, x, need_dx):
        grads = {"kernel": x.T @ dout, "bias": dout.sum(axis=0)}
        dx = dout @ self.params["kernel"].T if need_dx[0] else None
        return [dx], grads


class ReLU(Layer):
    kind = "ReLU"

    def build(self, in_shapes, rng):
        return _single(in_shapes, self.kind)

    def forward(self, xs, train, rng, ref=None, update_stats=True):
        mask = xs[0] > 0 if ref is None else ref
        # where() rather than maximum(): never emits -0.0
        return np.where(mask, xs[0], 0).astype(xs[0].dtype, copy=False), mask

    def backward(self, dout, mask, need_dx):
        return [np.where(mask, dout, 0).astype(dout.dtype, copy=False)], {}


class Softmax(Layer):
    kind = "Softmax"

    def build(self, in_shapes, rng):
        shape = _single(in_shapes, self.kind)
        if len(shape) != 1 or shape[0] < 2:
            raise ShapeError(f"Softmax expects K >= 2 logits, got {shape}")
        return shape

    def forward(self, xs, train, rng, ref=None, update_stats=True):
        p = T.softmax(xs[0])
        return p, p

    def backward(self, dout, probs, need_dx):
        return [T.softmax_backward(dout, probs)], {}


class Dropout(Layer):
    """Inverted dropout: survivors scaled by ``1/(1-rate)``; identity in eval."""

    kind = "Dropout"

    def __init__(self, rate: float):
        super().__init__(trainable=True)
        if not 0.0 <= rate < 1.0:
            raise ConfigError(f"drop rate must be in [0, 1), got {rate}")
        self.rate = rate

    def config(self):
        return dict(rate=self.rate)

    def build(self, in_shapes, rng):
        return _single(in_shapes, self.kind)

    def forward(self, xs, train, rng, ref=None, update_stats=True):
        x = xs[0]
        if not train or self.rate == 0.0:
            return x, None
        if ref is not None:
            mask = ref
        else:
            keep = rng.random(x.shape) >= self.rate
            mask = (keep / (1.0 - self.rate)).astype(x.dtype)
        return x * mask, mask

    def backward(self, dout, mask, need_dx):
        return [dout if mask is None else dout * mask], {}


class BatchNorm(Layer):
    """Per-channel batch normalisation over every axis but the last.

    A frozen BatchNorm always normalises with its running statistics, so a
    frozen backbone is a fixed function of its input.
    """

    kind = "BatchNorm"
    buffers = ("moving_mean", "moving_variance")

    def __init__(self, momentum: float = 0.99, epsilon: float = 1e-3, trainable: bool = True):
        super().__init__(trainable)
        self.momentum, self.epsilon = momentum, epsilon

    def config(self):
        return dict(momentum=self.momentum, epsilon=self.epsilon)

    def build(self, in_shapes, rng):
        shape = _single(in_shapes, self.kind)
        c = shape[-1]
        self.params["gamma"] = np.ones(c, dtype=T.FLOAT)
        self.params["beta"] = np.zeros(c, dtype=T.FLOAT)
        self.params["moving_mean"] = np.zeros(c, dtype=T.FLOAT)
        self.params["moving_variance"] = np.ones(c, dtype=T.FLOAT)
        return shape

    def forward(self, xs, train, rng, ref=None, update_stats=True):
        x = xs[0]
        g, b = self.params["gamma"], self.params["beta"]
        axes = tuple(range(x.ndim - 1))
        if train and self.trainable:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            if update_stats:
                m = self.momentum
                rm, rv = self.params["moving_mean"], self.params["moving_variance"]
                rm[...] = m * rm + (1 - m) * mean
                rv[...] = m * rv + (1 - m) * var
            inv = 1.0 / np.sqrt(var + self.epsilon)
            xhat = (x - mean) * inv
            return g * xhat + b, ("batch", xhat, inv)
        inv = 1.0 / np.sqrt(self.params["moving_variance"] + self.epsilon)
        xhat = (x - self.params["moving_mean"]) * inv
        return (g * xhat + b).astype(x.dtype, copy=False), ("running", xhat, inv)

    def backward(self, dout, cache, need_dx):
        how, xhat, inv = cache
        axes = tuple(range(dout.ndim - 1))
        g = self.params["gamma"]
        grads = {"gamma": (dout * xhat).sum(axis=axes), "beta": dout.sum(axis=axes)}
        dx = None
        if need_dx[0]:
            if how == "running":
                dx = dout * (g * inv)
            else:
                m = dout.size // dout.shape[-1]
                dxhat = dout * g
                dx = (inv / m) * (m * dxhat - dxhat.sum(axis=axes)
                                  - xhat * (dxhat * xhat).sum(axis=axes))
        return [dx], grads


class ResidualAdd(Layer):
    """``H(x) = F(x) + x``: inputs are (shortcut, residual)."""

    kind = "ResidualAdd"

    def build(self, in_shapes, rng):
        if len(in_shapes) != 2 or in_shapes[0] != in_shapes[1]:
            raise ShapeError(f"ResidualAdd needs two equal shapes, got {in_shapes}")
        return in_shapes[0]

    def forward(self, xs, train, rng, ref=None, update_stats=True):
        return xs[0] + xs[1], None

    def backward(self, dout, cache, need_dx):
        return [dout if need else None for need in need_dx], {}


class ChannelConcat(Layer):
    kind = "ChannelConcat"

    def build(self, in_shapes, rng):
        if not in_shapes:
            raise ShapeError("ChannelConcat needs at least one input")
        ref = in_shapes[0][:-1]
        for s in in_shapes[1:]:
            if s[:-1] != ref:
                raise ShapeError(f"concat spatial mismatch: {ref} vs {s[:-1]}")
        self.sizes = [s[-1] for s in in_shapes]
        return ref + (sum(self.sizes),)

    def forward(self, xs, train, rng, ref=None, update_stats=True):
        return T.concat_channels(xs), None

    def backward(self, dout, cache, need_dx):
        return T.split_channels(dout, self.sizes), {}


class Input(Layer):
    kind = "Input"

    def __init__(self, shape):
        super().__init__(trainable=False)
        self.shape = tuple(shape)

    def config(self):
        return dict(shape=self.shape)


@dataclass
class Node:
    id: str
    layer: Layer
    inputs: tuple[str, ...]
    shape: tuple


@dataclass
class Cache:
    """Everything a Train-mode forward leaves behind for backward."""

    graph_token: int
    mode: Mode
    outputs: dict[str, np.ndarray]
    layer_caches: dict[str, object] = field(default_factory=dict)


class LayerGraph:
    """Directed acyclic graph of layers with a single input and output.

    Nodes are kept in insertion order, which is a topological order because
    a node may only consume nodes added before it. The last node added is
    the output.
    """

    def __init__(self, input_shape, seed: int = 0, input_id: str = "input"):
        self.input_shape = tuple(int(s) for s in input_shape)
        if any(s < 1 for s in self.input_shape):
            raise ShapeError(f"invalid input shape {self.input_shape}")
        self.seed = seed
        self._rng = T.make_rng(seed)
        self.nodes: list[Node] = [Node(input_id, Input(self.input_shape), (), self.input_shape)]
        self._index = {input_id: 0}
        self.head_attached = False

    # construction -------------------------------------------------------

    @property
    def input_id(self) -> str:
        return self.nodes[0].id

    @property
    def output_id(self) -> str:
        return self.nodes[-1].id

    @property
    def output_shape(self) -> tuple:
        return self.nodes[-1].shape

    def __contains__(self, node_id):
        return node_id in self._index

    def __getitem__(self, node_id) -> Node:
        try:
            return self.nodes[self._index[node_id]]
        except KeyError:
            raise GraphError(f"unknown node id {node_id!r}") from None

    def __len__(self):
        return len(self.nodes)

    def add(self, node_id: str, layer: Layer, inputs: str | Iterable[str] | None = None) -> str:
        if node_id in self._index:
            raise GraphError(f"duplicate node id {node_id!r}")
        if not node_id:
            raise GraphError("node id must be non-empty")
        if inputs is None:
            inputs = (self.output_id,)
        elif isinstance(inputs, str):
            inputs = (inputs,)
        inputs = tuple(inputs)
        for src in inputs:
            if src not in self._index:
                raise GraphError(f"node {node_id!r} consumes unknown node {src!r}")
        in_shapes = [self[s].shape for s in inputs]
        existing = self.named_params()
        try:
            shape = tuple(layer.build(in_shapes, self._rng))
        except ShapeError as exc:
            raise ShapeError(f"node {node_id!r}: {exc}") from None
        for slot in layer.params:
            if f"{node_id}.{slot}" in existing:
                raise GraphError(f"parameter name {node_id}.{slot} is not unique")
        self._index[node_id] = len(self.nodes)
        self.nodes.append(Node(node_id, layer, inputs, shape))
        return node_id

    def validate(self):
        consumed = {src for n in self.nodes for src in n.inputs}
        sinks = [n.id for n in self.nodes if n.id not in consumed]
        if sinks != [self.output_id]:
            raise GraphError(f"graph must have exactly one output node, found {sinks}")

    # parameters ---------------------------------------------------------

    def named_params(self) -> dict[str, np.ndarray]:
        """Every parameter slot, trainable or not, keyed by unique name."""
        return {f"{n.id}.{slot}": arr for n in self.nodes for slot, arr in n.layer.params.items()}

    def trainable_names(self) -> list[str]:
        return [f"{n.id}.{slot}" for n in self.nodes for slot in n.layer.trainable_slots()]

    def trainable_params(self) -> dict[str, np.ndarray]:
        allp = self.named_params()
        return {k: allp[k] for k in self.trainable_names()}

    def count_params(self, trainable_only: bool = True) -> int:
        if trainable_only:
            return int(sum(a.size for a in self.trainable_params().values()))
        return int(sum(a.size for a in self.named_params().values()))

    def kinds(self) -> list[str]:
        return [n.layer.kind for n in self.nodes]

    def freeze(self, predicate: Callable[[str], bool] | Iterable[str] = lambda _id: True,
               trainable: bool = False) -> "LayerGraph":
        """Set ``trainable`` on the selected nodes; parameter values are untouched.

        ``predicate`` is either a callable on node ids or an explicit
        collection of ids (unknown ids raise). Returns the graph itself.
        """
        if callable(predicate):
            selected = [n for n in self.nodes[1:] if predicate(n.id)]
        else:
            selected = [self[i] for i in predicate]
        for n in selected:
            n.layer.trainable = trainable
        return self

    def unfreeze(self, predicate=lambda _id: True) -> "LayerGraph":
        return self.freeze(predicate, trainable=True)

    def astype(self, dtype) -> "LayerGraph":
        """Deep copy with every parameter cast to ``dtype``."""
        g = copy.deepcopy(self)
        for n in g.nodes:
            for k, v in n.layer.params.items():
                n.layer.params[k] = v.astype(dtype)
        return g

    def copy(self) -> "LayerGraph":
        return copy.deepcopy(self)

    # execution ----------------------------------------------------------

    def forward(self, batch: np.ndarray, mode: Mode | str = Mode.EVAL, rng=None, *,
                update_stats: bool = True, reuse: Cache | None = None, start: int = 1,
                freeze_switches: bool = False, keep: bool = True):
        """Run the graph on ``batch``; returns ``(output, cache)``.

        ``reuse``/``start`` replay a previous forward: nodes before index
        ``start`` take their cached outputs and Dropout nodes reuse their
        recorded masks. With ``freeze_switches`` ReLU masks and max-pool
        winners are also taken from ``reuse``, which makes the replayed
        function smooth in the parameters. Used by the gradient checker.
        """
        mode = Mode(mode)
        train = mode is Mode.TRAIN
        if tuple(batch.shape[1:]) != self.input_shape:
            raise ShapeError(f"node {self.input_id!r}: batch shape {batch.shape[1:]} does not "
                             f"match input shape {self.input_shape}")
        if train and rng is None:
            rng = T.make_rng(0)
        outputs = {self.input_id: batch}
        caches = {}
        if reuse is not None:
            for n in self.nodes[:start]:
                outputs[n.id] = reuse.outputs[n.id]
                if n.id in reuse.layer_caches:
                    caches[n.id] = reuse.layer_caches[n.id]
        else:
            start = 1
        for n in self.nodes[start:]:
            xs = [outputs[s] for s in n.inputs]
            ref = None
            if reuse is not None and (n.layer.kind == "Dropout" or (
                    freeze_switches and n.layer.kind in SWITCH_KINDS)):
                ref = reuse.layer_caches.get(n.id)
            try:
                out, c = n.layer.forward(xs, train, rng, ref=ref, update_stats=update_stats)
            except ShapeError as exc:
                raise ShapeError(f"node {n.id!r}: {exc}") from None
            outputs[n.id] = out
            if keep:
                caches[n.id] = c
        out = outputs[self.output_id]
        T.ensure_finite(out, f"output of node {self.output_id!r}")
        cache = Cache(id(self), mode, outputs if keep else {}, caches)
        return out, cache

    def predict(self, batch: np.ndarray) -> np.ndarray:
        return self.forward(batch, Mode.EVAL, keep=False)[0]

    def _needs_grad(self) -> dict[str, bool]:
        need = {}
        for n in self.nodes:
            need[n.id] = bool(n.layer.trainable_slots()) or any(need[s] for s in n.inputs)
        return need

    def backward(self, cache: Cache, loss_grad: np.ndarray, *, wrt_logits: bool = True):
        """Backpropagate ``loss_grad`` and return gradients of trainable parameters.

        When the output node is a Softmax and ``wrt_logits`` is set,
        ``loss_grad`` is taken as the gradient w.r.t. the softmax *input*
        (fused softmax + cross-entropy), and the softmax Jacobian is skipped.
        """
        if cache.graph_token != id(self) or cache.mode is not Mode.TRAIN \
                or self.output_id not in cache.outputs:
            raise GraphError("backward needs a Train-mode cache produced by this graph")
        need = self._needs_grad()
        grads_out: dict[str, np.ndarray] = {}
        out_node = self.nodes[-1]
        if wrt_logits and out_node.layer.kind == "Softmax":
            grads_out[out_node.inputs[0]] = loss_grad
            tail = self.nodes[:-1]
        else:
            grads_out[out_node.id] = loss_grad
            tail = self.nodes
        result: dict[str, np.ndarray] = {}
        for n in reversed(tail[1:]):
            dout = grads_out.pop(n.id, None)
            if dout is None or not need[n.id]:
                continue
            need_dx = [need[s] for s in n.inputs]
            dxs, pgrads = n.layer.backward(dout, cache.layer_caches[n.id], need_dx)
            for slot in n.layer.trainable_slots():
                result[f"{n.id}.{slot}"] = pgrads[slot]
            for src, dx, nd in zip(n.inputs, dxs, need_dx):
                if not nd or dx is None:
                    continue
                if src in grads_out:
                    grads_out[src] = grads_out[src] + dx
                else:
                    grads_out[src] = dx
        allp = self.named_params()
        return {k: result[k] if k in result else np.zeros_like(allp[k])
                for k in self.trainable_names()}

    def summary(self) -> str:
        lines = []
        for n in self.nodes:
            count = sum(a.size for a in n.layer.params.values())
            flag = "" if n.layer.trainable or not n.layer.params else " (frozen)"
            lines.append(f"{n.id:40s} {n.layer!r:50s} {str(n.shape):18s} {count}{flag}")
        return "\n".join(lines)
