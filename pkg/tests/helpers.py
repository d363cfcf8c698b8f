"""Shared builders for the gradient-fidelity tests."""
import numpy as np

from palmgrade.layers import (BatchNorm, ChannelConcat, Conv2D, Dense, Dropout, Flatten,
                              GlobalAvgPool, LayerGraph, MaxPool2D, ReLU, ResidualAdd, Softmax)
from palmgrade.train import one_hot


def smooth_batch(rng, n, h, w, c=3):
    """Colour patches with gentle gradients plus pixel noise, in roughly [0, 1]."""
    base = rng.random((n, 1, 1, c))
    yy, xx = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")
    d = rng.normal(size=(n, 1, 1, 2, c))
    x = base + 0.5 * (yy[None, :, :, None] * d[..., 0, :] + xx[None, :, :, None] * d[..., 1, :])
    return x + 0.1 * rng.normal(size=(n, h, w, c))


def _head(g, k=3):
    if len(g.output_shape) == 3:
        g.add("gap", GlobalAvgPool())
    g.add("logits", Dense(k))
    g.add("softmax", Softmax())
    return g


def graph_conv(seed):
    g = LayerGraph((6, 6, 2), seed)
    g.add("c1", Conv2D(3, 3, 1, "same"))
    g.add("c2", Conv2D(2, 3, 2, "valid"))
    g.add("flat", Flatten())
    return _head(g)


def graph_dense(seed):
    g = LayerGraph((3, 3, 2), seed)
    g.add("flat", Flatten())
    g.add("d1", Dense(5))
    return _head(g)


def graph_relu(seed):
    g = LayerGraph((5, 5, 2), seed)
    g.add("c1", Conv2D(4, 3))
    g.add("relu", ReLU())
    return _head(g)


def graph_maxpool(seed):
    g = LayerGraph((6, 6, 2), seed)
    g.add("c1", Conv2D(3, 3))
    g.add("pool", MaxPool2D(3, 2, padding=1))
    g.add("pool2", MaxPool2D(2))
    g.add("flat", Flatten())
    return _head(g)


def graph_gap(seed):
    g = LayerGraph((4, 4, 2), seed)
    g.add("c1", Conv2D(3, 1))
    return _head(g)


def graph_flatten(seed):
    g = LayerGraph((3, 4, 2), seed)
    g.add("c1", Conv2D(2, 2, 1, "valid"))
    g.add("flat", Flatten())
    return _head(g)


def graph_dropout(seed):
    g = LayerGraph((4, 4, 2), seed)
    g.add("c1", Conv2D(3, 3))
    g.add("drop", Dropout(0.4))
    g.add("flat", Flatten())
    g.add("d1", Dense(4))
    g.add("drop2", Dropout(0.5))
    return _head(g)


def graph_batchnorm(seed):
    g = LayerGraph((4, 4, 2), seed)
    g.add("c1", Conv2D(3, 3, use_bias=False))
    g.add("bn", BatchNorm())
    g.add("flat", Flatten())
    g.add("d1", Dense(4))
    g.add("bn2", BatchNorm())
    return _head(g)


def graph_residual(seed):
    g = LayerGraph((4, 4, 3), seed)
    g.add("c1", Conv2D(3, 3))
    g.add("c2", Conv2D(3, 1), "c1")
    g.add("add", ResidualAdd(), ("c1", "c2"))
    return _head(g)


def graph_concat(seed):
    g = LayerGraph((4, 4, 2), seed)
    g.add("a", Conv2D(2, 1), "input")
    g.add("b", Conv2D(3, 3), "input")
    g.add("p", MaxPool2D(3, 1, padding=1), "input")
    g.add("cat", ChannelConcat(), ("a", "b", "p"))
    g.add("c", Conv2D(2, 1))
    return _head(g)


def graph_softmax(seed):
    # softmax in the middle so its own Jacobian (not the fused CE shortcut) is exercised
    g = LayerGraph((3, 3, 1), seed)
    g.add("flat", Flatten())
    g.add("d1", Dense(4))
    g.add("sm", Softmax())
    g.add("d2", Dense(3))
    return g


LAYER_GRAPHS = {
    "Conv2D": graph_conv, "Dense": graph_dense, "ReLU": graph_relu, "MaxPool2D": graph_maxpool,
    "GlobalAvgPool": graph_gap, "Flatten": graph_flatten, "Dropout": graph_dropout,
    "BatchNorm": graph_batchnorm, "ResidualAdd": graph_residual, "ChannelConcat": graph_concat,
    "Softmax": graph_softmax,
}


def problem(graph, seed, n=4):
    rng = np.random.default_rng(seed)
    if len(graph.input_shape) == 3:
        x = smooth_batch(rng, n, *graph.input_shape)
    else:
        x = rng.normal(size=(n, *graph.input_shape))
    k = graph.output_shape[0]
    if graph.nodes[-1].layer.kind == "Softmax":
        y = one_hot(rng.integers(0, k, n), k)
    else:
        y = rng.normal(size=(n, k))
    return x, y


# criterion number -> one summary line, filled by test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def record(number: int, title: str, verdict: str, detail: str) -> str:
    line = f"criterion {number} {verdict:4s} {title}: {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return line
