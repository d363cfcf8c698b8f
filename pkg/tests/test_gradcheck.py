import numpy as np
import pytest

from helpers import problem, smooth_batch
from palmgrade.errors import ConfigError
from palmgrade.gradcheck import PARAM_BUDGET, gradient_check, relative_error
from palmgrade.layers import Conv2D, Dense, Flatten, LayerGraph, ReLU, Softmax
from palmgrade.models import ArchitectureConfig, build


def two_conv_graph(seed=0):
    g = LayerGraph((6, 6, 2), seed)
    g.add("c1", Conv2D(3, 3))
    g.add("r1", ReLU())
    g.add("c2", Conv2D(2, 3, 2))
    g.add("flat", Flatten())
    g.add("logits", Dense(3))
    g.add("probs", Softmax())
    return g


def square_dense_graph(seed=0):
    g = LayerGraph((4,), seed)
    g.add("sq", Dense(4))
    g.add("logits", Dense(3))
    g.add("probs", Softmax())
    return g


@pytest.mark.parametrize("seed", range(4))
def test_two_conv_toy_graph(seed):
    g = two_conv_graph(seed)
    x, y = problem(g, seed, n=4)
    report = gradient_check(g, x, y, 1e-3)
    assert report.passed, report.format()
    assert set(report.max_rel_error) == set(g.trainable_names())


def test_baseline_mini_8x8_passes():
    g = build("baseline", ArchitectureConfig("mini", input_shape=(8, 8, 3)))
    x, y = problem(g, 0, n=4)
    report = gradient_check(g, x, y, 1e-3)
    assert report.passed, report.format()


def test_budget_rejected():
    g = LayerGraph((PARAM_BUDGET,))
    g.add("d", Dense(1))
    with pytest.raises(ConfigError, match="budget"):
        gradient_check(g, np.zeros((1, PARAM_BUDGET)), np.ones((1, 1)))


def test_unknown_only_rejected():
    g = square_dense_graph()
    x, y = problem(g, 0)
    with pytest.raises(ConfigError):
        gradient_check(g, x, y, only=["nope.kernel"])


def test_constant_loss_zero_gradients():
    g = LayerGraph((3, 3, 2), 0)
    g.add("c", Conv2D(2, 3))
    g.add("flat", Flatten())
    g.add("d", Dense(2))
    x = smooth_batch(np.random.default_rng(0), 2, 3, 3, 2)
    report = gradient_check(g, x, np.zeros((2, 2)), 1e-3)
    assert report.passed and report.worst == 0.0


@pytest.mark.parametrize("mutation", [
    lambda k: k.T,                     # transposed kernel gradient
    lambda k: np.roll(k, 1, axis=0),   # off-by-one row shift
])
def test_corrupted_dense_backward_detected(monkeypatch, mutation):
    g = square_dense_graph(3)
    x, y = problem(g, 3, n=4)
    assert gradient_check(g, x, y, 1e-3).passed
    original = Dense.backward

    def corrupted(self, dout, x, need_dx):
        dx, grads = original(self, dout, x, need_dx)
        grads["kernel"] = mutation(grads["kernel"])
        return dx, grads

    monkeypatch.setattr(Dense, "backward", corrupted)
    report = gradient_check(g, x, y, 1e-3)
    assert not report.passed
    assert report.max_rel_error["sq.kernel"] > 1e-3


def test_error_shrinks_quadratically_with_step():
    # central differences: truncation error ~ h^2, so a decade of h buys ~100x
    g = build("resnet", ArchitectureConfig("mini", input_shape=(16, 16, 3),
                                           zero_init_residual=False))
    x, y = problem(g, 1, n=8)
    coarse = gradient_check(g, x, y, 1e-3, only=["backbone.stem.conv.kernel"]).worst
    fine = gradient_check(g, x, y, 1e-3, step=1e-4, only=["backbone.stem.conv.kernel"]).worst
    assert fine <= coarse / 30 or fine < 1e-7


def test_relative_error_floor():
    assert relative_error(0.0, 1e-9) == pytest.approx(1e-3)
    assert relative_error(2.0, 1.0) == pytest.approx(0.5)


@pytest.mark.parametrize("arch", ["resnet", "inception"])
def test_mini_presets_match_refined_differences(arch):
    # at the default step these presets exceed 1e-3 through O(h^2) truncation
    # error alone; with a smaller step the same comparison is tight
    g = build(arch, ArchitectureConfig("mini"))
    x, y = problem(g, 0, n=4)
    report = gradient_check(g, x, y, 1e-3, step=1e-5)
    assert report.passed, report.format()
