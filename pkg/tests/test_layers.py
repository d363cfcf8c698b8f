import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import LAYER_GRAPHS, problem, smooth_batch
from palmgrade.errors import GraphError, ShapeError
from palmgrade.gradcheck import gradient_check
from palmgrade.layers import (BatchNorm, Conv2D, Dense, Dropout, Flatten, LayerGraph, Mode, ReLU,
                              ResidualAdd, Softmax)
from palmgrade.tensor import make_rng
from palmgrade.train import AdamState, adam_step, cross_entropy, one_hot


@pytest.mark.parametrize("kind", sorted(LAYER_GRAPHS))
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_layer_kind_gradients(kind, seed):
    g = LAYER_GRAPHS[kind](seed)
    assert kind in g.kinds()
    x, y = problem(g, seed, n=5)
    report = gradient_check(g, x, y, 1e-3)
    assert report.passed, report.format()


@pytest.mark.parametrize("kind", ["ReLU", "MaxPool2D", "Dropout"])
def test_layer_kind_gradients_live_switches(kind):
    g = LAYER_GRAPHS[kind](7)
    x, y = problem(g, 7, n=5)
    report = gradient_check(g, x, y, 1e-3, freeze_switches=False)
    assert report.passed, report.format()


@pytest.mark.parametrize("kind", sorted(LAYER_GRAPHS))
def test_layer_kind_seed_sweep_default_step(kind):
    failures = {}
    for seed in range(20):
        g = LAYER_GRAPHS[kind](seed)
        x, y = problem(g, seed, n=5)
        report = gradient_check(g, x, y, 1e-3)
        if not report.passed:
            failures[seed] = report.worst
    assert not failures, f"seeds over 1e-3 at the default step: {failures}"


# Random draws occasionally hit entries whose O(h^2) truncation error at the
# default step exceeds the tolerance (small gradient, high curvature), so the
# property uses a refined step where truncation is negligible.
@given(st.integers(0, 10_000), st.sampled_from(sorted(LAYER_GRAPHS)))
def test_randomized_small_graph_gradients_refined_step(seed, kind):
    g = LAYER_GRAPHS[kind](seed)
    x, y = problem(g, seed, n=3)
    report = gradient_check(g, x, y, 1e-3, step=1e-5)
    assert report.passed, report.format()


def test_dense_gradient_equals_input():
    g = LayerGraph((1,), 0)
    g.add("d", Dense(1))
    g.nodes[-1].layer.params["kernel"][...] = 0.7
    x = np.array([[2.5]], dtype=np.float32)
    _, cache = g.forward(x, Mode.TRAIN)
    grads = g.backward(cache, np.ones((1, 1), dtype=np.float32), wrt_logits=False)
    assert grads["d.kernel"][0, 0] == pytest.approx(2.5)
    assert grads["d.bias"][0] == pytest.approx(1.0)


def test_constant_loss_gives_zero_gradients(rng):
    g = LAYER_GRAPHS["Conv2D"](0)
    x, _ = problem(g, 0)
    _, cache = g.forward(x.astype(np.float32), Mode.TRAIN)
    grads = g.backward(cache, np.zeros((len(x), 3), dtype=np.float32))
    assert all(not v.any() for v in grads.values())


def test_frozen_parameters_absent_from_gradients():
    g = LAYER_GRAPHS["Dense"](0)
    g.freeze(lambda i: i == "d1")
    x, y = problem(g, 0)
    _, cache = g.forward(x.astype(np.float32), Mode.TRAIN)
    grads = g.backward(cache, y.astype(np.float32))
    assert set(grads) == {"logits.kernel", "logits.bias"}


def test_backward_rejects_foreign_or_eval_cache():
    g1, g2 = LAYER_GRAPHS["Dense"](0), LAYER_GRAPHS["Dense"](0)
    x, y = problem(g1, 0)
    x = x.astype(np.float32)
    _, c1 = g1.forward(x, Mode.TRAIN)
    with pytest.raises(GraphError):
        g2.backward(c1, y)
    _, ce = g1.forward(x, Mode.EVAL)
    with pytest.raises(GraphError):
        g1.backward(ce, y)


def test_dropout_mask_and_scaling():
    layer = Dropout(0.5)
    x = np.ones((1000, 1000), dtype=np.float32)
    out, mask = layer.forward([x], True, make_rng(3))
    assert set(np.unique(out).tolist()) == {0.0, 2.0}
    assert np.array_equal(out, x * mask)
    zero_frac = float((out == 0).mean())
    assert abs(zero_frac - 0.5) <= 0.01
    same, _ = layer.forward([x], False, None)
    assert same is x


def test_dropout_rejects_bad_rate():
    with pytest.raises(Exception):
        Dropout(1.0)


def test_batchnorm_eval_unit_stats_scales_by_epsilon(rng):
    bn = BatchNorm()
    bn.build([(4, 4, 3)], rng)
    x = rng.normal(size=(2, 4, 4, 3)).astype(np.float32)
    out, _ = bn.forward([x], False, None)
    assert np.allclose(out, x / np.sqrt(1 + bn.epsilon), rtol=1e-6, atol=0)


def test_batchnorm_eval_identity_with_unit_stats(rng):
    bn = BatchNorm(epsilon=1e-12)
    bn.build([(4, 4, 3)], rng)
    x = rng.normal(size=(2, 4, 4, 3)).astype(np.float32)
    out, _ = bn.forward([x], False, None)
    assert np.max(np.abs(out - x)) <= 1e-6


def test_batchnorm_eval_uses_running_stats_only(rng):
    bn = BatchNorm()
    bn.build([(3,)], rng)
    bn.params["moving_mean"][...] = [1, 2, 3]
    bn.params["moving_variance"][...] = [4, 4, 4]
    x = rng.normal(size=(5, 3)).astype(np.float32)
    a, _ = bn.forward([x], False, None)
    b, _ = bn.forward([x[:2]], False, None)
    assert np.array_equal(a[:2], b)
    assert np.allclose(a, (x - [1, 2, 3]) / np.sqrt(4 + bn.epsilon), atol=1e-6)


def test_batchnorm_train_normalises_and_tracks(rng):
    bn = BatchNorm(momentum=0.9)
    bn.build([(2, 2, 2)], rng)
    x = (3 + 2 * rng.normal(size=(64, 2, 2, 2))).astype(np.float32)
    out, _ = bn.forward([x], True, None)
    assert np.allclose(out.mean(axis=(0, 1, 2)), 0, atol=1e-5)
    assert np.allclose(out.var(axis=(0, 1, 2)), x.var(axis=(0, 1, 2)) /
                       (x.var(axis=(0, 1, 2)) + bn.epsilon), atol=1e-4)
    assert np.allclose(bn.params["moving_mean"], 0.1 * x.mean(axis=(0, 1, 2)), atol=1e-5)


def test_frozen_batchnorm_uses_running_stats_in_train(rng):
    bn = BatchNorm(trainable=False)
    bn.build([(3,)], rng)
    x = rng.normal(size=(8, 3)).astype(np.float32)
    before = bn.params["moving_mean"].copy()
    train_out, _ = bn.forward([x], True, None)
    eval_out, _ = bn.forward([x], False, None)
    assert np.array_equal(train_out, eval_out)
    assert np.array_equal(bn.params["moving_mean"], before)


def test_relu_emits_no_negative_zero():
    out, _ = ReLU().forward([np.array([-0.0, -1.0, 2.0])], True, None)
    assert not np.signbit(out).any()


def test_residual_add_zero_branch_bitwise(rng):
    x = rng.normal(size=(2, 3, 3, 4)).astype(np.float32)
    out, _ = ResidualAdd().forward([x, np.zeros_like(x)], True, None)
    assert out.tobytes() == x.tobytes()


def test_graph_shape_checked_at_build():
    g = LayerGraph((4, 4, 3))
    with pytest.raises(ShapeError, match="dense"):
        g.add("dense", Dense(3))
    with pytest.raises(ShapeError):
        g.add("c", Conv2D(2, 7, padding="valid"))


def test_graph_rejects_duplicate_and_unknown_ids():
    g = LayerGraph((4,))
    g.add("d", Dense(2))
    with pytest.raises(GraphError):
        g.add("d", Dense(2))
    with pytest.raises(GraphError):
        g.add("e", Dense(2), "nope")
    with pytest.raises(GraphError):
        g.freeze(["nope"])


def test_graph_validate_single_sink():
    g = LayerGraph((4,))
    g.add("a", Dense(2), "input")
    g.add("b", Dense(2), "input")
    with pytest.raises(GraphError):
        g.validate()


def test_freeze_contracts():
    g = LAYER_GRAPHS["Conv2D"](0)
    before = {k: v.copy() for k, v in g.named_params().items()}
    g.freeze().unfreeze(lambda _i: False)
    assert g.trainable_names() == []
    assert all(np.array_equal(before[k], v) for k, v in g.named_params().items())
    once = [n.layer.trainable for n in g.freeze(["c1"]).nodes]
    twice = [n.layer.trainable for n in g.freeze(["c1"]).nodes]
    assert once == twice


def test_frozen_parameters_survive_adam(rng):
    g = LAYER_GRAPHS["BatchNorm"](0).freeze(lambda i: i in ("c1", "bn"))
    frozen = {k: v.tobytes() for k, v in g.named_params().items() if k.split(".")[0] in ("c1", "bn")}
    state = AdamState()
    x, y = problem(g, 0, n=8)
    x, y = x.astype(np.float32), y.astype(np.float32)
    for _ in range(20):
        p, c = g.forward(x, Mode.TRAIN, make_rng(0))
        adam_step(g.named_params(), g.backward(c, cross_entropy(p, y)[1]), state, 1e-2)
    now = g.named_params()
    assert all(now[k].tobytes() == v for k, v in frozen.items())


def test_eval_forward_deterministic(rng):
    g = LAYER_GRAPHS["Dropout"](0)
    x = smooth_batch(rng, 3, 4, 4, 2).astype(np.float32)
    assert g.predict(x).tobytes() == g.predict(x).tobytes()


def test_astype_copies_parameters():
    g = LAYER_GRAPHS["Dense"](0)
    g64 = g.astype(np.float64)
    g64.named_params()["d1.kernel"][...] = 0
    assert g.named_params()["d1.kernel"].any()
    assert g64.named_params()["d1.kernel"].dtype == np.float64


def test_summary_lists_every_node():
    g = LAYER_GRAPHS["ChannelConcat"](0)
    assert len(g.summary().splitlines()) == len(g)


def test_softmax_backward_matches_jacobian(rng):
    probs = Softmax().forward([rng.normal(size=(2, 4))], True, None)[0]
    dout = rng.normal(size=(2, 4))
    dx = Softmax().backward(dout, probs, [True])[0][0]
    for i in range(2):
        p = probs[i]
        jac = np.diag(p) - np.outer(p, p)
        assert np.allclose(dx[i], jac @ dout[i])


def test_cross_entropy_fused_gradient(rng):
    y = one_hot([0, 2, 1], 3, np.float64)
    z = rng.normal(size=(3, 3))
    p = np.exp(z) / np.exp(z).sum(1, keepdims=True)
    loss, grad = cross_entropy(p, y)
    assert loss == pytest.approx(-np.log(p[[0, 1, 2], [0, 2, 1]]).mean())
    assert np.allclose(grad, (p - y) / 3)


def test_flatten_roundtrip(rng):
    x = rng.normal(size=(2, 3, 4, 5))
    out, shape = Flatten().forward([x], True, None)
    assert out.shape == (2, 60)
    assert np.array_equal(Flatten().backward(out, shape, [True])[0][0], x)
