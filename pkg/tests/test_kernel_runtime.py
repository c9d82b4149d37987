"""Graph bookkeeping, optimizers and checkpoints."""
from __future__ import annotations

import io

import numpy as np
import pytest

from flowpix.nn import GraphError, Parameter, Tensor, backward, no_grad, ops
from flowpix.nn.checkpoint import CheckpointError, load_into, read_checkpoint, save, write_checkpoint
from flowpix.nn.optim import SGD, Adam, NonFiniteGradient, make_optimizer


def test_backward_without_graph_raises():
    with pytest.raises(GraphError):
        Tensor(np.ones(3), requires_grad=True).backward()


def test_backward_on_non_scalar_needs_seed():
    a = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(GraphError):
        ops.relu(a).backward()


def test_no_grad_records_nothing():
    a = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        out = ops.sum_all(a * a)
    with pytest.raises(GraphError):
        out.backward()


def test_unused_parameter_gets_zero_gradient_and_buffers_are_untouched():
    used, unused = Parameter(np.ones(2), "used"), Parameter(np.ones(2), "unused")
    buf = Parameter(np.ones(2), "buffer", trainable=False)
    backward(ops.sum_all(used * used), [used, unused, buf])
    assert np.array_equal(used.grad, [2, 2])
    assert np.array_equal(unused.grad, [0, 0])
    assert buf.grad is None


def test_backward_resets_previous_gradients():
    p = Parameter(np.array([3.0]), "p")
    for _ in range(2):
        backward(ops.sum_all(p * p), [p])
    assert p.grad[0] == 6.0


def test_shared_input_gradient_accumulates():
    a = Tensor(np.array([2.0]), requires_grad=True)
    ops.sum_all(a * a + a).backward()
    assert a.grad[0] == 5.0


def test_adam_first_step_closed_form():
    rng = np.random.default_rng(0)
    p = Parameter(rng.standard_normal(5), "p")
    start = p.data.copy()
    g = rng.standard_normal(5)
    p.grad = g.copy()
    opt = Adam([p], lr=1e-3)
    opt.step()
    # bias-corrected moments after one step are g and g**2
    np.testing.assert_allclose(p.data, start - 1e-3 * g / (np.abs(g) + 1e-8), rtol=0, atol=1e-15)


def test_adam_second_step_closed_form():
    p = Parameter(np.zeros(1), "p")
    opt = Adam([p], lr=0.1)
    for g in (1.0, -2.0):
        p.grad = np.array([g])
        opt.step()
    m = 0.1 * 0.9 * 1.0 + 0.1 * -2.0
    v = 0.001 * 0.999 * 1.0 + 0.001 * 4.0
    second = 0.1 * (m / (1 - 0.81)) / (np.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)
    expected = -0.1 * 1.0 / (1.0 + 1e-8) - second
    np.testing.assert_allclose(p.data, [expected], atol=1e-14)


@pytest.mark.parametrize("name", ["adam", "sgd"])
def test_zero_learning_rate_leaves_parameters_unchanged(name):
    p = Parameter(np.arange(4.0), "p")
    opt = make_optimizer(name, [p], 0.0)
    for _ in range(5):
        p.grad = np.ones(4)
        opt.step()
    assert np.array_equal(p.data, np.arange(4.0))


def test_optimizer_skips_non_trainable():
    buf = Parameter(np.ones(2), "buf", trainable=False)
    buf.grad = np.ones(2)
    Adam([buf], lr=1.0).step()
    SGD([buf], lr=1.0).step()
    assert np.array_equal(buf.data, [1, 1])


def test_non_finite_gradient_names_parameter():
    p = Parameter(np.ones(2), "stem.kernel")
    p.grad = np.array([1.0, np.nan])
    with pytest.raises(NonFiniteGradient, match="stem.kernel"):
        Adam([p]).step()


def test_unknown_optimizer():
    with pytest.raises(ValueError):
        make_optimizer("rmsprop", [], 0.1)


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    params = [Parameter(rng.standard_normal((2, 3)).astype(np.float32), "a"),
              Parameter(np.array(1.5, dtype=np.float32), "scalar"),
              Parameter(rng.standard_normal(4).astype(np.float32), "buf", trainable=False)]
    path = tmp_path / "m.ckpt"
    save(path, params)
    fresh = [Parameter(np.zeros_like(p.data), p.name, p.trainable) for p in params]
    load_into(path, fresh)
    for a, b in zip(params, fresh):
        assert np.array_equal(a.data, b.data)


def test_checkpoint_rejects_bad_magic_and_truncation():
    with pytest.raises(CheckpointError):
        read_checkpoint(io.BytesIO(b"NOPE" + bytes(6)))
    buf = io.BytesIO()
    write_checkpoint(buf, [Parameter(np.ones(4, np.float32), "a")])
    with pytest.raises(CheckpointError):
        read_checkpoint(io.BytesIO(buf.getvalue()[:-3]))


def test_checkpoint_rejects_shape_and_name_mismatch(tmp_path):
    path = tmp_path / "m.ckpt"
    save(path, [Parameter(np.ones((2, 2), np.float32), "a")])
    with pytest.raises(CheckpointError, match="shape"):
        load_into(path, [Parameter(np.ones(3), "a")])
    with pytest.raises(CheckpointError, match="missing"):
        load_into(path, [Parameter(np.ones((2, 2)), "b")])


def test_adam_zero_gradient_leaves_parameters_unchanged():
    p = Parameter(np.arange(3.0), "p")
    opt = Adam([p], lr=0.1)
    for _ in range(3):
        p.grad = np.zeros(3)
        opt.step()
    assert np.array_equal(p.data, np.arange(3.0))


@pytest.mark.parametrize("g", [1e-6, 0.3, -250.0])
def test_adam_constant_gradient_step_tends_to_lr(g):
    p = Parameter(np.zeros(1), "p")
    opt = Adam([p], lr=1e-3)
    previous = 0.0
    for _ in range(5000):
        p.grad = np.array([g])
        opt.step()
        step, previous = previous - p.data[0], p.data[0]
    # moments converge to g and g**2, so the step converges to lr * g / (|g| + eps)
    assert step == pytest.approx(1e-3 * g / (abs(g) + 1e-8), rel=1e-3)


def test_repeated_backward_is_bitwise_identical():
    from flowpix.models import ModelConfig, build_model

    grads = []
    for _ in range(2):
        model = build_model(ModelConfig("xception", base_channels=2, blocks=1, window=2, seed=5))
        images = np.random.default_rng(1).uniform(0, 1, (2, 71, 71, 3))
        logits, _ = model.run_lstm(model.features(images), np.array([[0, 1]]))
        backward(ops.sum_all(logits * logits), model.params())
        grads.append([p.grad.copy() for p in model.params() if p.trainable])
    assert all(np.array_equal(a, b) for a, b in zip(*grads))
