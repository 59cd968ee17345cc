#!/usr/bin/env python3
"""
Tests für Autograd, MLP, Verlustfunktionen, SGD und Checkpoints.
Gradienten werden gegen zentrale finite Differenzen geprüft.
"""

import json
import math
import os
import sys
import tempfile

import numpy as np
import pytest

# Add the project root to Python path
sys.path.insert(0, os.path.dirname(__file__))

from unlearnlab import autograd as ag
from unlearnlab.autograd import Tape
from unlearnlab.errors import (
    ConfigInvalid,
    CorruptPayload,
    LabelOutOfRange,
    NonScalarLoss,
    NotNormalized,
    SchemaVersionMismatch,
    ShapeMismatch,
    SupportViolation,
)
from unlearnlab.models.mlp import MlpModel, init_mlp, load_checkpoint, save_checkpoint
from unlearnlab.nnet import (
    SgdConfig,
    TrainConfig,
    cross_entropy,
    fit,
    forward,
    forward_taped,
    kl_divergence,
    loss_and_gradients,
    param_leaves,
    predict,
    sgd_step,
)
from unlearnlab.unlearn import da_loss, retain_projector, sd_target

FD_STEP = 1e-5
FD_RTOL = 1e-4


def _model():
    return init_mlp([8, 16, 8, 4], seed=3)


def _batch(n=6, seed=4):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, 8)), rng.integers(0, 4, size=n)


def _loss_value(params, build_loss):
    tape = Tape()
    leaves = [tape.leaf(p) for p in params]
    return build_loss(tape, leaves).item()


def _assert_matches_finite_differences(model, build_loss):
    _, grads = loss_and_gradients(model, build_loss)
    base = model.parameters()
    for i, p in enumerate(base):
        numeric = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            plus = [q.copy() for q in base]
            minus = [q.copy() for q in base]
            plus[i][idx] += FD_STEP
            minus[i][idx] -= FD_STEP
            numeric[idx] = (_loss_value(plus, build_loss) - _loss_value(minus, build_loss)) / (2 * FD_STEP)
        error = np.abs(grads[i] - numeric)
        bound = FD_RTOL * np.maximum(np.abs(grads[i]), np.abs(numeric)) + 1e-8
        assert np.all(error <= bound), f"parameter {i}: max error {error.max():.3e}"


# --- forward ---------------------------------------------------------------

def test_forward_straight_line():
    model = _model()
    x, _ = _batch()
    h = x
    for i in range(model.num_layers):
        h = h @ model.weights[i] + model.biases[i]
        if i < model.num_layers - 1:
            h = np.tanh(h)
            if i + 1 == model.feature_layer_index:
                features = h
    out = forward(model, x)
    assert np.allclose(out.logits, h, atol=1e-10)
    assert np.allclose(out.features, features, atol=1e-10)
    assert out.features.shape == (x.shape[0], 8)
    assert np.allclose(out.probs.sum(axis=1), 1.0, atol=1e-9)


def test_forward_zero_weights_uniform():
    model = _model()
    model.set_parameters([np.zeros_like(p) for p in model.parameters()])
    probs = forward(model, np.ones((3, 8))).probs
    assert np.allclose(probs, 0.25)
    assert np.allclose(forward(model, np.ones((1, 8))).probs.sum(), 1.0, atol=1e-9)
    with pytest.raises(ShapeMismatch):
        forward(model, np.ones((2, 7)))


def test_predict_ties_lowest_index():
    model = _model()
    model.set_parameters([np.zeros_like(p) for p in model.parameters()])
    assert np.all(predict(model, np.ones((4, 8))) == 0)


# --- losses ----------------------------------------------------------------

def test_cross_entropy_cases():
    tape = Tape()
    uniform = tape.constant(np.zeros((3, 10)))
    assert math.isclose(cross_entropy(uniform, np.array([0, 4, 9])).item(), math.log(10), rel_tol=1e-12)

    logits = np.full((2, 3), -500.0)
    logits[0, 1] = 500.0
    logits[1, 2] = 500.0
    assert cross_entropy(tape.constant(logits), np.array([1, 2])).item() < 1e-12

    rng = np.random.default_rng(0)
    z = rng.normal(size=(5, 4))
    y = rng.integers(0, 4, size=5)
    expected = np.mean([-(z[i, y[i]] - math.log(np.sum(np.exp(z[i])))) for i in range(5)])
    assert math.isclose(cross_entropy(tape.constant(z), y).item(), expected, rel_tol=1e-12)

    with pytest.raises(LabelOutOfRange):
        cross_entropy(tape.constant(z), np.array([0, 1, 2, 3, 4]))


def test_kl_divergence_cases():
    tape = Tape()
    p = tape.constant(np.array([[0.2, 0.8]]))
    assert abs(kl_divergence(p, np.array([[0.2, 0.8]])).item()) < 1e-15

    one_hot = tape.constant(np.array([[1.0, 0.0]]))
    assert math.isclose(kl_divergence(one_hot, np.array([[0.5, 0.5]])).item(), math.log(2), rel_tol=1e-12)

    rng = np.random.default_rng(1)
    a = rng.random((4, 5)) + 0.1
    b = rng.random((4, 5)) + 0.1
    a /= a.sum(axis=1, keepdims=True)
    b /= b.sum(axis=1, keepdims=True)
    expected = np.mean([sum(a[i, c] * math.log(a[i, c] / b[i, c]) for c in range(5)) for i in range(4)])
    assert abs(kl_divergence(tape.constant(a), b).item() - expected) < 1e-10

    with pytest.raises(SupportViolation):
        kl_divergence(tape.constant(np.array([[0.5, 0.5]])), np.array([[0.0, 1.0]]))
    floored = kl_divergence(tape.constant(np.array([[0.5, 0.5]])), np.array([[0.0, 1.0]]), floor=1e-12)
    assert np.isfinite(floored.item())
    with pytest.raises(NotNormalized):
        kl_divergence(tape.constant(np.array([[0.5, 0.6]])), np.array([[0.5, 0.5]]))


# --- gradients -------------------------------------------------------------

def test_gradient_cross_entropy():
    model = _model()
    x, y = _batch()
    fli = model.feature_layer_index
    _assert_matches_finite_differences(
        model, lambda tape, params: cross_entropy(forward_taped(tape, params, x, fli).logits, y))


def test_gradient_kl():
    model = _model()
    x, _ = _batch()
    fli = model.feature_layer_index
    target = np.random.default_rng(8).random((x.shape[0], 4)) + 0.05
    target /= target.sum(axis=1, keepdims=True)
    _assert_matches_finite_differences(
        model, lambda tape, params: kl_divergence(ag.softmax(forward_taped(tape, params, x, fli).logits), target))


def test_gradient_da_loss():
    model = _model()
    x, _ = _batch()
    retain_x, _ = _batch(n=10, seed=9)
    projector = retain_projector(model, retain_x)
    fli = model.feature_layer_index
    _assert_matches_finite_differences(
        model, lambda tape, params: da_loss(tape, params, fli, x, projector=projector))


def test_gradient_sd_loss_detached_target():
    model = _model()
    x, _ = _batch()
    fli = model.feature_layer_index
    target = sd_target(forward(model, x).probs, 2)

    def build(tape, params):
        probs = ag.softmax(forward_taped(tape, params, x, fli).logits)
        return kl_divergence(probs, target, floor=1e-12)

    _assert_matches_finite_differences(model, build)


def test_gradient_combined_forget_loss():
    model = _model()
    x, _ = _batch()
    retain_x, _ = _batch(n=10, seed=9)
    projector = retain_projector(model, retain_x)
    fli = model.feature_layer_index
    target = sd_target(forward(model, x).probs, 1)

    def build(tape, params):
        l_da = da_loss(tape, params, fli, x, projector=projector)
        probs = ag.softmax(forward_taped(tape, params, x, fli).logits)
        return 0.1 * l_da + 0.01 * kl_divergence(probs, target, floor=1e-12)

    _assert_matches_finite_differences(model, build)


def test_stop_gradient():
    tape = Tape()
    x = tape.leaf(3.0)
    loss = ag.stop_gradient(x) * x
    assert tape.gradient(loss, [x])[0] == pytest.approx(3.0)

    tape = Tape()
    x = tape.leaf(np.array([1.0, 2.0]))
    blocked = ag.stop_gradient(ag.sum_(x * x))
    assert blocked.item() == 5.0
    assert np.all(tape.gradient(blocked, [x])[0] == 0.0)


def test_constant_loss_zero_gradients():
    model = _model()
    _, grads = loss_and_gradients(model, lambda tape, params: tape.constant(2.5))
    assert all(np.all(g == 0.0) for g in grads)


def test_da_loss_retain_branch_gets_no_gradient():
    model = _model()
    x, _ = _batch()
    retain_x, _ = _batch(n=10, seed=9)
    tape = Tape()
    params = param_leaves(tape, model)
    retain_params = param_leaves(tape, model)
    loss = da_loss(tape, params, model.feature_layer_index, x, retain_x=retain_x, retain_params=retain_params)
    grads = tape.gradient(loss, list(params) + list(retain_params))
    assert any(np.any(g != 0.0) for g in grads[:len(params)])
    assert all(np.all(g == 0.0) for g in grads[len(params):])


def test_non_scalar_loss():
    tape = Tape()
    x = tape.leaf(np.ones(3))
    with pytest.raises(NonScalarLoss):
        tape.backward(x * 2.0)


def test_tape_replay():
    model = _model()
    x, y = _batch()
    tape = Tape()
    params = param_leaves(tape, model)
    cross_entropy(forward_taped(tape, params, x, model.feature_layer_index).logits, y)
    assert tape.replay_matches()


# --- sgd -------------------------------------------------------------------

def test_sgd_step_rules():
    model = init_mlp([1, 1, 1], seed=0)
    before = [p.copy() for p in model.parameters()]
    sgd_step(model, [np.zeros_like(p) for p in before], SgdConfig(learning_rate=0.1), 0)
    assert all(np.array_equal(a, b) for a, b in zip(before, model.parameters()))

    ones = [np.ones_like(p) for p in before]
    sgd_step(model, ones, SgdConfig(learning_rate=0.1), 0)
    assert all(np.allclose(b - a, 0.1) for a, b in zip(model.parameters(), before))

    model = init_mlp([1, 1, 1], seed=0)
    cfg = SgdConfig(learning_rate=0.1, lr_decay=0.5)
    p0 = model.parameters()[0].copy()
    sgd_step(model, ones, cfg, 0)
    p1 = model.parameters()[0].copy()
    sgd_step(model, ones, cfg, 1)
    p2 = model.parameters()[0].copy()
    assert np.allclose(p1 - p2, 0.5 * (p0 - p1))

    with pytest.raises(ShapeMismatch):
        sgd_step(model, ones[:-1], cfg, 0)


def test_sgd_trainable_mask():
    model = init_mlp([2, 3, 2], seed=1)
    before = model.copy()
    sgd_step(model, [np.ones_like(p) for p in model.parameters()], SgdConfig(learning_rate=0.1), 0,
             trainable=[False, True])
    assert np.array_equal(model.weights[0], before.weights[0])
    assert np.array_equal(model.biases[0], before.biases[0])
    assert not np.array_equal(model.weights[1], before.weights[1])


def test_sgd_momentum_requires_velocity_buffer():
    model = init_mlp([1, 1, 1], seed=0)
    ones = [np.ones_like(p) for p in model.parameters()]
    cfg = SgdConfig(learning_rate=0.1, momentum=0.9)
    with pytest.raises(ConfigInvalid):
        sgd_step(model, ones, cfg, 0)

    p0 = model.parameters()[0].copy()
    velocity = [np.zeros_like(p) for p in ones]
    sgd_step(model, ones, cfg, 0, velocity=velocity)
    p1 = model.parameters()[0].copy()
    sgd_step(model, ones, cfg, 1, velocity=velocity)
    p2 = model.parameters()[0].copy()
    assert np.allclose(p0 - p1, 0.1)
    assert np.allclose(p1 - p2, 0.1 * 1.9)


# --- training and checkpoints ----------------------------------------------

def test_fit_deterministic():
    x, y = _batch(n=40, seed=2)
    cfg = TrainConfig(epochs=3, batch_size=8, hidden_dims=(6,))
    a = fit(x, y, 4, cfg, seed=5)
    b = fit(x, y, 4, cfg, seed=5)
    assert a.equals(b)
    assert not a.equals(fit(x, y, 4, cfg, seed=6))


def test_checkpoint_round_trip_and_errors():
    model = _model()
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "model.json")
        save_checkpoint(model, path)
        loaded = load_checkpoint(path)
        assert isinstance(loaded, MlpModel)
        assert loaded.equals(model)
        assert loaded.feature_layer_index == model.feature_layer_index

        with open(path, "r", encoding="utf-8") as f:
            payload = json.load(f)
        payload["format_version"] = 99
        wrong = os.path.join(tmp, "wrong.json")
        with open(wrong, "w", encoding="utf-8") as f:
            json.dump(payload, f)
        with pytest.raises(SchemaVersionMismatch):
            load_checkpoint(wrong)

        with open(path, "r", encoding="utf-8") as f:
            content = f.read()
        truncated = os.path.join(tmp, "truncated.json")
        with open(truncated, "w", encoding="utf-8") as f:
            f.write(content[: len(content) // 2])
        with pytest.raises(CorruptPayload):
            load_checkpoint(truncated)


def test_checkpoint_writes_17_significant_digits():
    model = _model()
    model.weights[0][0, 0] = 0.1
    model.weights[0][0, 1] = -0.0
    model.biases[0][0] = 2.0
    model.biases[0][1] = 1e-300
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "model.json")
        save_checkpoint(model, path)
        with open(path, "r", encoding="utf-8") as f:
            content = f.read()
        loaded = load_checkpoint(path)
    assert "0.10000000000000001" in content
    assert loaded.equals(model)
    assert np.signbit(loaded.weights[0][0, 1])
    assert loaded.biases[0][0] == 2.0


def run_all():
    print("🧪 Testing autograd / nnet")
    print("=" * 50)
    tests = [v for k, v in sorted(globals().items()) if k.startswith("test_") and callable(v)]
    failed = 0
    for test in tests:
        try:
            test()
            print(f"   ✅ {test.__name__}")
        except Exception as e:
            failed += 1
            print(f"   ❌ {test.__name__}: {e}")
    print(f"\n{'🎉 All tests passed' if not failed else f'❌ {failed} test(s) failed'}")
    return failed == 0


if __name__ == "__main__":
    sys.exit(0 if run_all() else 1)
