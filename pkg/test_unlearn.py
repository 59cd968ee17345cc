#!/usr/bin/env python3
"""
Tests für unlearnlab.unlearn: Verlustterme, MUDA-Phasen, Baselines,
Einfrier-Verträge, Iterationsbudget und Zugriffsprotokoll.
"""

import math
import os
import sys
import tempfile
from dataclasses import replace

import numpy as np
import pytest

# Add the project root to Python path
sys.path.insert(0, os.path.dirname(__file__))

from unlearnlab.autograd import Tape
from unlearnlab.datagen import gen_blobs, split_forget_retain
from unlearnlab.errors import (
    AuditViolation,
    ConfigInvalid,
    DegenerateForgetFeatures,
    DegenerateRetainFeatures,
    MassConcentrated,
    NotNormalized,
    ShapeMismatch,
)
from unlearnlab.metrics import dimensional_alignment
from unlearnlab.models.data_bundle import ForgetSpec
from unlearnlab.models.mlp import MlpModel, init_mlp
from unlearnlab.models.phase_trace import TRACE_COLUMNS
from unlearnlab.nnet import (
    SgdConfig,
    TrainConfig,
    cross_entropy,
    features_of,
    fit,
    forward,
    forward_taped,
    loss_and_gradients,
    param_leaves,
)
from unlearnlab.unlearn import (
    UnlearnConfig,
    cf_k,
    da_loss,
    eu_k,
    finetune,
    ft_classifier_only,
    muda_unlearn,
    neggrad,
    neggrad_ft,
    retrain_oracle,
    run_method,
    sd_loss,
    sd_target,
    with_seed,
)

TRAIN = TrainConfig(epochs=5, batch_size=16, hidden_dims=(8, 6))
SGD = SgdConfig(learning_rate=0.05)


def _bundle(mode="class", target=0, seed=0):
    data = gen_blobs(num_classes=3, subclasses_per_class=2, dim=4, n_per_subclass=20, spread=0.8, seed=seed)
    return split_forget_retain(data, ForgetSpec(mode, target), seed)


def _original(bundle, seed=0):
    x, y = bundle.train_set()
    return fit(x, y, bundle.num_classes, TRAIN, seed)


def _cfg(method, **kw):
    base = dict(method=method, sgd=SGD, total_iterations=12, batch_size=8, seed=1)
    base.update(kw)
    return UnlearnConfig(**base)


def _identity_feature_model():
    """[2, 2, 2] MLP whose features are tanh(x)."""
    return MlpModel(layer_dims=[2, 2, 2], weights=[np.eye(2), np.eye(2)], biases=[np.zeros(2), np.zeros(2)])


def _da(forget_features, retain_features):
    model = _identity_feature_model()
    tape = Tape()
    params = param_leaves(tape, model)
    return da_loss(tape, params, model.feature_layer_index,
                   np.arctanh(np.asarray(forget_features)), retain_x=np.arctanh(np.asarray(retain_features))).item()


# --- config ------------------------------------------------------------------

def test_config_validation():
    assert UnlearnConfig(total_iterations=0).total_iterations == 0
    for kwargs in (dict(method="scrub"), dict(alpha=-0.1), dict(beta=float("nan")),
                   dict(total_iterations=-1), dict(batch_size=0), dict(k_layers=0),
                   dict(schedule="random")):
        with pytest.raises(ConfigInvalid):
            UnlearnConfig(**kwargs)
    assert UnlearnConfig(method="muda_da_only").loss_weights == (0.1, 0.0)
    assert UnlearnConfig(method="muda_sd_only").loss_weights == (0.0, 0.01)
    assert with_seed(UnlearnConfig(), 9).seed == 9


# --- losses ------------------------------------------------------------------

def test_da_loss_analytic_cases():
    retain = [[0.5, 0.0], [0.3, 0.0]]
    assert abs(_da([[0.4, 0.0], [0.2, 0.0]], retain) + 1.0) < 1e-9
    assert abs(_da([[0.0, 0.4], [0.0, 0.2]], retain)) < 1e-9
    diagonal = [[1.0 / math.sqrt(2.0), 1.0 / math.sqrt(2.0)]]
    assert abs(_da(diagonal, retain) + 1.0 / math.sqrt(2.0)) < 1e-9


def test_da_loss_matches_metric():
    bundle = _bundle()
    model = _original(bundle)
    fx, _ = bundle.forget_set()
    rx, _ = bundle.retain_prime_set()
    tape = Tape()
    value = da_loss(tape, param_leaves(tape, model), model.feature_layer_index, fx, retain_x=rx).item()
    expected = dimensional_alignment(features_of(model, fx).T, features_of(model, rx).T)
    assert -1.0 <= value <= 0.0
    assert abs(value + expected) < 1e-9


def test_da_loss_degenerate():
    model = _identity_feature_model()
    tape = Tape()
    params = param_leaves(tape, model)
    with pytest.raises(DegenerateForgetFeatures):
        da_loss(tape, params, model.feature_layer_index, np.zeros((3, 2)), retain_x=np.ones((3, 2)) * 0.1)
    with pytest.raises(DegenerateRetainFeatures):
        da_loss(tape, params, model.feature_layer_index, np.ones((3, 2)) * 0.1, retain_x=np.zeros((3, 2)))


def test_sd_target_cases():
    assert np.allclose(sd_target(np.array([0.5, 0.3, 0.2]), 0), [0.0, 0.6, 0.4])
    row = np.array([0.0, 0.7, 0.3])
    assert np.allclose(sd_target(row, 0), row)
    assert np.allclose(sd_target(np.full(4, 0.25), 2), [1 / 3, 1 / 3, 0.0, 1 / 3])
    with pytest.raises(MassConcentrated):
        sd_target(np.array([1.0, 0.0]), 0)
    with pytest.raises(NotNormalized):
        sd_target(np.array([0.5, 0.6]), 0)
    with pytest.raises(ShapeMismatch):
        sd_target(np.array([1.0]), 0)


def test_sd_loss_matches_per_sample_kl():
    bundle = _bundle()
    model = _original(bundle)
    fx, _ = bundle.forget_set()
    fx = fx[:7]
    tape = Tape()
    value = sd_loss(tape, param_leaves(tape, model), model.feature_layer_index, fx, forget_class=0).item()
    probs = forward(model, fx).probs
    expected = 0.0
    for p in probs:
        target = sd_target(p, 0)
        expected += sum(p[c] * math.log(p[c] / max(target[c], 1e-12)) for c in range(p.size))
    assert value >= 0.0
    assert abs(value - expected / len(probs)) < 1e-10


def test_sd_loss_equilibrium():
    model = init_mlp([2, 3, 2], seed=0)
    model.weights[-1][:, 0] = 0.0
    model.biases[-1][:] = [-1e3, 0.0]
    tape = Tape()
    value = sd_loss(tape, param_leaves(tape, model), model.feature_layer_index, np.ones((4, 2)), forget_class=0)
    assert abs(value.item()) < 1e-12


def test_sd_loss_raises_when_forget_class_holds_all_mass():
    model = init_mlp([2, 3, 2], seed=0)
    model.weights[-1][:, 0] = 0.0
    model.biases[-1][:] = [1e3, 0.0]
    tape = Tape()
    with pytest.raises(MassConcentrated):
        sd_loss(tape, param_leaves(tape, model), model.feature_layer_index, np.ones((4, 2)), forget_class=0)


# --- degenerate equivalences ---------------------------------------------------

def test_muda_without_forget_terms_equals_finetune():
    bundle = _bundle()
    model = _original(bundle)
    muda, _ = muda_unlearn(model, bundle, _cfg("muda", alpha=0.0, beta=0.0, schedule="recover_only"))
    ft = finetune(model, bundle, _cfg("ft"))
    assert muda.equals(ft)
    assert not ft.equals(model)


def test_neggrad_ft_reductions():
    bundle = _bundle()
    model = _original(bundle)
    assert neggrad_ft(model, bundle, _cfg("neggrad_ft", schedule="recover_only")).equals(
        finetune(model, bundle, _cfg("ft")))
    assert neggrad_ft(model, bundle, _cfg("neggrad_ft", schedule="forget_only")).equals(
        neggrad(model, bundle, _cfg("neggrad")))


def test_cf_k_all_layers_equals_finetune():
    bundle = _bundle()
    model = _original(bundle)
    assert cf_k(model, bundle, _cfg("cf_k", k_layers=model.num_layers)).equals(finetune(model, bundle, _cfg("ft")))
    with pytest.raises(ConfigInvalid):
        cf_k(model, bundle, _cfg("cf_k", k_layers=model.num_layers + 1))


def test_neggrad_step_is_negated_gradient():
    bundle = _bundle()
    model = _original(bundle)
    fx, fy = bundle.forget_set()
    cfg = _cfg("neggrad", total_iterations=1, batch_size=fx.shape[0])
    stepped = neggrad(model, bundle, cfg)
    _, grads = loss_and_gradients(model, lambda tape, params: cross_entropy(
        forward_taped(tape, params, fx, model.feature_layer_index).logits, fy))
    for before, after, g in zip(model.parameters(), stepped.parameters(), grads):
        assert np.allclose(after, before + SGD.learning_rate * g, atol=1e-12)


def test_zero_iterations_and_zero_lr_keep_model():
    bundle = _bundle()
    model = _original(bundle)
    assert finetune(model, bundle, _cfg("ft", total_iterations=0)).equals(model)
    assert finetune(model, bundle, _cfg("ft", sgd=SgdConfig(learning_rate=0.0))).equals(model)
    unlearned, trace = muda_unlearn(model, bundle, _cfg("muda", total_iterations=0))
    assert unlearned.equals(model)
    assert len(trace) == 0


# --- freeze contracts --------------------------------------------------------------

def test_cf_k_and_eu_k_freeze_early_layers():
    bundle = _bundle()
    model = _original(bundle)
    for fn, method in ((cf_k, "cf_k"), (eu_k, "eu_k")):
        out = fn(model, bundle, _cfg(method, k_layers=1))
        for i in range(model.num_layers - 1):
            assert np.array_equal(out.weights[i], model.weights[i])
            assert np.array_equal(out.biases[i], model.biases[i])
        assert not np.array_equal(out.weights[-1], model.weights[-1])


def test_eu_k_zero_iterations_is_fresh_init():
    bundle = _bundle()
    model = _original(bundle)
    out = eu_k(model, bundle, _cfg("eu_k", k_layers=2, total_iterations=0, seed=4))
    fresh = init_mlp(model.layer_dims, 4)
    assert np.array_equal(out.weights[0], model.weights[0])
    for i in (1, 2):
        assert np.array_equal(out.weights[i], fresh.weights[i])
        assert np.array_equal(out.biases[i], fresh.biases[i])


def test_ft_classifier_only_keeps_features():
    bundle = _bundle()
    model = _original(bundle)
    out = ft_classifier_only(model, bundle, _cfg("ft_classifier_only"))
    probe_x = np.random.default_rng(0).normal(size=(10, 4))
    assert np.array_equal(features_of(out, probe_x), features_of(model, probe_x))
    assert not np.array_equal(out.weights[-1], model.weights[-1])


# --- budget, schedule, determinism -------------------------------------------------

def test_every_method_spends_exact_budget():
    bundle = _bundle()
    model = _original(bundle)
    for method in ("muda", "muda_da_only", "muda_sd_only", "ft", "neggrad", "neggrad_ft",
                   "eu_k", "cf_k", "ft_classifier_only"):
        _, trace = run_method(model, bundle.with_fresh_audit(), _cfg(method, total_iterations=13))
        assert len(trace) == 13, method
        assert [r.iteration for r in trace.records] == list(range(1, 14))


def test_muda_alternates_forget_first():
    bundle = _bundle()
    model = _original(bundle)
    _, trace = muda_unlearn(model, bundle, _cfg("muda", total_iterations=20))
    blocks = trace.phase_blocks()
    assert blocks[0] == "forget"
    assert all(a != b for a, b in zip(blocks, blocks[1:]))
    assert set(blocks) == {"forget", "recover"}
    n_forget_batches = math.ceil(bundle.forget_idx.size / 8)
    assert trace.phases()[:n_forget_batches] == ["forget"] * n_forget_batches
    forget_records = [r for r in trace.records if r.phase == "forget"]
    assert all(-1.0 <= r.l_da <= 0.0 and r.l_sd >= 0.0 for r in forget_records)
    assert all(r.ce is not None for r in trace.records if r.phase == "recover")


def test_muda_joint_schedule():
    bundle = _bundle()
    model = _original(bundle)
    _, trace = muda_unlearn(model, bundle, _cfg("muda", schedule="joint"))
    assert trace.phases() == ["joint"] * 12
    assert all(r.l_da is not None and r.ce is not None for r in trace.records)


def test_muda_deterministic_and_seed_sensitive():
    bundle = _bundle()
    model = _original(bundle)
    a, ta = muda_unlearn(model, bundle, _cfg("muda"))
    b, tb = muda_unlearn(model, bundle, _cfg("muda"))
    assert a.equals(b)
    assert ta.to_rows() == tb.to_rows()
    c, _ = muda_unlearn(model, bundle, _cfg("muda", seed=2))
    assert not a.equals(c)


def test_muda_subclass_disables_self_distillation():
    bundle = _bundle(mode="subclass", target=1)
    model = _original(bundle)
    _, trace = muda_unlearn(model, bundle, _cfg("muda"))
    forget = [r for r in trace.records if r.phase == "forget"]
    assert forget and all(r.l_sd is None and r.l_da is not None for r in forget)


def test_trace_export():
    bundle = _bundle()
    model = _original(bundle)
    _, trace = muda_unlearn(model, bundle, _cfg("muda", total_iterations=5))
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "trace.csv")
        trace.save_csv(path)
        with open(path, encoding="utf-8") as f:
            lines = f.read().splitlines()
    assert lines[0] == ",".join(TRACE_COLUMNS)
    assert len(lines) == 6


# --- data access -------------------------------------------------------------------

def test_audit_unlearning_never_reads_full_retain():
    bundle = _bundle()
    model = _original(bundle)
    for method in ("muda", "ft", "neggrad", "neggrad_ft", "eu_k", "cf_k", "ft_classifier_only"):
        view = bundle.with_fresh_audit()
        run_method(model, view, _cfg(method))
        view.assert_no_full_retain_access(method)
        assert view.audit["train"] == 0

    view = bundle.with_fresh_audit()
    retrained = retrain_oracle(view, TRAIN, seed=0)
    assert view.audit["forget"] == 0
    with pytest.raises(AuditViolation):
        view.assert_no_full_retain_access("retrain")
    assert retrain_oracle(bundle.with_fresh_audit(), TRAIN, seed=0).equals(retrained)


def test_run_method_retrain():
    bundle = _bundle()
    model = _original(bundle)
    out, trace = run_method(model, bundle, replace(_cfg("retrain"), seed=0), train_cfg=TRAIN)
    assert len(trace) == 0
    assert out.equals(retrain_oracle(bundle, TRAIN, seed=0))


def run_all():
    print("🧪 Testing unlearn")
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
