"""
MLP forward pass, losses and SGD on top of the autograd tape.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, List, NamedTuple, Optional, Sequence

import numpy as np

from unlearnlab import autograd as ag
from unlearnlab import config
from unlearnlab.autograd import Tape, Var
from unlearnlab.errors import (
    ConfigInvalid,
    LabelOutOfRange,
    NonFinite,
    NotNormalized,
    ShapeMismatch,
    SupportViolation,
)
from unlearnlab.models.mlp import MlpModel, init_mlp
from unlearnlab.unified_logger import log_train

logger = logging.getLogger(__name__)

NORMALIZATION_TOL = 1e-6


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = config.UNLEARN_LEARNING_RATE
    weight_decay: float = 0.0
    lr_decay: float = 1.0
    momentum: float = 0.0

    def __post_init__(self):
        values = (self.learning_rate, self.weight_decay, self.lr_decay, self.momentum)
        if not all(np.isfinite(v) for v in values):
            raise ConfigInvalid("SGD hyperparameters must be finite")
        if self.learning_rate < 0.0:
            raise ConfigInvalid("learning_rate must be >= 0")
        if self.weight_decay < 0.0 or self.momentum < 0.0:
            raise ConfigInvalid("weight_decay and momentum must be >= 0")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ConfigInvalid("lr_decay must lie in (0, 1]")

    def lr_at(self, step_index: int) -> float:
        return self.learning_rate * self.lr_decay ** step_index


@dataclass(frozen=True)
class TrainConfig:
    """Recipe for training from scratch (original model and retrain oracle)."""

    sgd: SgdConfig = field(default_factory=lambda: SgdConfig(
        learning_rate=config.TRAIN_LEARNING_RATE,
        weight_decay=config.TRAIN_WEIGHT_DECAY,
        lr_decay=config.TRAIN_LR_DECAY,
    ))
    epochs: int = config.TRAIN_EPOCHS
    batch_size: int = config.TRAIN_BATCH_SIZE
    hidden_dims: Sequence[int] = tuple(config.DEFAULT_HIDDEN_DIMS)

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigInvalid("epochs must be >= 0 and batch_size >= 1")
        if len(self.hidden_dims) < 1 or any(h < 1 for h in self.hidden_dims):
            raise ConfigInvalid("at least one positive hidden dimension is required")


class ForwardOutput(NamedTuple):
    features: np.ndarray
    logits: np.ndarray
    probs: np.ndarray


class TapedForward(NamedTuple):
    features: Var
    logits: Var


def param_leaves(tape: Tape, model: MlpModel, requires_grad: bool = True) -> List[Var]:
    return [tape.leaf(p, requires_grad=requires_grad) for p in model.parameters()]


def _check_inputs(model: MlpModel, inputs: np.ndarray) -> np.ndarray:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.layer_dims[0]:
        raise ShapeMismatch(f"input shape {x.shape} does not match d_in={model.layer_dims[0]}")
    if not np.all(np.isfinite(x)):
        raise NonFinite("inputs contain NaN or Inf")
    return x


def forward_taped(tape: Tape, params: Sequence[Var], x: np.ndarray, feature_layer_index: int) -> TapedForward:
    """Record the affine/tanh chain; returns feature activation and logits."""
    h = tape.constant(x)
    num_layers = len(params) // 2
    features = None
    for i in range(num_layers):
        h = h @ params[2 * i] + params[2 * i + 1]
        if i < num_layers - 1:
            h = ag.tanh(h)
        if i + 1 == feature_layer_index:
            features = h
    return TapedForward(features=features, logits=h)


def forward(model: MlpModel, inputs: np.ndarray) -> ForwardOutput:
    x = _check_inputs(model, inputs)
    tape = Tape()
    out = forward_taped(tape, param_leaves(tape, model, requires_grad=False), x, model.feature_layer_index)
    probs = ag.softmax(out.logits).value
    return ForwardOutput(features=out.features.value, logits=out.logits.value, probs=probs)


def features_of(model: MlpModel, inputs: np.ndarray) -> np.ndarray:
    return forward(model, inputs).features


def predict(model: MlpModel, inputs: np.ndarray) -> np.ndarray:
    """Argmax class; ties go to the lowest index."""
    return np.argmax(forward(model, inputs).logits, axis=1)


def check_labels(labels: np.ndarray, num_classes: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64)
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise LabelOutOfRange(f"labels must lie in [0, {num_classes})")
    return y


def cross_entropy(logits: Var, labels: np.ndarray) -> Var:
    """Mean negative log softmax probability of the true class."""
    y = check_labels(labels, logits.shape[1])
    if y.shape[0] != logits.shape[0]:
        raise ShapeMismatch("labels and logits disagree on batch size")
    return -ag.mean(ag.take_rows(ag.log_softmax(logits), y))


def _check_rows_normalized(name: str, rows: np.ndarray) -> None:
    if np.any(np.abs(rows.sum(axis=-1) - 1.0) > NORMALIZATION_TOL) or np.any(rows < 0.0):
        raise NotNormalized(f"{name} rows are not probability distributions")


def kl_divergence(p: Var, q: np.ndarray, floor: Optional[float] = None) -> Var:
    """
    Mean over rows of sum_c p_c ln(p_c / q_c), with 0 ln 0 = 0.

    ``q`` is a constant target. Without ``floor`` a target entry of 0 under
    positive ``p`` raises SupportViolation; with ``floor`` the target is
    clamped from below before the log.
    """
    q = np.asarray(q, dtype=np.float64)
    if q.shape != p.shape:
        raise ShapeMismatch(f"p {p.shape} and q {q.shape} differ")
    _check_rows_normalized("p", p.value)
    _check_rows_normalized("q", q)
    if floor is None:
        if np.any((p.value > 0.0) & (q <= 0.0)):
            raise SupportViolation("q is zero where p has mass")
        log_q = np.log(np.where(q > 0.0, q, 1.0))
    else:
        log_q = np.log(np.maximum(q, floor))
    terms = p * (ag.log(p) - log_q)
    return ag.mean(ag.sum_(terms, axis=1))


def sgd_step(model: MlpModel, gradients: Sequence[np.ndarray], cfg: SgdConfig, step_index: int,
             trainable: Optional[Sequence[bool]] = None,
             velocity: Optional[List[np.ndarray]] = None) -> MlpModel:
    """
    One in-place SGD update: theta <- theta - lr_t * (g + wd * theta).

    ``trainable`` is a per-layer mask; frozen layers are left untouched.
    ``velocity`` carries momentum buffers between calls; required when momentum > 0.
    """
    params = model.parameters()
    if len(gradients) != len(params):
        raise ShapeMismatch(f"{len(gradients)} gradients for {len(params)} parameters")
    if cfg.momentum > 0.0 and velocity is None:
        raise ConfigInvalid(f"momentum {cfg.momentum} needs a velocity buffer")
    lr = cfg.lr_at(step_index)
    updated = []
    for i, (p, g) in enumerate(zip(params, gradients)):
        if np.shape(g) != p.shape:
            raise ShapeMismatch(f"gradient {i} has shape {np.shape(g)}, expected {p.shape}")
        if trainable is not None and not trainable[i // 2]:
            updated.append(p)
            continue
        d = g + cfg.weight_decay * p if cfg.weight_decay > 0.0 else np.asarray(g, dtype=np.float64)
        if cfg.momentum > 0.0:
            velocity[i] = cfg.momentum * velocity[i] + d
            d = velocity[i]
        updated.append(p - lr * d)
    model.set_parameters(updated)
    return model


def minibatches(rng: np.random.Generator, n: int, batch_size: int) -> List[np.ndarray]:
    """One seeded shuffled pass over ``n`` indices."""
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def loss_and_gradients(model: MlpModel, build_loss: Callable[[Tape, List[Var]], Var]):
    tape = Tape()
    params = param_leaves(tape, model)
    loss = build_loss(tape, params)
    return loss.item(), ag.backward(tape, loss, params)


def fit(x: np.ndarray, y: np.ndarray, num_classes: int, train_cfg: TrainConfig, seed: int,
        label: str = "model") -> MlpModel:
    """Train a fresh seeded MLP with cross-entropy for ``train_cfg.epochs`` shuffled passes."""
    x = np.asarray(x, dtype=np.float64)
    y = check_labels(y, num_classes)
    dims = [x.shape[1], *train_cfg.hidden_dims, num_classes]
    model = init_mlp(dims, seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    velocity = [np.zeros_like(p) for p in model.parameters()]
    step = 0
    for epoch in range(train_cfg.epochs):
        epoch_loss = 0.0
        batches = minibatches(rng, x.shape[0], train_cfg.batch_size)
        for batch in batches:
            xb, yb = x[batch], y[batch]
            loss, grads = loss_and_gradients(
                model,
                lambda tape, params: cross_entropy(
                    forward_taped(tape, params, xb, model.feature_layer_index).logits, yb),
            )
            sgd_step(model, grads, train_cfg.sgd, step, velocity=velocity)
            step += 1
            epoch_loss += loss
        if (epoch + 1) % 10 == 0 or epoch + 1 == train_cfg.epochs:
            logger.debug(f"{label} epoch {epoch + 1}: loss={epoch_loss / max(len(batches), 1):.4f}")
    log_train(f"{label} trained", seed=seed,
              extra_context={"samples": int(x.shape[0]), "steps": step}, dedupe=False)
    return model
