"""
Unlearning methods: MUDA (dimensional alignment + self-distillation with
alternating forget/recover phases) and the baselines it is compared against.

Every method takes the original model, a partitioned DataBundle and an
UnlearnConfig and returns a new model; the input model is never mutated.
All methods share one phase runner so that optimizer steps, learning-rate
schedule and RNG streams are identical wherever two methods coincide.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from unlearnlab import autograd as ag
from unlearnlab import config
from unlearnlab.autograd import Tape, Var
from unlearnlab.errors import (
    AllZero,
    ConfigInvalid,
    DegenerateForgetFeatures,
    DegenerateRetainFeatures,
    EmptyForgetSet,
    MassConcentrated,
    NotNormalized,
    ShapeMismatch,
)
from unlearnlab.linalg import principal_projector
from unlearnlab.models.data_bundle import DataBundle
from unlearnlab.models.mlp import MlpModel, init_mlp
from unlearnlab.models.phase_trace import PhaseTrace
from unlearnlab.nnet import (
    NORMALIZATION_TOL,
    SgdConfig,
    TrainConfig,
    cross_entropy,
    features_of,
    fit,
    forward_taped,
    kl_divergence,
    loss_and_gradients,
    minibatches,
    sgd_step,
)
from unlearnlab.unified_logger import log_unlearn

logger = logging.getLogger(__name__)

METHODS = (
    "muda", "muda_da_only", "muda_sd_only",
    "ft", "neggrad", "neggrad_ft", "eu_k", "cf_k", "ft_classifier_only",
    "retrain",
)
MUDA_METHODS = ("muda", "muda_da_only", "muda_sd_only")
SCHEDULES = ("alternating", "joint", "forget_only", "recover_only")

DEGENERATE_FEATURE_TOL = 1e-12
MASS_CONCENTRATION_TOL = 1e-9

OnStep = Callable[[int, MlpModel], None]


@dataclass(frozen=True)
class UnlearnConfig:
    method: str = "muda"
    alpha: float = config.UNLEARN_ALPHA
    beta: float = config.UNLEARN_BETA
    sgd: SgdConfig = field(default_factory=SgdConfig)
    total_iterations: int = config.UNLEARN_ITERATIONS
    batch_size: int = config.UNLEARN_BATCH_SIZE
    k_layers: int = config.UNLEARN_K_LAYERS
    seed: int = 0
    schedule: str = "alternating"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigInvalid(f"unknown method '{self.method}'")
        if self.schedule not in SCHEDULES:
            raise ConfigInvalid(f"unknown schedule '{self.schedule}'")
        for name in ("alpha", "beta"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0.0:
                raise ConfigInvalid(f"{name} must be finite and >= 0, got {value}")
        if self.total_iterations < 0:
            raise ConfigInvalid("total_iterations must be >= 0")
        if self.batch_size < 1:
            raise ConfigInvalid("batch_size must be >= 1")
        if self.k_layers < 1:
            raise ConfigInvalid("k_layers must be >= 1")

    @property
    def loss_weights(self) -> Tuple[float, float]:
        """(alpha, beta) after applying the single-loss ablation aliases."""
        if self.method == "muda_da_only":
            return self.alpha, 0.0
        if self.method == "muda_sd_only":
            return 0.0, self.beta
        return self.alpha, self.beta


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def retain_projector(model: MlpModel, retain_x: np.ndarray) -> np.ndarray:
    """Top-k eigenprojector of the (uncentered) retain feature covariance, a constant."""
    features = features_of(model, retain_x)
    try:
        projector, k, _ = principal_projector(features.T)
    except AllZero as e:
        raise DegenerateRetainFeatures("retain feature covariance is all zero") from e
    logger.debug(f"retain projector refreshed: C={projector.shape[0]}, k={k}")
    return projector


def da_loss(tape: Tape, params: Sequence[Var], feature_layer_index: int, forget_x: np.ndarray,
            retain_x: Optional[np.ndarray] = None, projector: Optional[np.ndarray] = None,
            retain_params: Optional[Sequence[Var]] = None) -> Var:
    """
    -DA(D_f | D_r'): negated share of the forget covariance inside the retain subspace.

    The projector is either given or derived on this tape from ``retain_x``
    through ``retain_params`` (default ``params``) behind a stop-gradient, so
    no gradient ever reaches the retain branch. Value lies in [-1, 0].
    """
    if forget_x.shape[0] == 0:
        raise EmptyForgetSet("forget batch is empty")
    if projector is None:
        if retain_x is None or retain_x.shape[0] == 0:
            raise DegenerateRetainFeatures("no retain samples for the projector")
        branch = params if retain_params is None else retain_params
        retain_features = ag.stop_gradient(forward_taped(tape, branch, retain_x, feature_layer_index).features)
        try:
            projector, _, _ = principal_projector(retain_features.value.T)
        except AllZero as e:
            raise DegenerateRetainFeatures("retain feature covariance is all zero") from e

    features = forward_taped(tape, params, forget_x, feature_layer_index).features
    covariance = features.T @ features
    denominator = ag.frobenius(covariance)
    if denominator.item() < DEGENERATE_FEATURE_TOL:
        raise DegenerateForgetFeatures(f"||F_f F_f^T||_F = {denominator.item():.3e}")
    return -(ag.frobenius(covariance @ projector) / denominator)


def sd_target(probs: np.ndarray, forget_class: int) -> np.ndarray:
    """Zero the forget-class probability and renormalise each row."""
    p = np.asarray(probs, dtype=np.float64)
    if p.shape[-1] < 2:
        raise ShapeMismatch("self-distillation needs at least two classes")
    if np.any(np.abs(p.sum(axis=-1) - 1.0) > NORMALIZATION_TOL):
        raise NotNormalized("probability rows do not sum to 1")
    if np.any(p[..., forget_class] > 1.0 - MASS_CONCENTRATION_TOL):
        raise MassConcentrated(f"forget class {forget_class} holds all probability mass")
    target = p.copy()
    target[..., forget_class] = 0.0
    return target / target.sum(axis=-1, keepdims=True)


def sd_loss(tape: Tape, params: Sequence[Var], feature_layer_index: int, forget_x: np.ndarray,
            forget_class: int) -> Var:
    """Mean KL(f || f_hat) with f_hat = sd_target(f), detached. Raises MassConcentrated like sd_target."""
    logits = forward_taped(tape, params, forget_x, feature_layer_index).logits
    probs = ag.softmax(logits)
    target = sd_target(probs.value, forget_class)
    return kl_divergence(probs, target, floor=config.KL_TARGET_FLOOR)


def negated_cross_entropy(tape: Tape, params: Sequence[Var], feature_layer_index: int,
                          x: np.ndarray, y: np.ndarray) -> Var:
    return -cross_entropy(forward_taped(tape, params, x, feature_layer_index).logits, y)


# ---------------------------------------------------------------------------
# Phase runner
# ---------------------------------------------------------------------------

BatchObjective = Callable[[Tape, List[Var], np.ndarray, np.ndarray], Tuple[Var, Dict[str, float]]]


@dataclass
class Phase:
    name: str
    x: np.ndarray
    y: np.ndarray
    objective: BatchObjective
    on_epoch_start: Optional[Callable[[], None]] = None


def rng_streams(seed: int) -> Dict[str, np.random.Generator]:
    forget_seq, recover_seq = np.random.SeedSequence(int(seed)).spawn(2)
    return {"forget": np.random.default_rng(forget_seq), "recover": np.random.default_rng(recover_seq)}


class PhaseRunner:
    """Consumes exactly ``cfg.total_iterations`` SGD steps over one or more phases."""

    def __init__(self, model: MlpModel, cfg: UnlearnConfig, trace: PhaseTrace,
                 trainable: Optional[Sequence[bool]] = None, on_step: Optional[OnStep] = None):
        self.model = model
        self.cfg = cfg
        self.trace = trace
        self.trainable = trainable
        self.on_step = on_step
        self.step = 0
        self.velocity = [np.zeros_like(p) for p in model.parameters()]
        self.rng = rng_streams(cfg.seed)

    @property
    def exhausted(self) -> bool:
        return self.step >= self.cfg.total_iterations

    def apply(self, phase: str, objective: Callable[[Tape, List[Var]], Tuple[Var, Dict[str, float]]]) -> None:
        parts: Dict[str, float] = {}

        def build(tape, params):
            loss, components = objective(tape, params)
            parts.update(components)
            return loss

        loss, grads = loss_and_gradients(self.model, build)
        if not np.isfinite(loss):
            logger.warning(f"non-finite {phase} loss at iteration {self.step + 1}")
        lr = self.cfg.sgd.lr_at(self.step)
        sgd_step(self.model, grads, self.cfg.sgd, self.step, trainable=self.trainable, velocity=self.velocity)
        self.step += 1
        self.trace.record(self.step, phase, lr=lr, **parts)
        if self.on_step is not None:
            self.on_step(self.step, self.model)

    def epoch(self, phase: Phase) -> None:
        n = phase.x.shape[0]
        if n == 0:
            raise EmptyForgetSet(f"{phase.name} phase has no samples")
        if phase.on_epoch_start is not None:
            phase.on_epoch_start()
        for batch in minibatches(self.rng[phase.name], n, self.cfg.batch_size):
            if self.exhausted:
                return
            xb, yb = phase.x[batch], phase.y[batch]
            self.apply(phase.name, lambda tape, params: phase.objective(tape, params, xb, yb))

    def alternate(self, phases: Sequence[Phase]) -> None:
        """Epoch-wise round robin over ``phases`` until the budget is spent."""
        while not self.exhausted:
            for phase in phases:
                if self.exhausted:
                    break
                self.epoch(phase)

    def joint(self, forget: Phase, recover: Phase) -> None:
        """Every step pairs a forget minibatch with a recover minibatch."""
        if forget.x.shape[0] == 0 or recover.x.shape[0] == 0:
            raise EmptyForgetSet("joint schedule needs forget and recover samples")
        pending: List[np.ndarray] = []
        while not self.exhausted:
            if forget.on_epoch_start is not None:
                forget.on_epoch_start()
            for fb in minibatches(self.rng["forget"], forget.x.shape[0], self.cfg.batch_size):
                if self.exhausted:
                    return
                if not pending:
                    pending = minibatches(self.rng["recover"], recover.x.shape[0], self.cfg.batch_size)
                rb = pending.pop(0)
                fx, fy, rx, ry = forget.x[fb], forget.y[fb], recover.x[rb], recover.y[rb]

                def objective(tape, params):
                    f_loss, f_parts = forget.objective(tape, params, fx, fy)
                    r_loss, r_parts = recover.objective(tape, params, rx, ry)
                    return f_loss + r_loss, {**f_parts, **r_parts}

                self.apply("joint", objective)

    def run(self, schedule: str, forget: Optional[Phase], recover: Optional[Phase]) -> None:
        if schedule == "alternating":
            self.alternate([p for p in (forget, recover) if p is not None])
        elif schedule == "forget_only":
            self.alternate([forget])
        elif schedule == "recover_only":
            self.alternate([recover])
        else:
            self.joint(forget, recover)


def _recover_objective(feature_layer_index: int) -> BatchObjective:
    def objective(tape, params, xb, yb):
        ce = cross_entropy(forward_taped(tape, params, xb, feature_layer_index).logits, yb)
        return ce, {"ce": ce.item()}
    return objective


def _ascent_objective(feature_layer_index: int) -> BatchObjective:
    def objective(tape, params, xb, yb):
        loss = negated_cross_entropy(tape, params, feature_layer_index, xb, yb)
        return loss, {"ce": -loss.item()}
    return objective


def _check_k_layers(model: MlpModel, k: int) -> None:
    if not 1 <= k <= model.num_layers:
        raise ConfigInvalid(f"k_layers={k} outside [1, {model.num_layers}]")


def last_k_mask(model: MlpModel, k: int) -> List[bool]:
    _check_k_layers(model, k)
    return [i >= model.num_layers - k for i in range(model.num_layers)]


def _expect(cfg: UnlearnConfig, *methods: str) -> None:
    if cfg.method not in methods:
        raise ConfigInvalid(f"config method '{cfg.method}' does not match {methods}")


# ---------------------------------------------------------------------------
# MUDA
# ---------------------------------------------------------------------------

def muda_unlearn(model: MlpModel, bundle: DataBundle, cfg: UnlearnConfig,
                 on_step: Optional[OnStep] = None) -> Tuple[MlpModel, PhaseTrace]:
    """
    Forget phase: alpha * L_DA + beta * L_SD on D_f minibatches.
    Recover phase: cross-entropy on D_r' minibatches.

    Phases swap at epoch boundaries (forget first) until ``total_iterations``
    steps are spent. The retain projector is refreshed at the start of each
    forget epoch. L_SD needs a removed output class, so it is switched off
    for subclass and poisoned forget sets.
    """
    _expect(cfg, *MUDA_METHODS)
    alpha, beta = cfg.loss_weights
    spec = bundle.forget_spec
    forget_class = spec.forget_class if spec is not None else None
    if beta > 0.0 and forget_class is None:
        logger.info("no forget class for this forget set, self-distillation disabled")
        beta = 0.0

    forget_x, forget_y = bundle.forget_set()
    retain_x, retain_y = bundle.retain_prime_set()
    unlearned = model.copy()
    fli = unlearned.feature_layer_index
    trace = PhaseTrace(method=cfg.method)
    runner = PhaseRunner(unlearned, cfg, trace, on_step=on_step)

    state = {"projector": None}

    def refresh_projector():
        if alpha > 0.0:
            state["projector"] = retain_projector(unlearned, retain_x)

    def forget_objective(tape, params, xb, yb):
        parts: Dict[str, float] = {}
        loss = None
        if alpha > 0.0:
            l_da = da_loss(tape, params, fli, xb, projector=state["projector"])
            parts["l_da"] = l_da.item()
            loss = alpha * l_da
        if beta > 0.0:
            l_sd = sd_loss(tape, params, fli, xb, forget_class)
            parts["l_sd"] = l_sd.item()
            loss = beta * l_sd if loss is None else loss + beta * l_sd
        if loss is None:
            loss = tape.constant(0.0)
        return loss, parts

    forget = Phase("forget", forget_x, forget_y, forget_objective, on_epoch_start=refresh_projector)
    recover = Phase("recover", retain_x, retain_y, _recover_objective(fli))
    runner.run(cfg.schedule, forget, recover)

    log_unlearn(f"{cfg.method} finished ({cfg.schedule})", method=cfg.method, seed=cfg.seed,
                extra_context={"steps": runner.step, "alpha": alpha, "beta": beta}, dedupe=False)
    return unlearned, trace


# ---------------------------------------------------------------------------
# Baselines
# ---------------------------------------------------------------------------

def _recover_only(model: MlpModel, bundle: DataBundle, cfg: UnlearnConfig,
                  trainable: Optional[List[bool]], trace: Optional[PhaseTrace],
                  on_step: Optional[OnStep]) -> MlpModel:
    retain_x, retain_y = bundle.retain_prime_set()
    trace = trace if trace is not None else PhaseTrace(method=cfg.method)
    runner = PhaseRunner(model, cfg, trace, trainable=trainable, on_step=on_step)
    runner.run("recover_only", None, Phase("recover", retain_x, retain_y,
                                           _recover_objective(model.feature_layer_index)))
    log_unlearn(f"{cfg.method} finished", method=cfg.method, seed=cfg.seed,
                extra_context={"steps": runner.step}, dedupe=False)
    return model


def finetune(model: MlpModel, bundle: DataBundle, cfg: UnlearnConfig,
             trace: Optional[PhaseTrace] = None, on_step: Optional[OnStep] = None) -> MlpModel:
    """FT: cross-entropy SGD on D_r'."""
    _expect(cfg, "ft")
    return _recover_only(model.copy(), bundle, cfg, None, trace, on_step)


def neggrad(model: MlpModel, bundle: DataBundle, cfg: UnlearnConfig,
            trace: Optional[PhaseTrace] = None, on_step: Optional[OnStep] = None) -> MlpModel:
    """Gradient ascent on the forget-set cross-entropy."""
    _expect(cfg, "neggrad")
    unlearned = model.copy()
    forget_x, forget_y = bundle.forget_set()
    trace = trace if trace is not None else PhaseTrace(method=cfg.method)
    runner = PhaseRunner(unlearned, cfg, trace, on_step=on_step)
    runner.run("forget_only", Phase("forget", forget_x, forget_y,
                                    _ascent_objective(unlearned.feature_layer_index)), None)
    log_unlearn("neggrad finished", method=cfg.method, seed=cfg.seed,
                extra_context={"steps": runner.step}, dedupe=False)
    return unlearned


def neggrad_ft(model: MlpModel, bundle: DataBundle, cfg: UnlearnConfig,
               trace: Optional[PhaseTrace] = None, on_step: Optional[OnStep] = None) -> MlpModel:
    """Epoch-wise alternation of ascent on D_f and descent on D_r'."""
    _expect(cfg, "neggrad_ft")
    unlearned = model.copy()
    fli = unlearned.feature_layer_index
    forget_x, forget_y = bundle.forget_set()
    retain_x, retain_y = bundle.retain_prime_set()
    trace = trace if trace is not None else PhaseTrace(method=cfg.method)
    runner = PhaseRunner(unlearned, cfg, trace, on_step=on_step)
    runner.run(cfg.schedule,
               Phase("forget", forget_x, forget_y, _ascent_objective(fli)),
               Phase("recover", retain_x, retain_y, _recover_objective(fli)))
    log_unlearn(f"neggrad_ft finished ({cfg.schedule})", method=cfg.method, seed=cfg.seed,
                extra_context={"steps": runner.step}, dedupe=False)
    return unlearned


def cf_k(model: MlpModel, bundle: DataBundle, cfg: UnlearnConfig,
         trace: Optional[PhaseTrace] = None, on_step: Optional[OnStep] = None) -> MlpModel:
    """Catastrophic forgetting: finetune only the last k layers on D_r'."""
    _expect(cfg, "cf_k")
    return _recover_only(model.copy(), bundle, cfg, last_k_mask(model, cfg.k_layers), trace, on_step)


def reinit_last_k(model: MlpModel, k: int, seed: int) -> MlpModel:
    """Copy of ``model`` whose last k layers are replaced by a fresh seeded init draw."""
    _check_k_layers(model, k)
    fresh = init_mlp(model.layer_dims, seed, activation=model.activation)
    out = model.copy()
    for i in range(model.num_layers - k, model.num_layers):
        out.weights[i] = fresh.weights[i].copy()
        out.biases[i] = fresh.biases[i].copy()
    return out


def eu_k(model: MlpModel, bundle: DataBundle, cfg: UnlearnConfig,
         trace: Optional[PhaseTrace] = None, on_step: Optional[OnStep] = None) -> MlpModel:
    """Exact unlearning of the last k layers: reinitialise them, then train them on D_r'."""
    _expect(cfg, "eu_k")
    reset = reinit_last_k(model, cfg.k_layers, cfg.seed)
    return _recover_only(reset, bundle, cfg, last_k_mask(model, cfg.k_layers), trace, on_step)


def ft_classifier_only(model: MlpModel, bundle: DataBundle, cfg: UnlearnConfig,
                       trace: Optional[PhaseTrace] = None, on_step: Optional[OnStep] = None) -> MlpModel:
    """Finetune only the linear head on D_r'; the feature extractor stays bit-identical."""
    _expect(cfg, "ft_classifier_only")
    return _recover_only(model.copy(), bundle, cfg, last_k_mask(model, 1), trace, on_step)


def retrain_oracle(bundle: DataBundle, train_cfg: TrainConfig, seed: int) -> MlpModel:
    """theta_r: fresh seeded model trained on the full retain set only."""
    retain_x, retain_y = bundle.retain_set()
    return fit(retain_x, retain_y, bundle.num_classes, train_cfg, seed, label="retrained")


_BASELINES = {
    "ft": finetune,
    "neggrad": neggrad,
    "neggrad_ft": neggrad_ft,
    "eu_k": eu_k,
    "cf_k": cf_k,
    "ft_classifier_only": ft_classifier_only,
}


def run_method(model: MlpModel, bundle: DataBundle, cfg: UnlearnConfig,
               train_cfg: Optional[TrainConfig] = None,
               on_step: Optional[OnStep] = None) -> Tuple[MlpModel, PhaseTrace]:
    """Dispatch on ``cfg.method``; returns the unlearned model and its trace."""
    if cfg.method in MUDA_METHODS:
        return muda_unlearn(model, bundle, cfg, on_step=on_step)
    if cfg.method == "retrain":
        return retrain_oracle(bundle, train_cfg or TrainConfig(), cfg.seed), PhaseTrace(method="retrain")
    trace = PhaseTrace(method=cfg.method)
    return _BASELINES[cfg.method](model, bundle, cfg, trace=trace, on_step=on_step), trace


def with_seed(cfg: UnlearnConfig, seed: int) -> UnlearnConfig:
    return replace(cfg, seed=int(seed))
