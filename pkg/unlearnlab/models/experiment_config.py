import json
import os
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Tuple

from .. import config
from ..errors import ConfigInvalid, LabError
from ..nnet import SgdConfig, TrainConfig
from ..unlearn import METHODS, UnlearnConfig
from .data_bundle import FORGET_MODES, ForgetSpec


@dataclass(frozen=True)
class DataConfig:
    num_classes: int = config.DEFAULT_NUM_CLASSES
    subclasses_per_class: int = config.DEFAULT_SUBCLASSES_PER_CLASS
    dim: int = config.DEFAULT_DIM
    n_per_subclass: int = config.DEFAULT_N_PER_SUBCLASS
    spread: float = config.DEFAULT_SPREAD

    def __post_init__(self):
        if min(self.num_classes, self.subclasses_per_class, self.dim, self.n_per_subclass) < 1:
            raise ConfigInvalid("data counts must be >= 1")
        if self.num_classes < 2:
            raise ConfigInvalid("at least two classes are required")
        if not self.spread > 0.0:
            raise ConfigInvalid("spread must be > 0")


@dataclass(frozen=True)
class ForgetConfig:
    """Forget-set selection; a class target of None rotates over classes by seed."""

    mode: str = "class"
    target: Optional[int] = None

    def spec_for(self, seed: int, num_classes: int) -> ForgetSpec:
        if self.mode == "class" and self.target is None:
            return ForgetSpec(mode="class", target=int(seed) % num_classes)
        return ForgetSpec(mode=self.mode, target=self.target)


@dataclass(frozen=True)
class BackdoorConfig:
    trigger_dims: Tuple[int, ...] = tuple(config.DEFAULT_TRIGGER_DIMS)
    trigger_value: float = config.DEFAULT_TRIGGER_VALUE
    target_label: int = config.DEFAULT_TARGET_LABEL
    fraction: float = config.DEFAULT_POISON_FRACTION


@dataclass(frozen=True)
class ConfusionConfig:
    source_class: int = 0
    target_class: int = 1
    fraction: float = 0.5


@dataclass(frozen=True)
class StabilityConfig:
    multipliers: Tuple[int, ...] = tuple(config.STABILITY_MULTIPLIERS)
    sample_every: int = config.STABILITY_SAMPLE_EVERY
    methods: Tuple[str, ...] = ("muda", "neggrad")


def default_methods() -> List[UnlearnConfig]:
    return [
        UnlearnConfig(method=m, sgd=SgdConfig(learning_rate=config.DEFAULT_METHOD_LEARNING_RATES[m]))
        for m in config.DEFAULT_METHODS
    ]


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one experiment run needs; loaded from a JSON document."""

    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    forget: ForgetConfig = field(default_factory=ForgetConfig)
    methods: Tuple[UnlearnConfig, ...] = field(default_factory=lambda: tuple(default_methods()))
    seeds: Tuple[int, ...] = tuple(config.DEFAULT_SEEDS)
    output_dir: str = config.DEFAULT_OUTPUT_DIR
    emit_features: bool = False
    run_backdoor: bool = False
    run_stability: bool = False
    jobs: int = 1
    backdoor: BackdoorConfig = field(default_factory=BackdoorConfig)
    confusion: ConfusionConfig = field(default_factory=ConfusionConfig)
    stability: StabilityConfig = field(default_factory=StabilityConfig)

    def __post_init__(self):
        if not self.seeds:
            raise ConfigInvalid("at least one seed is required")
        if not self.methods:
            raise ConfigInvalid("at least one method is required")
        names = [m.method for m in self.methods]
        if len(set(names)) != len(names):
            raise ConfigInvalid(f"duplicate method entries in {names}")
        if self.jobs < 1:
            raise ConfigInvalid("jobs must be >= 1")
        if self.forget.mode not in FORGET_MODES:
            raise ConfigInvalid(f"unknown forget mode '{self.forget.mode}'")
        if self.forget.mode == "subclass" and self.forget.target is None:
            raise ConfigInvalid("subclass forgetting needs forget.target")
        if self.stability.sample_every < 1 or any(m < 1 for m in self.stability.multipliers):
            raise ConfigInvalid("stability multipliers and sample_every must be >= 1")

    def method(self, name: str) -> UnlearnConfig:
        """Configured entry for ``name``, or its default when it is not listed."""
        for m in self.methods:
            if m.method == name:
                return m
        return UnlearnConfig(method=name, sgd=SgdConfig(
            learning_rate=config.DEFAULT_METHOD_LEARNING_RATES.get(name, config.UNLEARN_LEARNING_RATE)))

    def with_overrides(self, seed: Optional[int] = None, output_dir: Optional[str] = None) -> "ExperimentConfig":
        cfg = self
        if seed is not None:
            cfg = replace(cfg, seeds=(int(seed),))
        if output_dir is not None:
            cfg = replace(cfg, output_dir=output_dir)
        return cfg

    def ensure_output_dir(self) -> str:
        try:
            os.makedirs(self.output_dir, exist_ok=True)
        except OSError as e:
            raise ConfigInvalid(f"output directory {self.output_dir} cannot be created: {e}") from e
        if not os.access(self.output_dir, os.W_OK):
            raise ConfigInvalid(f"output directory {self.output_dir} is not writable")
        return self.output_dir


# --- JSON ------------------------------------------------------------------

_TOP_KEYS = {"data", "train", "forget", "methods", "seeds", "output_dir", "emit_features",
             "run_backdoor", "run_stability", "jobs", "backdoor", "confusion", "stability"}
_TRAIN_KEYS = {"epochs", "batch_size", "learning_rate", "lr_decay", "weight_decay", "momentum", "hidden_dims"}
_METHOD_KEYS = {"method", "alpha", "beta", "learning_rate", "lr_decay", "weight_decay", "momentum",
                "total_iterations", "batch_size", "k_layers", "schedule"}


def _section(payload: Any, name: str, allowed) -> Dict[str, Any]:
    if payload is None:
        return {}
    if not isinstance(payload, dict):
        raise ConfigInvalid(f"'{name}' must be an object")
    unknown = set(payload) - set(allowed)
    if unknown:
        raise ConfigInvalid(f"unknown keys in '{name}': {sorted(unknown)}")
    return payload


def _fields(cls) -> set:
    return set(cls.__dataclass_fields__)


def _method_from_dict(entry: Dict[str, Any]) -> UnlearnConfig:
    entry = _section(entry, "methods[]", _METHOD_KEYS)
    name = entry.get("method")
    if name not in METHODS:
        raise ConfigInvalid(f"unknown method '{name}'")
    sgd = SgdConfig(
        learning_rate=float(entry.get("learning_rate",
                                      config.DEFAULT_METHOD_LEARNING_RATES.get(name, config.UNLEARN_LEARNING_RATE))),
        weight_decay=float(entry.get("weight_decay", 0.0)),
        lr_decay=float(entry.get("lr_decay", 1.0)),
        momentum=float(entry.get("momentum", 0.0)),
    )
    kwargs = {k: entry[k] for k in ("alpha", "beta", "total_iterations", "batch_size", "k_layers", "schedule")
              if k in entry}
    return UnlearnConfig(method=name, sgd=sgd, **kwargs)


def _train_from_dict(entry: Dict[str, Any]) -> TrainConfig:
    entry = _section(entry, "train", _TRAIN_KEYS)
    defaults = TrainConfig()
    sgd = SgdConfig(
        learning_rate=float(entry.get("learning_rate", defaults.sgd.learning_rate)),
        weight_decay=float(entry.get("weight_decay", defaults.sgd.weight_decay)),
        lr_decay=float(entry.get("lr_decay", defaults.sgd.lr_decay)),
        momentum=float(entry.get("momentum", defaults.sgd.momentum)),
    )
    return TrainConfig(
        sgd=sgd,
        epochs=int(entry.get("epochs", defaults.epochs)),
        batch_size=int(entry.get("batch_size", defaults.batch_size)),
        hidden_dims=tuple(int(h) for h in entry.get("hidden_dims", defaults.hidden_dims)),
    )


def config_from_dict(payload: Dict[str, Any]) -> ExperimentConfig:
    """Build an ExperimentConfig; unknown keys and out-of-range values raise ConfigInvalid."""
    payload = _section(payload, "<root>", _TOP_KEYS)
    try:
        kwargs: Dict[str, Any] = {}
        if "data" in payload:
            kwargs["data"] = DataConfig(**_section(payload["data"], "data", _fields(DataConfig)))
        if "train" in payload:
            kwargs["train"] = _train_from_dict(payload["train"])
        if "forget" in payload:
            kwargs["forget"] = ForgetConfig(**_section(payload["forget"], "forget", _fields(ForgetConfig)))
        if "methods" in payload:
            if not isinstance(payload["methods"], list):
                raise ConfigInvalid("'methods' must be a list")
            kwargs["methods"] = tuple(_method_from_dict(m) for m in payload["methods"])
        if "seeds" in payload:
            kwargs["seeds"] = tuple(int(s) for s in payload["seeds"])
        for key in ("output_dir",):
            if key in payload:
                kwargs[key] = str(payload[key])
        for key in ("emit_features", "run_backdoor", "run_stability"):
            if key in payload:
                kwargs[key] = bool(payload[key])
        if "jobs" in payload:
            kwargs["jobs"] = int(payload["jobs"])
        if "backdoor" in payload:
            section = dict(_section(payload["backdoor"], "backdoor", _fields(BackdoorConfig)))
            if "trigger_dims" in section:
                section["trigger_dims"] = tuple(int(d) for d in section["trigger_dims"])
            kwargs["backdoor"] = BackdoorConfig(**section)
        if "confusion" in payload:
            kwargs["confusion"] = ConfusionConfig(**_section(payload["confusion"], "confusion",
                                                             _fields(ConfusionConfig)))
        if "stability" in payload:
            section = dict(_section(payload["stability"], "stability", _fields(StabilityConfig)))
            for key in ("multipliers", "methods"):
                if key in section:
                    section[key] = tuple(section[key])
            kwargs["stability"] = StabilityConfig(**section)
        return ExperimentConfig(**kwargs)
    except ConfigInvalid:
        raise
    except (LabError, TypeError, ValueError) as e:
        raise ConfigInvalid(str(e)) from e


def load_experiment_config(path: Optional[str]) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        with open(path, "r", encoding="utf-8") as f:
            payload = json.load(f)
    except OSError as e:
        raise ConfigInvalid(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigInvalid(f"config {path} is not valid JSON: {e}") from e
    return config_from_dict(payload)


def config_to_dict(cfg: ExperimentConfig) -> Dict[str, Any]:
    """Effective config as a JSON document (output_dir left out so the record is location independent)."""
    return {
        "data": dict(cfg.data.__dict__),
        "train": {
            "epochs": cfg.train.epochs,
            "batch_size": cfg.train.batch_size,
            "learning_rate": cfg.train.sgd.learning_rate,
            "lr_decay": cfg.train.sgd.lr_decay,
            "weight_decay": cfg.train.sgd.weight_decay,
            "momentum": cfg.train.sgd.momentum,
            "hidden_dims": list(cfg.train.hidden_dims),
        },
        "forget": {"mode": cfg.forget.mode, "target": cfg.forget.target},
        "methods": [
            {
                "method": m.method, "alpha": m.alpha, "beta": m.beta,
                "learning_rate": m.sgd.learning_rate, "lr_decay": m.sgd.lr_decay,
                "weight_decay": m.sgd.weight_decay, "momentum": m.sgd.momentum,
                "total_iterations": m.total_iterations, "batch_size": m.batch_size,
                "k_layers": m.k_layers, "schedule": m.schedule,
            }
            for m in cfg.methods
        ],
        "seeds": list(cfg.seeds),
        "emit_features": cfg.emit_features,
        "run_backdoor": cfg.run_backdoor,
        "run_stability": cfg.run_stability,
        "jobs": cfg.jobs,
        "backdoor": {**cfg.backdoor.__dict__, "trigger_dims": list(cfg.backdoor.trigger_dims)},
        "confusion": dict(cfg.confusion.__dict__),
        "stability": {"multipliers": list(cfg.stability.multipliers),
                      "sample_every": cfg.stability.sample_every,
                      "methods": list(cfg.stability.methods)},
    }
