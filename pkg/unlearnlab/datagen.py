"""
Deterministic synthetic datasets and forget/retain partitioning.

Every function is a pure function of its arguments and seed; bundles are
never modified in place.
"""

import logging
from collections import Counter
from dataclasses import replace
from typing import Sequence

import numpy as np

from unlearnlab import config
from unlearnlab.errors import (
    DimOutOfRange,
    EmptyForgetSet,
    InvalidCounts,
    InvalidFraction,
    TargetMissing,
)
from unlearnlab.models.data_bundle import BackdoorInfo, ConfusionInfo, DataBundle, ForgetSpec
from unlearnlab.unified_logger import log_data

logger = logging.getLogger(__name__)

# Unterströme pro Seed, damit Daten, D_r' und Poisoning unabhängig ziehen
_STREAM_RETAIN_PRIME = 2
_STREAM_BACKDOOR = 3
_STREAM_CONFUSION = 4


def _stream(seed: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), tag]))


def gen_blobs(num_classes: int = config.DEFAULT_NUM_CLASSES,
              subclasses_per_class: int = config.DEFAULT_SUBCLASSES_PER_CLASS,
              dim: int = config.DEFAULT_DIM,
              n_per_subclass: int = config.DEFAULT_N_PER_SUBCLASS,
              spread: float = config.DEFAULT_SPREAD,
              seed: int = 0) -> DataBundle:
    """
    Gaussian blobs with a two-level class/subclass hierarchy.

    One mean per subclass is drawn from N(0, I); samples are mean + spread * N(0, I).
    Subclass ``s`` belongs to class ``s // subclasses_per_class``. Each subclass
    is split 80/20 into train and test.
    """
    for name, value in (("num_classes", num_classes), ("subclasses_per_class", subclasses_per_class),
                        ("dim", dim), ("n_per_subclass", n_per_subclass)):
        if int(value) < 1:
            raise InvalidCounts(f"{name} must be >= 1, got {value}")
    if not spread > 0.0:
        raise InvalidCounts(f"spread must be > 0, got {spread}")

    rng = np.random.default_rng(seed)
    num_subclasses = num_classes * subclasses_per_class
    subclass_to_class = np.repeat(np.arange(num_classes, dtype=np.int64), subclasses_per_class)
    means = rng.normal(0.0, 1.0, size=(num_subclasses, dim))

    n_train_each = min(max(int(round(config.TRAIN_FRACTION * n_per_subclass)), 1), n_per_subclass)
    train_x, train_sub, test_x, test_sub = [], [], [], []
    for s in range(num_subclasses):
        samples = means[s] + spread * rng.normal(0.0, 1.0, size=(n_per_subclass, dim))
        order = rng.permutation(n_per_subclass)
        train_x.append(samples[order[:n_train_each]])
        test_x.append(samples[order[n_train_each:]])
        train_sub.append(np.full(n_train_each, s, dtype=np.int64))
        test_sub.append(np.full(n_per_subclass - n_train_each, s, dtype=np.int64))

    tr_x, tr_sub = np.concatenate(train_x), np.concatenate(train_sub)
    te_x, te_sub = np.concatenate(test_x), np.concatenate(test_sub)
    shuffle = rng.permutation(tr_x.shape[0])
    tr_x, tr_sub = tr_x[shuffle], tr_sub[shuffle]

    bundle = DataBundle(
        train_x=tr_x,
        train_y=subclass_to_class[tr_sub],
        test_x=te_x,
        test_y=subclass_to_class[te_sub],
        num_classes=num_classes,
        train_sub=tr_sub,
        test_sub=te_sub,
        subclass_to_class=subclass_to_class,
    )
    bundle.validate()
    log_data(f"Generated blobs: {num_classes} classes x {subclasses_per_class} subclasses", seed=seed,
             extra_context={"train": bundle.n_train, "test": int(te_x.shape[0]), "dim": dim})
    return bundle


def forget_mask(bundle: DataBundle, spec: ForgetSpec) -> np.ndarray:
    """Boolean mask over the train split selecting the samples ``spec`` names."""
    if spec.mode == "class":
        if not 0 <= spec.target < bundle.num_classes:
            raise TargetMissing(f"class {spec.target} not in [0, {bundle.num_classes})")
        return bundle.train_y == spec.target
    if spec.mode == "subclass":
        if bundle.train_sub is None or not 0 <= spec.target < bundle.num_subclasses:
            raise TargetMissing(f"subclass {spec.target} not present")
        return bundle.train_sub == spec.target
    if bundle.train_poison is None:
        raise TargetMissing("bundle carries no poison flags")
    return bundle.train_poison.copy()


def forget_test_mask(bundle: DataBundle, spec: ForgetSpec) -> np.ndarray:
    """Test samples matching a class/subclass spec (the LP(D_f) evaluation set)."""
    if spec.mode == "class":
        return bundle.test_y == spec.target
    if spec.mode == "subclass" and bundle.test_sub is not None:
        return bundle.test_sub == spec.target
    return np.zeros(bundle.test_y.shape[0], dtype=bool)


def split_forget_retain(bundle: DataBundle, spec: ForgetSpec, seed: int) -> DataBundle:
    """
    Partition the train split into D_f (samples matching ``spec``) and D_r.

    D_r' is drawn uniformly without replacement from D_r with size
    min(|D_f|, |D_r|) and stays fixed for the whole unlearning run.
    """
    mask = forget_mask(bundle, spec)
    forget_idx = np.flatnonzero(mask)
    if forget_idx.size == 0:
        raise EmptyForgetSet(f"no train sample matches {spec}")
    retain_idx = np.flatnonzero(~mask)

    size = min(forget_idx.size, retain_idx.size)
    if size < forget_idx.size:
        logger.warning(f"retain set smaller than forget set ({retain_idx.size} < {forget_idx.size})")
    rng = _stream(seed, _STREAM_RETAIN_PRIME)
    retain_prime_idx = np.sort(rng.choice(retain_idx, size=size, replace=False))

    partitioned = replace(
        bundle,
        forget_idx=forget_idx,
        retain_idx=retain_idx,
        retain_prime_idx=retain_prime_idx,
        forget_spec=spec,
        audit=Counter(),
    )
    partitioned.validate()
    log_data(f"Partitioned {spec.mode} forget set", seed=seed,
             extra_context={"target": spec.target, "forget": int(forget_idx.size),
                            "retain": int(retain_idx.size), "retain_prime": int(size)})
    return partitioned


def _check_fraction(fraction: float) -> None:
    if not 0.0 < fraction < 1.0:
        raise InvalidFraction(f"fraction must lie in (0, 1), got {fraction}")


def poison_backdoor(bundle: DataBundle,
                    trigger_dims: Sequence[int] = tuple(config.DEFAULT_TRIGGER_DIMS),
                    trigger_value: float = config.DEFAULT_TRIGGER_VALUE,
                    target_label: int = config.DEFAULT_TARGET_LABEL,
                    fraction: float = config.DEFAULT_POISON_FRACTION,
                    seed: int = 0) -> DataBundle:
    """
    Stamp a trigger on round(fraction * n_train) train samples and relabel them.

    Poisoned samples are drawn from train samples whose label is not
    ``target_label``; they become the forget set. A triggered copy of the
    clean test split (target-label samples excluded, true labels kept) is
    stored for attack-success evaluation.
    """
    _check_fraction(fraction)
    dims = np.asarray(list(trigger_dims), dtype=np.int64)
    if dims.size == 0 or dims.min() < 0 or dims.max() >= bundle.dim:
        raise DimOutOfRange(f"trigger dims {list(dims)} outside [0, {bundle.dim})")
    if not 0 <= target_label < bundle.num_classes:
        raise TargetMissing(f"target label {target_label} not in [0, {bundle.num_classes})")

    candidates = np.flatnonzero(bundle.train_y != target_label)
    n_poison = int(round(fraction * bundle.n_train))
    if n_poison < 1 or n_poison > candidates.size:
        raise InvalidFraction(f"cannot poison {n_poison} of {candidates.size} eligible samples")

    rng = _stream(seed, _STREAM_BACKDOOR)
    chosen = np.sort(rng.choice(candidates, size=n_poison, replace=False))

    train_x = bundle.train_x.copy()
    train_y = bundle.train_y.copy()
    train_x[np.ix_(chosen, dims)] = trigger_value
    train_y[chosen] = target_label
    poison = np.zeros(bundle.n_train, dtype=bool)
    poison[chosen] = True

    keep = bundle.test_y != target_label
    triggered_x = bundle.test_x[keep].copy()
    triggered_x[:, dims] = trigger_value

    poisoned = replace(
        bundle,
        train_x=train_x,
        train_y=train_y,
        train_poison=poison,
        triggered_test_x=triggered_x,
        triggered_test_y=bundle.test_y[keep].copy(),
        backdoor=BackdoorInfo(tuple(int(d) for d in dims), float(trigger_value), int(target_label)),
        audit=Counter(),
    )
    log_data(f"Poisoned {n_poison} train samples", seed=seed,
             extra_context={"target_label": target_label, "trigger_dims": list(map(int, dims))})
    return split_forget_retain(poisoned, ForgetSpec(mode="poisoned"), seed)


def confuse_labels(bundle: DataBundle, source_class: int, target_class: int,
                   fraction: float, seed: int) -> DataBundle:
    """
    Relabel a seeded fraction of ``source_class`` train samples as ``target_class``.

    The relabelled samples are flagged and form the forget set.
    """
    _check_fraction(fraction)
    for label in (source_class, target_class):
        if not 0 <= label < bundle.num_classes:
            raise TargetMissing(f"class {label} not in [0, {bundle.num_classes})")
    if source_class == target_class:
        raise InvalidCounts("source and target class must differ")

    candidates = np.flatnonzero(bundle.train_y == source_class)
    n_confused = int(round(fraction * candidates.size))
    if n_confused < 1:
        raise EmptyForgetSet(f"fraction {fraction} of {candidates.size} samples selects nothing")

    rng = _stream(seed, _STREAM_CONFUSION)
    chosen = np.sort(rng.choice(candidates, size=n_confused, replace=False))
    train_y = bundle.train_y.copy()
    train_y[chosen] = target_class
    flags = np.zeros(bundle.n_train, dtype=bool)
    flags[chosen] = True

    confused = replace(
        bundle,
        train_y=train_y,
        train_poison=flags,
        confusion=ConfusionInfo(int(source_class), int(target_class)),
        audit=Counter(),
    )
    log_data(f"Confused {n_confused} samples {source_class} -> {target_class}", seed=seed)
    return split_forget_retain(confused, ForgetSpec(mode="poisoned"), seed)
