from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Optional, Tuple

import numpy as np

from ..errors import AuditViolation, DataError
from ..fileio import atomic_write_csv, format_float

FORGET_MODES = ("class", "subclass", "poisoned")


@dataclass(frozen=True)
class ForgetSpec:
    """Which training samples form the forget set."""

    mode: str
    target: Optional[int] = None

    def __post_init__(self):
        if self.mode not in FORGET_MODES:
            raise DataError(f"unknown forget mode '{self.mode}', expected one of {FORGET_MODES}")
        if self.mode in ("class", "subclass") and self.target is None:
            raise DataError(f"forget mode '{self.mode}' needs a target id")

    @property
    def forget_class(self) -> Optional[int]:
        """Output class removed by unlearning; only class mode has one."""
        return self.target if self.mode == "class" else None


@dataclass(frozen=True)
class BackdoorInfo:
    trigger_dims: Tuple[int, ...]
    trigger_value: float
    target_label: int


@dataclass(frozen=True)
class ConfusionInfo:
    source_class: int
    target_class: int


@dataclass
class DataBundle:
    """
    Labeled train/test data plus forget/retain partitions of the train split.

    Training and unlearning code reads partitions through the accessor methods,
    which count every read in ``audit``; evaluation code reads the arrays
    directly.
    """

    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    num_classes: int
    train_sub: Optional[np.ndarray] = None
    test_sub: Optional[np.ndarray] = None
    subclass_to_class: Optional[np.ndarray] = None
    train_poison: Optional[np.ndarray] = None
    forget_idx: Optional[np.ndarray] = None
    retain_idx: Optional[np.ndarray] = None
    retain_prime_idx: Optional[np.ndarray] = None
    forget_spec: Optional[ForgetSpec] = None
    triggered_test_x: Optional[np.ndarray] = None
    triggered_test_y: Optional[np.ndarray] = None
    backdoor: Optional[BackdoorInfo] = None
    confusion: Optional[ConfusionInfo] = None
    audit: Counter = field(default_factory=Counter)

    @property
    def dim(self) -> int:
        return int(self.train_x.shape[1])

    @property
    def n_train(self) -> int:
        return int(self.train_x.shape[0])

    @property
    def num_subclasses(self) -> int:
        return 0 if self.subclass_to_class is None else int(self.subclass_to_class.shape[0])

    @property
    def has_partitions(self) -> bool:
        return self.forget_idx is not None and self.retain_idx is not None

    def with_fresh_audit(self) -> "DataBundle":
        return replace(self, audit=Counter())

    # --- audited accessors -------------------------------------------------

    def train_set(self) -> Tuple[np.ndarray, np.ndarray]:
        self.audit["train"] += 1
        return self.train_x, self.train_y

    def forget_set(self) -> Tuple[np.ndarray, np.ndarray]:
        self._require_partitions()
        self.audit["forget"] += 1
        return self.train_x[self.forget_idx], self.train_y[self.forget_idx]

    def retain_set(self) -> Tuple[np.ndarray, np.ndarray]:
        self._require_partitions()
        self.audit["retain"] += 1
        return self.train_x[self.retain_idx], self.train_y[self.retain_idx]

    def retain_prime_set(self) -> Tuple[np.ndarray, np.ndarray]:
        self._require_partitions()
        self.audit["retain_prime"] += 1
        return self.train_x[self.retain_prime_idx], self.train_y[self.retain_prime_idx]

    def assert_no_full_retain_access(self, who: str) -> None:
        if self.audit["retain"] or self.audit["train"]:
            raise AuditViolation(f"{who} read data outside D_f and D_r' ({dict(self.audit)})")

    def _require_partitions(self) -> None:
        if not self.has_partitions:
            raise DataError("bundle has no forget/retain partitions")

    # --- invariants --------------------------------------------------------

    def validate(self) -> None:
        if self.train_x.shape[0] != self.train_y.shape[0] or self.test_x.shape[0] != self.test_y.shape[0]:
            raise DataError("feature and label counts differ")
        if self.subclass_to_class is not None:
            # relabelled (poisoned) train samples keep their original subclass
            clean = np.ones(self.n_train, dtype=bool) if self.train_poison is None else ~self.train_poison
            checks = ((self.train_sub, self.train_y, clean),
                      (self.test_sub, self.test_y, np.ones(self.test_y.shape[0], dtype=bool)))
            for sub, labels, keep in checks:
                if sub is not None and not np.array_equal(self.subclass_to_class[sub[keep]], labels[keep]):
                    raise DataError("subclass labels do not refine class labels")
        if self.has_partitions:
            forget = set(self.forget_idx.tolist())
            retain = set(self.retain_idx.tolist())
            if forget & retain:
                raise DataError("forget and retain overlap")
            if forget | retain != set(range(self.n_train)):
                raise DataError("forget and retain do not cover the train split")
            if self.retain_prime_idx is not None:
                prime = set(self.retain_prime_idx.tolist())
                if not prime <= retain:
                    raise DataError("retain_prime is not a subset of retain")
                if len(prime) != min(len(forget), len(retain)):
                    raise DataError("retain_prime size differs from forget size")

    # --- export ------------------------------------------------------------

    def partition_labels(self) -> np.ndarray:
        labels = np.array(["none"] * self.n_train, dtype=object)
        if self.has_partitions:
            labels[self.retain_idx] = "retain"
            if self.retain_prime_idx is not None:
                labels[self.retain_prime_idx] = "retain_prime"
            labels[self.forget_idx] = "forget"
        return labels

    def dump_csv(self, path: str) -> None:
        """One row per sample: features, class, subclass, split, partition, poisoned."""
        header = [f"x_{j}" for j in range(self.dim)] + ["class", "subclass", "split", "partition", "poisoned"]
        partitions = self.partition_labels()
        rows = []
        for split, x, y, sub in (("train", self.train_x, self.train_y, self.train_sub),
                                 ("test", self.test_x, self.test_y, self.test_sub)):
            for i in range(x.shape[0]):
                poisoned = 0
                partition = "none"
                if split == "train":
                    partition = partitions[i]
                    if self.train_poison is not None:
                        poisoned = int(self.train_poison[i])
                rows.append([format_float(v) for v in x[i]] + [
                    int(y[i]), "" if sub is None else int(sub[i]), split, partition, poisoned,
                ])
        atomic_write_csv(path, header, rows)
