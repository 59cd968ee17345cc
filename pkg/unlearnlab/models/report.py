import json
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional

import numpy as np

from ..errors import CorruptPayload, MetricsError
from ..fileio import atomic_write_csv, atomic_write_json, format_float

ORIGINAL = "original"
RETRAINED = "retrained"

METRIC_FIELDS = ["da", "lp_forget", "lp_retain", "lp_sub", "f1", "nmi",
                 "acc_forget", "acc_retain", "mia", "asr"]
EXTRA_FIELDS = ["mia_soft", "acc_test", "acc_confuse"]
ALL_FIELDS = METRIC_FIELDS + EXTRA_FIELDS
# Spalten für die Gewinner-Markierung (kleinste Abweichung zum Retrained-Modell)
WINNER_FIELDS = ["da", "lp_forget", "lp_retain", "lp_sub", "f1", "nmi", "mia", "asr", "acc_test", "acc_confuse"]

COLUMNS = (["method", "seed"] + METRIC_FIELDS + [f"diff_{f}" for f in METRIC_FIELDS]
           + EXTRA_FIELDS + [f"diff_{f}" for f in EXTRA_FIELDS] + ["winners"])

TIE_TOL = 1e-12


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return format_float(value)
    return str(value)


@dataclass
class MetricsReport:
    """One evaluated model: every bounded metric in [0, 1], diffs vs the retrained model."""

    method: str
    seed: int
    da: Optional[float] = None
    lp_forget: Optional[float] = None
    lp_retain: Optional[float] = None
    lp_sub: Optional[float] = None
    f1: Optional[float] = None
    nmi: Optional[float] = None
    acc_forget: Optional[float] = None
    acc_retain: Optional[float] = None
    mia: Optional[float] = None
    asr: Optional[float] = None
    mia_soft: Optional[float] = None
    acc_test: Optional[float] = None
    acc_confuse: Optional[float] = None
    diffs: Dict[str, float] = field(default_factory=dict)
    winners: List[str] = field(default_factory=list)
    failed: bool = False
    error: Optional[str] = None

    @classmethod
    def empty(cls, method: str, seed: int, error: str) -> "MetricsReport":
        """Row for a method that failed; every metric left blank."""
        return cls(method=method, seed=seed, failed=True, error=error)

    def value(self, name: str) -> Optional[float]:
        return getattr(self, name)

    def validate(self) -> None:
        for name in ALL_FIELDS:
            v = self.value(name)
            if v is not None and not (0.0 <= v <= 1.0 and np.isfinite(v)):
                raise MetricsError(f"{self.method}/{self.seed}: {name}={v} outside [0, 1]")
        for name, d in self.diffs.items():
            if not (d >= 0.0 and np.isfinite(d)):
                raise MetricsError(f"{self.method}/{self.seed}: diff_{name}={d} is not a finite |difference|")

    def with_diffs(self, reference: "MetricsReport") -> "MetricsReport":
        diffs = {}
        for name in ALL_FIELDS:
            mine, ref = self.value(name), reference.value(name)
            if mine is not None and ref is not None:
                diffs[name] = abs(mine - ref)
        return replace(self, diffs=diffs)

    def to_row(self) -> List[str]:
        row = [self.method, str(self.seed)]
        row += [_cell(self.value(f)) for f in METRIC_FIELDS]
        row += [_cell(self.diffs.get(f)) for f in METRIC_FIELDS]
        row += [_cell(self.value(f)) for f in EXTRA_FIELDS]
        row += [_cell(self.diffs.get(f)) for f in EXTRA_FIELDS]
        row.append(";".join(self.winners))
        return row

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> "MetricsReport":
        try:
            report = cls(**payload)
        except TypeError as e:
            raise CorruptPayload(f"malformed report row: {e}") from e
        report.validate()
        return report


@dataclass
class ComparisonTable:
    """
    Rows per (method, seed), ordered Original, Retrained, then the unlearning
    methods in configuration order.
    """

    rows: List[MetricsReport] = field(default_factory=list)
    method_order: List[str] = field(default_factory=list)

    def add(self, report: MetricsReport) -> None:
        if report.method not in self.method_order:
            self.method_order.append(report.method)
        self.rows.append(report)

    def extend(self, reports: List[MetricsReport]) -> None:
        for report in reports:
            self.add(report)

    @property
    def methods(self) -> List[str]:
        fixed = [m for m in (ORIGINAL, RETRAINED) if m in self.method_order]
        return fixed + [m for m in self.method_order if m not in (ORIGINAL, RETRAINED)]

    @property
    def seeds(self) -> List[int]:
        return sorted({r.seed for r in self.rows})

    def row(self, method: str, seed: int) -> Optional[MetricsReport]:
        for r in self.rows:
            if r.method == method and r.seed == seed:
                return r
        return None

    def rows_for(self, method: str) -> List[MetricsReport]:
        return sorted((r for r in self.rows if r.method == method), key=lambda r: r.seed)

    def ordered_rows(self) -> List[MetricsReport]:
        return [r for m in self.methods for r in self.rows_for(m)]

    def mean(self, method: str) -> Dict[str, Optional[float]]:
        """Per-field mean over the successful seeds; diffs are averaged as diff_<field>."""
        ok = [r for r in self.rows_for(method) if not r.failed]
        means: Dict[str, Optional[float]] = {}
        for name in ALL_FIELDS:
            values = [r.value(name) for r in ok if r.value(name) is not None]
            means[name] = float(np.mean(values)) if values else None
            diffs = [r.diffs[name] for r in ok if name in r.diffs]
            means[f"diff_{name}"] = float(np.mean(diffs)) if diffs else None
        return means

    def candidates(self) -> List[str]:
        return [m for m in self.methods if m not in (ORIGINAL, RETRAINED)]

    def winners(self) -> Dict[str, List[str]]:
        """Per metric, the methods whose mean |diff| is smallest; ties share the flag."""
        result: Dict[str, List[str]] = {}
        means = {m: self.mean(m) for m in self.candidates()}
        for name in WINNER_FIELDS:
            scored = {m: v[f"diff_{name}"] for m, v in means.items() if v[f"diff_{name}"] is not None}
            if not scored:
                continue
            best = min(scored.values())
            result[name] = [m for m, d in scored.items() if d <= best + TIE_TOL]
        return result

    def mark_row_winners(self) -> None:
        """Per seed and metric, flag the unlearning rows with the smallest |diff|."""
        candidates = set(self.candidates())
        for seed in self.seeds:
            rows = [r for r in self.rows if r.seed == seed and r.method in candidates and not r.failed]
            for r in rows:
                r.winners = []
            for name in WINNER_FIELDS:
                scored = [(r.diffs[name], r) for r in rows if name in r.diffs]
                if not scored:
                    continue
                best = min(d for d, _ in scored)
                for d, r in scored:
                    if d <= best + TIE_TOL:
                        r.winners.append(name)

    # --- export --------------------------------------------------------------

    def csv_rows(self) -> List[List[str]]:
        out = []
        for method in self.methods:
            rows = self.rows_for(method)
            out.extend(r.to_row() for r in rows)
            if len(rows) > 1:
                means = self.mean(method)
                row = [method, "mean"]
                row += [_cell(means[f]) for f in METRIC_FIELDS]
                row += [_cell(means[f"diff_{f}"]) for f in METRIC_FIELDS]
                row += [_cell(means[f]) for f in EXTRA_FIELDS]
                row += [_cell(means[f"diff_{f}"]) for f in EXTRA_FIELDS]
                row.append(";".join(n for n, ms in self.winners().items() if method in ms))
                out.append(row)
        return out

    def save_csv(self, path: str) -> None:
        atomic_write_csv(path, COLUMNS, self.csv_rows())

    def to_dict(self) -> dict:
        return {
            "columns": COLUMNS,
            "methods": {
                method: {
                    "seeds": {str(r.seed): r.to_dict() for r in self.rows_for(method)},
                    "mean": self.mean(method),
                }
                for method in self.methods
            },
            "winners": self.winners(),
        }

    def save_json(self, path: str) -> None:
        atomic_write_json(path, self.to_dict())

    @classmethod
    def from_dict(cls, payload: dict) -> "ComparisonTable":
        try:
            table = cls()
            for method, entry in payload["methods"].items():
                for row in entry["seeds"].values():
                    table.add(MetricsReport.from_dict(row))
                if method not in table.method_order:
                    table.method_order.append(method)
            return table
        except (KeyError, AttributeError, TypeError) as e:
            raise CorruptPayload(f"malformed table document: {e}") from e

    @classmethod
    def load_json(cls, path: str) -> "ComparisonTable":
        with open(path, "r", encoding="utf-8") as f:
            try:
                payload = json.load(f)
            except json.JSONDecodeError as e:
                raise CorruptPayload(f"table is not valid JSON: {e}") from e
        return cls.from_dict(payload)
