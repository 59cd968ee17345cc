from dataclasses import dataclass, field
from typing import List, Optional

from ..fileio import atomic_write_csv, format_float

TRACE_COLUMNS = ["iteration", "phase", "l_da", "l_sd", "ce", "lr"]


@dataclass(frozen=True)
class PhaseRecord:
    iteration: int
    phase: str
    l_da: Optional[float] = None
    l_sd: Optional[float] = None
    ce: Optional[float] = None
    lr: float = 0.0


@dataclass
class PhaseTrace:
    """Per-iteration record of an unlearning run, one entry per optimizer step."""

    method: str = ""
    records: List[PhaseRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def record(self, iteration: int, phase: str, lr: float, l_da: Optional[float] = None,
               l_sd: Optional[float] = None, ce: Optional[float] = None) -> None:
        self.records.append(PhaseRecord(iteration, phase, l_da, l_sd, ce, lr))

    def phases(self) -> List[str]:
        return [r.phase for r in self.records]

    def phase_blocks(self) -> List[str]:
        """Phase names with consecutive repeats collapsed."""
        blocks: List[str] = []
        for phase in self.phases():
            if not blocks or blocks[-1] != phase:
                blocks.append(phase)
        return blocks

    def to_rows(self) -> List[list]:
        def cell(v):
            return "" if v is None else format_float(v)
        return [[r.iteration, r.phase, cell(r.l_da), cell(r.l_sd), cell(r.ce), format_float(r.lr)]
                for r in self.records]

    def save_csv(self, path: str) -> None:
        atomic_write_csv(path, TRACE_COLUMNS, self.to_rows())
