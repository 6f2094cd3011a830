"""Core identifier and schema types shared by every plane.

Samples live in a conceptual two-dimensional table per epoch: rows are
globally indexed samples, columns are named per-task fields, and each cell
holds an opaque byte payload. The types here carry no behavior beyond
validation; planes exchange them by value.
"""

from __future__ import annotations

from dataclasses import dataclass, field

# Rows are dense non-negative integers 0..G-1 within one epoch.
GlobalIndex = int

# Columns are short stable names such as "prompt" or "response".
ColumnId = str

# Cells are opaque bytes; no plane interprets payload contents.
CellValue = bytes

# Monotone counter of completed trainer optimization steps.
WeightVersion = int


@dataclass(frozen=True, slots=True)
class ConsumerGroupId:
    """Identity of one data-parallel consumer group within a task."""

    task: str
    index: int

    def __post_init__(self) -> None:
        if not self.task:
            raise ValueError("consumer group task name must be non-empty")
        if self.index < 0:
            raise ValueError("consumer group index must be non-negative")

    def __str__(self) -> str:
        return f"{self.task}/{self.index}"


@dataclass(frozen=True)
class TaskSpec:
    """Declares which columns a task reads and which it writes.

    A row becomes ready for the task once every input column is written;
    the task may only write back to its declared output columns.
    """

    name: str
    input_columns: tuple[ColumnId, ...]
    output_columns: tuple[ColumnId, ...] = ()

    def __post_init__(self) -> None:
        if not self.name:
            raise ValueError("task name must be non-empty")
        if not self.input_columns:
            raise ValueError(f"task {self.name!r} declares no input columns")
        if len(set(self.input_columns)) != len(self.input_columns):
            raise ValueError(f"task {self.name!r} repeats an input column")
        if len(set(self.output_columns)) != len(self.output_columns):
            raise ValueError(f"task {self.name!r} repeats an output column")
        overlap = set(self.input_columns) & set(self.output_columns)
        if overlap:
            raise ValueError(
                f"task {self.name!r} uses {sorted(overlap)} as both input and output"
            )


@dataclass(frozen=True, slots=True)
class StalenessBound:
    """Maximum admissible trainer-version lead over a sample's version.

    A bound of 0 forces on-policy consumption; a bound of s allows samples
    generated up to s optimization steps behind the current weights.
    """

    max_lag: int

    def __post_init__(self) -> None:
        if self.max_lag < 0:
            raise ValueError("staleness bound must be non-negative")

    def admits(self, trainer_version: WeightVersion, sample_version: WeightVersion) -> bool:
        return trainer_version - sample_version <= self.max_lag


@dataclass(frozen=True, slots=True)
class CellCoord:
    """Address of one cell within an epoch's table."""

    row: GlobalIndex
    column: ColumnId


@dataclass(frozen=True)
class EpochSchema:
    """Row count and column universe for one epoch's table."""

    epoch: int
    total_rows: int
    columns: tuple[ColumnId, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        if self.epoch < 1:
            raise ValueError("epoch numbers start at 1")
        if self.total_rows < 0:
            raise ValueError("total_rows must be non-negative")
        if len(set(self.columns)) != len(self.columns):
            raise ValueError("epoch schema repeats a column")
