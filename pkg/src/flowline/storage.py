"""Data plane: sharded storage units for the per-epoch sample table.

Each unit owns a deterministic subset of rows (global index modulo the unit
count), stores cell payloads write-once per epoch, and broadcasts a write
notification to every registered controller after each successful put. The
notification carries row indices and column identifiers, not payloads;
controllers turn it into readiness metadata.

Notification delivery is at-least-once and controllers apply it
idempotently, so a transport retry is always safe.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Protocol

from .errors import (
    AlreadyRegistered,
    DuplicateWrite,
    EpochRegression,
    MissingCell,
    NotOwnedRow,
)
from .types import CellValue, ColumnId, GlobalIndex

LOGGER = logging.getLogger(__name__)

# A put's coordinates, grouped so each (rows, columns) pair is a full
# rectangle: every listed row was written in every listed column.
NotifyGroup = tuple[tuple[GlobalIndex, ...], tuple[ColumnId, ...]]


class ControllerLink(Protocol):
    """Receiving side of the write-notification broadcast."""

    def apply_notification(
        self, unit_id: int, epoch: int, groups: list[NotifyGroup]
    ) -> None: ...


@dataclass(frozen=True, slots=True)
class PartitionMap:
    """Deterministic row-to-unit assignment: global index modulo unit count."""

    num_units: int

    def __post_init__(self) -> None:
        if self.num_units < 1:
            raise ValueError("num_units must be positive")

    def unit_for(self, row: GlobalIndex) -> int:
        if row < 0:
            raise ValueError("global indices are non-negative")
        return row % self.num_units

    def owned_rows(self, unit_id: int, total_rows: int) -> set[GlobalIndex]:
        if not 0 <= unit_id < self.num_units:
            raise ValueError(f"unit_id {unit_id} outside 0..{self.num_units - 1}")
        return set(range(unit_id, total_rows, self.num_units))


@dataclass(frozen=True, slots=True)
class PutAck:
    count: int


def group_coordinates(
    coords: Iterable[tuple[GlobalIndex, ColumnId]],
) -> list[NotifyGroup]:
    """Group cell coordinates into rectangles of (rows, columns).

    Rows that were written in the same column set share one group, so a
    rectangular put collapses to a single group and the notification
    describes exactly the written cells, never more.
    """
    by_row: dict[GlobalIndex, set[ColumnId]] = {}
    for row, col in coords:
        by_row.setdefault(row, set()).add(col)
    by_colset: dict[tuple[ColumnId, ...], list[GlobalIndex]] = {}
    for row, cols in by_row.items():
        by_colset.setdefault(tuple(sorted(cols)), []).append(row)
    return [
        (tuple(sorted(rows)), cols) for cols, rows in sorted(by_colset.items())
    ]


class StorageUnit:
    """One shard of the sample table, scoped to a single epoch at a time."""

    def __init__(
        self,
        unit_id: int,
        epoch: int,
        owned_rows: Iterable[GlobalIndex],
        resolve_controller: Callable[[str], ControllerLink] | None = None,
        notify_retries: int = 3,
    ) -> None:
        if epoch < 1:
            raise ValueError("epoch numbers start at 1")
        self.unit_id = unit_id
        self.epoch = epoch
        self.owned_rows: set[GlobalIndex] = set(owned_rows)
        self._resolve_controller = resolve_controller
        self._notify_retries = notify_retries
        self._cells: dict[tuple[GlobalIndex, ColumnId], CellValue] = {}
        self._controllers: dict[str, ControllerLink] = {}
        self._lock = threading.Lock()

    def put(self, entries: list[tuple[GlobalIndex, ColumnId, CellValue]]) -> PutAck:
        """Store cells atomically, then broadcast one notification.

        The whole put is validated before anything is stored, so a rejected
        put leaves no partial state behind.
        """
        if not entries:
            return PutAck(0)
        with self._lock:
            seen: set[tuple[GlobalIndex, ColumnId]] = set()
            for row, col, _ in entries:
                if row not in self.owned_rows:
                    raise NotOwnedRow(
                        f"unit {self.unit_id} does not own row {row} in epoch {self.epoch}"
                    )
                key = (row, col)
                if key in self._cells or key in seen:
                    raise DuplicateWrite(
                        f"cell (epoch={self.epoch}, row={row}, column={col!r}) already written"
                    )
                seen.add(key)
            for row, col, value in entries:
                self._cells[(row, col)] = value
            epoch = self.epoch
            targets = list(self._controllers.items())
        groups = group_coordinates((row, col) for row, col, _ in entries)
        # Dispatch outside the cell-mutation critical section so slow
        # controllers never block concurrent reads and writes.
        for endpoint, link in targets:
            self._deliver(endpoint, link, epoch, groups)
        return PutAck(len(entries))

    def _deliver(
        self,
        endpoint: str,
        link: ControllerLink,
        epoch: int,
        groups: list[NotifyGroup],
    ) -> None:
        for attempt in range(1, self._notify_retries + 1):
            try:
                link.apply_notification(self.unit_id, epoch, groups)
                return
            except Exception:
                if attempt == self._notify_retries:
                    LOGGER.exception(
                        "unit %d: dropping notification to %s after %d attempts",
                        self.unit_id,
                        endpoint,
                        attempt,
                    )
                    return

    def get(
        self, rows: list[GlobalIndex], columns: list[ColumnId]
    ) -> list[tuple[GlobalIndex, ColumnId, CellValue]]:
        """Read the requested cells, ordered rows-outer, columns-inner."""
        with self._lock:
            out = []
            for row in rows:
                for col in columns:
                    try:
                        value = self._cells[(row, col)]
                    except KeyError:
                        raise MissingCell(
                            f"cell (epoch={self.epoch}, row={row}, column={col!r}) "
                            f"not written on unit {self.unit_id}"
                        ) from None
                    out.append((row, col, value))
            return out

    def register_controller(
        self, endpoint: str, link: ControllerLink | None = None
    ) -> list[NotifyGroup]:
        """Subscribe a controller and return a snapshot of written cells.

        The snapshot (grouped coordinates of everything already written this
        epoch) lets a late-registering controller catch up without replaying
        individual notifications.
        """
        if link is None:
            if self._resolve_controller is None:
                raise ValueError(
                    f"unit {self.unit_id} has no controller resolver; pass a link"
                )
            link = self._resolve_controller(endpoint)
        with self._lock:
            if endpoint in self._controllers:
                raise AlreadyRegistered(
                    f"controller {endpoint!r} already registered with unit {self.unit_id}"
                )
            self._controllers[endpoint] = link
            return group_coordinates(self._cells.keys())

    def reset_epoch(self, new_epoch: int, owned_rows: Iterable[GlobalIndex]) -> None:
        """Clear all cells and start a fresh epoch with a new row set."""
        with self._lock:
            if new_epoch <= self.epoch:
                raise EpochRegression(
                    f"unit {self.unit_id}: epoch {new_epoch} does not advance {self.epoch}"
                )
            self.epoch = new_epoch
            self.owned_rows = set(owned_rows)
            self._cells.clear()

    def written_coordinates(self) -> list[tuple[GlobalIndex, ColumnId]]:
        with self._lock:
            return sorted(self._cells.keys())

    def cell_count(self) -> int:
        with self._lock:
            return len(self._cells)
