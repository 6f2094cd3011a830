"""Control plane: per-task scheduling over readiness metadata.

A controller never touches payload bytes. It tracks, per epoch, which rows
have every input column written (via storage notifications), which rows
each consumer group already took, and it packs micro-batches on demand.
The voucher it issues (BatchMeta) tells the consumer exactly which storage
units hold the selected rows.

Controllers for different tasks are fully independent objects; nothing
here is shared between tasks.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

from .errors import BadCoordinate, EpochRegression, WrongTask
from .storage import NotifyGroup
from .types import ColumnId, ConsumerGroupId, GlobalIndex, TaskSpec


@dataclass(frozen=True, slots=True)
class PackingPolicy:
    """How ready rows are selected into a micro-batch.

    ``token_counts`` carries per-row token counts and must be present
    exactly when ``kind`` is token_balanced.
    """

    kind: str = "fifo"
    token_counts: dict[GlobalIndex, int] | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("fifo", "token_balanced"):
            raise ValueError(f"unknown packing policy {self.kind!r}")
        if (self.kind == "token_balanced") != (self.token_counts is not None):
            raise ValueError("token_counts present iff kind is token_balanced")


@dataclass(frozen=True)
class BatchMeta:
    """Controller-issued voucher a consumer redeems against storage units."""

    epoch: int
    task_name: str
    rows: tuple[GlobalIndex, ...]
    columns: tuple[ColumnId, ...]
    locations: dict[GlobalIndex, int]
    issued_to: ConsumerGroupId


class NotReady:
    """Non-blocking reply: not enough ready rows yet, more may arrive."""

    __slots__ = ()

    def __repr__(self) -> str:
        return "NotReady"


class EpochExhausted:
    """Terminal reply: every row of the epoch has been consumed."""

    __slots__ = ()

    def __repr__(self) -> str:
        return "EpochExhausted"


NOT_READY = NotReady()
EPOCH_EXHAUSTED = EpochExhausted()

BatchReply = BatchMeta | NotReady | EpochExhausted


def pack_batch(
    ready: set[GlobalIndex],
    size: int,
    policy: PackingPolicy,
    *,
    requester_total: int = 0,
    all_totals: tuple[int, ...] = (),
) -> list[GlobalIndex]:
    """Select ``size`` rows from ``ready`` under the given policy.

    fifo picks the smallest global indices in ascending order.

    token_balanced equalizes cumulative token counts across consumers: a
    requester at or below the mean of all consumer totals seeds with the
    largest-token row and then greedily keeps the batch token sum close to
    ``size * mean(ready token counts)``; a requester above the mean takes
    the smallest-token rows instead. Ties always break toward the smaller
    global index, which makes equal-count inputs degenerate to fifo order.
    """
    if len(ready) < size:
        raise ValueError("pack_batch requires len(ready) >= size")
    if policy.kind == "fifo":
        return sorted(ready)[:size]

    counts = policy.token_counts or {}

    def tokens(row: GlobalIndex) -> int:
        return counts.get(row, 0)

    mean_total = sum(all_totals) / len(all_totals) if all_totals else 0.0
    if requester_total > mean_total:
        return sorted(ready, key=lambda r: (tokens(r), r))[:size]

    target = size * sum(tokens(r) for r in ready) / len(ready)
    remaining = set(ready)
    seed = min(remaining, key=lambda r: (-tokens(r), r))
    chosen = [seed]
    remaining.discard(seed)
    total = tokens(seed)
    while len(chosen) < size:
        best = min(remaining, key=lambda r: (abs(total + tokens(r) - target), r))
        chosen.append(best)
        remaining.discard(best)
        total += tokens(best)
    return chosen


@dataclass
class _ConsumerState:
    # Cumulative token total across the task's lifetime; the balancing
    # policy compares requesters against the mean of these.
    token_total: int = 0


class TaskController:
    """Readiness matrix, consumption ledger, and batch packer for one task."""

    def __init__(
        self,
        task: TaskSpec,
        epoch: int,
        total_rows: int,
        default_policy: PackingPolicy | None = None,
    ) -> None:
        if epoch < 1:
            raise ValueError("epoch numbers start at 1")
        if total_rows < 0:
            raise ValueError("total_rows must be non-negative")
        self.task = task
        self.epoch = epoch
        self.total_rows = total_rows
        self.default_policy = default_policy or PackingPolicy()
        self._required: tuple[ColumnId, ...] = task.input_columns
        self._written: dict[GlobalIndex, set[ColumnId]] = {}
        self._location: dict[GlobalIndex, int] = {}
        self._consumed: dict[GlobalIndex, ConsumerGroupId] = {}
        self._ready: set[GlobalIndex] = set()
        self._complete_rows = 0
        self._consumers: dict[ConsumerGroupId, _ConsumerState] = {}
        self.issued: list[BatchMeta] = []
        self._lock = threading.Lock()

    # ------------------------------------------------------------------
    # notification side

    def apply_notification(
        self, unit_id: int, epoch: int, groups: list[NotifyGroup]
    ) -> None:
        """Storage-facing entry point; drops stale cross-epoch deliveries."""
        if epoch != self.epoch:
            return
        for rows, columns in groups:
            self.on_notify(unit_id, rows, columns)

    def on_notify(
        self,
        unit_id: int,
        rows: tuple[GlobalIndex, ...] | list[GlobalIndex] | set[GlobalIndex],
        columns: tuple[ColumnId, ...] | list[ColumnId] | set[ColumnId],
    ) -> None:
        """Mark every (row, column) pair ready; idempotent by construction.

        Columns outside the task's inputs are ignored. Rows outside the
        epoch's range are a hard error: they mean a misconfigured producer.
        """
        relevant = [c for c in columns if c in self._required]
        with self._lock:
            for row in rows:
                if not 0 <= row < self.total_rows:
                    raise BadCoordinate(
                        f"row {row} outside 0..{self.total_rows - 1} "
                        f"(task {self.task.name!r}, epoch {self.epoch})"
                    )
                if not relevant:
                    continue
                have = self._written.get(row)
                if have is None:
                    have = set()
                    self._written[row] = have
                before = len(have)
                have.update(relevant)
                self._location[row] = unit_id
                if (
                    before < len(self._required)
                    and len(have) == len(self._required)
                ):
                    self._complete_rows += 1
                    if row not in self._consumed:
                        self._ready.add(row)

    # ------------------------------------------------------------------
    # scheduling side

    def ready_rows(self) -> set[GlobalIndex]:
        with self._lock:
            return set(self._ready)

    def status_matrix(self) -> dict[tuple[GlobalIndex, ColumnId], int]:
        """Dense 0/1 readiness snapshot over rows x required columns."""
        with self._lock:
            return {
                (row, col): int(col in self._written.get(row, ()))
                for row in range(self.total_rows)
                for col in self._required
            }

    def consumed_rows(self) -> dict[GlobalIndex, ConsumerGroupId]:
        with self._lock:
            return dict(self._consumed)

    def request_batch(
        self,
        consumer: ConsumerGroupId,
        micro_batch_size: int,
        policy: PackingPolicy | None = None,
    ) -> BatchReply:
        """Grant a micro-batch, or say why one cannot be granted yet.

        Selection and consumption marking are atomic, so concurrent
        requesters can never receive overlapping row sets. A batch is
        always full-size except for the final remainder, which is only
        issued once every row of the epoch has been written.
        """
        if consumer.task != self.task.name:
            raise WrongTask(
                f"consumer {consumer} cannot request from task {self.task.name!r}"
            )
        if micro_batch_size < 1:
            raise ValueError("micro_batch_size must be >= 1")
        policy = policy or self.default_policy
        with self._lock:
            state = self._consumers.setdefault(consumer, _ConsumerState())
            if len(self._consumed) == self.total_rows:
                return EPOCH_EXHAUSTED
            size = micro_batch_size
            if len(self._ready) < size:
                if self._complete_rows == self.total_rows and self._ready:
                    size = len(self._ready)
                else:
                    return NOT_READY
            rows = pack_batch(
                self._ready,
                size,
                policy,
                requester_total=state.token_total,
                all_totals=tuple(s.token_total for s in self._consumers.values()),
            )
            counts = policy.token_counts or {}
            for row in rows:
                self._consumed[row] = consumer
                self._ready.discard(row)
                state.token_total += counts.get(row, 0)
            meta = BatchMeta(
                epoch=self.epoch,
                task_name=self.task.name,
                rows=tuple(rows),
                columns=self._required,
                locations={row: self._location[row] for row in rows},
                issued_to=consumer,
            )
            self.issued.append(meta)
            return meta

    def reset_epoch(
        self,
        new_epoch: int,
        total_rows: int,
        required_columns: tuple[ColumnId, ...] | None = None,
    ) -> None:
        """Zero the matrix and ledger for a fresh epoch."""
        with self._lock:
            if new_epoch <= self.epoch:
                raise EpochRegression(
                    f"task {self.task.name!r}: epoch {new_epoch} does not advance {self.epoch}"
                )
            self.epoch = new_epoch
            self.total_rows = total_rows
            if required_columns is not None:
                self._required = required_columns
            self._written.clear()
            self._location.clear()
            self._consumed.clear()
            self._ready.clear()
            self._complete_rows = 0
            self.issued.clear()
