"""Consumer-side streaming access to the sample exchange.

The iterator polls a controller for micro-batch grants, redeems each
voucher against the storage units that hold the rows, and yields fully
assembled batches until the epoch is exhausted. Group fan-out ships one
fetched batch to replica members as a variable-length concatenation, so
no padding bytes ever cross the transport.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Iterator, Mapping, Protocol, Sequence

from .controller import (
    BatchMeta,
    BatchReply,
    EpochExhausted,
    NotReady,
    PackingPolicy,
)
from .errors import (
    ControllerUnreachable,
    FetchInconsistent,
    InvalidColumn,
    LengthMismatch,
    MemberUnreachable,
    MissingCell,
    SizeMismatch,
)
from .storage import PartitionMap, PutAck
from .types import CellValue, ColumnId, ConsumerGroupId, GlobalIndex, TaskSpec


class ControllerPort(Protocol):
    """What the iterator needs from a controller, local or remote."""

    def request_batch(
        self,
        consumer: ConsumerGroupId,
        micro_batch_size: int,
        policy: PackingPolicy | None = None,
    ) -> BatchReply: ...


class StoragePort(Protocol):
    """What clients need from a storage unit, local or remote."""

    def put(self, entries: list[tuple[GlobalIndex, ColumnId, CellValue]]) -> PutAck: ...

    def get(
        self, rows: list[GlobalIndex], columns: list[ColumnId]
    ) -> list[tuple[GlobalIndex, ColumnId, CellValue]]: ...


@dataclass(frozen=True)
class Batch:
    """A redeemed voucher: metadata plus every addressed cell payload."""

    meta: BatchMeta
    cells: dict[tuple[GlobalIndex, ColumnId], CellValue]

    def __post_init__(self) -> None:
        expected = {
            (row, col) for row in self.meta.rows for col in self.meta.columns
        }
        if set(self.cells) != expected:
            raise FetchInconsistent(
                f"batch cells do not cover rows x columns exactly "
                f"(have {len(self.cells)}, want {len(expected)})"
            )

    def value(self, row: GlobalIndex, column: ColumnId) -> CellValue:
        return self.cells[(row, column)]


@dataclass(frozen=True)
class VarlenEnvelope:
    """Cells concatenated in a fixed order with their byte lengths.

    ``concatenated`` holds every payload back to back; ``lengths`` lets the
    receiver cut it apart again. Zero-length cells survive the round trip.
    """

    order: tuple[tuple[GlobalIndex, ColumnId], ...]
    lengths: tuple[int, ...]
    concatenated: bytes

    def __post_init__(self) -> None:
        if len(self.order) != len(self.lengths):
            raise LengthMismatch(
                f"{len(self.order)} cells but {len(self.lengths)} lengths"
            )
        if sum(self.lengths) != len(self.concatenated):
            raise LengthMismatch(
                f"lengths sum to {sum(self.lengths)} but payload is "
                f"{len(self.concatenated)} bytes"
            )


def encode_varlen(batch: Batch) -> VarlenEnvelope:
    """Pack a batch's cells row-major with no padding between them."""
    order = tuple(
        (row, col) for row in batch.meta.rows for col in batch.meta.columns
    )
    payloads = [batch.cells[key] for key in order]
    return VarlenEnvelope(
        order=order,
        lengths=tuple(len(p) for p in payloads),
        concatenated=b"".join(payloads),
    )


def decode_varlen(
    envelope: VarlenEnvelope,
) -> dict[tuple[GlobalIndex, ColumnId], CellValue]:
    """Cut the concatenation back into per-cell payloads."""
    cells: dict[tuple[GlobalIndex, ColumnId], CellValue] = {}
    offset = 0
    for key, length in zip(envelope.order, envelope.lengths):
        cells[key] = envelope.concatenated[offset : offset + length]
        offset += length
    return cells


class ReplicaPort(Protocol):
    """A consumer-group member able to receive a fanned-out batch."""

    def deliver_batch(self, meta: BatchMeta, envelope: VarlenEnvelope) -> Batch: ...


class LocalReplica:
    """In-process group member; decodes the envelope it is handed."""

    def __init__(self, name: str = "replica") -> None:
        self.name = name
        self.received: list[Batch] = []

    def deliver_batch(self, meta: BatchMeta, envelope: VarlenEnvelope) -> Batch:
        batch = Batch(meta, decode_varlen(envelope))
        self.received.append(batch)
        return batch


def leader_fetch_fanout(
    members: Sequence[ReplicaPort], batch: Batch
) -> list[Batch]:
    """Broadcast a leader-fetched batch to every group member.

    Member 0 is the leader and already holds the batch; the rest receive
    one varlen envelope each and decode an identical batch.
    """
    if not members:
        raise ValueError("group must have at least one member")
    results = [batch]
    if len(members) == 1:
        return results
    envelope = encode_varlen(batch)
    for ordinal, member in enumerate(members[1:], start=1):
        try:
            results.append(member.deliver_batch(batch.meta, envelope))
        except Exception as exc:
            raise MemberUnreachable(
                f"fan-out to member {ordinal} failed: {exc}"
            ) from exc
    return results


def write_back(
    task: TaskSpec,
    partition: PartitionMap,
    storage: Mapping[int, StoragePort],
    rows: Sequence[GlobalIndex],
    column: ColumnId,
    values: Sequence[CellValue],
) -> int:
    """Route result cells to their owning units, one put per unit."""
    if column not in task.output_columns:
        raise InvalidColumn(
            f"column {column!r} is not an output of task {task.name!r}"
        )
    if len(rows) != len(values):
        raise SizeMismatch(f"{len(rows)} rows but {len(values)} values")
    if not rows:
        return 0
    per_unit: dict[int, list[tuple[GlobalIndex, ColumnId, CellValue]]] = {}
    for row, value in zip(rows, values):
        per_unit.setdefault(partition.unit_for(row), []).append(
            (row, column, value)
        )
    written = 0
    for unit_id in sorted(per_unit):
        written += storage[unit_id].put(per_unit[unit_id]).count
    return written


class StreamingBatchIterator:
    """Polls for grants and yields assembled batches until epoch end.

    One iterator belongs to one consumer; it is not shared. Transport
    failures are retried up to ``retry_limit`` consecutive times before
    the controller is declared unreachable.
    """

    def __init__(
        self,
        consumer: ConsumerGroupId,
        controller: ControllerPort,
        storage: Mapping[int, StoragePort],
        micro_batch_size: int,
        poll_interval: float = 0.005,
        policy: PackingPolicy | None = None,
        retry_limit: int = 20,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        if micro_batch_size < 1:
            raise ValueError("micro_batch_size must be >= 1")
        self.consumer = consumer
        self.controller = controller
        self.storage = storage
        self.micro_batch_size = micro_batch_size
        self.poll_interval = poll_interval
        self.policy = policy
        self.retry_limit = retry_limit
        self._sleep = sleep
        self._done = False
        self.polls = 0

    def __iter__(self) -> Iterator[Batch]:
        return self

    def __next__(self) -> Batch:
        batch = self.next_batch()
        if batch is None:
            raise StopIteration
        return batch

    def next_batch(self) -> Batch | None:
        """Block (by polling) until a batch is granted; None at epoch end."""
        if self._done:
            return None
        failures = 0
        while True:
            try:
                reply = self.controller.request_batch(
                    self.consumer, self.micro_batch_size, self.policy
                )
            except (ConnectionError, OSError) as exc:
                failures += 1
                if failures >= self.retry_limit:
                    raise ControllerUnreachable(
                        f"{self.consumer}: {failures} consecutive failures: {exc}"
                    ) from exc
                self._sleep(self.poll_interval)
                continue
            failures = 0
            self.polls += 1
            if isinstance(reply, EpochExhausted):
                self._done = True
                return None
            if isinstance(reply, NotReady):
                self._sleep(self.poll_interval)
                continue
            return self._fetch(reply)

    def _fetch(self, meta: BatchMeta) -> Batch:
        per_unit: dict[int, list[GlobalIndex]] = {}
        for row in meta.rows:
            per_unit.setdefault(meta.locations[row], []).append(row)
        cells: dict[tuple[GlobalIndex, ColumnId], CellValue] = {}
        for unit_id in sorted(per_unit):
            try:
                fetched = self.storage[unit_id].get(
                    per_unit[unit_id], list(meta.columns)
                )
            except MissingCell as exc:
                raise FetchInconsistent(
                    f"storage unit {unit_id} is missing a granted cell: {exc}"
                ) from exc
            for row, col, value in fetched:
                cells[(row, col)] = value
        return Batch(meta, cells)
