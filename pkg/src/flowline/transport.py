"""TCP client proxies for the storage, controller, and coordinator planes.

Each proxy implements the same port protocol as its in-process counterpart,
so the streaming iterator and write-back helpers work unchanged whether the
plane object lives in this process or behind a socket. Error replies are
re-raised as the matching exception type via the shared error-code registry.
"""

from __future__ import annotations

import socket

from . import wire
from .controller import NOT_READY, EPOCH_EXHAUSTED, BatchMeta, PackingPolicy
from .errors import ProtocolError, error_for_code
from .storage import PutAck
from .types import ConsumerGroupId


def parse_endpoint(endpoint: str) -> tuple[str, int]:
    host, sep, port = endpoint.rpartition(":")
    if not sep or not host:
        raise ProtocolError(f"endpoint must look like host:port, got {endpoint!r}")
    try:
        return host, int(port)
    except ValueError:
        raise ProtocolError(f"bad port in endpoint {endpoint!r}") from None


def consumer_from_string(consumer: str) -> ConsumerGroupId:
    task, sep, index = consumer.rpartition("/")
    if not sep or not task:
        raise ProtocolError(f"consumer must look like task/index, got {consumer!r}")
    try:
        return ConsumerGroupId(task, int(index))
    except ValueError:
        raise ProtocolError(f"bad consumer index in {consumer!r}") from None


class Connection:
    """One socket; requests and replies strictly alternate."""

    def __init__(self, host: str, port: int, timeout: float = 10.0) -> None:
        self.host = host
        self.port = port
        self.timeout = timeout
        self._sock: socket.socket | None = None
        self._file = None

    def _ensure(self) -> None:
        if self._sock is None:
            self._sock = socket.create_connection(
                (self.host, self.port), timeout=self.timeout
            )
            self._file = self._sock.makefile("rwb")

    def call(self, message: wire.Message) -> wire.Message:
        self._ensure()
        try:
            wire.write_frame(self._file, message)
            reply = wire.read_frame(self._file)
        except (OSError, ProtocolError):
            self.close()
            raise
        if reply is None:
            self.close()
            raise ConnectionError("server closed the connection mid-call")
        if isinstance(reply, wire.ErrorReply):
            raise error_for_code(reply.code, reply.message)
        return reply

    def close(self) -> None:
        if self._file is not None:
            try:
                self._file.close()
            except OSError:
                pass
            self._file = None
        if self._sock is not None:
            try:
                self._sock.close()
            except OSError:
                pass
            self._sock = None

    def __enter__(self) -> "Connection":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def _expect(reply: wire.Message, expected: type) -> wire.Message:
    if not isinstance(reply, expected):
        raise ProtocolError(
            f"expected {expected.__name__}, server sent {type(reply).__name__}"
        )
    return reply


class StorageClient:
    """StoragePort over TCP against one storage-unit server."""

    def __init__(self, host: str, port: int, timeout: float = 10.0) -> None:
        self.conn = Connection(host, port, timeout)

    def put(self, entries) -> PutAck:
        reply = _expect(
            self.conn.call(
                wire.Put(tuple((row, col, bytes(val)) for row, col, val in entries))
            ),
            wire.Ack,
        )
        return PutAck(reply.count)

    def get(self, rows, columns):
        reply = _expect(
            self.conn.call(wire.Get(tuple(rows), tuple(columns))), wire.Cells
        )
        return [(row, col, val) for row, col, val in reply.cells]

    def register_controller(self, endpoint: str):
        reply = _expect(
            self.conn.call(wire.RegisterController(endpoint)), wire.Snapshot
        )
        return [(tuple(rows), tuple(cols)) for rows, cols in reply.groups]

    def reset_epoch(self, new_epoch: int, owned_rows) -> None:
        _expect(
            self.conn.call(wire.ResetStorageEpoch(new_epoch, tuple(owned_rows))),
            wire.Ack,
        )

    def close(self) -> None:
        self.conn.close()


def _batch_from_grant(grant: wire.BatchGrant):
    if grant.status == wire.BATCH_NOT_READY:
        return NOT_READY
    if grant.status == wire.BATCH_EXHAUSTED:
        return EPOCH_EXHAUSTED
    return BatchMeta(
        epoch=grant.epoch,
        task_name=grant.task,
        rows=tuple(grant.rows),
        columns=tuple(grant.columns),
        locations=dict(grant.locations),
        issued_to=consumer_from_string(grant.issued_to),
    )


def _policy_fields(policy: PackingPolicy | None) -> tuple[int, tuple]:
    if policy is None or policy.kind == "fifo":
        return wire.POLICY_FIFO, ()
    return (
        wire.POLICY_TOKEN_BALANCED,
        tuple(sorted((policy.token_counts or {}).items())),
    )


class ControllerClient:
    """ControllerPort for one task on a controller server."""

    def __init__(self, host: str, port: int, task: str, timeout: float = 10.0) -> None:
        self.conn = Connection(host, port, timeout)
        self.task = task

    def request_batch(
        self,
        consumer: ConsumerGroupId,
        micro_batch_size: int,
        policy: PackingPolicy | None = None,
    ):
        kind, counts = _policy_fields(policy)
        reply = _expect(
            self.conn.call(
                wire.RequestBatch(
                    self.task, str(consumer), micro_batch_size, kind, counts
                )
            ),
            wire.BatchGrant,
        )
        return _batch_from_grant(reply)

    def reset_epoch(self, new_epoch: int, total_rows: int) -> None:
        _expect(
            self.conn.call(
                wire.ResetControllerEpoch(self.task, new_epoch, total_rows)
            ),
            wire.Ack,
        )

    def close(self) -> None:
        self.conn.close()


class WireControllerLink:
    """ControllerLink that pushes write notifications to a remote controller.

    Used by a storage server once a controller registers by endpoint. Each
    delivery failure closes the socket so the unit's retry loop reconnects;
    at-least-once delivery is preserved, duplication is the controller's
    problem (application is idempotent).
    """

    def __init__(self, endpoint: str, timeout: float = 10.0) -> None:
        host, port = parse_endpoint(endpoint)
        self.conn = Connection(host, port, timeout)

    def apply_notification(self, unit_id: int, epoch: int, groups) -> None:
        message = wire.Notify(
            unit_id,
            epoch,
            tuple((tuple(rows), tuple(cols)) for rows, cols in groups),
        )
        _expect(self.conn.call(message), wire.Ack)

    def close(self) -> None:
        self.conn.close()


class ServiceClient:
    """User-level verbs served by a controller server."""

    def __init__(self, host: str, port: int, timeout: float = 10.0) -> None:
        self.conn = Connection(host, port, timeout)

    def put_prompts(self, prompts) -> int:
        reply = _expect(
            self.conn.call(wire.PutPrompts(tuple(bytes(p) for p in prompts))),
            wire.Ack,
        )
        return reply.count

    def get_experience(self, task: str, consumer: str, micro_batch: int):
        reply = _expect(
            self.conn.call(wire.GetExperience(task, consumer, micro_batch)),
            wire.Experience,
        )
        if reply.status == wire.BATCH_NOT_READY:
            return NOT_READY
        if reply.status == wire.BATCH_EXHAUSTED:
            return EPOCH_EXHAUSTED
        return reply

    def write_back(self, task: str, column: str, rows, values) -> int:
        reply = _expect(
            self.conn.call(
                wire.WriteBack(
                    task, column, tuple(rows), tuple(bytes(v) for v in values)
                )
            ),
            wire.Ack,
        )
        return reply.count

    def close(self) -> None:
        self.conn.close()


class CoordinatorClient:
    def __init__(self, host: str, port: int, timeout: float = 10.0) -> None:
        self.conn = Connection(host, port, timeout)

    def weight_sync(self, version: int, payload: bytes = b"") -> int:
        reply = _expect(
            self.conn.call(wire.WeightSync(version, payload)), wire.Ack
        )
        return reply.count

    def transfer_complete(self) -> int:
        reply = _expect(self.conn.call(wire.TransferComplete()), wire.Ack)
        return reply.count

    def may_swap(self, instance: str) -> bool:
        reply = _expect(self.conn.call(wire.MaySwap(instance)), wire.BoolReply)
        return reply.value

    def swap_finished(self, instance: str) -> None:
        _expect(self.conn.call(wire.SwapFinished(instance)), wire.Ack)

    def status(self) -> wire.CoordStatusReply:
        return _expect(self.conn.call(wire.CoordStatus()), wire.CoordStatusReply)

    def close(self) -> None:
        self.conn.close()


def api_put_prompts_data(endpoint: str, prompts) -> int:
    """Load the prompt column for the epoch through a controller server."""
    host, port = parse_endpoint(endpoint)
    client = ServiceClient(host, port)
    try:
        return client.put_prompts(prompts)
    finally:
        client.close()


def api_get_experience_data(
    endpoint: str, task: str, micro_batch_size: int, consumer: str = "api/0"
):
    """One assembled micro-batch of experience, or a readiness sentinel."""
    host, port = parse_endpoint(endpoint)
    client = ServiceClient(host, port)
    try:
        return client.get_experience(task, consumer, micro_batch_size)
    finally:
        client.close()


def api_weight_sync_notify(endpoint: str, version: int, payload: bytes = b"") -> int:
    """Announce new weights to the coordination plane."""
    host, port = parse_endpoint(endpoint)
    client = CoordinatorClient(host, port)
    try:
        return client.weight_sync(version, payload)
    finally:
        client.close()
