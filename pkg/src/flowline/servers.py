"""TCP servers wrapping the plane objects behind the wire protocol.

Connection discipline: frames on one connection are processed in order.
A frame that fails to decode poisons the stream, so the server replies
with a protocol error and closes; an application error (bad coordinate,
duplicate write, ...) is replied and the connection stays usable. No
input, however malformed, crashes the serving thread.
"""

from __future__ import annotations

import logging
import socketserver
import threading

from . import wire
from .client import write_back
from .controller import (
    EPOCH_EXHAUSTED,
    NOT_READY,
    BatchMeta,
    PackingPolicy,
    TaskController,
)
from .coordinator import WeightCoordinator
from .errors import FlowlineError, MissingCell, ProtocolError, SizeMismatch
from .storage import PartitionMap, StorageUnit
from .transport import (
    StorageClient,
    WireControllerLink,
    consumer_from_string,
    parse_endpoint,
)
from .types import TaskSpec

log = logging.getLogger(__name__)


class _Handler(socketserver.StreamRequestHandler):
    def handle(self) -> None:
        while True:
            try:
                message = wire.read_frame(self.rfile)
            except ProtocolError as exc:
                self._reply(wire.ErrorReply(exc.code, str(exc)))
                return
            except OSError:
                return
            if message is None:
                return
            try:
                reply = self.server.dispatch(message)
            except FlowlineError as exc:
                self._reply(wire.ErrorReply(exc.code, str(exc)))
                continue
            except Exception:
                log.exception("unhandled error serving %s", type(message).__name__)
                self._reply(wire.ErrorReply("ERROR", "internal server error"))
                return
            self._reply(reply)

    def _reply(self, message: wire.Message) -> None:
        try:
            wire.write_frame(self.wfile, message)
        except OSError:
            pass


class _WireServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address: tuple[str, int] = ("127.0.0.1", 0)) -> None:
        super().__init__(address, _Handler)
        self._thread: threading.Thread | None = None

    @property
    def port(self) -> int:
        return self.server_address[1]

    @property
    def endpoint(self) -> str:
        return f"{self.server_address[0]}:{self.server_address[1]}"

    def start(self) -> "_WireServer":
        self._thread = threading.Thread(
            target=self.serve_forever, kwargs={"poll_interval": 0.05}, daemon=True
        )
        self._thread.start()
        return self

    def stop(self) -> None:
        self.shutdown()
        self.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)
            self._thread = None

    def dispatch(self, message: wire.Message) -> wire.Message:
        raise NotImplementedError


class StorageServer(_WireServer):
    """Data plane: one storage unit behind a socket."""

    def __init__(
        self, unit: StorageUnit, address: tuple[str, int] = ("127.0.0.1", 0)
    ) -> None:
        super().__init__(address)
        self.unit = unit

    def dispatch(self, message: wire.Message) -> wire.Message:
        if isinstance(message, wire.Put):
            ack = self.unit.put(list(message.entries))
            return wire.Ack(ack.count)
        if isinstance(message, wire.Get):
            cells = self.unit.get(list(message.rows), list(message.columns))
            return wire.Cells(tuple(cells))
        if isinstance(message, wire.RegisterController):
            link = WireControllerLink(message.endpoint)
            groups = self.unit.register_controller(message.endpoint, link)
            return wire.Snapshot(
                tuple((tuple(rows), tuple(cols)) for rows, cols in groups)
            )
        if isinstance(message, wire.ResetStorageEpoch):
            self.unit.reset_epoch(message.epoch, list(message.owned_rows))
            return wire.Ack(0)
        raise ProtocolError(
            f"storage server cannot handle {type(message).__name__}"
        )


def _encode_grant(reply) -> wire.BatchGrant:
    if reply is NOT_READY:
        return wire.BatchGrant(wire.BATCH_NOT_READY)
    if reply is EPOCH_EXHAUSTED:
        return wire.BatchGrant(wire.BATCH_EXHAUSTED)
    assert isinstance(reply, BatchMeta)
    return wire.BatchGrant(
        wire.BATCH_OK,
        epoch=reply.epoch,
        task=reply.task_name,
        rows=tuple(reply.rows),
        columns=tuple(reply.columns),
        locations=tuple(sorted(reply.locations.items())),
        issued_to=str(reply.issued_to),
    )


class ControllerServer(_WireServer):
    """Control plane: every task's controller for one epoch, plus the
    user-level verbs that need both planes (prompt load, assembled fetch,
    result write-back routed by partition)."""

    def __init__(
        self,
        tasks: list[TaskSpec],
        epoch: int,
        total_rows: int,
        storage_endpoints: dict[int, str],
        address: tuple[str, int] = ("127.0.0.1", 0),
    ) -> None:
        super().__init__(address)
        if sorted(storage_endpoints) != list(range(len(storage_endpoints))):
            raise ValueError("storage unit ids must be 0..n-1")
        self.total_rows = total_rows
        self.partition = PartitionMap(len(storage_endpoints))
        self.specs = {task.name: task for task in tasks}
        self.controllers = {
            task.name: TaskController(task, epoch, total_rows) for task in tasks
        }
        self.storage = {
            unit_id: StorageClient(*parse_endpoint(endpoint))
            for unit_id, endpoint in sorted(storage_endpoints.items())
        }

    def register_with_storage(self, self_endpoint: str | None = None) -> None:
        """Subscribe to every unit and fold the snapshots in locally."""
        endpoint = self_endpoint or self.endpoint
        for unit_id, client in self.storage.items():
            snapshot = client.register_controller(endpoint)
            for ctrl in self.controllers.values():
                ctrl.apply_notification(unit_id, ctrl.epoch, list(snapshot))

    def _controller(self, task: str) -> TaskController:
        ctrl = self.controllers.get(task)
        if ctrl is None:
            raise ProtocolError(f"unknown task {task!r}")
        return ctrl

    def dispatch(self, message: wire.Message) -> wire.Message:
        if isinstance(message, wire.Notify):
            for ctrl in self.controllers.values():
                ctrl.apply_notification(
                    message.unit_id, message.epoch, list(message.groups)
                )
            return wire.Ack(0)
        if isinstance(message, wire.RequestBatch):
            ctrl = self._controller(message.task)
            policy = None
            if message.policy == wire.POLICY_TOKEN_BALANCED:
                policy = PackingPolicy("token_balanced", dict(message.token_counts))
            reply = ctrl.request_batch(
                consumer_from_string(message.consumer), message.micro_batch, policy
            )
            return _encode_grant(reply)
        if isinstance(message, wire.ResetControllerEpoch):
            self._controller(message.task).reset_epoch(
                message.epoch, message.total_rows
            )
            self.total_rows = message.total_rows
            return wire.Ack(0)
        if isinstance(message, wire.PutPrompts):
            return self._put_prompts(message.prompts)
        if isinstance(message, wire.GetExperience):
            return self._get_experience(message)
        if isinstance(message, wire.WriteBack):
            spec = self.specs.get(message.task)
            if spec is None:
                raise ProtocolError(f"unknown task {message.task!r}")
            count = write_back(
                spec,
                self.partition,
                self.storage,
                list(message.rows),
                message.column,
                list(message.values),
            )
            return wire.Ack(count)
        raise ProtocolError(
            f"controller server cannot handle {type(message).__name__}"
        )

    def _put_prompts(self, prompts: tuple[bytes, ...]) -> wire.Ack:
        if len(prompts) != self.total_rows:
            raise SizeMismatch(
                f"{len(prompts)} prompts for a {self.total_rows}-row epoch"
            )
        per_unit: dict[int, list[tuple[int, str, bytes]]] = {}
        for row, payload in enumerate(prompts):
            per_unit.setdefault(self.partition.unit_for(row), []).append(
                (row, "prompt", payload)
            )
        written = 0
        for unit_id in sorted(per_unit):
            written += self.storage[unit_id].put(per_unit[unit_id]).count
        return wire.Ack(written)

    def _get_experience(self, message: wire.GetExperience) -> wire.Experience:
        ctrl = self._controller(message.task)
        reply = ctrl.request_batch(
            consumer_from_string(message.consumer), message.micro_batch
        )
        if reply is NOT_READY:
            return wire.Experience(wire.BATCH_NOT_READY)
        if reply is EPOCH_EXHAUSTED:
            return wire.Experience(wire.BATCH_EXHAUSTED)
        assert isinstance(reply, BatchMeta)
        per_unit: dict[int, list[int]] = {}
        for row in reply.rows:
            per_unit.setdefault(reply.locations[row], []).append(row)
        fetched: dict[tuple[int, str], bytes] = {}
        for unit_id in sorted(per_unit):
            for row, col, value in self.storage[unit_id].get(
                per_unit[unit_id], list(reply.columns)
            ):
                fetched[(row, col)] = value
        try:
            cells = tuple(
                (row, col, fetched[(row, col)])
                for row in reply.rows
                for col in reply.columns
            )
        except KeyError as exc:
            raise MissingCell(f"granted cell missing from storage: {exc}") from None
        return wire.Experience(
            wire.BATCH_OK, reply.epoch, tuple(reply.rows), tuple(reply.columns), cells
        )


class CoordinatorServer(_WireServer):
    """Weight-coordination plane for remote rollout engines."""

    def __init__(
        self,
        coordinator: WeightCoordinator,
        address: tuple[str, int] = ("127.0.0.1", 0),
    ) -> None:
        super().__init__(address)
        self.coordinator = coordinator

    def _state(self, instance: str):
        state = self.coordinator.instances.get(instance)
        if state is None:
            raise ProtocolError(f"unknown instance {instance!r}")
        return state

    def dispatch(self, message: wire.Message) -> wire.Message:
        if isinstance(message, wire.WeightSync):
            self.coordinator.submit_weights(message.version, message.payload)
            return wire.Ack(message.version)
        if isinstance(message, wire.TransferComplete):
            version = self.coordinator.transfer_complete()
            return wire.Ack(version)
        if isinstance(message, wire.MaySwap):
            self._state(message.instance)
            return wire.BoolReply(self.coordinator.may_swap(message.instance))
        if isinstance(message, wire.SwapFinished):
            state = self._state(message.instance)
            result = state.maybe_swap()
            self.coordinator.swap_finished(message.instance)
            return wire.Ack(result.version)
        if isinstance(message, wire.CoordStatus):
            versions = tuple(
                (name, state.active_version)
                for name, state in sorted(self.coordinator.instances.items())
            )
            return wire.CoordStatusReply(
                self.coordinator.tracker.trainer_version, versions
            )
        raise ProtocolError(
            f"coordinator server cannot handle {type(message).__name__}"
        )
