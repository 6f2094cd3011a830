"""Discrete-event simulation of the full producer-consumer pipeline.

The simulator is an integration harness: rollout, reference, and trainer
actors move simulated time, but every sample flows through the real
storage units, controllers, and weight-coordination state machines via
direct in-process calls. Scheduling and staleness invariants are therefore
enforced by production code, and the simulator checks them again on top.

Time is integer nanoseconds. All randomness comes from the scenario seed.
The event loop is single-threaded: events fire in (time, sequence) order,
and after every event each actor is re-polled in a fixed order until no
actor can make progress, which keeps runs bit-for-bit reproducible.
"""

from __future__ import annotations

import heapq
import itertools
from collections import Counter

from ..client import write_back
from ..controller import (
    BatchMeta,
    EpochExhausted,
    PackingPolicy,
    TaskController,
)
from ..coordinator import (
    ASYNCHRONOUS,
    SYNCHRONOUS,
    RolloutInstanceState,
    StalenessTracker,
    WeightChannel,
    WeightCoordinator,
)
from ..errors import MissingCell, SimInvariant
from ..storage import PartitionMap, StorageUnit
from ..types import ConsumerGroupId, StalenessBound, TaskSpec
from .report import GanttSegment, SimReport, bubble_ratio, validate_gantt
from .scenario import SimScenario

CHANNEL_LANE = "channel-0"

SYNC_MODES = ("sequential", "streamed")


class Exchange:
    """One epoch's storage units and controllers, recycled across epochs."""

    def __init__(
        self,
        index: int,
        epoch: int,
        scenario: SimScenario,
        tasks: list[TaskSpec],
        partition: PartitionMap,
    ) -> None:
        self.index = index
        self.epoch = epoch
        self.partition = partition
        total = scenario.total_rows
        self.units: dict[int, StorageUnit] = {
            u: StorageUnit(u, epoch, partition.owned_rows(u, total))
            for u in range(scenario.num_storage_units)
        }
        self.controllers: dict[str, TaskController] = {
            task.name: TaskController(task, epoch, total) for task in tasks
        }
        for unit in self.units.values():
            for name, ctrl in self.controllers.items():
                unit.register_controller(f"x{index}-{name}", ctrl)
        self.token_counts: dict[int, int] = {}
        self.responses_written = 0
        self.refs_written = 0
        self.trained_rows = 0
        self.pending_discard = 0

    def recycle(self, new_epoch: int, total_rows: int) -> None:
        for unit in self.units.values():
            unit.reset_epoch(new_epoch, self.partition.owned_rows(unit.unit_id, total_rows))
        for ctrl in self.controllers.values():
            ctrl.reset_epoch(new_epoch, total_rows)
        self.epoch = new_epoch
        self.token_counts = {}
        self.responses_written = 0
        self.refs_written = 0
        self.trained_rows = 0
        self.pending_discard = 0


def _fetch_cells(meta: BatchMeta, units: dict[int, StorageUnit]) -> dict:
    """Redeem a voucher against the exchange, loudly on inconsistency."""
    per_unit: dict[int, list[int]] = {}
    for row in meta.rows:
        per_unit.setdefault(meta.locations[row], []).append(row)
    cells = {}
    for unit_id in sorted(per_unit):
        try:
            fetched = units[unit_id].get(per_unit[unit_id], list(meta.columns))
        except MissingCell as exc:
            raise SimInvariant(
                f"granted cell missing from storage: {exc}"
            ) from exc
        for row, col, value in fetched:
            cells[(row, col)] = value
    return cells


class _RolloutActor:
    def __init__(self, sim: PipelineSim, idx: int) -> None:
        self.sim = sim
        self.name = f"rollout-{idx}"
        self.group = ConsumerGroupId("rollout", idx)
        self.state: RolloutInstanceState = sim.coord.instances[self.name]
        self.busy = False
        self.stall_started: int | None = None
        self.stall_epoch: int | None = None

    # -- stall accounting ------------------------------------------------

    def _note_stall(self, epoch: int) -> None:
        if self.stall_started is None:
            self.stall_started = self.sim.now
            self.stall_epoch = epoch

    def _resolve_stall(self) -> None:
        if self.stall_started is not None:
            if self.sim.now > self.stall_started and self.stall_epoch is not None:
                self.sim.version_stalls[self.stall_epoch] += 1
            self.stall_started = None
            self.stall_epoch = None

    # -- gating ----------------------------------------------------------

    def _gate_allows(self, epoch: int) -> bool:
        sim = self.sim
        if epoch == 1:
            return True
        if sim.sc.mode in SYNC_MODES:
            return sim.sync_loaded_version >= epoch - 1
        if not sim.sc.production_gate:
            return True
        return self.state.active_version >= epoch - 1 - sim.sc.staleness_bound

    # -- event handlers --------------------------------------------------

    def poll(self) -> bool:
        if self.busy:
            return False
        sim = self.sim
        if sim.sc.mode not in SYNC_MODES and sim.coord.may_swap(self.name):
            self._begin_swap(sync_version=None)
            return True
        for epoch in sorted(sim.epoch_exchange):
            ex = sim.epoch_exchange[epoch]
            ctrl = ex.controllers["rollout"]
            if not self._gate_allows(epoch):
                if len(ctrl.consumed_rows()) < sim.sc.total_rows:
                    self._note_stall(epoch)
                    return False
                continue
            reply = ctrl.request_batch(self.group, sim.sc.rollout_micro_batch)
            if isinstance(reply, BatchMeta):
                self._resolve_stall()
                self._begin_generate(ex, reply)
                return True
            if isinstance(reply, EpochExhausted):
                continue
            return False
        return False

    def _begin_generate(self, ex: Exchange, meta: BatchMeta) -> None:
        sim = self.sim
        _fetch_cells(meta, ex.units)
        lengths = sim.lengths_for(ex.epoch)
        duration = sum(
            lengths[row] * sim.sc.gen_cost_per_token_ns for row in meta.rows
        )
        self.busy = True
        self.state.generating = True
        version = self.state.active_version
        sim.at(duration, self._gen_done, ex, meta, version, sim.now)

    def _gen_done(self, ex: Exchange, meta: BatchMeta, version: int, start: int) -> None:
        sim = self.sim
        if self.state.active_version != version:
            raise SimInvariant(
                f"{self.name}: weights swapped mid-generation "
                f"(v{version} -> v{self.state.active_version})"
            )
        self.state.generating = False
        self.busy = False
        sim.segment(
            self.name,
            "generate",
            start,
            f"epoch={ex.epoch} v={version} n={len(meta.rows)}",
        )
        lengths = sim.lengths_for(ex.epoch)
        rows = list(meta.rows)
        values = [
            f"{ex.epoch}:{row}:{version}:{lengths[row]}".encode() for row in rows
        ]
        write_back(sim.rollout_task, ex.partition, ex.units, rows, "response", values)
        for row in rows:
            ex.token_counts[row] = lengths[row]
            sim.versions_used[(ex.epoch, row)] = version
            sim.tracker.record((ex.epoch, row), version)
        ex.responses_written += len(rows)
        sim.counters["generated"] += len(rows)

    def _begin_swap(self, sync_version: int | None) -> None:
        sim = self.sim
        self._resolve_stall()
        self.busy = True
        sim.at(sim.sc.h2d_swap_ns, self._swap_done, sync_version, sim.now)

    def _swap_done(self, sync_version: int | None, start: int) -> None:
        sim = self.sim
        result = self.state.maybe_swap()
        if not result.swapped:
            raise SimInvariant(f"{self.name}: swap window with nothing staged")
        self.busy = False
        sim.segment(self.name, "h2d_swap", start, f"v={result.version}")
        sim.coord.swap_finished(self.name)
        if sync_version is not None:
            sim.sync_swaps_pending.discard(self.name)
            if not sim.sync_swaps_pending:
                sim.sync_loaded_version = sync_version


class _ReferenceActor:
    def __init__(self, sim: PipelineSim, idx: int) -> None:
        self.sim = sim
        self.name = f"reference-{idx}"
        self.group = ConsumerGroupId("reference", idx)
        self.busy = False

    def poll(self) -> bool:
        if self.busy:
            return False
        sim = self.sim
        for epoch in sorted(sim.epoch_exchange):
            ex = sim.epoch_exchange[epoch]
            if sim.sc.mode == "sequential" and ex.responses_written < sim.sc.total_rows:
                return False
            ctrl = ex.controllers["reference"]
            reply = ctrl.request_batch(self.group, sim.sc.ref_micro_batch)
            if isinstance(reply, BatchMeta):
                self._begin_infer(ex, reply)
                return True
            if isinstance(reply, EpochExhausted):
                continue
            return False
        return False

    def _begin_infer(self, ex: Exchange, meta: BatchMeta) -> None:
        sim = self.sim
        _fetch_cells(meta, ex.units)
        duration = sim.sc.ref_cost_per_sample_ns * len(meta.rows)
        self.busy = True
        sim.at(duration, self._infer_done, ex, meta, sim.now)

    def _infer_done(self, ex: Exchange, meta: BatchMeta, start: int) -> None:
        sim = self.sim
        self.busy = False
        sim.segment(
            self.name, "reference", start, f"epoch={ex.epoch} n={len(meta.rows)}"
        )
        rows = list(meta.rows)
        values = [f"ref:{ex.epoch}:{row}".encode() for row in rows]
        write_back(sim.ref_task, ex.partition, ex.units, rows, "ref_log_prob", values)
        ex.refs_written += len(rows)


class _TrainActor:
    def __init__(self, sim: PipelineSim, idx: int) -> None:
        self.sim = sim
        self.name = f"train-{idx}"
        self.group = ConsumerGroupId("train", idx)
        self.busy = False

    def poll(self) -> bool:
        if self.busy:
            return False
        sim = self.sim
        epoch = sim.train_epoch
        if epoch > sim.sc.iterations:
            return False
        ex = sim.epoch_exchange.get(epoch)
        if ex is None:
            raise SimInvariant(f"training epoch {epoch} has no open exchange")
        if sim.sc.mode == "sequential" and not sim.epoch_ready_for_training(ex):
            return False
        policy = sim.train_policy(ex)
        reply = ex.controllers["train"].request_batch(
            self.group, sim.sc.train_micro_batch, policy
        )
        if not isinstance(reply, BatchMeta):
            return False
        _fetch_cells(reply, ex.units)
        admitted = []
        rejected = []
        for row in reply.rows:
            version = sim.versions_used[(epoch, row)]
            if sim.tracker.admit_sample(version):
                admitted.append(row)
                sim.step_versions.setdefault(epoch, set()).add(version)
            else:
                rejected.append(row)
        duration = sim.sc.train_cost_per_sample_ns * len(admitted)
        self.busy = True
        sim.at(duration, self._train_done, ex, reply, admitted, rejected, sim.now)
        return True

    def _train_done(
        self,
        ex: Exchange,
        meta: BatchMeta,
        admitted: list[int],
        rejected: list[int],
        start: int,
    ) -> None:
        sim = self.sim
        self.busy = False
        if sim.now > start:
            sim.segment(
                self.name,
                "train",
                start,
                f"epoch={ex.epoch} n={len(admitted)}",
            )
        sim.counters["admitted"] += len(admitted)
        if rejected:
            if sim.sc.reject_policy == "drop":
                sim.counters["dropped"] += len(rejected)
            else:
                ex.pending_discard += len(rejected)
        ex.trained_rows += len(meta.rows)
        if ex.trained_rows == sim.sc.total_rows:
            sim.step_complete(ex)


class PipelineSim:
    """Builds the plane objects for one scenario and runs it to completion."""

    def __init__(self, scenario: SimScenario) -> None:
        scenario.validate()
        self.sc = scenario
        self.now = 0
        self._heap: list = []
        self._seq = itertools.count()
        self._events_fired = 0
        self.gantt: list[GanttSegment] = []
        self.partition = PartitionMap(scenario.num_storage_units)

        ref_on = scenario.reference_instances > 0
        self.rollout_task = TaskSpec("rollout", ("prompt",), ("response",))
        self.ref_task = (
            TaskSpec("reference", ("prompt", "response"), ("ref_log_prob",))
            if ref_on
            else None
        )
        train_inputs = ("prompt", "response") + (("ref_log_prob",) if ref_on else ())
        self.train_task = TaskSpec("train", train_inputs)
        tasks = [self.rollout_task] + ([self.ref_task] if ref_on else []) + [self.train_task]

        self.pool = (
            1 if scenario.mode in SYNC_MODES else scenario.staleness_bound + 1
        )
        self._exchanges = [
            Exchange(i, i + 1, scenario, tasks, self.partition)
            for i in range(self.pool)
        ]
        self.epoch_exchange: dict[int, Exchange] = {}

        channel_mode = SYNCHRONOUS if scenario.mode in SYNC_MODES else ASYNCHRONOUS
        instances = {
            f"rollout-{i}": RolloutInstanceState(f"rollout-{i}")
            for i in range(scenario.rollout_instances)
        }
        self.tracker = StalenessTracker(StalenessBound(scenario.staleness_bound))
        self.coord = WeightCoordinator(
            channel=WeightChannel(channel_mode),
            instances=instances,
            tracker=self.tracker,
            staggered_limit=(
                scenario.staggered_concurrency
                if scenario.mode == "streamed_async_staggered"
                else None
            ),
        )

        self.rollouts = [
            _RolloutActor(self, i) for i in range(scenario.rollout_instances)
        ]
        self.refs = [
            _ReferenceActor(self, i) for i in range(scenario.reference_instances)
        ]
        self.trainers = [
            _TrainActor(self, i) for i in range(scenario.train_instances)
        ]
        self._actors = [*self.rollouts, *self.refs, *self.trainers]

        self.train_epoch = 1
        self.completed_steps = 0
        self.sync_loaded_version = 0
        self.sync_swaps_pending: set[str] = set()
        self.pending_submit: int | None = None
        self.end_time: int | None = None
        self.counters: Counter[str] = Counter()
        self.versions_used: dict[tuple[int, int], int] = {}
        self.version_stalls: Counter[int] = Counter()
        self.step_versions: dict[int, set[int]] = {}
        self._lengths: dict[int, list[int]] = {}
        self._event_budget = 10_000 + 200 * scenario.iterations * (
            scenario.total_rows + scenario.rollout_instances + scenario.train_instances
        )

    # -- infrastructure --------------------------------------------------

    def at(self, delay: int, fn, *args) -> None:
        heapq.heappush(self._heap, (self.now + delay, next(self._seq), fn, args))

    def segment(self, instance: str, kind: str, start: int, detail: str = "") -> None:
        if self.now > start:
            self.gantt.append(
                GanttSegment(instance, kind, start, self.now, detail)
            )

    def lengths_for(self, epoch: int) -> list[int]:
        if epoch not in self._lengths:
            self._lengths[epoch] = self.sc.lengths_for_epoch(epoch)
        return self._lengths[epoch]

    def train_policy(self, ex: Exchange) -> PackingPolicy:
        if self.sc.packing_policy == "fifo":
            return PackingPolicy()
        return PackingPolicy("token_balanced", dict(ex.token_counts))

    def epoch_ready_for_training(self, ex: Exchange) -> bool:
        total = self.sc.total_rows
        if ex.responses_written < total:
            return False
        return self.ref_task is None or ex.refs_written >= total

    # -- epoch lifecycle -------------------------------------------------

    def open_epoch(self, ex: Exchange, epoch: int) -> None:
        if ex.epoch != epoch:
            ex.recycle(epoch, self.sc.total_rows)
        self.epoch_exchange[epoch] = ex
        for unit in sorted(ex.units):
            rows = sorted(ex.units[unit].owned_rows)
            entries = [
                (row, "prompt", f"prompt:{epoch}:{row}".encode()) for row in rows
            ]
            ex.units[unit].put(entries)

    def verify_epoch_consumed(self, ex: Exchange) -> None:
        """Exactly-once check: every task consumed each row exactly once."""
        total = self.sc.total_rows
        for name, ctrl in ex.controllers.items():
            issued_rows = [row for meta in ctrl.issued for row in meta.rows]
            if sorted(issued_rows) != list(range(total)):
                raise SimInvariant(
                    f"epoch {ex.epoch} task {name}: issued rows "
                    f"{sorted(issued_rows)[:8]}... violate exactly-once"
                )

    def step_complete(self, ex: Exchange) -> None:
        epoch = ex.epoch
        if epoch != self.train_epoch:
            raise SimInvariant(
                f"step completion for epoch {epoch} while training {self.train_epoch}"
            )
        if ex.pending_discard:
            self.counters["discarded"] += ex.pending_discard
            ex.pending_discard = 0
        self.tracker.advance_trainer(epoch)
        self.completed_steps = epoch
        if epoch == self.sc.iterations:
            self.end_time = self.now
            return
        self.train_epoch = epoch + 1
        self._submit_weights(epoch)
        target = epoch + self.pool
        if target <= self.sc.iterations:
            self.verify_epoch_consumed(ex)
            del self.epoch_exchange[epoch]
            self.open_epoch(ex, target)

    # -- weight path -----------------------------------------------------

    def _weight_payload(self, version: int) -> bytes:
        tag = b"v%d" % version
        pad = max(0, self.sc.weight_payload_bytes - len(tag))
        return tag + b"\0" * pad

    def _submit_weights(self, version: int) -> None:
        if self.sc.mode in SYNC_MODES:
            self.coord.submit_weights(version, self._weight_payload(version))
            self.at(
                self.sc.weight_transfer_ns, self._sync_transfer_done, version, self.now
            )
            return
        if self.coord.channel.in_flight is None:
            self.coord.submit_weights(version, self._weight_payload(version))
            self.at(
                self.sc.weight_transfer_ns, self._async_transfer_done, self.now
            )
        else:
            # channel occupied: remember the newest version, submit on drain
            self.pending_submit = version

    def _sync_transfer_done(self, version: int, start: int) -> None:
        self.segment(CHANNEL_LANE, "weight_transfer", start, f"v={version}")
        self.coord.channel.complete_transfer()
        self.sync_swaps_pending = {a.name for a in self.rollouts}
        for actor in self.rollouts:
            if actor.busy:
                raise SimInvariant(
                    f"{actor.name} busy during synchronous weight load"
                )
            actor.state.stage_weights(version, self._weight_payload(version))
            actor._begin_swap(sync_version=version)

    def _async_transfer_done(self, start: int) -> None:
        version = self.coord.channel.in_flight[0]
        self.segment(CHANNEL_LANE, "weight_transfer", start, f"v={version}")
        self.coord.transfer_complete()
        if self.pending_submit is not None and (
            self.pending_submit > self.coord.channel.last_submitted
        ):
            next_version = self.pending_submit
            self.pending_submit = None
            self.coord.submit_weights(next_version, self._weight_payload(next_version))
            self.at(self.sc.weight_transfer_ns, self._async_transfer_done, self.now)
        else:
            self.pending_submit = None

    # -- main loop -------------------------------------------------------

    def kick(self) -> None:
        progressed = True
        while progressed:
            progressed = False
            for actor in self._actors:
                if actor.poll():
                    progressed = True

    def run(self) -> SimReport:
        for i, ex in enumerate(self._exchanges):
            epoch = i + 1
            if epoch <= self.sc.iterations:
                self.open_epoch(ex, epoch)
        self.kick()
        while self._heap and self.end_time is None:
            self._events_fired += 1
            if self._events_fired > self._event_budget:
                raise SimInvariant(
                    f"event budget exceeded ({self._event_budget}); likely livelock"
                )
            time, _, fn, args = heapq.heappop(self._heap)
            self.now = time
            fn(*args)
            self.kick()
        if self.end_time is None:
            raise SimInvariant(
                f"pipeline deadlocked after step {self.completed_steps} "
                f"of {self.sc.iterations} at t={self.now}"
            )
        for ex in self._exchanges:
            if ex.epoch <= self.sc.iterations:
                self.verify_epoch_consumed(ex)
        return self._build_report()

    # -- reporting -------------------------------------------------------

    def _build_report(self) -> SimReport:
        end = self.end_time
        assert end is not None
        gantt = sorted(
            (
                seg
                for seg in self.gantt
                if seg.start < end
            ),
            key=lambda s: (s.instance, s.start),
        )
        gantt = [
            seg
            if seg.end <= end
            else GanttSegment(seg.instance, seg.kind, seg.start, end, seg.detail)
            for seg in gantt
        ]
        validate_gantt(gantt)
        if self.tracker.max_admitted_gap() > self.sc.staleness_bound:
            raise SimInvariant("admitted sample exceeded the staleness bound")
        counters = dict(self.counters)
        counters.setdefault("generated", 0)
        counters.setdefault("admitted", 0)
        counters.setdefault("dropped", 0)
        counters.setdefault("discarded", 0)
        counters["in_flight_at_end"] = (
            counters["generated"]
            - counters["admitted"]
            - counters["dropped"]
            - counters["discarded"]
        )
        seconds = end / 1e9
        ratios = {}
        for klass in ("rollout", "reference", "train"):
            if any(seg.instance.startswith(klass + "-") for seg in gantt):
                ratios[klass] = bubble_ratio(gantt, klass)
        return SimReport(
            mode=self.sc.mode,
            total_rows=self.sc.total_rows,
            iterations=self.sc.iterations,
            seed=self.sc.seed,
            end_to_end_ns=end,
            samples_per_second=(
                counters["admitted"] / seconds if seconds > 0 else 0.0
            ),
            bubble_ratios=ratios,
            staleness_histogram=dict(self.tracker.admitted_gaps),
            gantt=gantt,
            counters=counters,
            version_stalls_by_iteration=dict(self.version_stalls),
            versions_per_step={
                step: sorted(versions)
                for step, versions in self.step_versions.items()
            },
        )


def run_sim(scenario: SimScenario) -> SimReport:
    """Simulate one scenario to completion and report its metrics."""
    return PipelineSim(scenario).run()
