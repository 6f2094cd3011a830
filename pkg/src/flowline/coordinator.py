"""Weight-version coordination between the trainer and rollout instances.

Everything here is an explicitly driven state machine: submissions, transfer
completions, generation-iteration boundaries, and swap completions arrive as
ordered events from whoever owns time (the discrete-event simulator, or a
server loop reacting to wire messages). The machinery implements delayed
parameter updates: new weights are staged off to the side while generation
continues, and swapped in only at an iteration boundary, so the only exposed
cost is the host-to-device load.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

from .errors import ChannelBusy, StaleSubmission, VersionRegression
from .types import StalenessBound, WeightVersion

SYNCHRONOUS = "synchronous"
ASYNCHRONOUS = "asynchronous"


@dataclass(frozen=True, slots=True)
class SwapResult:
    swapped: bool
    version: WeightVersion


@dataclass(frozen=True, slots=True)
class TransferHandle:
    version: WeightVersion
    mode: str


class WeightChannel:
    """Single transfer lane between the trainer and the rollout side.

    In asynchronous mode at most one transfer is in flight and submission
    never waits for it; in synchronous mode the caller (the trainer's
    driver) is expected to hold its step until every instance has swapped.
    The channel itself only does version bookkeeping; durations and
    blocking live with the event driver.
    """

    def __init__(self, mode: str = ASYNCHRONOUS) -> None:
        if mode not in (SYNCHRONOUS, ASYNCHRONOUS):
            raise ValueError(f"unknown channel mode {mode!r}")
        self.mode = mode
        self.in_flight: tuple[WeightVersion, bytes] | None = None
        self.last_submitted: WeightVersion = 0

    def submit(self, version: WeightVersion, payload: bytes) -> TransferHandle:
        if version <= self.last_submitted:
            raise StaleSubmission(
                f"version {version} already superseded (last {self.last_submitted})"
            )
        if self.in_flight is not None:
            raise ChannelBusy(
                f"transfer of version {self.in_flight[0]} still in flight"
            )
        self.in_flight = (version, payload)
        self.last_submitted = version
        return TransferHandle(version, self.mode)

    def complete_transfer(self) -> tuple[WeightVersion, bytes]:
        if self.in_flight is None:
            raise ValueError("no transfer in flight")
        done = self.in_flight
        self.in_flight = None
        return done


class RolloutInstanceState:
    """Per-instance generation flag, active weights, and staged weights."""

    def __init__(self, instance_id: str, version: WeightVersion = 0) -> None:
        self.instance_id = instance_id
        self.active_version = version
        self.generating = False
        self.staged: tuple[WeightVersion, bytes] | None = None

    def stage_weights(self, version: WeightVersion, payload: bytes) -> None:
        """Park new weights host-side; generation is never interrupted.

        Staging is latest-wins: if a second version lands before the next
        boundary, the older staged payload is discarded.
        """
        if version <= self.active_version:
            raise VersionRegression(
                f"{self.instance_id}: version {version} not newer than "
                f"active {self.active_version}"
            )
        if self.staged is None or version > self.staged[0]:
            self.staged = (version, payload)

    def maybe_swap(self) -> SwapResult:
        """At a generation-iteration boundary, load staged weights if any."""
        if self.generating:
            raise RuntimeError(
                f"{self.instance_id}: maybe_swap called mid-generation"
            )
        if self.staged is None:
            return SwapResult(False, self.active_version)
        version, _ = self.staged
        self.staged = None
        self.active_version = version
        return SwapResult(True, version)


class StalenessTracker:
    """Admission control: trainer version may lead sample version by <= s."""

    def __init__(self, bound: StalenessBound) -> None:
        self.bound = bound
        self.trainer_version: WeightVersion = 0
        self.data_version: dict[object, WeightVersion] = {}
        self.admitted_gaps: Counter[int] = Counter()
        self.rejected = 0

    def record(self, sample_key: object, version: WeightVersion) -> None:
        self.data_version[sample_key] = version

    def advance_trainer(self, new_version: WeightVersion) -> None:
        if new_version != self.trainer_version + 1:
            raise VersionRegression(
                f"trainer version must advance by 1 "
                f"({self.trainer_version} -> {new_version})"
            )
        self.trainer_version = new_version

    def admit_sample(self, sample_version: WeightVersion) -> bool:
        if self.bound.admits(self.trainer_version, sample_version):
            self.admitted_gaps[self.trainer_version - sample_version] += 1
            return True
        self.rejected += 1
        return False

    def max_admitted_gap(self) -> int:
        return max(self.admitted_gaps, default=0)


class StaggeredUpdate:
    """One rotation of swap windows: at most k instances pause at a time.

    The rest keep generating so downstream consumption never starves.
    Created fresh for each weight version in the staggered regime.
    """

    def __init__(self, instance_ids: list[str], concurrency_limit: int) -> None:
        if concurrency_limit < 1:
            raise ValueError("concurrency_limit must be >= 1")
        if concurrency_limit >= len(instance_ids):
            raise ValueError(
                "concurrency_limit must leave at least one instance generating"
            )
        self.pending: set[str] = set(instance_ids)
        self.active: set[str] = set()
        self.limit = concurrency_limit

    def request_slot(self, instance_id: str) -> bool:
        """True if the instance may enter its swap window now."""
        if instance_id not in self.pending or len(self.active) >= self.limit:
            return False
        self.pending.discard(instance_id)
        self.active.add(instance_id)
        return True

    def complete(self, instance_id: str) -> None:
        self.active.discard(instance_id)

    def done(self) -> bool:
        return not self.pending and not self.active


@dataclass
class WeightCoordinator:
    """Channel + per-instance state + staleness gate, wired together."""

    channel: WeightChannel
    instances: dict[str, RolloutInstanceState]
    tracker: StalenessTracker
    staggered_limit: int | None = None
    _rotation: StaggeredUpdate | None = field(default=None, repr=False)

    def submit_weights(self, version: WeightVersion, payload: bytes) -> TransferHandle:
        return self.channel.submit(version, payload)

    def transfer_complete(self) -> WeightVersion:
        """Stage the transferred weights on every instance."""
        version, payload = self.channel.complete_transfer()
        for state in self.instances.values():
            state.stage_weights(version, payload)
        if self.staggered_limit is not None:
            self._rotation = StaggeredUpdate(
                sorted(self.instances), self.staggered_limit
            )
        return version

    def may_swap(self, instance_id: str) -> bool:
        """Whether the instance may enter its swap window at this boundary."""
        state = self.instances[instance_id]
        if state.staged is None:
            return False
        if self._rotation is None:
            return True
        return self._rotation.request_slot(instance_id)

    def swap_finished(self, instance_id: str) -> None:
        if self._rotation is not None:
            self._rotation.complete(instance_id)
            if self._rotation.done():
                self._rotation = None

    def all_at_version(self, version: WeightVersion) -> bool:
        return all(
            s.active_version == version for s in self.instances.values()
        )


def staggered_update(
    instances: dict[str, RolloutInstanceState],
    version: WeightVersion,
    payload: bytes,
    concurrency_limit: int,
) -> StaggeredUpdate:
    """Stage weights everywhere and open a k-at-a-time swap rotation."""
    rotation = StaggeredUpdate(sorted(instances), concurrency_limit)
    for state in instances.values():
        state.stage_weights(version, payload)
    return rotation
