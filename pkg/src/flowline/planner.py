"""Resource planning: split a device budget across pipeline tasks.

The search is hybrid. An analytic model (throughput = coeff * n^alpha)
scores every feasible allocation by its worst stage time, which is cheap
and prunes the space; the surviving finalists are then ranked by actually
simulating them, so the winner reflects scheduling effects the closed
form cannot see (micro-batch quantization, warm-up, weight traffic).
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import InfeasibleBudget
from .sim import SimReport, SimScenario, run_sim

# scenario fields that carry per-task instance counts
TASK_FIELDS = {
    "rollout": "rollout_instances",
    "train": "train_instances",
    "reference": "reference_instances",
}


@dataclass(frozen=True, slots=True)
class Allocation:
    """Device counts per task, in a fixed task order; sums to the budget."""

    tasks: tuple[str, ...]
    counts: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.tasks) != len(self.counts):
            raise ValueError("tasks and counts must align")
        if any(count < 1 for count in self.counts):
            raise ValueError("every active task needs at least one device")

    @property
    def total(self) -> int:
        return sum(self.counts)

    def count_for(self, task: str) -> int:
        return self.counts[self.tasks.index(task)]

    def as_dict(self) -> dict[str, int]:
        return dict(zip(self.tasks, self.counts))


@dataclass(frozen=True)
class AnalyticModel:
    """Closed-form throughput estimates used only to narrow the search."""

    coefficients: dict[str, float]
    alpha: float = 0.9
    comm_overhead: float = 0.0

    def __post_init__(self) -> None:
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        if any(c <= 0 for c in self.coefficients.values()):
            raise ValueError("throughput coefficients must be positive")
        if self.comm_overhead < 0:
            raise ValueError("comm_overhead must be non-negative")

    def throughput(self, task: str, devices: int) -> float:
        return self.coefficients[task] * devices**self.alpha


@dataclass(frozen=True)
class ProfileTable:
    """Measured stage durations; anything missing falls back to the model."""

    entries: dict[tuple[str, int], float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if any(duration <= 0 for duration in self.entries.values()):
            raise ValueError("profiled durations must be positive")

    def lookup(self, task: str, devices: int) -> float | None:
        return self.entries.get((task, devices))


def enumerate_allocations(budget: int, tasks: tuple[str, ...]) -> list[Allocation]:
    """All ways to give each task >= 1 device, lexicographic by counts."""
    if budget < len(tasks):
        raise InfeasibleBudget(
            f"budget {budget} cannot cover {len(tasks)} tasks at one device each"
        )
    if not tasks:
        raise InfeasibleBudget("no tasks to allocate for")
    out: list[Allocation] = []

    def fill(prefix: list[int], remaining: int, slots: int) -> None:
        if slots == 1:
            out.append(Allocation(tasks, (*prefix, remaining)))
            return
        for count in range(1, remaining - (slots - 1) + 1):
            fill([*prefix, count], remaining - count, slots - 1)

    fill([], budget, len(tasks))
    return out


def analytic_time(
    model: AnalyticModel,
    task: str,
    allocation: Allocation,
    workload: float,
) -> float:
    """Predicted stage duration for one task under this allocation."""
    devices = allocation.count_for(task)
    return workload / model.throughput(task, devices) + model.comm_overhead


def stage_time(
    model: AnalyticModel,
    task: str,
    allocation: Allocation,
    workload: float,
    profile: ProfileTable | None = None,
) -> float:
    if profile is not None:
        measured = profile.lookup(task, allocation.count_for(task))
        if measured is not None:
            return measured
    return analytic_time(model, task, allocation, workload)


def prune(
    candidates: list[Allocation],
    model: AnalyticModel,
    workloads: dict[str, float],
    keep_k: int,
    profile: ProfileTable | None = None,
) -> list[Allocation]:
    """Keep the k allocations with the smallest worst-stage time.

    The bottleneck heuristic: a pipeline runs at the speed of its slowest
    stage, so the max over tasks is the score. Ties break lexicographic.
    """
    if keep_k < 1:
        raise ValueError("keep_k must be >= 1")

    def score(alloc: Allocation) -> float:
        return max(
            stage_time(model, task, alloc, workloads.get(task, 0.0), profile)
            for task in alloc.tasks
        )

    ranked = sorted(candidates, key=lambda alloc: (score(alloc), alloc.counts))
    return ranked[:keep_k]


@dataclass(frozen=True)
class Finalist:
    allocation: Allocation
    micro_batch: int | None
    report: SimReport


@dataclass(frozen=True)
class PlanResult:
    allocation: Allocation
    report: SimReport
    micro_batch: int | None
    finalists: tuple[Finalist, ...]


def scenario_for(
    template: SimScenario,
    allocation: Allocation,
    micro_batch: int | None = None,
) -> SimScenario:
    overrides: dict = {}
    for task in allocation.tasks:
        if task not in TASK_FIELDS:
            raise ValueError(f"unknown task {task!r}; expected {sorted(TASK_FIELDS)}")
        overrides[TASK_FIELDS[task]] = allocation.count_for(task)
    if micro_batch is not None:
        overrides["rollout_micro_batch"] = micro_batch
        overrides["train_micro_batch"] = micro_batch
    return template.with_overrides(**overrides)


def plan(
    budget: int,
    tasks: tuple[str, ...],
    workloads: dict[str, float],
    model: AnalyticModel,
    template: SimScenario,
    keep_k: int | None = None,
    profile: ProfileTable | None = None,
    micro_batch_grid: tuple[int, ...] | None = None,
) -> PlanResult:
    """Pick the allocation (and optional micro-batch) with the best simulated time.

    ``keep_k=None`` keeps every candidate, making the search exhaustive over
    simulation; smaller values trust the analytic model to shortlist.
    """
    candidates = enumerate_allocations(budget, tasks)
    if keep_k is None:
        keep_k = len(candidates)
    finalists_in = prune(candidates, model, workloads, keep_k, profile)
    grid: tuple[int | None, ...] = micro_batch_grid or (None,)
    finalists: list[Finalist] = []
    for alloc in finalists_in:
        for mb in grid:
            report = run_sim(scenario_for(template, alloc, mb))
            finalists.append(Finalist(alloc, mb, report))
    best = min(
        finalists,
        key=lambda f: (
            f.report.end_to_end_ns,
            f.allocation.counts,
            f.micro_batch if f.micro_batch is not None else 0,
        ),
    )
    return PlanResult(
        allocation=best.allocation,
        report=best.report,
        micro_batch=best.micro_batch,
        finalists=tuple(finalists),
    )
