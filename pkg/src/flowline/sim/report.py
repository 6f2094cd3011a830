"""Simulation outputs: Gantt segments, derived metrics, trace export.

Reports serialize to canonical JSON (sorted keys, fixed separators) so a
scenario+seed pair reproduces a byte-identical document.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from ..errors import SimInvariant

# Instance classes that contribute to bubble accounting. The weight
# channel is a transport lane, not hardware, so it is excluded.
INSTANCE_CLASSES = ("rollout", "reference", "train")


@dataclass(frozen=True, slots=True)
class GanttSegment:
    instance: str
    kind: str  # generate | reference | train | h2d_swap | weight_transfer
    start: int
    end: int
    detail: str = ""

    def __post_init__(self) -> None:
        if self.end < self.start:
            raise SimInvariant(f"segment ends before it starts: {self}")


def instance_class(instance: str) -> str:
    return instance.rsplit("-", 1)[0]


def validate_gantt(gantt: list[GanttSegment]) -> None:
    """Segments per instance must be sorted and non-overlapping."""
    last_end: dict[str, int] = {}
    for seg in gantt:
        prev = last_end.get(seg.instance)
        if prev is not None and seg.start < prev:
            raise SimInvariant(
                f"overlapping segments on {seg.instance}: "
                f"{seg.start} < previous end {prev}"
            )
        last_end[seg.instance] = seg.end


def bubble_ratio(gantt: list[GanttSegment], klass: str) -> float:
    """Idle fraction for one instance class over the run's global span.

    Every instance of the class is charged the full span; whatever it did
    not spend in busy segments is idle (bubble) time.
    """
    if not gantt:
        return 0.0
    span_start = min(seg.start for seg in gantt)
    span_end = max(seg.end for seg in gantt)
    span = span_end - span_start
    if span <= 0:
        return 0.0
    instances = sorted(
        {seg.instance for seg in gantt if instance_class(seg.instance) == klass}
    )
    if not instances:
        return 0.0
    busy = {name: 0 for name in instances}
    for seg in gantt:
        if seg.instance in busy:
            busy[seg.instance] += seg.end - seg.start
    idle = sum(span - b for b in busy.values())
    ratio = idle / (span * len(instances))
    if not 0.0 <= ratio <= 1.0:
        raise SimInvariant(f"bubble ratio {ratio} outside [0, 1]")
    return ratio


@dataclass
class SimReport:
    """Everything a run produced, ready for serialization and rendering."""

    mode: str
    total_rows: int
    iterations: int
    seed: int
    end_to_end_ns: int
    samples_per_second: float
    bubble_ratios: dict[str, float]
    staleness_histogram: dict[int, int]
    gantt: list[GanttSegment]
    counters: dict[str, int]
    version_stalls_by_iteration: dict[int, int] = field(default_factory=dict)
    versions_per_step: dict[int, list[int]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "total_rows": self.total_rows,
            "iterations": self.iterations,
            "seed": self.seed,
            "end_to_end_ns": self.end_to_end_ns,
            "samples_per_second": self.samples_per_second,
            "bubble_ratios": dict(sorted(self.bubble_ratios.items())),
            "staleness_histogram": {
                str(k): v for k, v in sorted(self.staleness_histogram.items())
            },
            "counters": dict(sorted(self.counters.items())),
            "version_stalls_by_iteration": {
                str(k): v
                for k, v in sorted(self.version_stalls_by_iteration.items())
            },
            "versions_per_step": {
                str(k): list(v) for k, v in sorted(self.versions_per_step.items())
            },
            "gantt": [
                {
                    "instance": seg.instance,
                    "kind": seg.kind,
                    "start": seg.start,
                    "end": seg.end,
                    "detail": seg.detail,
                }
                for seg in self.gantt
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


def report_from_dict(data: dict) -> SimReport:
    gantt = [
        GanttSegment(
            instance=seg["instance"],
            kind=seg["kind"],
            start=seg["start"],
            end=seg["end"],
            detail=seg.get("detail", ""),
        )
        for seg in data["gantt"]
    ]
    return SimReport(
        mode=data["mode"],
        total_rows=data["total_rows"],
        iterations=data["iterations"],
        seed=data["seed"],
        end_to_end_ns=data["end_to_end_ns"],
        samples_per_second=data["samples_per_second"],
        bubble_ratios=dict(data["bubble_ratios"]),
        staleness_histogram={
            int(k): v for k, v in data["staleness_histogram"].items()
        },
        gantt=gantt,
        counters=dict(data["counters"]),
        version_stalls_by_iteration={
            int(k): v for k, v in data["version_stalls_by_iteration"].items()
        },
        versions_per_step={
            int(k): list(v) for k, v in data["versions_per_step"].items()
        },
    )


def export_trace(report: SimReport, path: str | Path, fmt: str) -> Path:
    """Write the Gantt trace as JSON lines or a chrome://tracing document."""
    path = Path(path)
    if fmt == "json_lines":
        with path.open("w", encoding="utf-8") as fh:
            for seg in report.gantt:
                fh.write(
                    json.dumps(
                        {
                            "instance": seg.instance,
                            "kind": seg.kind,
                            "start_ns": seg.start,
                            "end_ns": seg.end,
                            "detail": seg.detail,
                        },
                        sort_keys=True,
                    )
                )
                fh.write("\n")
        return path
    if fmt == "chrome_trace":
        instances = sorted({seg.instance for seg in report.gantt})
        tids = {name: i + 1 for i, name in enumerate(instances)}
        events = [
            {
                "name": seg.kind,
                "cat": instance_class(seg.instance),
                "ph": "X",
                "ts": seg.start / 1000.0,  # chrome tracing wants microseconds
                "dur": (seg.end - seg.start) / 1000.0,
                "pid": 1,
                "tid": tids[seg.instance],
                "args": {"detail": seg.detail},
            }
            for seg in report.gantt
        ]
        meta = [
            {
                "name": "thread_name",
                "ph": "M",
                "pid": 1,
                "tid": tid,
                "args": {"name": name},
            }
            for name, tid in tids.items()
        ]
        doc = {"traceEvents": meta + events, "displayTimeUnit": "ms"}
        path.write_text(json.dumps(doc, sort_keys=True), encoding="utf-8")
        return path
    raise ValueError(f"unknown trace format {fmt!r}")
