"""Discrete-event workload simulation of the streaming pipeline."""

from .engine import PipelineSim, run_sim
from .report import (
    GanttSegment,
    SimReport,
    bubble_ratio,
    export_trace,
    report_from_dict,
    validate_gantt,
)
from .scenario import (
    MODES,
    LengthDist,
    SimScenario,
    sample_lengths,
    scenario_from_dict,
)

__all__ = [
    "MODES",
    "GanttSegment",
    "LengthDist",
    "PipelineSim",
    "SimReport",
    "SimScenario",
    "bubble_ratio",
    "export_trace",
    "report_from_dict",
    "run_sim",
    "sample_lengths",
    "scenario_from_dict",
    "validate_gantt",
]
