"""Rendered artifacts for simulation reports: PNG figures and CSV tables.

Rendering is headless (Agg) so the CLI can run in any environment. Figures
are diagnostic companions to the delimited output, not the source of truth;
everything drawn here can be recomputed from the report alone.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .report import SimReport, instance_class

KIND_COLORS = {
    "generate": "#4878cf",
    "reference": "#9467bd",
    "train": "#ee854a",
    "h2d_swap": "#d65f5f",
    "weight_transfer": "#6acc65",
}

CLASS_ORDER = {"rollout": 0, "reference": 1, "train": 2, "channel": 3}


def _lane_order(instance: str) -> tuple[int, str]:
    return CLASS_ORDER.get(instance_class(instance), 9), instance


def render_gantt(report: SimReport, path: str | Path) -> Path:
    """Draw the execution timeline, one horizontal lane per instance."""
    path = Path(path)
    lanes = sorted({seg.instance for seg in report.gantt}, key=_lane_order)
    index = {name: i for i, name in enumerate(lanes)}
    fig, ax = plt.subplots(figsize=(11, 0.6 * max(4, len(lanes)) + 1.2))
    used_kinds = []
    for seg in report.gantt:
        if seg.kind not in used_kinds:
            used_kinds.append(seg.kind)
        ax.broken_barh(
            [((seg.start) / 1e6, (seg.end - seg.start) / 1e6)],
            (index[seg.instance] - 0.38, 0.76),
            facecolors=KIND_COLORS.get(seg.kind, "#999999"),
            edgecolor="none",
        )
    ax.set_yticks(range(len(lanes)))
    ax.set_yticklabels(lanes)
    ax.invert_yaxis()
    ax.set_xlabel("time (ms)")
    ax.set_title(
        f"{report.mode}: {report.iterations} iterations, "
        f"G={report.total_rows}, e2e={report.end_to_end_ns / 1e6:.1f} ms"
    )
    handles = [
        plt.Rectangle((0, 0), 1, 1, color=KIND_COLORS.get(kind, "#999999"))
        for kind in used_kinds
    ]
    ax.legend(handles, used_kinds, loc="upper right", fontsize=8)
    ax.grid(axis="x", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def render_mode_comparison(reports: list[SimReport], path: str | Path) -> Path:
    """Throughput and bubble-ratio bars for a set of runs (usually one per mode)."""
    if not reports:
        raise ValueError("need at least one report to compare")
    path = Path(path)
    labels = [r.mode for r in reports]
    fig, (left, right) = plt.subplots(1, 2, figsize=(11, 4.2))

    left.bar(labels, [r.samples_per_second for r in reports], color="#4878cf")
    left.set_ylabel("samples / s")
    left.set_title("throughput")
    left.tick_params(axis="x", rotation=20)

    classes = sorted({klass for r in reports for klass in r.bubble_ratios})
    width = 0.8 / max(1, len(classes))
    for i, klass in enumerate(classes):
        xs = [j + i * width for j in range(len(reports))]
        right.bar(
            xs,
            [r.bubble_ratios.get(klass, 0.0) for r in reports],
            width=width,
            label=klass,
            color=KIND_COLORS.get(
                {"rollout": "generate", "reference": "reference", "train": "train"}.get(
                    klass, klass
                ),
                "#999999",
            ),
        )
    right.set_xticks([j + 0.4 - width / 2 for j in range(len(reports))])
    right.set_xticklabels(labels, rotation=20)
    right.set_ylabel("bubble ratio")
    right.set_title("idle fraction by instance class")
    right.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def write_gantt_csv(report: SimReport, path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["instance", "kind", "start_ns", "end_ns", "detail"])
        for seg in report.gantt:
            writer.writerow([seg.instance, seg.kind, seg.start, seg.end, seg.detail])
    return path


def write_summary_csv(reports: list[SimReport], path: str | Path) -> Path:
    """One row per run: the headline metrics of each report."""
    path = Path(path)
    classes = sorted({klass for r in reports for klass in r.bubble_ratios})
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(
            [
                "mode",
                "iterations",
                "total_rows",
                "seed",
                "end_to_end_ns",
                "samples_per_second",
                *[f"bubble_{klass}" for klass in classes],
                "admitted",
                "dropped",
                "discarded",
                "version_stalls",
            ]
        )
        for r in reports:
            writer.writerow(
                [
                    r.mode,
                    r.iterations,
                    r.total_rows,
                    r.seed,
                    r.end_to_end_ns,
                    f"{r.samples_per_second:.3f}",
                    *[f"{r.bubble_ratios.get(klass, 0.0):.6f}" for klass in classes],
                    r.counters.get("admitted", 0),
                    r.counters.get("dropped", 0),
                    r.counters.get("discarded", 0),
                    sum(r.version_stalls_by_iteration.values()),
                ]
            )
    return path
