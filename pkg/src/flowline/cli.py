"""Process entry points: servers, simulation runs, planning, trace export.

Exit codes: 0 success, 2 config error, 3 protocol or connectivity error,
4 simulation invariant violation. The log level comes from --log-level
or the FLOWLINE_LOG_LEVEL environment variable.
"""

from __future__ import annotations

import json
import logging
import sys
import time
from pathlib import Path

import click
import yaml

from .coordinator import (
    RolloutInstanceState,
    StalenessTracker,
    WeightChannel,
    WeightCoordinator,
)
from .errors import (
    InfeasibleBudget,
    ProtocolError,
    ScenarioInvalid,
    SimInvariant,
)
from .planner import AnalyticModel, ProfileTable, plan
from .servers import ControllerServer, CoordinatorServer, StorageServer
from .sim import (
    export_trace,
    report_from_dict,
    run_sim,
    scenario_from_dict,
)
from .sim.figures import (
    render_gantt,
    render_mode_comparison,
    write_gantt_csv,
    write_summary_csv,
)
from .storage import PartitionMap, StorageUnit
from .transport import parse_endpoint
from .types import StalenessBound, TaskSpec

EXIT_CONFIG = 2
EXIT_PROTOCOL = 3
EXIT_INVARIANT = 4

COMPARE_MODES = ("sequential", "streamed", "streamed_async")

log = logging.getLogger(__name__)


class ConfigError(Exception):
    pass


def _fail(code: int, message: str) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _load_yaml(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must hold a mapping at the top level")
    return data


def _require(config: dict, key: str, kind: type | tuple[type, ...], where: str):
    if key not in config:
        raise ConfigError(f"{where} is missing required key {key!r}")
    value = config[key]
    wanted = kind if isinstance(kind, tuple) else (kind,)
    if (int in wanted and isinstance(value, bool)) or not isinstance(value, wanted):
        names = "/".join(k.__name__ for k in wanted)
        raise ConfigError(
            f"{where}.{key} must be {names}, got {type(value).__name__}"
        )
    return value


def _task_specs(config: dict) -> list[TaskSpec]:
    entries = _require(config, "tasks", list, "topology")
    if not entries:
        raise ConfigError("topology.tasks must not be empty")
    specs = []
    for i, entry in enumerate(entries):
        if not isinstance(entry, dict):
            raise ConfigError(f"topology.tasks[{i}] must be a mapping")
        name = _require(entry, "name", str, f"tasks[{i}]")
        inputs = tuple(_require(entry, "inputs", list, f"tasks[{i}]"))
        outputs = tuple(entry.get("outputs", ()))
        specs.append(TaskSpec(name, inputs, outputs))
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ConfigError("task names must be unique")
    return specs


def _check_unique_endpoints(config: dict) -> None:
    endpoints = list(config.get("storage", []))
    if "controller" in config:
        endpoints.append(config["controller"])
    coordinator = config.get("coordinator")
    if isinstance(coordinator, dict) and "endpoint" in coordinator:
        endpoints.append(coordinator["endpoint"])
    if len(set(endpoints)) != len(endpoints):
        raise ConfigError("endpoints must be unique across the topology")


def build_storage_server(config: dict, unit_id: int) -> StorageServer:
    _check_unique_endpoints(config)
    storage = _require(config, "storage", list, "topology")
    total_rows = _require(config, "total_rows", int, "topology")
    epoch = _require(config, "epoch", int, "topology")
    if not 0 <= unit_id < len(storage):
        raise ConfigError(
            f"unit id {unit_id} out of range for {len(storage)} storage entries"
        )
    partition = PartitionMap(len(storage))
    owned = [r for r in range(total_rows) if partition.unit_for(r) == unit_id]
    unit = StorageUnit(unit_id, epoch, owned)
    return StorageServer(unit, parse_endpoint(storage[unit_id]))


def build_controller_server(config: dict) -> ControllerServer:
    _check_unique_endpoints(config)
    storage = _require(config, "storage", list, "topology")
    endpoint = _require(config, "controller", str, "topology")
    total_rows = _require(config, "total_rows", int, "topology")
    epoch = _require(config, "epoch", int, "topology")
    specs = _task_specs(config)
    return ControllerServer(
        specs,
        epoch,
        total_rows,
        dict(enumerate(storage)),
        parse_endpoint(endpoint),
    )


def build_coordinator_server(config: dict) -> CoordinatorServer:
    _check_unique_endpoints(config)
    section = _require(config, "coordinator", dict, "topology")
    endpoint = _require(section, "endpoint", str, "coordinator")
    instances = _require(section, "instances", list, "coordinator")
    if not instances or len(set(instances)) != len(instances):
        raise ConfigError("coordinator.instances must be non-empty and unique")
    channel = section.get("channel", "asynchronous")
    staggered = section.get("staggered_concurrency", 0)
    coordinator = WeightCoordinator(
        channel=WeightChannel(channel),
        instances={name: RolloutInstanceState(name) for name in instances},
        tracker=StalenessTracker(
            StalenessBound(section.get("staleness_bound", 1))
        ),
        staggered_limit=staggered or None,
    )
    return CoordinatorServer(coordinator, parse_endpoint(endpoint))


def _register_with_retry(server: ControllerServer, attempts: int) -> None:
    for attempt in range(attempts):
        try:
            server.register_with_storage()
            return
        except (ConnectionError, OSError, ProtocolError):
            if attempt == attempts - 1:
                raise
            time.sleep(0.5)


def _serve(server, banner: str) -> None:
    click.echo(banner)
    try:
        server.serve_forever(poll_interval=0.2)
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()


@click.group()
@click.option(
    "--log-level",
    envvar="FLOWLINE_LOG_LEVEL",
    default="warning",
    show_default=True,
    type=click.Choice(["debug", "info", "warning", "error"]),
    help="Logging verbosity (or set FLOWLINE_LOG_LEVEL).",
)
def main(log_level: str) -> None:
    """Streaming sample exchange: servers, simulator, planner."""
    logging.basicConfig(
        level=getattr(logging, log_level.upper()),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )


@main.command("serve-storage")
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--unit-id", required=True, type=int, help="Index into storage list.")
def serve_storage(config_path: str, unit_id: int) -> None:
    """Run one data-plane storage unit from a topology config."""
    try:
        server = build_storage_server(_load_yaml(config_path), unit_id)
    except (ConfigError, ValueError) as exc:
        _fail(EXIT_CONFIG, str(exc))
    except OSError as exc:
        _fail(EXIT_PROTOCOL, f"cannot bind storage endpoint: {exc}")
    _serve(server, f"storage unit {unit_id} serving on {server.endpoint}")


@main.command("serve-controller")
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False))
@click.option(
    "--register-attempts",
    default=30,
    show_default=True,
    help="Storage dial retries before giving up (0.5 s apart).",
)
def serve_controller(config_path: str, register_attempts: int) -> None:
    """Run the control plane: every task's controller plus service verbs."""
    try:
        server = build_controller_server(_load_yaml(config_path))
    except (ConfigError, ValueError) as exc:
        _fail(EXIT_CONFIG, str(exc))
    except OSError as exc:
        _fail(EXIT_PROTOCOL, f"cannot bind controller endpoint: {exc}")
    try:
        _register_with_retry(server, register_attempts)
    except (ConnectionError, OSError, ProtocolError) as exc:
        server.server_close()
        _fail(EXIT_PROTOCOL, f"storage registration failed: {exc}")
    _serve(server, f"controller serving on {server.endpoint}")


@main.command("serve-coordinator")
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False))
def serve_coordinator(config_path: str) -> None:
    """Run the weight-version coordinator."""
    try:
        server = build_coordinator_server(_load_yaml(config_path))
    except (ConfigError, ValueError) as exc:
        _fail(EXIT_CONFIG, str(exc))
    except OSError as exc:
        _fail(EXIT_PROTOCOL, f"cannot bind coordinator endpoint: {exc}")
    _serve(server, f"coordinator serving on {server.endpoint}")


def _scenario_dict(config: dict) -> dict:
    section = config.get("scenario", config)
    if not isinstance(section, dict):
        raise ConfigError("scenario section must be a mapping")
    return dict(section)


@main.command("run-sim")
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False))
@click.option(
    "--out",
    type=click.Path(file_okay=False),
    default="sim-out",
    show_default=True,
    help="Directory for the report, delimited output, and figures.",
)
@click.option("--mode", default=None, help="Override the scenario mode.")
@click.option("--iterations", default=None, type=int, help="Override iterations.")
@click.option("--seed", default=None, type=int, help="Override the RNG seed.")
@click.option(
    "--compare/--no-compare",
    default=False,
    show_default=True,
    help="Also run the other execution modes and render a comparison figure.",
)
@click.option(
    "--traces/--no-traces",
    default=False,
    show_default=True,
    help="Also export JSON-lines and chrome-trace event files.",
)
def run_sim_cmd(
    config_path: str,
    out: str,
    mode: str | None,
    iterations: int | None,
    seed: int | None,
    compare: bool,
    traces: bool,
) -> None:
    """Simulate a pipeline scenario and write the report artifacts."""
    try:
        raw = _scenario_dict(_load_yaml(config_path))
        if mode is not None:
            raw["mode"] = mode
        if iterations is not None:
            raw["iterations"] = iterations
        if seed is not None:
            raw["seed"] = seed
        scenario = scenario_from_dict(raw)
    except (ConfigError, ScenarioInvalid) as exc:
        _fail(EXIT_CONFIG, str(exc))

    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        reports = [run_sim(scenario)]
        if compare:
            for other in COMPARE_MODES:
                if other != scenario.mode:
                    raw_other = dict(raw, mode=other)
                    reports.append(run_sim(scenario_from_dict(raw_other)))
    except SimInvariant as exc:
        _fail(EXIT_INVARIANT, f"simulation invariant violated: {exc}")
    except ScenarioInvalid as exc:
        _fail(EXIT_CONFIG, str(exc))

    primary = reports[0]
    (out_dir / "report.json").write_text(primary.to_json() + "\n")
    write_summary_csv(reports, out_dir / "summary.csv")
    write_gantt_csv(primary, out_dir / "gantt.csv")
    render_gantt(primary, out_dir / "gantt.png")
    if compare:
        render_mode_comparison(reports, out_dir / "mode_comparison.png")
    if traces:
        export_trace(primary, out_dir / "trace.jsonl", "json_lines")
        export_trace(primary, out_dir / "trace_chrome.json", "chrome_trace")

    for report in reports:
        click.echo(
            f"{report.mode}: end_to_end={report.end_to_end_ns / 1e6:.3f} ms"
            f" throughput={report.samples_per_second:.1f} samples/s"
        )
    click.echo(f"artifacts written to {out_dir}/")


def _plan_inputs(config: dict):
    tasks_cfg = _require(config, "tasks", dict, "plan config")
    if not tasks_cfg:
        raise ConfigError("plan config needs at least one task")
    tasks = tuple(sorted(tasks_cfg))
    workloads = {}
    coefficients = {}
    for name, entry in tasks_cfg.items():
        if not isinstance(entry, dict):
            raise ConfigError(f"tasks.{name} must be a mapping")
        workloads[name] = float(_require(entry, "workload", (int, float), name))
        coefficients[name] = float(
            _require(entry, "coefficient", (int, float), name)
        )
    model = AnalyticModel(
        coefficients,
        alpha=float(config.get("alpha", 0.9)),
        comm_overhead=float(config.get("comm_overhead", 0.0)),
    )
    profile = None
    if config.get("profile"):
        entries = {}
        for row in config["profile"]:
            entries[(row["task"], int(row["devices"]))] = float(row["duration"])
        profile = ProfileTable(entries)
    grid = config.get("micro_batch_grid")
    if grid is not None:
        grid = tuple(int(g) for g in grid)
    template = scenario_from_dict(_scenario_dict(config))
    return tasks, workloads, model, profile, grid, template


@main.command("plan")
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--budget", default=None, type=int, help="Override device budget.")
@click.option(
    "--keep-k",
    default=None,
    type=int,
    help="Finalists simulated after analytic pruning (default: all).",
)
@click.option(
    "--out",
    type=click.Path(file_okay=False),
    default=None,
    help="Optional directory for plan.json and finalists.csv.",
)
def plan_cmd(
    config_path: str, budget: int | None, keep_k: int | None, out: str | None
) -> None:
    """Search device allocations with the hybrid cost model."""
    try:
        config = _load_yaml(config_path)
        tasks, workloads, model, profile, grid, template = _plan_inputs(config)
        if budget is None:
            budget = _require(config, "budget", int, "plan config")
        if keep_k is None:
            keep_k = config.get("keep_k")
        result = plan(
            budget,
            tasks,
            workloads,
            model,
            template,
            keep_k=keep_k,
            profile=profile,
            micro_batch_grid=grid,
        )
    except (ConfigError, ScenarioInvalid, InfeasibleBudget, ValueError) as exc:
        _fail(EXIT_CONFIG, str(exc))
    except SimInvariant as exc:
        _fail(EXIT_INVARIANT, f"simulation invariant violated: {exc}")

    chosen = result.allocation.as_dict()
    click.echo(
        "chosen: "
        + " ".join(f"{task}={chosen[task]}" for task in result.allocation.tasks)
        + (f" micro_batch={result.micro_batch}" if result.micro_batch else "")
        + f" end_to_end={result.report.end_to_end_ns / 1e6:.3f} ms"
    )
    click.echo("finalists (allocation | micro_batch | end_to_end ms):")
    for finalist in result.finalists:
        alloc = finalist.allocation.as_dict()
        cells = " ".join(f"{t}={alloc[t]}" for t in finalist.allocation.tasks)
        mb = finalist.micro_batch if finalist.micro_batch else "-"
        click.echo(
            f"  {cells} | {mb} | {finalist.report.end_to_end_ns / 1e6:.3f}"
        )

    if out is not None:
        out_dir = Path(out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "plan.json").write_text(
            json.dumps(
                {
                    "chosen": chosen,
                    "micro_batch": result.micro_batch,
                    "end_to_end_ns": result.report.end_to_end_ns,
                },
                indent=2,
                sort_keys=True,
            )
            + "\n"
        )
        with (out_dir / "finalists.csv").open("w", newline="") as fh:
            fh.write("allocation,micro_batch,end_to_end_ns\n")
            for finalist in result.finalists:
                alloc = finalist.allocation.as_dict()
                cells = ";".join(
                    f"{t}={alloc[t]}" for t in finalist.allocation.tasks
                )
                fh.write(
                    f"{cells},{finalist.micro_batch or ''},"
                    f"{finalist.report.end_to_end_ns}\n"
                )
        click.echo(f"plan artifacts written to {out_dir}/")


@main.command("trace-export")
@click.argument("report_path", type=click.Path(exists=True, dir_okay=False))
@click.option(
    "--out",
    type=click.Path(file_okay=False),
    default="trace-out",
    show_default=True,
    help="Directory for the exported trace files and figure.",
)
@click.option(
    "--fmt",
    default="both",
    show_default=True,
    type=click.Choice(["json_lines", "chrome_trace", "both"]),
)
def trace_export_cmd(report_path: str, out: str, fmt: str) -> None:
    """Re-export a saved simulation report as traces and a Gantt figure."""
    try:
        with open(report_path, encoding="utf-8") as fh:
            report = report_from_dict(json.load(fh))
    except (OSError, json.JSONDecodeError) as exc:
        _fail(EXIT_CONFIG, f"cannot load report: {exc}")
    except (KeyError, TypeError, ValueError) as exc:
        _fail(EXIT_CONFIG, f"not a simulation report: {exc}")

    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_gantt_csv(report, out_dir / "gantt.csv")
    render_gantt(report, out_dir / "gantt.png")
    if fmt in ("json_lines", "both"):
        export_trace(report, out_dir / "trace.jsonl", "json_lines")
    if fmt in ("chrome_trace", "both"):
        export_trace(report, out_dir / "trace_chrome.json", "chrome_trace")
    click.echo(f"trace artifacts written to {out_dir}/")


if __name__ == "__main__":
    main()
