"""Declarative description of one pipeline workload to simulate.

A scenario pins every knob that affects timing: the workflow regime, batch
geometry, instance counts, per-task costs, weight-movement durations, the
staleness bound, and the seed. Validation happens up front so a bad file
fails before any simulation state is built.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field, fields, replace

from ..errors import ScenarioInvalid

MODES = (
    "sequential",
    "streamed",
    "streamed_async",
    "streamed_async_staggered",
)

REJECT_POLICIES = ("drop", "requeue_for_discard")


@dataclass(frozen=True)
class LengthDist:
    """Response-length distribution: fixed(L) or lognormal(mu, sigma)."""

    kind: str = "fixed"
    length: int = 128
    mu: float = 4.0
    sigma: float = 1.0
    max_length: int = 4096

    def __post_init__(self) -> None:
        if self.kind not in ("fixed", "lognormal"):
            raise ScenarioInvalid(f"unknown length distribution {self.kind!r}")
        if self.kind == "fixed" and self.length < 1:
            raise ScenarioInvalid("fixed length must be >= 1")
        if self.max_length < 1:
            raise ScenarioInvalid("max_length must be >= 1")


def sample_lengths(dist: LengthDist, count: int, seed: int) -> list[int]:
    """Deterministic token counts; lognormal draws are clipped to [1, max]."""
    if count < 0:
        raise ScenarioInvalid("count must be non-negative")
    if dist.kind == "fixed":
        return [dist.length] * count
    rng = random.Random(seed)
    return [
        min(max(1, round(rng.lognormvariate(dist.mu, dist.sigma))), dist.max_length)
        for _ in range(count)
    ]


@dataclass(frozen=True)
class SimScenario:
    """Full workload description; every field participates in determinism."""

    mode: str = "streamed_async"
    total_rows: int = 64
    rollout_instances: int = 4
    train_instances: int = 2
    response_lengths: LengthDist = field(
        default_factory=lambda: LengthDist(
            kind="lognormal", mu=5.63, sigma=0.8, max_length=4096
        )
    )
    gen_cost_per_token_ns: int = 40_000
    train_cost_per_sample_ns: int = 5_000_000
    weight_transfer_ns: int = 20_000_000
    h2d_swap_ns: int = 2_000_000
    staleness_bound: int = 1
    iterations: int = 8
    seed: int = 42
    rollout_micro_batch: int = 4
    train_micro_batch: int = 8
    num_storage_units: int = 2
    packing_policy: str = "fifo"
    reference_instances: int = 0
    ref_cost_per_sample_ns: int = 0
    ref_micro_batch: int = 8
    staggered_concurrency: int = 1
    production_gate: bool = True
    reject_policy: str = "drop"
    weight_payload_bytes: int = 1024

    def validate(self) -> None:
        problems = []
        if self.mode not in MODES:
            problems.append(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.total_rows < 1:
            problems.append("total_rows must be >= 1")
        if self.rollout_instances < 1:
            problems.append("rollout_instances must be >= 1")
        if self.train_instances < 1:
            problems.append("train_instances must be >= 1")
        if self.reference_instances < 0:
            problems.append("reference_instances must be >= 0")
        for name in (
            "gen_cost_per_token_ns",
            "train_cost_per_sample_ns",
            "weight_transfer_ns",
            "h2d_swap_ns",
            "ref_cost_per_sample_ns",
        ):
            if getattr(self, name) < 0:
                problems.append(f"{name} must be >= 0")
        if self.staleness_bound < 0:
            problems.append("staleness_bound must be >= 0")
        if self.iterations < 1:
            problems.append("iterations must be >= 1")
        for name in ("rollout_micro_batch", "train_micro_batch", "ref_micro_batch"):
            value = getattr(self, name)
            if value < 1:
                problems.append(f"{name} must be >= 1")
            elif value > self.total_rows:
                problems.append(f"{name} cannot exceed total_rows")
        if self.num_storage_units < 1:
            problems.append("num_storage_units must be >= 1")
        if self.packing_policy not in ("fifo", "token_balanced"):
            problems.append(f"unknown packing_policy {self.packing_policy!r}")
        if self.reject_policy not in REJECT_POLICIES:
            problems.append(f"reject_policy must be one of {REJECT_POLICIES}")
        if self.mode == "streamed_async_staggered":
            if not 1 <= self.staggered_concurrency < self.rollout_instances:
                problems.append(
                    "staggered_concurrency must be in [1, rollout_instances)"
                )
        if self.weight_payload_bytes < 0:
            problems.append("weight_payload_bytes must be >= 0")
        if problems:
            raise ScenarioInvalid("; ".join(problems))

    def with_overrides(self, **kwargs) -> "SimScenario":
        return replace(self, **kwargs)

    def lengths_for_epoch(self, epoch: int) -> list[int]:
        """Per-epoch response lengths; one deterministic stream per epoch."""
        return sample_lengths(
            self.response_lengths, self.total_rows, self.seed * 1_000_003 + epoch
        )

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, LengthDist):
                value = {
                    "kind": value.kind,
                    "length": value.length,
                    "mu": value.mu,
                    "sigma": value.sigma,
                    "max_length": value.max_length,
                }
            out[f.name] = value
        return out


def scenario_from_dict(data: dict) -> SimScenario:
    """Build and validate a scenario from a parsed config mapping."""
    if not isinstance(data, dict):
        raise ScenarioInvalid("scenario document must be a mapping")
    known = {f.name for f in fields(SimScenario)}
    unknown = set(data) - known
    if unknown:
        raise ScenarioInvalid(f"unknown scenario fields: {sorted(unknown)}")
    kwargs = dict(data)
    if "response_lengths" in kwargs:
        spec = kwargs["response_lengths"]
        if not isinstance(spec, dict):
            raise ScenarioInvalid("response_lengths must be a mapping")
        dist_known = {f.name for f in fields(LengthDist)}
        dist_unknown = set(spec) - dist_known
        if dist_unknown:
            raise ScenarioInvalid(
                f"unknown response_lengths fields: {sorted(dist_unknown)}"
            )
        kwargs["response_lengths"] = LengthDist(**spec)
    try:
        scenario = SimScenario(**kwargs)
    except TypeError as exc:
        raise ScenarioInvalid(str(exc)) from exc
    scenario.validate()
    return scenario
