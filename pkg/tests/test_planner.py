"""Planner: analytic model arithmetic, pruning order, simulated optimum."""

import math
import random

import pytest

from flowline.errors import InfeasibleBudget
from flowline.planner import (
    Allocation,
    AnalyticModel,
    Finalist,
    ProfileTable,
    analytic_time,
    enumerate_allocations,
    plan,
    prune,
    scenario_for,
)
from flowline.sim import LengthDist, SimScenario, run_sim

TWO_TASKS = ("rollout", "train")

# rollout workload is 2x the train workload: t_g=20us/sample, c=10us/sample
TEMPLATE = SimScenario(
    mode="streamed_async",
    total_rows=16,
    rollout_instances=1,
    train_instances=1,
    response_lengths=LengthDist(kind="fixed", length=20),
    gen_cost_per_token_ns=1_000,
    train_cost_per_sample_ns=10_000,
    weight_transfer_ns=0,
    h2d_swap_ns=0,
    iterations=3,
    seed=5,
    rollout_micro_batch=4,
    train_micro_batch=4,
    num_storage_units=2,
)


def linear_model(**coeffs) -> AnalyticModel:
    return AnalyticModel(coefficients=coeffs or {"rollout": 1.0, "train": 1.0}, alpha=1.0)


class TestAnalyticModel:
    def test_linear_scaling_example(self):
        model = AnalyticModel({"rollout": 10.0}, alpha=1.0)
        alloc = Allocation(("rollout",), (2,))
        assert analytic_time(model, "rollout", alloc, 100.0) == pytest.approx(5.0)

    def test_doubling_devices_halves_time_when_linear(self):
        model = AnalyticModel({"train": 3.0}, alpha=1.0)
        one = analytic_time(model, "train", Allocation(("train",), (1,)), 42.0)
        two = analytic_time(model, "train", Allocation(("train",), (2,)), 42.0)
        assert two == pytest.approx(one / 2)

    def test_sublinear_scaling_ratio(self):
        model = AnalyticModel({"rollout": 2.0}, alpha=0.8)
        t1 = analytic_time(model, "rollout", Allocation(("rollout",), (1,)), 10.0)
        t4 = analytic_time(model, "rollout", Allocation(("rollout",), (4,)), 10.0)
        assert t4 / t1 == pytest.approx(4.0**-0.8)

    def test_throughput_non_decreasing_in_devices(self):
        model = AnalyticModel({"rollout": 1.7}, alpha=0.6)
        values = [model.throughput("rollout", n) for n in range(1, 9)]
        assert values == sorted(values)

    def test_model_validation(self):
        with pytest.raises(ValueError):
            AnalyticModel({"rollout": 1.0}, alpha=0.0)
        with pytest.raises(ValueError):
            AnalyticModel({"rollout": 0.0})
        with pytest.raises(ValueError):
            AnalyticModel({"rollout": 1.0}, comm_overhead=-1.0)

    def test_profile_entries_override_the_model(self):
        profile = ProfileTable({("rollout", 2): 99.0})
        ranked = prune(
            enumerate_allocations(4, TWO_TASKS),
            linear_model(),
            {"rollout": 4.0, "train": 4.0},
            keep_k=1,
            profile=profile,
        )
        # (2,2) would win on the model alone, but its profiled time is awful
        assert ranked[0].counts != (2, 2)


class TestEnumerationAndPrune:
    def test_compositions_cover_the_budget(self):
        allocs = enumerate_allocations(5, TWO_TASKS)
        assert [a.counts for a in allocs] == [(1, 4), (2, 3), (3, 2), (4, 1)]
        assert all(a.total == 5 for a in allocs)

    def test_budget_below_task_count_is_infeasible(self):
        with pytest.raises(InfeasibleBudget):
            enumerate_allocations(2, ("rollout", "train", "reference"))

    def test_symmetric_tasks_rank_the_even_split_first(self):
        ranked = prune(
            enumerate_allocations(4, TWO_TASKS),
            linear_model(),
            {"rollout": 8.0, "train": 8.0},
            keep_k=len(TWO_TASKS) + 1,
        )
        assert ranked[0].counts == (2, 2)

    def test_keep_k_at_least_candidates_is_identity_on_membership(self):
        candidates = enumerate_allocations(6, TWO_TASKS)
        ranked = prune(candidates, linear_model(), {"rollout": 1.0, "train": 1.0}, 99)
        assert sorted(a.counts for a in ranked) == sorted(a.counts for a in candidates)

    def test_zero_workload_task_cedes_all_devices(self):
        ranked = prune(
            enumerate_allocations(4, TWO_TASKS),
            linear_model(),
            {"rollout": 0.0, "train": 12.0},
            keep_k=1,
        )
        assert ranked[0].counts == (1, 3)

    def test_allocation_rejects_empty_slots(self):
        with pytest.raises(ValueError):
            Allocation(TWO_TASKS, (0, 4))


def brute_force(budget, tasks, template, grid=None):
    finalists = []
    for alloc in enumerate_allocations(budget, tasks):
        for mb in grid or (None,):
            report = run_sim(scenario_for(template, alloc, mb))
            finalists.append(Finalist(alloc, mb, report))
    return min(
        finalists,
        key=lambda f: (
            f.report.end_to_end_ns,
            f.allocation.counts,
            f.micro_batch if f.micro_batch is not None else 0,
        ),
    )


class TestPlan:
    WORKLOADS = {"rollout": 16 * 20_000.0, "train": 16 * 10_000.0}

    def test_heavier_rollout_gets_more_devices(self):
        result = plan(
            6, TWO_TASKS, self.WORKLOADS, linear_model(), TEMPLATE, keep_k=None
        )
        assert result.allocation.as_dict() == {"rollout": 4, "train": 2}

    def test_minimal_budget_returns_the_only_composition(self):
        result = plan(
            2, TWO_TASKS, self.WORKLOADS, linear_model(), TEMPLATE, keep_k=None
        )
        assert result.allocation.counts == (1, 1)
        assert len(result.finalists) == 1

    def test_exhaustive_plan_matches_brute_force(self):
        rng = random.Random(99)
        for _ in range(15):
            tasks = TWO_TASKS if rng.random() < 0.6 else (*TWO_TASKS, "reference")
            template = TEMPLATE.with_overrides(
                gen_cost_per_token_ns=rng.randint(500, 4_000),
                train_cost_per_sample_ns=rng.randint(5_000, 40_000),
                weight_transfer_ns=rng.choice([0, 5_000]),
                h2d_swap_ns=rng.choice([0, 1_000]),
                total_rows=rng.choice([8, 16]),
                iterations=rng.randint(2, 3),
                reference_instances=1 if len(tasks) == 3 else 0,
                ref_cost_per_sample_ns=rng.randint(2_000, 20_000) if len(tasks) == 3 else 0,
                seed=rng.randint(0, 10_000),
            )
            budget = rng.randint(len(tasks), 6)
            model = AnalyticModel({t: rng.uniform(0.5, 2.0) for t in tasks}, alpha=0.9)
            workloads = {t: rng.uniform(1.0, 100.0) for t in tasks}
            result = plan(budget, tasks, workloads, model, template, keep_k=None)
            expected = brute_force(budget, tasks, template)
            assert result.allocation == expected.allocation
            assert result.report.end_to_end_ns == expected.report.end_to_end_ns

    def test_more_budget_never_hurts(self):
        best = math.inf
        for budget in range(2, 8):
            result = plan(
                budget, TWO_TASKS, self.WORKLOADS, linear_model(), TEMPLATE, keep_k=None
            )
            assert result.report.end_to_end_ns <= best
            best = result.report.end_to_end_ns

    def test_pruned_plan_stays_within_ten_percent(self):
        rng = random.Random(4242)
        for _ in range(20):
            gen_cost = rng.randint(500, 3_000)
            train_cost = rng.randint(5_000, 30_000)
            template = TEMPLATE.with_overrides(
                gen_cost_per_token_ns=gen_cost,
                train_cost_per_sample_ns=train_cost,
                seed=rng.randint(0, 10_000),
            )
            workloads = {
                "rollout": 16 * 20.0 * gen_cost,
                "train": 16.0 * train_cost,
            }
            model = AnalyticModel({"rollout": 1.0, "train": 1.0}, alpha=0.9)
            budget = rng.randint(3, 7)
            pruned = plan(budget, TWO_TASKS, workloads, model, template, keep_k=3)
            exact = plan(budget, TWO_TASKS, workloads, model, template, keep_k=None)
            assert (
                pruned.report.end_to_end_ns
                <= 1.10 * exact.report.end_to_end_ns
            )

    def test_micro_batch_grid_can_only_help(self):
        plain = plan(4, TWO_TASKS, self.WORKLOADS, linear_model(), TEMPLATE, keep_k=None)
        grid = plan(
            4,
            TWO_TASKS,
            self.WORKLOADS,
            linear_model(),
            TEMPLATE,
            keep_k=None,
            micro_batch_grid=(2, 4, 8),
        )
        assert grid.report.end_to_end_ns <= plain.report.end_to_end_ns
        assert grid.micro_batch in (2, 4, 8)

    def test_unknown_task_name_is_rejected(self):
        with pytest.raises(ValueError, match="unknown task"):
            scenario_for(TEMPLATE, Allocation(("rollout", "mystery"), (1, 1)))
