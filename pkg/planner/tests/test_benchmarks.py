"""Wall-clock gates. Skipped unless PLANNER_RUN_BENCHMARKS=1."""

import os
import statistics
import time
import unittest

import numpy as np
from django.test import SimpleTestCase
from scipy import stats

from planner.em_planner import plan_cycle
from planner.qp_solver import solve
from planner.scenario import load_scenario
from planner.simulation import run_closed_loop

from .factories import FIXTURE_DIR, lane, moving_obstacle, static_obstacle, world
from .test_qp_solver import random_problem

RUN_BENCHMARKS = os.environ.get("PLANNER_RUN_BENCHMARKS") == "1"
REPEATS = 7


def traffic(count: int):
    """Parked cars on the right shoulder and oncoming cars in the left lane."""
    obstacles = []
    for k in range(count):
        if k % 2:
            obstacles.append(moving_obstacle(f"oncoming{k}", (60.0 + 25.0 * k, 3.75), (-8.0, 0.0)))
        else:
            obstacles.append(static_obstacle(f"parked{k}", 40.0 + 25.0 * k, -2.2, width=1.8))
    return obstacles


def median_seconds(func, repeats: int = REPEATS) -> float:
    samples = []
    for _ in range(repeats):
        started = time.perf_counter()
        func()
        samples.append(time.perf_counter() - started)
    return statistics.median(samples)


@unittest.skipUnless(RUN_BENCHMARKS, "set PLANNER_RUN_BENCHMARKS=1 to run wall-clock gates")
class PlannerBenchmarkTests(SimpleTestCase):
    def test_fixture_qp_solves(self) -> None:
        samples = []
        for path in sorted(FIXTURE_DIR.glob("*.json")):
            if path.stem == "short_obstacle_horizon":
                continue
            scenario = load_scenario(path)
            result = plan_cycle(scenario.candidates(), scenario.world())
            for lane_result in result.lanes:
                if lane_result.ok:
                    samples.extend([lane_result.timings["M1"], lane_result.timings["M2"]])
        self.assertTrue(samples)
        self.assertLessEqual(statistics.median(samples), 10_000)

    def test_warm_start_halves_the_solve_time(self) -> None:
        problem = random_problem(np.random.default_rng(7), n=30, m=600)
        cold = solve(problem)
        cold_time = median_seconds(lambda: solve(problem))
        warm_time = median_seconds(lambda: solve(problem, warm_start=cold))
        self.assertLessEqual(2.0 * warm_time, cold_time)

    def test_cycle_latency(self) -> None:
        candidates = [lane("A"), lane("B", y=3.75, is_change_lane=True)]
        scene = world(traffic(10))
        self.assertLessEqual(median_seconds(lambda: plan_cycle(candidates, scene)), 0.1)

    def test_case_study_runtime(self) -> None:
        scenario = load_scenario(FIXTURE_DIR / "oncoming_nudge.json")
        started = time.perf_counter()
        run_closed_loop(scenario, cycles=20)
        self.assertLess(time.perf_counter() - started, 5.0)

    def test_cycle_time_grows_linearly_with_obstacles(self) -> None:
        candidates = [lane("A", length=1500.0), lane("B", y=3.75, length=1500.0, is_change_lane=True)]
        counts = [1, 5, 10, 25, 50]
        seconds = [median_seconds(lambda: plan_cycle(candidates, world(traffic(n))), repeats=3) for n in counts]
        fit = stats.linregress(counts, seconds)
        self.assertGreaterEqual(fit.rvalue**2, 0.9)
