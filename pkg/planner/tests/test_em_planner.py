import numpy as np
from django.test import SimpleTestCase

from planner.em_planner import (
    LANE_STAGES,
    LaneResult,
    Regulation,
    TrajectoryCost,
    WarmStartCache,
    comfort_stop,
    iterate_case_study,
    plan_cycle,
    plan_lane,
    regulation_regions,
    select_lane,
)
from planner.exceptions import AllPathsCollide, LaneFailure, OutOfRange
from planner.geometry_frenet import FrenetState
from planner.path_optimizer import NudgeKind
from planner.projection import RegionKind
from planner.scenario import load_scenario
from planner.speed_optimizer import SpeedDecisionKind
from planner.trajectory import Trajectory, straight_ahead

from .factories import ego, fixture_path, footprint, lane, static_obstacle, straight_reference, world


def scored(lane_id: str, total: float, *, violations=(), is_change_lane: bool = False) -> LaneResult:
    trajectory = comfort_stop(ego(), None, 4.0, 1.0, 0.1)
    cost = TrajectoryCost(0.0, total, 0.0, 0.0, total, True)
    return LaneResult(lane_id, is_change_lane, trajectory=trajectory, cost=cost, violations=tuple(violations))


class PlanLaneTests(SimpleTestCase):
    def test_empty_straight_lane_cruises_on_the_centre_line(self) -> None:
        result = plan_lane(lane(), world(), None)
        trajectory = result.trajectory
        self.assertLessEqual(float(np.max(np.abs(trajectory.y))), 1e-3)
        self.assertLessEqual(float(np.max(np.abs(trajectory.v - 10.0))), 1e-2)
        self.assertTrue(np.all(np.diff(trajectory.t) > 0))
        self.assertAlmostEqual(float(trajectory.t[1] - trajectory.t[0]), 0.02)
        self.assertLessEqual(trajectory.kinematic_residual(), 0.05)
        self.assertEqual(result.violations, ())

    def test_each_stage_runs_once(self) -> None:
        result = plan_lane(lane(), world(), None)
        self.assertEqual(result.stage_counts, {stage: 1 for stage in LANE_STAGES})
        self.assertEqual(set(result.timings), set(LANE_STAGES))

    def test_stop_line_is_not_crossed(self) -> None:
        scenario = load_scenario(fixture_path("stop_line"))
        result = plan_cycle(scenario.candidates(), scenario.world())
        chosen = result.chosen
        self.assertIsNotNone(chosen)
        front = chosen.ego_station + float(chosen.speed.evaluate(chosen.speed.horizon)) + scenario.footprint.l_f
        self.assertLessEqual(front, 50.0 + 1e-6)
        self.assertLessEqual(float(chosen.trajectory.v[-1]), 0.1)
        self.assertTrue(chosen.speed.stops)

    def test_speed_limit_is_respected(self) -> None:
        candidate = lane(regulations=[Regulation.speed_limit(8.0)])
        result = plan_lane(candidate, world(v=8.0), None)
        self.assertLessEqual(float(np.max(result.trajectory.v)), 8.0 + 0.02)
        self.assertEqual(result.violations, ())

    def test_keep_clear_zone_gets_a_decision(self) -> None:
        candidate = lane(regulations=[Regulation.keep_clear(40.0, 50.0)])
        result = plan_lane(candidate, world(), None)
        kinds = {d.source_id: d.kind for d in result.speed.decisions}
        self.assertIn(kinds["keep_clear_0"], (SpeedDecisionKind.OVERTAKE, SpeedDecisionKind.YIELD))

    def test_blocked_lane_raises_lane_failure(self) -> None:
        wall = static_obstacle("wall", 40.0, 0.0, length=2.0, width=6.0)
        with self.assertRaises(LaneFailure) as ctx:
            plan_lane(lane(), world([wall]), None)
        self.assertIsInstance(ctx.exception.cause, AllPathsCollide)
        self.assertEqual(ctx.exception.lane_id, "main")

    def test_planning_is_deterministic(self) -> None:
        obstacles = [static_obstacle("parked", 60.0, 1.6, width=1.5)]
        first = plan_lane(lane(), world(obstacles), None)
        second = plan_lane(lane(), world(obstacles), None)
        self.assertEqual(first.trajectory, second.trajectory)
        self.assertEqual(first.to_dict()["cost"], second.to_dict()["cost"])


class RegulationRegionTests(SimpleTestCase):
    def test_stop_line_band_starts_at_the_front_bumper(self) -> None:
        candidate = lane(regulations=[Regulation.stop_line(50.0)])
        (region,) = regulation_regions(candidate, 0.0, footprint(), 8.0)
        self.assertIs(region.kind, RegionKind.STOP_LINE)
        self.assertTrue(region.is_static)
        self.assertEqual(region.bounds_at(4.0)[0], 47.0)

    def test_stop_line_behind_the_bumper_is_dropped(self) -> None:
        candidate = lane(regulations=[Regulation.stop_line(50.0)])
        self.assertEqual(regulation_regions(candidate, 48.0, footprint(), 8.0), [])

    def test_keep_clear_band(self) -> None:
        candidate = lane(regulations=[Regulation.keep_clear(20.0, 30.0)])
        (region,) = regulation_regions(candidate, 0.0, footprint(), 8.0)
        self.assertIs(region.kind, RegionKind.KEEP_CLEAR)
        self.assertEqual(region.bounds_at(0.0), (17.0, 31.0))


class SelectLaneTests(SimpleTestCase):
    def test_single_candidate_wins(self) -> None:
        self.assertEqual(select_lane([scored("a", 3.0)], "a", 0.8).lane_id, "a")

    def test_small_advantage_keeps_current_lane(self) -> None:
        results = [scored("a", -1.0), scored("b", -1.05, is_change_lane=True)]
        self.assertEqual(select_lane(results, "a", 0.8).lane_id, "a")
        results = [scored("a", 1.0), scored("b", 0.95, is_change_lane=True)]
        self.assertEqual(select_lane(results, "a", 0.8).lane_id, "a")

    def test_large_advantage_switches_lane(self) -> None:
        results = [scored("a", -1.0), scored("b", -1.25, is_change_lane=True)]
        self.assertEqual(select_lane(results, "a", 0.8).lane_id, "b")
        results = [scored("a", 1.0), scored("b", 0.79, is_change_lane=True)]
        self.assertEqual(select_lane(results, "a", 0.8).lane_id, "b")

    def test_rule_breaking_current_lane_is_skipped(self) -> None:
        results = [scored("a", -2.0, violations=("stop_line@50",)), scored("b", 5.0, is_change_lane=True)]
        self.assertEqual(select_lane(results, "a", 0.8).lane_id, "b")

    def test_nothing_eligible(self) -> None:
        failed = LaneResult("a", False)
        self.assertIsNone(select_lane([failed, scored("b", 1.0, violations=("speed_limit@8",))], "a", 0.8))


class PlanCycleTests(SimpleTestCase):
    def test_one_candidate_is_returned(self) -> None:
        result = plan_cycle([lane()], world())
        self.assertFalse(result.fallback)
        self.assertEqual(result.chosen_lane, "main")
        self.assertIs(result.trajectory, result.chosen.trajectory)
        self.assertIn("decider", result.timings)

    def test_needs_a_candidate(self) -> None:
        with self.assertRaises(ValueError):
            plan_cycle([], world())

    def test_blocked_current_lane_changes_lane(self) -> None:
        scenario = load_scenario(fixture_path("blocked_lane"))
        result = plan_cycle(scenario.candidates(), scenario.world())
        self.assertFalse(result.lane("A").ok)
        self.assertIsInstance(result.lane("A").failure.cause, AllPathsCollide)
        self.assertTrue(result.lane("B").ok)
        self.assertEqual(result.chosen_lane, "B")

    def test_all_lanes_failed_falls_back_to_a_comfort_stop(self) -> None:
        wall = static_obstacle("wall", 40.0, 0.0, length=2.0, width=6.0)
        with self.assertLogs("planner.em_planner", level="WARNING"):
            result = plan_cycle([lane()], world([wall]))
        self.assertTrue(result.fallback)
        self.assertIsNone(result.chosen_lane)
        trajectory = result.trajectory
        self.assertAlmostEqual(float(trajectory.x[0]), 0.0)
        self.assertTrue(np.all(np.diff(trajectory.v) <= 1e-12))
        self.assertEqual(float(trajectory.v[-1]), 0.0)
        self.assertAlmostEqual(float(trajectory.x[-1]), 10.0**2 / (2 * 4.0))

    def test_warm_start_cache_tracks_successful_lanes(self) -> None:
        cache = WarmStartCache()
        scenario = load_scenario(fixture_path("blocked_lane"))
        plan_cycle(scenario.candidates(), scenario.world(), None, cache=cache)
        self.assertEqual(len(cache), 1)
        self.assertEqual(cache.get("A"), (None, None))
        self.assertIsNotNone(cache.get("B")[0])

    def test_previous_trajectory_beyond_the_lane_end_is_replaced(self) -> None:
        scenario = load_scenario(fixture_path("oncoming_nudge"))
        t = np.arange(0.0, 8.0 + 1e-9, 0.02)
        zeros = np.zeros(t.size)
        beyond = Trajectory(t, 500.0 + 10.0 * t, zeros, zeros, zeros, np.full(t.size, 10.0), zeros)
        ref = scenario.candidates()[0].reference_line
        with self.assertRaises(OutOfRange):
            beyond.station_profile(ref, t)

        result = plan_cycle(scenario.candidates(), scenario.world(), {"main": beyond})
        self.assertFalse(result.fallback)
        self.assertEqual(result.chosen_lane, "main")
        fresh = plan_cycle(scenario.candidates(), scenario.world())
        self.assertEqual(result.chosen.path.nudge_station, fresh.chosen.path.nudge_station)


class ComfortStopTests(SimpleTestCase):
    def test_follows_previous_geometry(self) -> None:
        ref = straight_reference(400.0, y=2.0)
        prev = straight_ahead(ego(0.0, 2.0), FrenetState(s=0.0, l=0.0), ref, 8.0)
        stop = comfort_stop(ego(0.0, 2.0), prev, 4.0, 8.0, 0.02)
        np.testing.assert_allclose(stop.y, 2.0, atol=1e-9)
        self.assertAlmostEqual(float(stop.x[-1]), 12.5)

    def test_standstill(self) -> None:
        stop = comfort_stop(ego(v=0.0), None, 4.0, 2.0, 0.1)
        np.testing.assert_array_equal(stop.v, np.zeros(stop.v.size))
        np.testing.assert_array_equal(stop.x, np.zeros(stop.x.size))


class CaseStudyTests(SimpleTestCase):
    def setUp(self) -> None:
        self.scenario = load_scenario(fixture_path("oncoming_nudge"))

    def test_nudge_moves_closer_on_the_second_cycle(self) -> None:
        (path1, speed1), (path2, _) = iterate_case_study(
            self.scenario.candidates(), self.scenario.world(), 2, self.scenario.sim.cycle_period,
        )
        self.assertEqual([(d.obstacle_id, d.kind) for d in path1.decisions], [("oncoming", NudgeKind.NUDGE_RIGHT)])
        self.assertIsNotNone(path1.nudge_station)
        self.assertGreaterEqual(path1.nudge_station, 35.0)
        self.assertLessEqual(path1.nudge_station, 45.0)
        self.assertLess(path2.nudge_station, path1.nudge_station)
        self.assertGreaterEqual(path2.nudge_station, 25.0)
        self.assertLessEqual(path2.nudge_station, 35.0)
        self.assertGreaterEqual(speed1.min_speed(), 4.0)
        self.assertLessEqual(speed1.min_speed(), 6.0)

    def test_speed_qp_converges_in_both_cycles(self) -> None:
        profiles = iterate_case_study(
            self.scenario.candidates(), self.scenario.world(), 2, self.scenario.sim.cycle_period,
        )
        for _, speed in profiles:
            self.assertTrue(speed.solution.ok)
            self.assertGreater(speed.iterations, 0)
            self.assertGreaterEqual(speed.min_speed(), 4.0)
