from django.test import SimpleTestCase

from planner.geometry_frenet import normalize_angle
from planner.scenario import load_scenario
from planner.simulation import (
    _STATUS_SUBSCRIBERS,
    register_status_callback,
    run_closed_loop,
    unregister_status_callback,
)

from .factories import fixture_path


class RunClosedLoopTests(SimpleTestCase):
    def test_empty_road_advances_the_ego(self) -> None:
        scenario = load_scenario(fixture_path("minimal_empty"))
        trace = run_closed_loop(scenario, cycles=3)
        self.assertEqual(len(trace), 3)
        self.assertEqual(trace.fallback_count, 0)
        self.assertEqual([record.index for record in trace.records], [0, 1, 2])
        self.assertEqual([record.time for record in trace.records], [0.0, 0.1, 0.2])
        for record in trace.records:
            self.assertAlmostEqual(record.ego.x, 10.0 * record.time, delta=0.01)
            self.assertAlmostEqual(record.ego.y, 0.0, delta=1e-3)
            self.assertEqual(record.chosen_lane, "main")

    def test_defaults_to_the_scenario_cycle_count(self) -> None:
        scenario = load_scenario(fixture_path("blocked_lane"))
        self.assertEqual(len(run_closed_loop(scenario)), scenario.sim.cycles)

    def test_needs_at_least_one_cycle(self) -> None:
        scenario = load_scenario(fixture_path("minimal_empty"))
        with self.assertRaises(ValueError):
            run_closed_loop(scenario, cycles=0)

    def test_blocked_lane_moves_to_the_free_lane(self) -> None:
        scenario = load_scenario(fixture_path("blocked_lane"))
        trace = run_closed_loop(scenario, cycles=2)
        first, second = trace.records
        self.assertEqual(first.current_lane, "A")
        self.assertEqual(first.chosen_lane, "B")
        self.assertEqual(second.current_lane, "B")
        self.assertEqual(trace.fallback_count, 0)

    def test_next_cycle_starts_where_the_last_trajectory_was(self) -> None:
        scenario = load_scenario(fixture_path("oncoming_nudge"))
        trace = run_closed_loop(scenario, cycles=4)
        period = scenario.sim.cycle_period
        for before, after in zip(trace.records, trace.records[1:]):
            expected = before.trajectory.state_at(period)
            for name in ("x", "y", "v", "a", "kappa"):
                self.assertAlmostEqual(getattr(after.ego, name), getattr(expected, name), delta=1e-6)
            self.assertAlmostEqual(normalize_angle(after.ego.heading - expected.heading), 0.0, delta=1e-6)

    def test_serialised_trace_has_no_timings(self) -> None:
        scenario = load_scenario(fixture_path("minimal_empty"))
        trace = run_closed_loop(scenario, cycles=1)
        data = trace.to_dict()
        self.assertEqual(data["scenario"], "minimal_empty")
        self.assertNotIn("timings", data)
        self.assertEqual(len(trace.timings()), 1)
        self.assertIn("decider", trace.timings()[0])


class StatusCallbackTests(SimpleTestCase):
    def setUp(self) -> None:
        self.scenario = load_scenario(fixture_path("minimal_empty"))

    def test_progress_callback_sees_every_cycle(self) -> None:
        messages = []
        run_closed_loop(self.scenario, cycles=2, progress_callback=lambda message, context: messages.append(context))
        cycles = [context["cycle"] for context in messages if "cycle" in context]
        self.assertEqual(cycles, [0, 1])
        self.assertEqual(messages[0]["state"], "Running")
        self.assertEqual(messages[-1]["state"], "Completed")
        self.assertEqual(_STATUS_SUBSCRIBERS, [])

    def test_failing_callback_is_logged_and_ignored(self) -> None:
        def broken(message, context):
            raise RuntimeError("boom")

        register_status_callback(broken)
        try:
            with self.assertLogs("planner.simulation", level="ERROR") as logs:
                trace = run_closed_loop(self.scenario, cycles=1)
        finally:
            unregister_status_callback(broken)
        self.assertEqual(len(trace), 1)
        self.assertTrue(any("Status callback failed" in line for line in logs.output))

    def test_unregister_unknown_callback_is_a_no_op(self) -> None:
        unregister_status_callback(print)
        self.assertEqual(_STATUS_SUBSCRIBERS, [])


class OncomingTraceTests(SimpleTestCase):
    def test_nudge_moves_closer_and_the_ego_slows(self) -> None:
        scenario = load_scenario(fixture_path("oncoming_nudge"))
        trace = run_closed_loop(scenario)
        self.assertEqual(len(trace), 20)
        self.assertEqual(trace.fallback_count, 0)
        self.assertEqual({record.chosen_lane for record in trace.records}, {"main"})

        first, second = trace.records[:2]
        self.assertGreaterEqual(first.nudge_station, 35.0)
        self.assertLessEqual(first.nudge_station, 45.0)
        self.assertLess(second.nudge_station, first.nudge_station)
        self.assertGreaterEqual(first.min_speed, 4.0)
        self.assertLessEqual(first.min_speed, 6.0)
        self.assertLess(trace.records[-1].ego.v, first.ego.v - 0.5)
