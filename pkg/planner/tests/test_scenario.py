import copy
import json
import tempfile
from pathlib import Path

from django.test import SimpleTestCase

from planner.em_planner import RegulationKind
from planner.exceptions import ScenarioParseError, ScenarioValidationError
from planner.projection import ObstacleKind
from planner.scenario import (
    dump_scenario,
    load_scenario,
    parse_scenario,
    reflag_candidates,
    scenario_from_dict,
)

from .factories import FIXTURE_DIR, fixture_path

BASE = {
    "version": 1,
    "name": "base",
    "lanes": [
        {"lane_id": "main", "polyline": [[0.0, 0.0], [200.0, 0.0]], "width": 3.75},
        {"lane_id": "left", "polyline": [[0.0, 3.75], [200.0, 3.75]], "width": 3.75, "is_change_lane": True},
    ],
    "ego": {"x": 0.0, "y": 0.0, "heading": 0.0, "v": 10.0, "footprint": {"l_f": 3.0, "l_r": 1.0, "width": 2.0}},
    "obstacles": [
        {
            "id": "car", "kind": "dynamic", "length": 4.0, "width": 2.0, "speed": 5.0,
            "trajectory": [{"t": 0.0, "x": 30.0, "y": 0.0, "heading": 0.0}, {"t": 8.0, "x": 70.0, "y": 0.0, "heading": 0.0}],
        },
    ],
    "sim": {"cycle_period": 0.1, "cycles": 10},
}


def variant(**changes):
    data = copy.deepcopy(BASE)
    data.update(changes)
    return data


class LoadScenarioTests(SimpleTestCase):
    def test_fixtures_load(self) -> None:
        for path in sorted(FIXTURE_DIR.glob("*.json")):
            if path.stem == "short_obstacle_horizon":
                continue
            with self.subTest(path=path.name):
                scenario = load_scenario(path)
                self.assertEqual(scenario.name, path.stem)
                self.assertEqual(scenario.source, path)

    def test_short_obstacle_prediction_is_rejected(self) -> None:
        with self.assertRaisesMessage(ScenarioValidationError, "shorter than the simulated"):
            load_scenario(fixture_path("short_obstacle_horizon"))

    def test_missing_file(self) -> None:
        with self.assertRaisesMessage(ScenarioParseError, "cannot read scenario"):
            load_scenario(FIXTURE_DIR / "does_not_exist.json")

    def test_syntax_error_reports_position(self) -> None:
        with self.assertRaises(ScenarioParseError) as ctx:
            parse_scenario('{\n  "version": 1,\n  "lanes": [\n}')
        self.assertEqual(ctx.exception.line, 4)
        self.assertIsNotNone(ctx.exception.column)
        self.assertIn("line 4", str(ctx.exception))

    def test_name_defaults_to_file_stem(self) -> None:
        data = variant()
        del data["name"]
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "unnamed_case.json"
            path.write_text(json.dumps(data), encoding="utf-8")
            self.assertEqual(load_scenario(path).name, "unnamed_case")


class ValidationTests(SimpleTestCase):
    def assertInvalid(self, data, fragment: str) -> None:
        with self.assertRaisesMessage(ScenarioValidationError, fragment):
            scenario_from_dict(data)

    def test_version(self) -> None:
        self.assertInvalid(variant(version=2), "version must be 1")

    def test_missing_lanes(self) -> None:
        data = variant()
        del data["lanes"]
        self.assertInvalid(data, "lanes is required")

    def test_duplicate_lane_ids(self) -> None:
        lanes = copy.deepcopy(BASE["lanes"])
        lanes[1]["lane_id"] = "main"
        self.assertInvalid(variant(lanes=lanes), "must be unique")

    def test_exactly_one_current_lane(self) -> None:
        lanes = copy.deepcopy(BASE["lanes"])
        lanes[1]["is_change_lane"] = False
        self.assertInvalid(variant(lanes=lanes), "exactly one lane")

    def test_stop_line_outside_lane(self) -> None:
        lanes = copy.deepcopy(BASE["lanes"])
        lanes[0]["regulations"] = [{"kind": "stop_line", "station": 250.0}]
        self.assertInvalid(variant(lanes=lanes), "lanes[0].regulations[0].station")

    def test_unknown_regulation(self) -> None:
        lanes = copy.deepcopy(BASE["lanes"])
        lanes[0]["regulations"] = [{"kind": "yield_sign"}]
        self.assertInvalid(variant(lanes=lanes), "lanes[0].regulations[0].kind must be one of")

    def test_inverted_keep_clear(self) -> None:
        lanes = copy.deepcopy(BASE["lanes"])
        lanes[0]["regulations"] = [{"kind": "keep_clear", "s_min": 40.0, "s_max": 30.0}]
        self.assertInvalid(variant(lanes=lanes), "keep-clear zone")

    def test_short_polyline(self) -> None:
        lanes = copy.deepcopy(BASE["lanes"])
        lanes[0]["polyline"] = [[0.0, 0.0]]
        self.assertInvalid(variant(lanes=lanes), "at least two points")

    def test_non_numeric_field(self) -> None:
        ego = copy.deepcopy(BASE["ego"])
        ego["v"] = "fast"
        self.assertInvalid(variant(ego=ego), "ego.v must be a finite number")

    def test_negative_footprint(self) -> None:
        ego = copy.deepcopy(BASE["ego"])
        ego["footprint"]["width"] = -2.0
        self.assertInvalid(variant(ego=ego), "ego.footprint.width must be > 0")

    def test_fractional_cycle_count(self) -> None:
        self.assertInvalid(variant(sim={"cycle_period": 0.1, "cycles": 2.5}), "sim.cycles must be a whole number")
        self.assertEqual(scenario_from_dict(variant(sim={"cycle_period": 0.1, "cycles": 3.0})).sim.cycles, 3)

    def test_duplicate_obstacle_ids(self) -> None:
        obstacles = copy.deepcopy(BASE["obstacles"]) * 2
        self.assertInvalid(variant(obstacles=obstacles), "obstacles[].id values must be unique")

    def test_static_obstacle_with_a_trajectory(self) -> None:
        obstacles = copy.deepcopy(BASE["obstacles"])
        obstacles[0]["kind"] = "static"
        self.assertInvalid(variant(obstacles=obstacles), "obstacles[0]")

    def test_unordered_obstacle_times(self) -> None:
        obstacles = copy.deepcopy(BASE["obstacles"])
        obstacles[0]["trajectory"][1]["t"] = 0.0
        self.assertInvalid(variant(obstacles=obstacles), "times must increase")

    def test_unknown_obstacle_kind(self) -> None:
        obstacles = copy.deepcopy(BASE["obstacles"])
        obstacles[0]["kind"] = "flying"
        self.assertInvalid(variant(obstacles=obstacles), "obstacles[0].kind")


class ScenarioModelTests(SimpleTestCase):
    def setUp(self) -> None:
        self.scenario = scenario_from_dict(BASE)

    def test_parsed_fields(self) -> None:
        scenario = self.scenario
        self.assertEqual([lane.lane_id for lane in scenario.lanes], ["main", "left"])
        self.assertAlmostEqual(scenario.lanes[0].reference_line.total_length, 200.0, places=6)
        self.assertEqual(scenario.footprint.cap_radius, 1.0)
        self.assertIs(scenario.obstacles[0].kind, ObstacleKind.DYNAMIC)
        self.assertAlmostEqual(scenario.sim.horizon, 1.0)

    def test_regulations(self) -> None:
        lanes = copy.deepcopy(BASE["lanes"])
        lanes[0]["regulations"] = [
            {"kind": "speed_limit", "speed": 12.0},
            {"kind": "stop_line", "station": 80.0},
            {"kind": "keep_clear", "s_min": 20.0, "s_max": 30.0},
        ]
        candidate = scenario_from_dict(variant(lanes=lanes)).candidates()[0]
        self.assertEqual(candidate.speed_limit, 12.0)
        self.assertEqual(candidate.regulations_of(RegulationKind.STOP_LINE)[0].station, 80.0)
        self.assertEqual(candidate.regulations_of(RegulationKind.KEEP_CLEAR)[0].s_max, 30.0)

    def test_dump_and_parse_agree(self) -> None:
        again = parse_scenario(dump_scenario(self.scenario))
        self.assertEqual(again, self.scenario)

    def test_candidates_and_world(self) -> None:
        candidates = self.scenario.candidates()
        self.assertEqual([(c.lane_id, c.is_change_lane) for c in candidates], [("main", False), ("left", True)])
        world = self.scenario.world()
        self.assertEqual(world.ego.v, 10.0)
        self.assertEqual(len(world.obstacles), 1)

    def test_reflag_after_a_lane_change(self) -> None:
        candidates = reflag_candidates(self.scenario.lanes, "left")
        self.assertEqual([(c.lane_id, c.is_change_lane) for c in candidates], [("main", True), ("left", False)])
