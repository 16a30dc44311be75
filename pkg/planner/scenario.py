"""
Versioned JSON scenarios: lanes with regulations, the ego, predicted
obstacles and the simulation settings. See docs/scenario_format.md.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

from .em_planner import LaneCandidate, Regulation, RegulationKind, World
from .exceptions import ScenarioParseError, ScenarioValidationError
from .geometry_frenet import CartesianState, ReferenceLine
from .projection import EgoFootprint, Obstacle, ObstacleKind, ObstaclePose

logger = logging.getLogger(__name__)

SCENARIO_VERSION = 1
DEFAULT_CYCLE_PERIOD = 0.1


@dataclass(frozen=True)
class SimSettings:
    cycle_period: float = DEFAULT_CYCLE_PERIOD
    cycles: int = 1

    @property
    def horizon(self) -> float:
        return self.cycle_period * self.cycles


@dataclass(frozen=True)
class LaneSpec:
    lane_id: str
    polyline: Tuple[Tuple[float, float], ...]
    width: float
    is_change_lane: bool = False
    regulations: Tuple[Regulation, ...] = ()
    reference_line: Optional[ReferenceLine] = field(default=None, compare=False, repr=False)

    def candidate(self, is_change_lane: Optional[bool] = None) -> LaneCandidate:
        flagged = self.is_change_lane if is_change_lane is None else is_change_lane
        return LaneCandidate(self.lane_id, self.reference_line, flagged, self.regulations, self.width)


@dataclass(frozen=True)
class Scenario:
    version: int
    name: str
    lanes: Tuple[LaneSpec, ...]
    ego: CartesianState
    footprint: EgoFootprint
    obstacles: Tuple[Obstacle, ...]
    sim: SimSettings
    source: Optional[Path] = field(default=None, compare=False)

    def candidates(self) -> List[LaneCandidate]:
        return [lane.candidate() for lane in self.lanes]

    def world(self) -> World:
        return World(self.ego, self.obstacles, self.footprint)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "version": self.version,
            "name": self.name,
            "lanes": [
                {
                    "lane_id": lane.lane_id,
                    "polyline": [list(p) for p in lane.polyline],
                    "width": lane.width,
                    "is_change_lane": lane.is_change_lane,
                    "regulations": [r.to_dict() for r in lane.regulations],
                }
                for lane in self.lanes
            ],
            "ego": {
                "x": self.ego.x, "y": self.ego.y, "heading": self.ego.heading,
                "kappa": self.ego.kappa, "v": self.ego.v, "a": self.ego.a,
                "footprint": {
                    "l_f": self.footprint.l_f,
                    "l_r": self.footprint.l_r_geom,
                    "width": self.footprint.width,
                    "cap_radius": self.footprint.cap_radius,
                },
            },
            "obstacles": [
                {
                    "id": o.id, "kind": o.kind.value, "length": o.length, "width": o.width, "speed": o.speed,
                    "trajectory": [{"t": p.t, "x": p.x, "y": p.y, "heading": p.heading} for p in o.trajectory],
                }
                for o in self.obstacles
            ],
            "sim": {"cycle_period": self.sim.cycle_period, "cycles": self.sim.cycles},
        }


# -- parse helpers ---------------------------------------------------------------

def _require(data: Mapping[str, Any], key: str, where: str) -> Any:
    if not isinstance(data, Mapping):
        raise ScenarioValidationError(f"{where} must be an object")
    if key not in data:
        raise ScenarioValidationError(f"{where}.{key} is required" if where else f"{key} is required")
    return data[key]


def _number(value: Any, where: str, *, positive: bool = False, non_negative: bool = False) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise ScenarioValidationError(f"{where} must be a finite number")
    value = float(value)
    if positive and value <= 0:
        raise ScenarioValidationError(f"{where} must be > 0")
    if non_negative and value < 0:
        raise ScenarioValidationError(f"{where} must be >= 0")
    return value


def _optional_number(data: Mapping[str, Any], key: str, where: str, default: float, **checks) -> float:
    if key not in data:
        return default
    return _number(data[key], f"{where}.{key}", **checks)


def _optional_count(data: Mapping[str, Any], key: str, where: str, default: int) -> int:
    value = _optional_number(data, key, where, default, positive=True)
    if not value.is_integer():
        raise ScenarioValidationError(f"{where}.{key} must be a whole number")
    return int(value)


def _list(value: Any, where: str) -> list:
    if not isinstance(value, list):
        raise ScenarioValidationError(f"{where} must be a list")
    return value


def _parse_regulation(data: Mapping[str, Any], where: str, length: float) -> Regulation:
    raw_kind = _require(data, "kind", where)
    try:
        kind = RegulationKind(raw_kind)
    except ValueError:
        choices = ", ".join(k.value for k in RegulationKind)
        raise ScenarioValidationError(f"{where}.kind must be one of {choices}") from None

    if kind is RegulationKind.SPEED_LIMIT:
        return Regulation.speed_limit(_number(_require(data, "speed", where), f"{where}.speed", positive=True))
    if kind is RegulationKind.STOP_LINE:
        station = _number(_require(data, "station", where), f"{where}.station")
        if not 0.0 <= station <= length:
            raise ScenarioValidationError(f"{where}.station {station:g} is outside the lane span [0, {length:.3f}]")
        return Regulation.stop_line(station)
    s_min = _number(_require(data, "s_min", where), f"{where}.s_min")
    s_max = _number(_require(data, "s_max", where), f"{where}.s_max")
    if not 0.0 <= s_min < s_max <= length:
        raise ScenarioValidationError(f"{where} keep-clear zone [{s_min:g}, {s_max:g}] must lie inside [0, {length:.3f}]")
    return Regulation.keep_clear(s_min, s_max)


def _parse_lane(data: Mapping[str, Any], where: str) -> LaneSpec:
    lane_id = _require(data, "lane_id", where)
    if not isinstance(lane_id, str) or not lane_id:
        raise ScenarioValidationError(f"{where}.lane_id must be a non-empty string")
    points = _list(_require(data, "polyline", where), f"{where}.polyline")
    polyline = []
    for k, point in enumerate(points):
        if not isinstance(point, list) or len(point) != 2:
            raise ScenarioValidationError(f"{where}.polyline[{k}] must be an [x, y] pair")
        polyline.append((_number(point[0], f"{where}.polyline[{k}][0]"), _number(point[1], f"{where}.polyline[{k}][1]")))
    if len(polyline) < 2:
        raise ScenarioValidationError(f"{where}.polyline needs at least two points")
    width = _number(_require(data, "width", where), f"{where}.width", positive=True)
    is_change = data.get("is_change_lane", False)
    if not isinstance(is_change, bool):
        raise ScenarioValidationError(f"{where}.is_change_lane must be true or false")
    try:
        reference = ReferenceLine.from_polyline(polyline)
    except ValueError as exc:
        raise ScenarioValidationError(f"{where}.polyline: {exc}") from exc

    regulations = tuple(
        _parse_regulation(item, f"{where}.regulations[{k}]", reference.total_length)
        for k, item in enumerate(_list(data.get("regulations", []), f"{where}.regulations"))
    )
    return LaneSpec(lane_id, tuple(polyline), width, is_change, regulations, reference)


def _parse_ego(data: Mapping[str, Any]) -> Tuple[CartesianState, EgoFootprint]:
    where = "ego"
    state = CartesianState(
        x=_number(_require(data, "x", where), "ego.x"),
        y=_number(_require(data, "y", where), "ego.y"),
        heading=_number(_require(data, "heading", where), "ego.heading"),
        kappa=_optional_number(data, "kappa", where, 0.0),
        v=_optional_number(data, "v", where, 0.0, non_negative=True),
        a=_optional_number(data, "a", where, 0.0),
    )
    fp = _require(data, "footprint", where)
    cap = fp.get("cap_radius") if isinstance(fp, Mapping) else None
    footprint = EgoFootprint(
        l_f=_number(_require(fp, "l_f", "ego.footprint"), "ego.footprint.l_f", positive=True),
        l_r_geom=_number(_require(fp, "l_r", "ego.footprint"), "ego.footprint.l_r", positive=True),
        width=_number(_require(fp, "width", "ego.footprint"), "ego.footprint.width", positive=True),
        cap_radius=None if cap is None else _number(cap, "ego.footprint.cap_radius", positive=True),
    )
    return state, footprint


def _parse_obstacle(data: Mapping[str, Any], where: str) -> Obstacle:
    obstacle_id = _require(data, "id", where)
    if not isinstance(obstacle_id, str) or not obstacle_id:
        raise ScenarioValidationError(f"{where}.id must be a non-empty string")
    raw_kind = data.get("kind", "dynamic")
    try:
        kind = ObstacleKind(raw_kind)
    except ValueError:
        raise ScenarioValidationError(f"{where}.kind must be 'static' or 'dynamic'") from None
    poses = []
    for k, pose in enumerate(_list(_require(data, "trajectory", where), f"{where}.trajectory")):
        at = f"{where}.trajectory[{k}]"
        poses.append(ObstaclePose(
            t=_number(_require(pose, "t", at), f"{at}.t", non_negative=True),
            x=_number(_require(pose, "x", at), f"{at}.x"),
            y=_number(_require(pose, "y", at), f"{at}.y"),
            heading=_number(_require(pose, "heading", at), f"{at}.heading"),
        ))
    try:
        return Obstacle(
            id=obstacle_id,
            length=_number(_require(data, "length", where), f"{where}.length", positive=True),
            width=_number(_require(data, "width", where), f"{where}.width", positive=True),
            kind=kind,
            trajectory=tuple(poses),
            speed=_optional_number(data, "speed", where, 0.0, non_negative=True),
        )
    except ValueError as exc:
        raise ScenarioValidationError(f"{where}: {exc}") from exc


def scenario_from_dict(data: Mapping[str, Any], source: Optional[Path] = None) -> Scenario:
    if not isinstance(data, Mapping):
        raise ScenarioValidationError("scenario must be a JSON object")
    version = _require(data, "version", "")
    if version != SCENARIO_VERSION:
        raise ScenarioValidationError(f"version must be {SCENARIO_VERSION}, got {version!r}")
    name = data.get("name") or (source.stem if source else "scenario")

    lanes = tuple(_parse_lane(item, f"lanes[{k}]") for k, item in enumerate(_list(_require(data, "lanes", ""), "lanes")))
    if not lanes:
        raise ScenarioValidationError("lanes must contain at least one lane")
    ids = [lane.lane_id for lane in lanes]
    if len(set(ids)) != len(ids):
        raise ScenarioValidationError("lanes[].lane_id values must be unique")
    current = [lane.lane_id for lane in lanes if not lane.is_change_lane]
    if len(current) != 1:
        raise ScenarioValidationError(f"exactly one lane must have is_change_lane false, found {len(current)}")

    ego, footprint = _parse_ego(_require(data, "ego", ""))
    obstacles = tuple(
        _parse_obstacle(item, f"obstacles[{k}]") for k, item in enumerate(_list(data.get("obstacles", []), "obstacles"))
    )
    obstacle_ids = [o.id for o in obstacles]
    if len(set(obstacle_ids)) != len(obstacle_ids):
        raise ScenarioValidationError("obstacles[].id values must be unique")

    sim_data = data.get("sim", {})
    sim = SimSettings(
        cycle_period=_optional_number(sim_data, "cycle_period", "sim", DEFAULT_CYCLE_PERIOD, positive=True),
        cycles=_optional_count(sim_data, "cycles", "sim", 1),
    )
    for k, obstacle in enumerate(obstacles):
        if obstacle.horizon < sim.horizon - 1e-9:
            raise ScenarioValidationError(
                f"obstacles[{k}] ({obstacle.id}) predicts {obstacle.horizon:g} s, "
                f"shorter than the simulated {sim.horizon:g} s"
            )
    return Scenario(SCENARIO_VERSION, str(name), lanes, ego, footprint, obstacles, sim, source)


def parse_scenario(text: str, source: Optional[Path] = None) -> Scenario:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioParseError(exc.msg, line=exc.lineno, column=exc.colno) from exc
    return scenario_from_dict(data, source)


def load_scenario(path: Union[str, Path]) -> Scenario:
    """Read and fully validate a scenario file."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ScenarioParseError(f"cannot read scenario {path}: {exc.strerror or exc}") from exc
    scenario = parse_scenario(text, path)
    logger.info("Loaded scenario %s: %d lane(s), %d obstacle(s)", scenario.name, len(scenario.lanes),
                len(scenario.obstacles))
    return scenario


def dump_scenario(scenario: Scenario) -> str:
    return json.dumps(scenario.to_dict(), indent=2) + "\n"


def reflag_candidates(lanes: Sequence[LaneSpec], current: str) -> List[LaneCandidate]:
    """Candidates with ``current`` as the lane the ego is in and every other lane a change."""
    return [lane.candidate(is_change_lane=lane.lane_id != current) for lane in lanes]
