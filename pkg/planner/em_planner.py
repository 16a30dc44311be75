"""
Lane-level EM planning.

One planning cycle runs, for every lane candidate in parallel,

    E1  SL projection of obstacles (timed by the lane's previous trajectory)
    M1  DP path search + QP path
    E2  ST projection of obstacles along the new path, plus regulations
    M2  DP speed search + QP speed

then composes path and speed into a Cartesian trajectory. The decider drops
failed and rule-breaking lanes and picks the cheapest of the rest, with
hysteresis in favour of the current lane.
"""

import enum
import logging
import math
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .exceptions import AllLanesFailed, LaneFailure, OutOfRange, PlannerError
from .geometry_frenet import (
    CartesianState,
    FrenetState,
    ReferenceLine,
    frenet_to_cartesian,
    project_to_frenet,
    station_rates,
)
from .parameters import PlannerParameters
from .path_optimizer import (
    LatticeConfig,
    PathCostModel,
    PathProfile,
    dp_search,
    extract_tunnel_and_decisions,
    qp_path,
    sample_lattice,
)
from .projection import EgoFootprint, Obstacle, RegionKind, SlRegion, StRegion, project_sl, project_st, sample_times
from .qp_solver import QpSolution
from .speed_optimizer import (
    SpeedLimits,
    SpeedProfile,
    dp_speed_search,
    passing_windows,
    qp_speed,
)
from .trajectory import Trajectory, TrajectoryPoint, straight_ahead

logger = logging.getLogger(__name__)

LANE_STAGES = ("E1", "M1", "E2", "M2", "compose")
CYCLE_STAGES = LANE_STAGES + ("decider",)
STOP_LINE_DEPTH = 1.0e4
STOP_LINE_TOLERANCE = 1e-6


class RegulationKind(str, enum.Enum):
    SPEED_LIMIT = "speed_limit"
    STOP_LINE = "stop_line"
    KEEP_CLEAR = "keep_clear"


@dataclass(frozen=True)
class Regulation:
    kind: RegulationKind
    speed: Optional[float] = None
    station: Optional[float] = None
    s_min: Optional[float] = None
    s_max: Optional[float] = None

    @classmethod
    def speed_limit(cls, speed: float) -> "Regulation":
        return cls(RegulationKind.SPEED_LIMIT, speed=speed)

    @classmethod
    def stop_line(cls, station: float) -> "Regulation":
        return cls(RegulationKind.STOP_LINE, station=station)

    @classmethod
    def keep_clear(cls, s_min: float, s_max: float) -> "Regulation":
        return cls(RegulationKind.KEEP_CLEAR, s_min=s_min, s_max=s_max)

    def to_dict(self) -> dict:
        data = {"kind": self.kind.value}
        for name in ("speed", "station", "s_min", "s_max"):
            value = getattr(self, name)
            if value is not None:
                data[name] = value
        return data


@dataclass(frozen=True, eq=False)
class LaneCandidate:
    lane_id: str
    reference_line: ReferenceLine
    is_change_lane: bool = False
    regulations: Tuple[Regulation, ...] = ()
    width: float = 3.75

    @property
    def road_bounds(self) -> Tuple[float, float]:
        return -0.5 * self.width, 0.5 * self.width

    @property
    def speed_limit(self) -> Optional[float]:
        limits = [r.speed for r in self.regulations if r.kind is RegulationKind.SPEED_LIMIT]
        return min(limits) if limits else None

    def regulations_of(self, kind: RegulationKind) -> List[Regulation]:
        return [r for r in self.regulations if r.kind is kind]


@dataclass(frozen=True)
class World:
    ego: CartesianState
    obstacles: Tuple[Obstacle, ...]
    footprint: EgoFootprint

    def advanced(self, ego: CartesianState, dt: float) -> "World":
        return World(ego, tuple(o.shifted(dt) for o in self.obstacles), self.footprint)


def advance_world(world: World, trajectory: Trajectory, dt: float) -> World:
    """Ego read off ``trajectory`` at ``dt``; obstacles moved along their predictions."""
    return world.advanced(trajectory.state_at(dt), dt)


@dataclass(frozen=True)
class TrajectoryCost:
    lane_change_penalty: float = 0.0
    progress_term: float = 0.0
    smoothness_term: float = 0.0
    obstacle_proximity_term: float = 0.0
    total: float = math.inf
    feasible: bool = False

    @classmethod
    def infeasible(cls) -> "TrajectoryCost":
        return cls()

    def to_dict(self) -> dict:
        return {
            "lane_change_penalty": self.lane_change_penalty,
            "progress": self.progress_term,
            "smoothness": self.smoothness_term,
            "obstacle_proximity": self.obstacle_proximity_term,
            "total": self.total if self.feasible else None,
            "feasible": self.feasible,
        }


@dataclass(frozen=True, eq=False)
class LaneResult:
    lane_id: str
    is_change_lane: bool
    trajectory: Optional[Trajectory] = None
    cost: TrajectoryCost = field(default_factory=TrajectoryCost.infeasible)
    path: Optional[PathProfile] = None
    speed: Optional[SpeedProfile] = None
    sl_regions: Tuple[SlRegion, ...] = ()
    st_regions: Tuple[StRegion, ...] = ()
    timings: Mapping[str, int] = field(default_factory=dict)
    stage_counts: Mapping[str, int] = field(default_factory=dict)
    ego_station: Optional[float] = None
    failure: Optional[LaneFailure] = None
    violations: Tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return self.failure is None and self.trajectory is not None

    @property
    def eligible(self) -> bool:
        return self.ok and not self.violations

    @property
    def qp_iterations(self) -> int:
        return (self.path.iterations if self.path else 0) + (self.speed.iterations if self.speed else 0)

    def to_dict(self) -> dict:
        data = {
            "lane_id": self.lane_id,
            "is_change_lane": self.is_change_lane,
            "ok": self.ok,
            "failure": str(self.failure) if self.failure else None,
            "violations": list(self.violations),
            "cost": self.cost.to_dict(),
            "ego_station": self.ego_station,
            "sl_regions": [r.to_dict() for r in self.sl_regions],
            "st_regions": [r.to_dict() for r in self.st_regions],
            "qp_iterations": {
                "path": self.path.iterations if self.path else 0,
                "speed": self.speed.iterations if self.speed else 0,
            },
        }
        if self.path is not None:
            data["path"] = {
                "decisions": {d.obstacle_id: d.kind.value for d in self.path.decisions},
                "dp_path": self.path.dp_path.to_dict() if self.path.dp_path else None,
                "tunnel": self.path.tunnel.to_dict() if self.path.tunnel else None,
                "nudge_station": self.path.nudge_station,
            }
        if self.speed is not None:
            data["speed"] = {
                "decisions": [
                    {"source_id": d.source_id, "region": d.region_kind.value, "kind": d.kind.value}
                    for d in self.speed.decisions
                ],
                "dp_profile": self.speed.dp_profile.to_dict() if self.speed.dp_profile else None,
                "tunnel": self.speed.tunnel.to_dict() if self.speed.tunnel else None,
                "min_speed": self.speed.min_speed(),
            }
        return data


@dataclass(frozen=True, eq=False)
class CycleResult:
    trajectory: Trajectory
    chosen_lane: Optional[str]
    lanes: Tuple[LaneResult, ...]
    fallback: bool = False
    timings: Mapping[str, int] = field(default_factory=dict)

    def lane(self, lane_id: str) -> LaneResult:
        for result in self.lanes:
            if result.lane_id == lane_id:
                return result
        raise KeyError(lane_id)

    @property
    def chosen(self) -> Optional[LaneResult]:
        return self.lane(self.chosen_lane) if self.chosen_lane is not None else None


class WarmStartCache:
    """Previous-cycle QP solutions keyed by lane id; written only between cycles."""

    def __init__(self) -> None:
        self._solutions: Dict[str, Tuple[Optional[QpSolution], Optional[QpSolution]]] = {}

    def get(self, lane_id: str) -> Tuple[Optional[QpSolution], Optional[QpSolution]]:
        return self._solutions.get(lane_id, (None, None))

    def update(self, results: Sequence[LaneResult]) -> None:
        for result in results:
            if result.ok:
                self._solutions[result.lane_id] = (result.path.solution, result.speed.solution)
            else:
                self._solutions.pop(result.lane_id, None)

    def __len__(self) -> int:
        return len(self._solutions)


@contextmanager
def _stage(timings: Dict[str, int], counts: Counter, name: str) -> Iterator[None]:
    started = time.perf_counter_ns()
    try:
        yield
    finally:
        timings[name] = timings.get(name, 0) + (time.perf_counter_ns() - started) // 1000
        counts[name] += 1


# -- lane pipeline ------------------------------------------------------------------

def lane_road_bounds(candidate: LaneCandidate, start: FrenetState, footprint: EgoFootprint) -> Tuple[float, float]:
    """Lane bounds, widened to contain the ego body where it currently sits."""
    lo, hi = candidate.road_bounds
    return min(lo, start.l - footprint.half_width), max(hi, start.l + footprint.half_width)


def regulation_regions(
    candidate: LaneCandidate, ego_station: float, footprint: EgoFootprint, horizon: float,
) -> List[StRegion]:
    regions = []
    for k, reg in enumerate(candidate.regulations_of(RegulationKind.STOP_LINE)):
        sigma = reg.station - footprint.l_f - ego_station
        if sigma <= 0:
            logger.debug("Stop line at s=%.1f already behind lane %s front bumper", reg.station, candidate.lane_id)
            continue
        regions.append(StRegion.band(horizon, sigma, sigma + STOP_LINE_DEPTH, f"stop_line_{k}", RegionKind.STOP_LINE))
    for k, reg in enumerate(candidate.regulations_of(RegulationKind.KEEP_CLEAR)):
        low = reg.s_min - footprint.l_f - ego_station
        high = reg.s_max + footprint.l_r_geom - ego_station
        if high <= 0:
            continue
        regions.append(StRegion.band(horizon, max(low, 0.0), high, f"keep_clear_{k}", RegionKind.KEEP_CLEAR))
    return regions


def compose(
    path: PathProfile,
    speed: SpeedProfile,
    ref: ReferenceLine,
    ego_station: float,
    horizon: float,
    step: float,
) -> Trajectory:
    """Path ⊗ speed: s(t) = s_ego + S(t), l = f(s), mapped to Cartesian."""
    times = sample_times(horizon, step)
    sigma = np.maximum.accumulate(speed.evaluate(times))
    s_dot = np.maximum(speed.evaluate(times, 1), 0.0)
    s_ddot = speed.evaluate(times, 2)
    stations = ego_station + sigma
    if stations[-1] > ref.total_length:
        logger.warning("Trajectory runs past the reference line end (%.1f m > %.1f m); clamped",
                       stations[-1], ref.total_length)
        stations = np.minimum(stations, ref.total_length)
    lateral = path.evaluate(stations)
    dl = path.evaluate(stations, 1)
    ddl = path.evaluate(stations, 2)

    points = []
    for t, s, l, l1, l2, v, a in zip(times, stations, lateral, dl, ddl, s_dot, s_ddot):
        state = frenet_to_cartesian(FrenetState(float(s), float(l), float(l1), float(l2)), ref, float(v), float(a))
        points.append(TrajectoryPoint(float(t), state.x, state.y, state.heading, state.kappa, state.v, state.a))
    return Trajectory.from_points(points)


def _proximity(path: PathProfile, regions: Sequence[SlRegion], footprint: EgoFootprint, params, stations) -> float:
    """Largest nudge-cost shape value along the driven stations."""
    if not regions:
        return 0.0
    model = PathCostModel(regions, params, footprint, (-math.inf, math.inf))
    distance = model.box_distance(stations, path.evaluate(stations))
    shape = np.clip((params.d_n - distance) / (params.d_n - params.d_c), 0.0, None) ** 2
    return float(params.w_obs * shape.max())


def trajectory_cost(
    candidate: LaneCandidate,
    path: PathProfile,
    speed: SpeedProfile,
    sl_regions: Sequence[SlRegion],
    footprint: EgoFootprint,
    ego_station: float,
    params: PlannerParameters,
) -> TrajectoryCost:
    decider = params.decider
    horizon = speed.horizon
    progress = -float(speed.evaluate(horizon)) / (params.speed.v_upper * horizon)
    change = decider.lane_change_penalty if candidate.is_change_lane else 0.0
    smoothness = decider.w_smoothness * (path.objective + speed.objective)
    driven = ego_station + speed.evaluate(sample_times(horizon, params.projection.dt))
    proximity = _proximity(path, sl_regions, footprint, params.path, driven)
    total = decider.w_progress * progress + change + smoothness + decider.w_proximity * proximity
    return TrajectoryCost(change, progress, smoothness, proximity, total, True)


def regulation_violations(
    candidate: LaneCandidate,
    speed: SpeedProfile,
    ego_station: float,
    footprint: EgoFootprint,
    params: PlannerParameters,
) -> Tuple[str, ...]:
    problems = []
    terminal_front = ego_station + float(speed.evaluate(speed.horizon)) + footprint.l_f
    for reg in candidate.regulations_of(RegulationKind.STOP_LINE):
        ahead = reg.station - footprint.l_f - ego_station > 0
        if ahead and terminal_front > reg.station + STOP_LINE_TOLERANCE:
            problems.append(f"stop_line@{reg.station:g}")
    if candidate.speed_limit is not None:
        times = sample_times(speed.horizon, params.projection.dt)
        excess = speed.evaluate(times, 1) - speed.envelope(times)
        if np.max(excess) > params.decider.speed_tolerance:
            problems.append(f"speed_limit@{candidate.speed_limit:g}")
    return tuple(problems)


def plan_lane(
    candidate: LaneCandidate,
    world: World,
    prev: Optional[Trajectory],
    params: PlannerParameters = PlannerParameters(),
    warm_start: Tuple[Optional[QpSolution], Optional[QpSolution]] = (None, None),
) -> LaneResult:
    """Two E-steps and two M-steps for one lane; stage errors raise LaneFailure."""
    timings: Dict[str, int] = {}
    counts: Counter = Counter()
    try:
        return _plan_lane(candidate, world, prev, params, warm_start, timings, counts)
    except LaneFailure:
        raise
    except PlannerError as exc:
        timed = {stage: timings.get(stage, 0) for stage in LANE_STAGES}
        raise LaneFailure(candidate.lane_id, exc, timed) from exc


def _plan_lane(candidate, world, prev, params, warm_start, timings, counts) -> LaneResult:
    ref = candidate.reference_line
    footprint = world.footprint
    ego = world.ego
    start = project_to_frenet(ego, ref)
    s_dot, s_ddot = station_rates(ego, ref)
    s_dot = max(s_dot, 0.0)
    bounds = lane_road_bounds(candidate, start, footprint)
    path_warm, speed_warm = warm_start
    horizon = params.speed.horizon

    with _stage(timings, counts, "E1"):
        history = prev if prev is not None else straight_ahead(ego, start, ref, horizon)
        try:
            sl_regions = project_sl(
                world.obstacles, ref, history, s_dot,
                footprint=footprint, road_bounds=bounds, params=params.projection,
            )
        except OutOfRange:
            if prev is None:
                raise
            logger.info("Previous trajectory leaves lane %s; projecting along straight-ahead motion", candidate.lane_id)
            sl_regions = project_sl(
                world.obstacles, ref, straight_ahead(ego, start, ref, horizon), s_dot,
                footprint=footprint, road_bounds=bounds, params=params.projection,
            )

    with _stage(timings, counts, "M1"):
        config = LatticeConfig.for_lane(
            params.lattice, s_dot, bounds, footprint.half_width,
            ref.total_length - start.s, candidate.is_change_lane,
        )
        lattice = sample_lattice(config, start)
        model = PathCostModel(sl_regions, params.path, footprint, bounds)
        dp_path, _ = dp_search(lattice, model)
        tunnel, decisions = extract_tunnel_and_decisions(dp_path, sl_regions, bounds, footprint, params.path)
        span = max(params.path.qp_min_span, params.speed.horizon * s_dot + params.path.qp_margin)
        path = qp_path(
            tunnel, dp_path, start, footprint, params.path,
            span=span, regions=sl_regions, decisions=decisions,
            warm_start=path_warm, qp_params=params.qp,
        )

    with _stage(timings, counts, "E2"):
        st_regions = project_st(
            world.obstacles, path, ref, horizon,
            footprint=footprint, ego_station=start.s, path_end=path.domain[1], params=params.projection,
        )
        st_regions += regulation_regions(candidate, start.s, footprint, horizon)

    with _stage(timings, counts, "M2"):
        limits = SpeedLimits.from_parameters(params.speed, candidate.speed_limit)
        windows = passing_windows(path.interactions, start.s, footprint, params.speed, params.path.d_n)
        dp_profile, speed_tunnel = dp_speed_search(
            st_regions, limits, params.speed, s_dot, s_ddot, horizon=horizon, windows=windows,
        )
        speed = qp_speed(
            speed_tunnel, dp_profile, s_dot, s_ddot, limits, params.speed,
            windows=windows, warm_start=speed_warm, qp_params=params.qp,
        )

    with _stage(timings, counts, "compose"):
        trajectory = compose(path, speed, ref, start.s, horizon, params.decider.output_dt)
        cost = trajectory_cost(candidate, path, speed, sl_regions, footprint, start.s, params)
        violations = regulation_violations(candidate, speed, start.s, footprint, params)

    if violations:
        logger.info("Lane %s violates %s", candidate.lane_id, ", ".join(violations))
    return LaneResult(
        lane_id=candidate.lane_id,
        is_change_lane=candidate.is_change_lane,
        trajectory=trajectory,
        cost=cost,
        path=path,
        speed=speed,
        sl_regions=tuple(sl_regions),
        st_regions=tuple(st_regions),
        timings=dict(timings),
        stage_counts=dict(counts),
        ego_station=start.s,
        violations=violations,
    )


# -- decider -----------------------------------------------------------------------

def current_lane_id(candidates: Sequence[LaneCandidate]) -> str:
    for candidate in candidates:
        if not candidate.is_change_lane:
            return candidate.lane_id
    return candidates[0].lane_id


def select_lane(results: Sequence[LaneResult], current: str, hysteresis: float) -> Optional[LaneResult]:
    """
    Cheapest eligible lane. Another lane replaces an eligible current lane
    only when total < current − (1 − hysteresis)·|current|.
    """
    eligible = [r for r in results if r.eligible]
    if not eligible:
        return None
    best = min(eligible, key=lambda r: (r.cost.total, r.lane_id != current, r.lane_id))
    incumbent = next((r for r in eligible if r.lane_id == current), None)
    if incumbent is None or best is incumbent:
        return best
    threshold = incumbent.cost.total - (1.0 - hysteresis) * abs(incumbent.cost.total)
    return best if best.cost.total < threshold else incumbent


def comfort_stop(
    ego: CartesianState,
    prev: Optional[Trajectory],
    dec_max: float,
    horizon: float,
    step: float,
) -> Trajectory:
    """Stop at dec_max along the previous path geometry, or straight ahead without one."""
    times = sample_times(horizon, step)
    v = np.maximum(ego.v - dec_max * times, 0.0)
    stop_time = ego.v / dec_max
    travelled = np.where(
        times < stop_time, ego.v * times - 0.5 * dec_max * times**2, 0.5 * ego.v * stop_time,
    )
    a = np.where(times < stop_time, -dec_max, 0.0)

    if prev is not None and len(prev) > 1 and prev.arc_lengths()[-1] > 0:
        arc = prev.arc_lengths()
        keep = np.concatenate(([True], np.diff(arc) > 0))
        arc = arc[keep]
        along = np.minimum(travelled, arc[-1])
        extra = travelled - along
        heading = np.unwrap(prev.heading[keep])
        h = np.interp(along, arc, heading)
        x = np.interp(along, arc, prev.x[keep]) + extra * np.cos(h)
        y = np.interp(along, arc, prev.y[keep]) + extra * np.sin(h)
        kappa = np.interp(along, arc, prev.kappa[keep])
    else:
        h = np.full(times.size, ego.heading)
        x = ego.x + travelled * math.cos(ego.heading)
        y = ego.y + travelled * math.sin(ego.heading)
        kappa = np.zeros(times.size)
    return Trajectory(times, x, y, h, kappa, v, a)


def plan_cycle(
    candidates: Sequence[LaneCandidate],
    world: World,
    prev_per_lane: Optional[Mapping[str, Trajectory]] = None,
    params: PlannerParameters = PlannerParameters(),
    cache: Optional[WarmStartCache] = None,
) -> CycleResult:
    """Plan every candidate concurrently, then decide. Never raises AllLanesFailed."""
    if not candidates:
        raise ValueError("plan_cycle needs at least one lane candidate")
    prev_per_lane = prev_per_lane or {}
    cache = cache if cache is not None else WarmStartCache()
    current = current_lane_id(candidates)

    def run(candidate: LaneCandidate) -> LaneResult:
        try:
            return plan_lane(
                candidate, world, prev_per_lane.get(candidate.lane_id), params, cache.get(candidate.lane_id),
            )
        except LaneFailure as failure:
            logger.warning("%s", failure)
            return LaneResult(
                lane_id=candidate.lane_id,
                is_change_lane=candidate.is_change_lane,
                timings=failure.timings,
                failure=failure,
            )

    workers = max(1, min(params.decider.workers, len(candidates)))
    with ThreadPoolExecutor(max_workers=workers, thread_name_prefix="lane") as pool:
        results = tuple(pool.map(run, candidates))
    cache.update(results)

    timings = {stage: sum(r.timings.get(stage, 0) for r in results) for stage in LANE_STAGES}
    started = time.perf_counter_ns()
    chosen = select_lane(results, current, params.decider.hysteresis)
    if chosen is not None:
        trajectory, fallback = chosen.trajectory, False
    else:
        failures = [r.failure for r in results if r.failure is not None]
        logger.warning("Fallback comfort stop: %s", AllLanesFailed(failures))
        trajectory = comfort_stop(
            world.ego, prev_per_lane.get(current), params.speed.dec_max,
            params.speed.horizon, params.decider.output_dt,
        )
        fallback = True
    timings["decider"] = (time.perf_counter_ns() - started) // 1000
    return CycleResult(
        trajectory=trajectory,
        chosen_lane=chosen.lane_id if chosen is not None else None,
        lanes=results,
        fallback=fallback,
        timings=timings,
    )


def iterate_case_study(
    candidates: Sequence[LaneCandidate],
    world: World,
    cycles: int = 2,
    cycle_period: float = 0.1,
    params: PlannerParameters = PlannerParameters(),
) -> List[Tuple[PathProfile, SpeedProfile]]:
    """Path and speed of the chosen lane over consecutive cycles, each seeded by the last."""
    cache = WarmStartCache()
    prev: Dict[str, Trajectory] = {}
    out = []
    for _ in range(cycles):
        result = plan_cycle(candidates, world, prev, params, cache)
        chosen = result.chosen
        if chosen is None:
            raise AllLanesFailed([r.failure for r in result.lanes if r.failure is not None])
        out.append((chosen.path, chosen.speed))
        prev = {r.lane_id: r.trajectory.shifted(cycle_period) for r in result.lanes if r.ok}
        world = advance_world(world, result.trajectory, cycle_period)
    return out
