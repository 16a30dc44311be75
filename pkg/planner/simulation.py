"""
Closed-loop stepping of a scenario through the EM planner.

Each cycle plans every lane, then hands the ego the chosen trajectory's
state one cycle period later and moves obstacles along their predictions.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

from .em_planner import CycleResult, WarmStartCache, advance_world, plan_cycle
from .geometry_frenet import CartesianState
from .parameters import PlannerParameters
from .scenario import Scenario, reflag_candidates
from .trajectory import Trajectory

logger = logging.getLogger(__name__)

StatusCallback = Callable[[str, Dict[str, object]], None]

_STATUS_SUBSCRIBERS: List[StatusCallback] = []


def register_status_callback(callback: StatusCallback) -> None:
    """Register a callback to receive per-cycle planner status messages."""

    _STATUS_SUBSCRIBERS.append(callback)


def unregister_status_callback(callback: StatusCallback) -> None:
    if callback in _STATUS_SUBSCRIBERS:
        _STATUS_SUBSCRIBERS.remove(callback)


def _emit_status(message: str, *, context: Optional[Dict[str, object]] = None) -> None:
    """Log a status message and forward it to registered subscribers."""

    logger.info("%s", message)

    extra = context or {}
    for callback in _STATUS_SUBSCRIBERS:
        try:
            callback(message, extra)
        except Exception:
            logger.exception("Status callback failed")


@dataclass(frozen=True, eq=False)
class CycleRecord:
    index: int
    time: float
    ego: CartesianState
    current_lane: str
    result: CycleResult

    @property
    def fallback(self) -> bool:
        return self.result.fallback

    @property
    def chosen_lane(self) -> Optional[str]:
        return self.result.chosen_lane

    @property
    def trajectory(self) -> Trajectory:
        return self.result.trajectory

    @property
    def nudge_station(self) -> Optional[float]:
        chosen = self.result.chosen
        return chosen.path.nudge_station if chosen is not None and chosen.path is not None else None

    @property
    def min_speed(self) -> Optional[float]:
        chosen = self.result.chosen
        return chosen.speed.min_speed() if chosen is not None and chosen.speed is not None else None

    @property
    def qp_iterations(self) -> int:
        return sum(lane.qp_iterations for lane in self.result.lanes)

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "time": self.time,
            "ego": {
                "x": self.ego.x, "y": self.ego.y, "heading": self.ego.heading,
                "kappa": self.ego.kappa, "v": self.ego.v, "a": self.ego.a,
            },
            "current_lane": self.current_lane,
            "chosen_lane": self.chosen_lane,
            "fallback": self.fallback,
            "nudge_station": self.nudge_station,
            "trajectory": self.trajectory.to_rows(),
            "lanes": [lane.to_dict() for lane in self.result.lanes],
        }


@dataclass(frozen=True, eq=False)
class Trace:
    scenario: Scenario
    params: PlannerParameters
    records: List[CycleRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def fallback_count(self) -> int:
        return sum(1 for record in self.records if record.fallback)

    def timings(self) -> List[Dict[str, int]]:
        """Stage timings in µs per cycle, in cycle order."""
        return [dict(record.result.timings) for record in self.records]

    def to_dict(self) -> dict:
        """Everything except wall-clock timings, so re-runs serialize identically."""
        return {
            "scenario": self.scenario.name,
            "cycle_period": self.scenario.sim.cycle_period,
            "cycles": [record.to_dict() for record in self.records],
        }


def run_closed_loop(
    scenario: Scenario,
    params: PlannerParameters = PlannerParameters(),
    *,
    cycles: Optional[int] = None,
    progress_callback: Optional[StatusCallback] = None,
) -> Trace:
    """
    Run ``cycles`` planning cycles (the scenario's count by default).

    Lane failures and fallback stops are recorded in the trace; this never
    raises for a cycle in which no lane succeeded.
    """
    cycles = scenario.sim.cycles if cycles is None else cycles
    if cycles < 1:
        raise ValueError("cycles must be >= 1")
    period = scenario.sim.cycle_period

    if progress_callback:
        register_status_callback(progress_callback)

    trace = Trace(scenario, params)
    world = scenario.world()
    current = next(lane.lane_id for lane in scenario.lanes if not lane.is_change_lane)
    prev: Dict[str, Trajectory] = {}
    cache = WarmStartCache()

    _emit_status(
        f"Planning {scenario.name}: {cycles} cycle(s) at {period:g} s",
        context={"state": "Running", "scenario": scenario.name, "cycles": cycles},
    )
    try:
        for index in range(cycles):
            candidates = reflag_candidates(scenario.lanes, current)
            result = plan_cycle(candidates, world, prev, params, cache)
            record = CycleRecord(index, round(index * period, 9), world.ego, current, result)
            trace.records.append(record)

            if result.fallback:
                _emit_status(
                    f"Cycle {index}: fallback stop, no eligible lane",
                    context={"cycle": index, "fallback": True},
                )
            else:
                _emit_status(
                    f"Cycle {index}: lane {result.chosen_lane}, cost {result.chosen.cost.total:.4f}",
                    context={"cycle": index, "lane": result.chosen_lane, "fallback": False},
                )

            prev = {r.lane_id: r.trajectory.shifted(period) for r in result.lanes if r.ok}
            if result.fallback:
                prev[current] = result.trajectory.shifted(period)
            else:
                current = result.chosen_lane
            world = advance_world(world, result.trajectory, period)
    finally:
        _emit_status(
            f"Finished {scenario.name}: {len(trace)} cycle(s), {trace.fallback_count} fallback(s)",
            context={"state": "Completed", "cycles": len(trace), "fallbacks": trace.fallback_count},
        )
        if progress_callback:
            unregister_status_callback(progress_callback)
    return trace
