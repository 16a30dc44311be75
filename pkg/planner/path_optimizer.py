"""
Path M-step: lattice dynamic programming for a rough path, nudge decisions
and a feasible tunnel, then a quintic-spline QP for the smooth l = f(s).
"""

import enum
import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .exceptions import AllPathsCollide, DegenerateTunnel, EmptyRow
from .geometry_frenet import FrenetState
from .parameters import LatticeParameters, PathCostParams, QpParameters
from .projection import EgoFootprint, SlRegion
from .qp_solver import QpProblem, QpSolution, solve
from .spline_core import (
    Bound,
    Equality,
    Spline,
    build_constraints,
    guidance_cost,
    quintic_hermite,
    smoothness_cost,
)

logger = logging.getLogger(__name__)

EDGE_ORDER = 5
GUIDANCE_STEP = 0.5


class NudgeKind(str, enum.Enum):
    NUDGE_LEFT = "nudge_left"
    NUDGE_RIGHT = "nudge_right"
    IGNORE = "ignore"


@dataclass(frozen=True)
class PathDecision:
    obstacle_id: str
    kind: NudgeKind


@dataclass(frozen=True)
class LatticeConfig:
    row_interval: float
    lateral_offsets: Tuple[float, ...]
    total_span: float
    road_bounds: Tuple[float, float]
    half_width: float
    edge_order: int = EDGE_ORDER

    @classmethod
    def for_lane(
        cls,
        params: LatticeParameters,
        ego_speed: float,
        road_bounds: Tuple[float, float],
        half_width: float,
        available_length: float,
        is_change_lane: bool = False,
    ) -> "LatticeConfig":
        interval = max(params.min_row_interval, params.row_headway * ego_speed)
        if is_change_lane:
            interval *= params.lane_change_factor
        span = max(params.min_span, params.span_horizon * ego_speed)
        if span > available_length:
            logger.warning("Lattice span clamped from %.1f m to %.1f m of remaining reference line",
                           span, available_length)
            span = available_length
        centre = 0.5 * (params.offset_count - 1)
        offsets = tuple(round((k - centre) * params.offset_spacing, 9) for k in range(params.offset_count))
        return cls(interval, offsets, span, tuple(road_bounds), half_width)


@dataclass(frozen=True, eq=False)
class Lattice:
    start: FrenetState
    stations: np.ndarray
    rows: Tuple[np.ndarray, ...]

    @property
    def edge_count(self) -> int:
        return sum(a.size * b.size for a, b in zip(self.rows, self.rows[1:]))

    def node_state(self, row: int, index: int) -> Tuple[float, float, float]:
        if row == 0:
            return self.start.l, self.start.dl, self.start.ddl
        return float(self.rows[row][index]), 0.0, 0.0

    def edge_coefficients(self, row: int, i: int, j: int) -> np.ndarray:
        """Quintic from node (row, i) to (row + 1, j) in the local station (s − stations[row])."""
        l0, dl0, ddl0 = self.node_state(row, i)
        l1, dl1, ddl1 = self.node_state(row + 1, j)
        h = self.stations[row + 1] - self.stations[row]
        return quintic_hermite(l0, dl0, ddl0, l1, dl1, ddl1, h)


def sample_lattice(config: LatticeConfig, start: FrenetState) -> Lattice:
    row_count = max(int(math.floor(config.total_span / config.row_interval + 1e-9)), 1)
    stations = start.s + config.row_interval * np.arange(row_count + 1)
    lo, hi = config.road_bounds
    allowed = np.array([
        o for o in config.lateral_offsets
        if lo + config.half_width - 1e-9 <= o <= hi - config.half_width + 1e-9
    ])
    if allowed.size == 0:
        raise EmptyRow(f"no lateral offset keeps the ego inside road bounds {config.road_bounds}")
    rows = (np.array([start.l]),) + tuple(allowed.copy() for _ in range(row_count))
    return Lattice(start=start, stations=stations, rows=rows)


# -- DP cost model -----------------------------------------------------------------

class EdgeCost(NamedTuple):
    smooth: float
    guidance: float
    obstacle: float

    @property
    def total(self) -> float:
        return self.smooth + self.guidance + self.obstacle


@lru_cache(maxsize=64)
def _edge_forms(length: float, w1: float, w2: float, w3: float, w4: float) -> Tuple[np.ndarray, np.ndarray]:
    knots = (0.0, length)
    smooth = (smoothness_cost(knots, EDGE_ORDER, 1, w1) + smoothness_cost(knots, EDGE_ORDER, 2, w2)
              + smoothness_cost(knots, EDGE_ORDER, 3, w3))
    return smooth.Q, smoothness_cost(knots, EDGE_ORDER, 0, w4).Q


def nudge_cost(distance: np.ndarray, params: PathCostParams) -> np.ndarray:
    """Obstacle cost by ego-to-region box distance: collision, quadratic nudge, or zero."""
    distance = np.asarray(distance, dtype=float)
    shape = params.w_obs * (params.d_n - distance) ** 2 / (params.d_n - params.d_c) ** 2
    return np.where(distance < params.d_c, params.c_collision, np.where(distance > params.d_n, 0.0, shape))


class PathCostModel:
    """C_smooth + C_guidance + C_obs of a single lattice edge."""

    def __init__(
        self,
        regions: Sequence[SlRegion],
        params: PathCostParams,
        footprint: EgoFootprint,
        road_bounds: Tuple[float, float],
        guidance: Optional[Tuple[np.ndarray, np.ndarray]] = None,
    ) -> None:
        self.params = params
        self.footprint = footprint
        self.road_bounds = road_bounds
        self.guidance = guidance
        self.box = np.array([[r.s_min, r.s_max, r.l_min, r.l_max] for r in regions]).reshape(-1, 4)

    def box_distance(self, stations: np.ndarray, lateral: np.ndarray) -> np.ndarray:
        """(samples, regions) distance between the ego body and each region box."""
        fp = self.footprint
        front = stations + fp.l_f
        rear = stations - fp.l_r_geom
        left = lateral + fp.half_width
        right = lateral - fp.half_width
        b = self.box
        dx = np.maximum.reduce([np.zeros((stations.size, b.shape[0])),
                                b[None, :, 0] - front[:, None], rear[:, None] - b[None, :, 1]])
        dy = np.maximum.reduce([np.zeros((stations.size, b.shape[0])),
                                b[None, :, 2] - left[:, None], right[:, None] - b[None, :, 3]])
        return np.hypot(dx, dy)

    def obstacle_cost(self, stations: np.ndarray, lateral: np.ndarray) -> float:
        lo, hi = self.road_bounds
        hw = self.footprint.half_width
        excess = np.maximum(0.0, np.maximum(lateral + hw - hi, lo - (lateral - hw)))
        cost = float(np.sum(self.params.on_road_penalty * excess))
        if self.box.size:
            cost += float(np.sum(nudge_cost(self.box_distance(stations, lateral), self.params)))
        return cost

    def edge_cost(self, s0: float, coeffs: np.ndarray, length: float) -> EdgeCost:
        p = self.params
        smooth_q, zero_guidance_q = _edge_forms(float(length), p.w1, p.w2, p.w3, p.w4)
        smooth = float(coeffs @ smooth_q @ coeffs)
        if self.guidance is None:
            guide = float(coeffs @ zero_guidance_q @ coeffs)
        else:
            gx, gy = self.guidance
            local = guidance_cost((0.0, length), EDGE_ORDER, gx - s0, gy, p.w4)
            guide = local.value(coeffs)

        step = p.obstacle_step
        first = math.floor(s0 / step + 1e-9) + 1
        last = math.floor((s0 + length) / step + 1e-9)
        stations = np.arange(first, last + 1) * step
        local_x = stations - s0
        lateral = (local_x[:, None] ** np.arange(EDGE_ORDER + 1)[None, :]) @ coeffs
        return EdgeCost(smooth, guide, self.obstacle_cost(stations, lateral))


# -- DP search -----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DpPath:
    lattice: Lattice
    indices: Tuple[int, ...]
    total_cost: float
    edge_costs: Tuple[EdgeCost, ...]

    @property
    def stations(self) -> np.ndarray:
        return self.lattice.stations

    @property
    def offsets(self) -> Tuple[float, ...]:
        return tuple(float(self.lattice.rows[r][i]) for r, i in enumerate(self.indices))

    @property
    def span(self) -> Tuple[float, float]:
        return float(self.stations[0]), float(self.stations[-1])

    def lateral(self, s) -> np.ndarray:
        s = np.clip(np.atleast_1d(np.asarray(s, dtype=float)), *self.span)
        rows = np.clip(np.searchsorted(self.stations, s, side="right") - 1, 0, len(self.indices) - 2)
        coeffs = np.array([
            self.lattice.edge_coefficients(r, self.indices[r], self.indices[r + 1])
            for r in range(len(self.indices) - 1)
        ])
        local = s - self.stations[rows]
        return np.einsum("ij,ij->i", coeffs[rows], local[:, None] ** np.arange(EDGE_ORDER + 1)[None, :])

    def samples(self, step: float = GUIDANCE_STEP) -> Tuple[np.ndarray, np.ndarray]:
        lo, hi = self.span
        xs = np.append(np.arange(lo, hi, step), hi)
        return xs, self.lateral(xs)

    def to_dict(self) -> dict:
        return {"stations": self.stations.tolist(), "offsets": list(self.offsets), "cost": self.total_cost}


def _tie_key(cost: float, offset: float) -> Tuple[float, float, float]:
    return cost, abs(offset), -offset


def dp_search(lattice: Lattice, model: PathCostModel) -> Tuple[DpPath, float]:
    """Forward DP over lattice rows; ties prefer smaller |l|, then the left node."""
    rows = lattice.rows
    best: List[np.ndarray] = [np.zeros(1)]
    parents: List[np.ndarray] = [np.zeros(1, dtype=int)]
    edges: List[Dict[Tuple[int, int], EdgeCost]] = []

    for r in range(len(rows) - 1):
        length = float(lattice.stations[r + 1] - lattice.stations[r])
        costs = np.full(rows[r + 1].size, math.inf)
        parent = np.zeros(rows[r + 1].size, dtype=int)
        row_edges: Dict[Tuple[int, int], EdgeCost] = {}
        for j in range(rows[r + 1].size):
            chosen = None
            for i in range(rows[r].size):
                edge = model.edge_cost(float(lattice.stations[r]), lattice.edge_coefficients(r, i, j), length)
                row_edges[(i, j)] = edge
                key = _tie_key(best[r][i] + edge.total, float(rows[r][i]))
                if chosen is None or key < chosen:
                    chosen, parent[j] = key, i
            costs[j] = chosen[0]
        best.append(costs)
        parents.append(parent)
        edges.append(row_edges)

    last = rows[-1]
    terminal = min(range(last.size), key=lambda j: _tie_key(best[-1][j], float(last[j])))
    total = float(best[-1][terminal])
    if total >= model.params.c_collision:
        raise AllPathsCollide(f"every lattice path collides (best cost {total:.3g})")

    indices = [terminal]
    for r in range(len(rows) - 1, 0, -1):
        indices.append(int(parents[r][indices[-1]]))
    indices.reverse()
    edge_costs = tuple(edges[r][(indices[r], indices[r + 1])] for r in range(len(rows) - 1))
    return DpPath(lattice, tuple(indices), total, edge_costs), total


# -- tunnel and decisions ------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FeasibleTunnel:
    """Bounds on the ego body edges at each station."""

    stations: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def bounds_at(self, s: float) -> Tuple[float, float]:
        return float(np.interp(s, self.stations, self.lower)), float(np.interp(s, self.stations, self.upper))

    def to_dict(self) -> dict:
        return {"stations": self.stations.tolist(), "lower": self.lower.tolist(), "upper": self.upper.tolist()}


def _body_overlap(stations: np.ndarray, region: SlRegion, footprint: EgoFootprint) -> np.ndarray:
    return (stations - footprint.l_r_geom <= region.s_max) & (stations + footprint.l_f >= region.s_min)


def extract_tunnel_and_decisions(
    dp_path: DpPath,
    regions: Sequence[SlRegion],
    road_bounds: Tuple[float, float],
    footprint: EgoFootprint,
    params: PathCostParams,
) -> Tuple[FeasibleTunnel, List[PathDecision]]:
    lo, hi = dp_path.span
    stations = np.append(np.arange(lo, hi, params.obstacle_step), hi)
    lateral = dp_path.lateral(stations)
    lower = np.full(stations.size, float(road_bounds[0]))
    upper = np.full(stations.size, float(road_bounds[1]))

    sides: Dict[str, NudgeKind] = {}
    for region in regions:
        mask = _body_overlap(stations, region, footprint)
        if not mask.any():
            sides.setdefault(region.source_id, NudgeKind.IGNORE)
            continue
        first = int(np.argmax(mask))
        passes_left = lateral[first] > 0.5 * (region.l_min + region.l_max)
        kind = NudgeKind.NUDGE_LEFT if passes_left else NudgeKind.NUDGE_RIGHT
        previous = sides.get(region.source_id, NudgeKind.IGNORE)
        if previous is NudgeKind.IGNORE:
            sides[region.source_id] = kind
        elif previous is not kind:
            logger.warning("DP path passes obstacle %s on both sides; keeping %s", region.source_id, previous.value)
            kind = previous
        if kind is NudgeKind.NUDGE_LEFT:
            lower[mask] = np.maximum(lower[mask], region.l_max + params.d_c)
        else:
            upper[mask] = np.minimum(upper[mask], region.l_min - params.d_c)

    if np.any(lower >= upper):
        where = stations[int(np.argmax(lower >= upper))]
        raise DegenerateTunnel(f"tunnel closes at s={where:.2f}")
    decisions = [PathDecision(source, kind) for source, kind in sorted(sides.items())]
    return FeasibleTunnel(stations, lower, upper), decisions


# -- QP refinement --------------------------------------------------------------------

class NudgeInteraction(NamedTuple):
    source_id: str
    s_min: float
    s_max: float
    clearance: float


@dataclass(frozen=True, eq=False)
class PathProfile:
    spline: Spline
    decisions: Tuple[PathDecision, ...] = ()
    tunnel: Optional[FeasibleTunnel] = None
    dp_path: Optional[DpPath] = None
    solution: Optional[QpSolution] = None
    interactions: Tuple[NudgeInteraction, ...] = ()
    nudge_station: Optional[float] = None

    @classmethod
    def straight(cls, s_start: float, length: float, l: float = 0.0) -> "PathProfile":
        coeffs = np.zeros((1, EDGE_ORDER + 1))
        coeffs[0, 0] = l
        return cls(Spline(np.array([s_start, s_start + length]), coeffs))

    @property
    def domain(self) -> Tuple[float, float]:
        return self.spline.domain

    def evaluate(self, s, derivative: int = 0):
        """f^(derivative)(s), held constant outside the spline domain."""
        lo, hi = self.domain
        s_arr = np.asarray(s, dtype=float)
        clipped = np.clip(s_arr, lo, hi)
        values = np.asarray(self.spline.evaluate(clipped, derivative), dtype=float)
        if derivative:
            values = np.where((s_arr < lo) | (s_arr > hi), 0.0, values)
        return float(values) if s_arr.ndim == 0 else values

    def lateral(self, s) -> np.ndarray:
        return np.atleast_1d(self.evaluate(np.atleast_1d(s)))

    @property
    def objective(self) -> float:
        return self.solution.objective if self.solution is not None else 0.0

    @property
    def iterations(self) -> int:
        return self.solution.iterations if self.solution is not None else 0


def _interactions(
    path_spline: Spline,
    regions: Sequence[SlRegion],
    decisions: Sequence[PathDecision],
    footprint: EgoFootprint,
) -> Tuple[Tuple[NudgeInteraction, ...], Optional[float]]:
    """Dynamic obstacles the smooth path nudges, with their minimal lateral clearance."""
    nudged = {d.obstacle_id for d in decisions if d.kind is not NudgeKind.IGNORE}
    lo, hi = path_spline.domain
    grouped: Dict[str, List[SlRegion]] = {}
    for region in regions:
        if region.interaction_time is not None and region.source_id in nudged:
            grouped.setdefault(region.source_id, []).append(region)

    out = []
    centres = []
    stations = np.append(np.arange(lo, hi, GUIDANCE_STEP), hi)
    lateral = path_spline.evaluate(stations)
    hw = footprint.half_width
    for source, group in sorted(grouped.items()):
        clearance = math.inf
        for region in group:
            mask = _body_overlap(stations, region, footprint)
            if mask.any():
                gap = np.maximum(region.l_min - (lateral[mask] + hw), (lateral[mask] - hw) - region.l_max)
                clearance = min(clearance, float(np.min(gap)))
            centres.append(region.s_center)
        out.append(NudgeInteraction(
            source, min(r.s_min for r in group), max(r.s_max for r in group), clearance,
        ))
    nudge_station = float(np.mean(centres)) if centres else None
    return tuple(out), nudge_station


def qp_path(
    tunnel: FeasibleTunnel,
    dp_path: DpPath,
    start: FrenetState,
    footprint: EgoFootprint,
    params: PathCostParams,
    *,
    span: Optional[float] = None,
    regions: Sequence[SlRegion] = (),
    decisions: Sequence[PathDecision] = (),
    warm_start: Optional[QpSolution] = None,
    qp_params: QpParameters = QpParameters(),
) -> PathProfile:
    s0 = start.s
    available = float(tunnel.stations[-1]) - s0
    span = available if span is None else min(span, available)
    knots = s0 + np.linspace(0.0, span, params.qp_segments + 1)

    guide_x, guide_y = dp_path.samples()
    cost = (
        smoothness_cost(knots, EDGE_ORDER, 1, params.w1)
        + smoothness_cost(knots, EDGE_ORDER, 2, params.w2)
        + smoothness_cost(knots, EDGE_ORDER, 3, params.w3)
        + guidance_cost(knots, EDGE_ORDER, guide_x, guide_y, params.w4)
    )

    hw = footprint.half_width
    specs: list = [Equality(s0, start.l, 0), Equality(s0, start.dl, 1), Equality(s0, start.ddl, 2)]
    count = int(math.floor(span / params.qp_station_step + 1e-9))
    for k in range(1, count + 1):
        station = s0 + k * params.qp_station_step
        low, high = tunnel.bounds_at(station)
        if high - low < footprint.width:
            raise DegenerateTunnel(f"tunnel at s={station:.2f} is narrower than the ego")
        specs.append(Bound(station, low + hw, high - hw, 0, heading=footprint.l_f))
        specs.append(Bound(station, low + hw, high - hw, 0, heading=-footprint.l_r_geom))
        specs.append(Bound(station, -params.ddl_max, params.ddl_max, 2))
        specs.append(Bound(station, -params.dddl_max, params.dddl_max, 3))
    constraints = build_constraints(knots, EDGE_ORDER, specs)

    solution = solve(QpProblem(cost, constraints, qp_params.epsilon), warm_start, qp_params)
    solution.raise_for_status()
    spline = Spline.from_params(knots, EDGE_ORDER, solution.params)
    interactions, nudge_station = _interactions(spline, regions, decisions, footprint)
    return PathProfile(
        spline=spline,
        decisions=tuple(decisions),
        tunnel=tunnel,
        dp_path=dp_path,
        solution=solution,
        interactions=interactions,
        nudge_station=nudge_station,
    )
