"""
Speed M-step: dynamic programming over the station-time grid for a rough
profile and per-region decisions, then a quintic-spline QP for S(t).

Stations are path-relative (σ = s − s_ego, S(0) = 0). The DP walks a grid of
``dp_dt`` × ``dp_ds`` cells; a node is (station cell j, velocity cell d,
acceleration cell a) so that finite-difference velocity, acceleration and
jerk are exact on the grid:

    v = d·ds/dt,   acc = a·ds/dt²,   jerk = Δa·ds/dt³

The first step starts from the ego's continuous (v0, a0), so its velocity
and acceleration are not cell multiples; everything afterwards is.
"""

import enum
import logging
import math
from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .exceptions import NoFeasibleProfile
from .parameters import QpParameters, SpeedParameters
from .path_optimizer import NudgeInteraction
from .projection import EgoFootprint, RegionKind, StRegion, sample_times
from .qp_solver import QpProblem, QpSolution, solve
from .spline_core import Bound, Equality, Monotone, Spline, build_constraints, guidance_cost, smoothness_cost

logger = logging.getLogger(__name__)

SPEED_ORDER = 5
LIMIT_TOLERANCE = 1e-9
MIN_DISTANCE = 1e-3


@dataclass(frozen=True)
class SpeedLimits:
    v_ref: float
    v_upper: float
    acc_max: float
    dec_max: float
    jerk_max: float

    def __post_init__(self) -> None:
        if min(self.v_ref, self.v_upper, self.acc_max, self.dec_max, self.jerk_max) <= 0:
            raise ValueError("speed limits must be positive")
        if self.v_ref > self.v_upper:
            raise ValueError(f"V_ref {self.v_ref} exceeds V_upper {self.v_upper}")

    @classmethod
    def from_parameters(cls, params: SpeedParameters, speed_limit: Optional[float] = None) -> "SpeedLimits":
        v_ref, v_upper = params.v_ref, params.v_upper
        if speed_limit is not None:
            v_ref, v_upper = min(v_ref, speed_limit), min(v_upper, speed_limit)
        return cls(v_ref, v_upper, params.acc_max, params.dec_max, params.jerk_max)


def velocity_envelope(times, v0: float, a0: float, limits: SpeedLimits) -> np.ndarray:
    """
    Upper speed bound over time: V_upper, relaxed to the jerk-limited
    comfort-braking curve from (v0, a0) while that curve is still above it.
    """
    times = np.asarray(times, dtype=float)
    j, dec = limits.jerk_max, limits.dec_max
    ramp = max(0.0, (a0 + dec) / j)
    t_ramp = np.minimum(times, ramp)
    braking = v0 + a0 * t_ramp - 0.5 * j * t_ramp**2 - dec * np.maximum(times - ramp, 0.0)
    return np.maximum(limits.v_upper, braking)


def follow_buffer(v0: float, params: SpeedParameters) -> float:
    return max(params.follow_min, params.follow_headway * v0)


class SpeedDecisionKind(str, enum.Enum):
    YIELD = "yield"
    OVERTAKE = "overtake"
    FOLLOW = "follow"
    STOP = "stop"


@dataclass(frozen=True)
class SpeedDecision:
    source_id: str
    region_kind: RegionKind
    kind: SpeedDecisionKind


@dataclass(frozen=True, eq=False)
class SpeedTunnel:
    times: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def to_dict(self) -> dict:
        return {"times": self.times.tolist(), "lower": self.lower.tolist(), "upper": self.upper.tolist()}


@dataclass(frozen=True, eq=False)
class DpSpeedProfile:
    times: np.ndarray
    stations: np.ndarray
    cells: Tuple[int, ...]
    decisions: Tuple[SpeedDecision, ...]
    cost: float

    def at(self, times) -> np.ndarray:
        return np.interp(times, self.times, self.stations)

    @property
    def terminal_speed(self) -> float:
        return float((self.stations[-1] - self.stations[-2]) / (self.times[-1] - self.times[-2]))

    def to_dict(self) -> dict:
        return {
            "times": self.times.tolist(), "stations": self.stations.tolist(), "cost": self.cost,
            "decisions": [
                {"source_id": d.source_id, "region": d.region_kind.value, "kind": d.kind.value}
                for d in self.decisions
            ],
        }


class SpeedWindow(NamedTuple):
    sigma_min: float
    sigma_max: float
    speed: float


def passing_windows(
    interactions: Sequence[NudgeInteraction],
    ego_station: float,
    footprint: EgoFootprint,
    params: SpeedParameters,
    nudge_range: float,
) -> List[SpeedWindow]:
    """Stations where the ego body passes a closely nudged dynamic obstacle, plus the lead-in."""
    windows = []
    for item in interactions:
        if item.clearance >= nudge_range:
            continue
        low = item.s_min - footprint.l_f - ego_station - params.passing_lead
        high = item.s_max + footprint.l_r_geom - ego_station
        if high > 0:
            windows.append(SpeedWindow(low, high, params.passing_speed))
    return windows


class DpSpeedProblem:
    """
    The ST grid with its pruning rules and cost terms. ``dp_speed_search``
    runs the forward DP over it; ``evaluate`` prices one explicit cell path
    with the same arithmetic.
    """

    def __init__(
        self,
        regions: Sequence[StRegion],
        limits: SpeedLimits,
        params: SpeedParameters,
        v0: float,
        a0: float,
        *,
        horizon: Optional[float] = None,
        dt: Optional[float] = None,
        ds: Optional[float] = None,
        windows: Sequence[SpeedWindow] = (),
    ) -> None:
        self.regions = list(regions)
        self.limits = limits
        self.params = params
        self.v0 = float(v0)
        self.a0 = float(a0)
        self.horizon = params.horizon if horizon is None else horizon
        self.dt = params.dp_dt if dt is None else dt
        self.ds = params.dp_ds if ds is None else ds
        if self.dt <= 0 or self.ds <= 0:
            raise ValueError("DP grid resolution must be positive")
        self.steps = int(round(self.horizon / self.dt))
        self.times = np.arange(self.steps + 1) * self.dt
        self.envelope = velocity_envelope(self.times, self.v0, self.a0, limits)
        top_speed = float(self.envelope.max())
        self.max_velocity_cell = int(math.floor(top_speed * self.dt / self.ds + LIMIT_TOLERANCE))
        self.max_station_cell = self.steps * self.max_velocity_cell
        self.sigmas = np.arange(self.max_station_cell + 1) * self.ds
        self.follow = follow_buffer(self.v0, params)

        self.reference_speed = np.full(self.sigmas.size, limits.v_ref)
        for window in windows:
            inside = (self.sigmas >= window.sigma_min) & (self.sigmas <= window.sigma_max)
            self.reference_speed[inside] = np.minimum(self.reference_speed[inside], window.speed)

        substeps = max(int(round(self.dt / params.qp_dt)), 1)
        self.fine_fractions = np.arange(1, substeps) / substeps
        self._node_bands = [self._bands(np.array([t])) for t in self.times]
        self._fine_bands = [
            self._bands(self.times[i - 1] + self.fine_fractions * self.dt) for i in range(1, self.steps + 1)
        ]
        self._keep_clear = [
            bounds for bounds in (r.bounds_at(0.0) for r in self.regions if r.kind is RegionKind.KEEP_CLEAR)
            if bounds is not None
        ]
        self._obstacle_costs: Dict[int, np.ndarray] = {}

    # -- bands and pruning ---------------------------------------------------------

    def buffers(self, region: StRegion) -> Tuple[float, float]:
        if region.kind is RegionKind.STOP_LINE:
            return 0.0, 0.0
        return self.follow, self.params.overtake_buffer

    def _bands(self, times: np.ndarray) -> List[Tuple[np.ndarray, np.ndarray]]:
        """Per non-keep-clear region, the forbidden open interval at each of ``times`` (NaN if absent)."""
        bands = []
        for region in self.regions:
            if region.kind is RegionKind.KEEP_CLEAR:
                continue
            lo, hi = region.bounds_over(times)
            below, above = self.buffers(region)
            bands.append((lo - below, hi + above))
        return bands

    @staticmethod
    def _inside(bands, sigma: np.ndarray, column: int = 0) -> np.ndarray:
        blocked = np.zeros(np.shape(sigma), dtype=bool)
        for lo, hi in bands:
            if np.isnan(lo[column]):
                continue
            blocked |= (sigma > lo[column] + LIMIT_TOLERANCE) & (sigma < hi[column] - LIMIT_TOLERANCE)
        return blocked

    def node_blocked(self, step: int, j: np.ndarray, d: np.ndarray) -> np.ndarray:
        sigma = j * self.ds
        blocked = self._inside(self._node_bands[step], sigma)
        for lo, hi in self._keep_clear:
            blocked |= (d == 0) & (sigma >= lo) & (sigma <= hi)
        return blocked

    def segment_blocked(self, step: int, j: np.ndarray, d: np.ndarray) -> np.ndarray:
        start = (j - d) * self.ds
        blocked = np.zeros(np.shape(j), dtype=bool)
        for k, frac in enumerate(self.fine_fractions):
            blocked |= self._inside(self._fine_bands[step - 1], start + frac * d * self.ds, k)
        return blocked

    # -- kinematics and cost -----------------------------------------------------------

    def velocity(self, d):
        return d * self.ds / self.dt

    def first_acceleration(self, d):
        return (self.velocity(d) - self.v0) / self.dt

    def acceleration(self, a):
        return a * self.ds / self.dt**2

    def obstacle_cost(self, step: int) -> np.ndarray:
        """Inverse-distance penalty to the nearest region edge for every station cell at ``step``."""
        if step in self._obstacle_costs:
            return self._obstacle_costs[step]
        sigma = self.sigmas
        nearest = np.full(sigma.shape, np.inf)
        for region in self.regions:
            if region.kind is RegionKind.KEEP_CLEAR:
                continue
            bounds = region.bounds_at(self.times[step])
            if bounds is None:
                continue
            lo, hi = bounds
            gap = np.where(sigma <= lo, lo - sigma, np.where(sigma >= hi, sigma - hi, 0.0))
            nearest = np.minimum(nearest, np.maximum(gap, MIN_DISTANCE))
        cost = np.maximum(0.0, 1.0 / nearest - 1.0 / self.params.obs_range)
        self._obstacle_costs[step] = cost
        return cost

    def transition_cost(self, step: int, j, vel, acc, jerk) -> np.ndarray:
        p = self.params
        diff = vel - self.reference_speed[j]
        speed = np.where(diff < 0.0, p.w_below, p.w_above) * diff**2
        total = speed + p.w_acc * acc**2 + p.w_jerk * jerk**2
        return (total + p.w_obs * self.obstacle_cost(step)[j]) * self.dt

    def kinematically_admissible(self, step: int, d, acc, jerk) -> np.ndarray:
        lim = self.limits
        ok = (acc >= -lim.dec_max - LIMIT_TOLERANCE) & (acc <= lim.acc_max + LIMIT_TOLERANCE)
        ok &= np.abs(jerk) <= self.params.dp_jerk_limit + LIMIT_TOLERANCE
        ok &= (d >= 0) & (self.velocity(d) <= self.envelope[step] + LIMIT_TOLERANCE)
        return ok

    def blocked(self, step: int, j, d) -> np.ndarray:
        """Node or incoming segment inside a region, or j off the grid."""
        off_grid = (j < 0) | (j > self.max_station_cell)
        return off_grid | self.node_blocked(step, j, d) | self.segment_blocked(step, j, d)

    def evaluate(self, cells: Sequence[int]) -> float:
        """Cost of the grid path with station cells ``cells`` (cells[0] = 0); inf if pruned."""
        cells = [int(c) for c in cells]
        if len(cells) != self.steps + 1 or cells[0] != 0:
            raise ValueError("a grid path needs one station cell per grid time, starting at 0")
        total = 0.0
        prev_acc = self.a0
        prev_d = None
        for step in range(1, self.steps + 1):
            j = np.array([cells[step]])
            d = j - cells[step - 1]
            if step == 1:
                acc = self.first_acceleration(d)
            else:
                acc = self.acceleration(d - prev_d)
            jerk = (acc - prev_acc) / self.dt
            if not self.kinematically_admissible(step, d, acc, jerk)[0] or self.blocked(step, j, d)[0]:
                return math.inf
            total = total + float(self.transition_cost(step, j, self.velocity(d), acc, jerk)[0])
            prev_acc, prev_d = acc, d
        return total

    @property
    def acceleration_cells(self) -> np.ndarray:
        low = math.ceil(-self.limits.dec_max * self.dt**2 / self.ds - LIMIT_TOLERANCE)
        high = math.floor(self.limits.acc_max * self.dt**2 / self.ds + LIMIT_TOLERANCE)
        return np.arange(low, high + 1)


def _search(problem: DpSpeedProblem) -> Tuple[List[int], float]:
    if problem.steps < 1:
        raise NoFeasibleProfile("the speed horizon holds no DP step")
    J, D = problem.max_station_cell, problem.max_velocity_cell
    accs = problem.acceleration_cells
    jj, dd = np.meshgrid(np.arange(J + 1), np.arange(D + 1), indexing="ij")

    # step 1: j = d, a single acceleration slot holding the continuous value
    first = np.full((J + 1, D + 1, 1), np.inf)
    d1 = np.arange(D + 1)
    acc1 = problem.first_acceleration(d1)
    jerk1 = (acc1 - problem.a0) / problem.dt
    ok = problem.kinematically_admissible(1, d1, acc1, jerk1) & ~problem.blocked(1, d1, d1)
    first[d1[ok], d1[ok], 0] = problem.transition_cost(1, d1, problem.velocity(d1), acc1, jerk1)[ok]
    layers = [first]
    parents: List[np.ndarray] = [np.zeros((J + 1, D + 1, 1), dtype=int)]

    for step in range(2, problem.steps + 1):
        previous = layers[-1]
        free = ~problem.blocked(step, jj, dd)
        cost = np.full((J + 1, D + 1, accs.size), np.inf)
        parent = np.zeros((J + 1, D + 1, accs.size), dtype=int)
        for ai, a in enumerate(accs):
            pj, pd = jj - dd, dd - a
            valid = (pj >= 0) & (pd >= 0) & (pd <= D)
            acc = np.full(jj.shape, problem.acceleration(a))
            for pi in range(previous.shape[2]):
                if step == 2:
                    prev_acc = problem.first_acceleration(pd)
                else:
                    prev_acc = np.full(jj.shape, problem.acceleration(accs[pi]))
                jerk = (acc - prev_acc) / problem.dt
                base = np.full(jj.shape, np.inf)
                base[valid] = previous[pj[valid], pd[valid], pi]
                live = np.isfinite(base) & free
                live &= problem.kinematically_admissible(step, dd, acc, jerk)
                if not live.any():
                    continue
                total = np.full(jj.shape, np.inf)
                total[live] = base[live] + problem.transition_cost(
                    step, jj[live], problem.velocity(dd[live]), acc[live], jerk[live],
                )
                better = total < cost[:, :, ai]
                cost[:, :, ai][better] = total[better]
                parent[:, :, ai][better] = pi
        layers.append(cost)
        parents.append(parent)

    last = layers[-1]
    if not np.isfinite(last).any():
        raise NoFeasibleProfile("every terminal node of the speed grid is pruned")
    j, d, a = np.unravel_index(int(np.argmin(last)), last.shape)
    best = float(last[j, d, a])
    cells = [int(j)]
    for step in range(problem.steps, 1, -1):
        prev_slot = int(parents[step - 1][j, d, a])
        j, d = j - d, d - accs[a]
        a = prev_slot
        cells.append(int(j))
    cells.append(0)
    cells.reverse()
    return cells, best


def _must_stop(problem: DpSpeedProblem, times: np.ndarray, profile: np.ndarray, lo: np.ndarray) -> bool:
    """A stop line the DP profile cannot run on past the horizon and still brake for at Dec_max."""
    terminal_speed = (profile[-1] - profile[-2]) / (times[-1] - times[-2])
    return terminal_speed**2 / (2.0 * problem.limits.dec_max) >= lo[-1] - profile[-1]


def _decide(
    problem: DpSpeedProblem, times: np.ndarray, profile: np.ndarray, stopped: bool,
) -> List[Tuple[StRegion, SpeedDecision]]:
    decided = []
    for region in problem.regions:
        lo, hi = region.bounds_over(times)
        present = ~np.isnan(lo)
        if region.kind is RegionKind.KEEP_CLEAR:
            kind = SpeedDecisionKind.OVERTAKE if profile[-1] > np.nanmax(hi) else SpeedDecisionKind.YIELD
        elif not present.any():
            continue
        else:
            first = int(np.argmax(present))
            if profile[first] >= hi[first] - LIMIT_TOLERANCE:
                kind = SpeedDecisionKind.OVERTAKE
            elif region.is_static and (stopped or _must_stop(problem, times, profile, lo)):
                kind = SpeedDecisionKind.STOP
            else:
                gap = float(np.min(lo[present] - profile[present]))
                follow = problem.buffers(region)[0]
                if region.kind is RegionKind.OBSTACLE and gap <= 2.0 * follow:
                    kind = SpeedDecisionKind.FOLLOW
                else:
                    kind = SpeedDecisionKind.YIELD
        decided.append((region, SpeedDecision(region.source_id, region.kind, kind)))
    return decided


def _tunnel(
    problem: DpSpeedProblem, decided, times: np.ndarray, profile: np.ndarray,
) -> SpeedTunnel:
    lower = np.zeros(times.size)
    upper = np.full(times.size, problem.max_station_cell * problem.ds)
    for region, decision in decided:
        lo, hi = region.bounds_over(times)
        present = ~np.isnan(lo)
        if region.kind is RegionKind.KEEP_CLEAR:
            if decision.kind is SpeedDecisionKind.YIELD:
                upper[present] = np.minimum(upper[present], lo[present])
            else:
                lower[-1] = max(lower[-1], float(hi[-1]))
            continue
        below, above = problem.buffers(region)
        if decision.kind is SpeedDecisionKind.OVERTAKE:
            lower[present] = np.maximum(lower[present], hi[present] + above)
        else:
            upper[present] = np.minimum(upper[present], lo[present] - below)
    if np.any(lower > upper + LIMIT_TOLERANCE):
        raise NoFeasibleProfile("speed tunnel closes")
    return SpeedTunnel(times, lower, upper)


def dp_speed_search(
    regions: Sequence[StRegion],
    limits: SpeedLimits,
    params: SpeedParameters,
    v0: float,
    a0: float = 0.0,
    *,
    horizon: Optional[float] = None,
    dt: Optional[float] = None,
    ds: Optional[float] = None,
    windows: Sequence[SpeedWindow] = (),
) -> Tuple[DpSpeedProfile, SpeedTunnel]:
    problem = DpSpeedProblem(regions, limits, params, v0, a0, horizon=horizon, dt=dt, ds=ds, windows=windows)
    cells, cost = _search(problem)
    stations = np.array(cells, dtype=float) * problem.ds
    stopped = len(cells) > 1 and cells[-1] == cells[-2]

    fine_times = sample_times(problem.horizon, params.qp_dt)
    fine_profile = np.interp(fine_times, problem.times, stations)
    decided = _decide(problem, fine_times, fine_profile, stopped)
    tunnel = _tunnel(problem, decided, fine_times, fine_profile)
    profile = DpSpeedProfile(
        times=problem.times, stations=stations, cells=tuple(cells),
        decisions=tuple(decision for _, decision in decided), cost=cost,
    )
    logger.debug("DP speed: %d steps, terminal station %.1f m, cost %.3f", problem.steps, stations[-1], cost)
    return profile, tunnel


# -- QP refinement ----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SpeedProfile:
    spline: Spline
    v0: float
    limits: SpeedLimits
    decisions: Tuple[SpeedDecision, ...] = ()
    tunnel: Optional[SpeedTunnel] = None
    dp_profile: Optional[DpSpeedProfile] = None
    solution: Optional[QpSolution] = None
    envelope_a0: float = 0.0

    @property
    def horizon(self) -> float:
        return self.spline.domain[1]

    def evaluate(self, t, derivative: int = 0):
        t = np.clip(np.asarray(t, dtype=float), *self.spline.domain)
        return self.spline.evaluate(t, derivative)

    def envelope(self, t) -> np.ndarray:
        return velocity_envelope(t, self.v0, self.envelope_a0, self.limits)

    @property
    def stops(self) -> bool:
        return any(d.kind is SpeedDecisionKind.STOP for d in self.decisions)

    @property
    def objective(self) -> float:
        return self.solution.objective if self.solution is not None else 0.0

    @property
    def iterations(self) -> int:
        return self.solution.iterations if self.solution is not None else 0

    def min_speed(self, step: float = 0.1) -> float:
        times = sample_times(self.horizon, step)
        return float(np.min(self.evaluate(times, 1)))


def passing_floor(
    windows: Sequence[SpeedWindow],
    decisions: Sequence[SpeedDecision],
    v0: float,
    a0: float,
    limits: SpeedLimits,
    params: SpeedParameters,
) -> float:
    """
    Lowest speed the QP may use while passing: ``passing_tolerance`` below
    the slowest window speed. Zero without windows or when a decision
    requires yielding, following or stopping. Capped by the lowest speed
    (v0, a0) reaches under the jerk limit, so the bound stays reachable.
    """
    if not windows:
        return 0.0
    if any(d.kind is not SpeedDecisionKind.OVERTAKE for d in decisions):
        return 0.0
    target = min(w.speed for w in windows) - params.passing_tolerance
    reachable = v0 - max(0.0, -a0) ** 2 / (2.0 * limits.jerk_max)
    return max(0.0, min(target, reachable))


def qp_speed(
    tunnel: SpeedTunnel,
    dp_profile: DpSpeedProfile,
    v0: float,
    a0: float,
    limits: SpeedLimits,
    params: SpeedParameters,
    *,
    stop: Optional[bool] = None,
    windows: Sequence[SpeedWindow] = (),
    warm_start: Optional[QpSolution] = None,
    qp_params: QpParameters = QpParameters(),
) -> SpeedProfile:
    horizon = float(tunnel.times[-1])
    knots = np.linspace(0.0, horizon, params.qp_segments + 1)
    cost = (
        guidance_cost(knots, SPEED_ORDER, dp_profile.times, dp_profile.stations, params.qp_w_ref)
        + smoothness_cost(knots, SPEED_ORDER, 2, params.qp_w_acc)
        + smoothness_cost(knots, SPEED_ORDER, 3, params.qp_w_jerk)
    )

    times = tunnel.times
    envelope = velocity_envelope(times, v0, a0, limits)
    stops = any(d.kind is SpeedDecisionKind.STOP for d in dp_profile.decisions) if stop is None else stop
    floor = 0.0 if stops else passing_floor(windows, dp_profile.decisions, v0, a0, limits, params)
    specs: list = [Equality(0.0, 0.0, 0), Equality(0.0, v0, 1), Equality(0.0, a0, 2), Monotone(tuple(times))]
    for k in range(1, times.size):
        t = float(times[k])
        specs.append(Bound(t, float(tunnel.lower[k]), float(tunnel.upper[k]), 0))
        specs.append(Bound(t, min(floor, float(envelope[k])), float(envelope[k]), 1))
        specs.append(Bound(t, -limits.dec_max, limits.acc_max, 2))
        specs.append(Bound(t, -limits.jerk_max, limits.jerk_max, 3))
    if stops:
        specs.append(Equality(horizon, 0.0, 1))
    constraints = build_constraints(knots, SPEED_ORDER, specs)

    solution = solve(QpProblem(cost, constraints, qp_params.epsilon), warm_start, qp_params)
    solution.raise_for_status()
    return SpeedProfile(
        spline=Spline.from_params(knots, SPEED_ORDER, solution.params),
        v0=v0,
        limits=limits,
        decisions=dp_profile.decisions,
        tunnel=tunnel,
        dp_profile=dp_profile,
        solution=solution,
        envelope_a0=a0,
    )


def decision_summary(decisions: Sequence[SpeedDecision]) -> Dict[str, str]:
    return {d.source_id: d.kind.value for d in decisions}
