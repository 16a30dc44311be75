"""
Obstacle projection into the station-lateral (SL) and station-time (ST) frames.

SL regions feed the path search: static obstacles always, dynamic ones only
when they are oncoming or slow and the ego (timed by the previous cycle's
trajectory) actually meets them. ST regions feed the speed search: every
obstacle whose box touches the ego swept along the planned path.
"""

import enum
import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Protocol, Sequence, Tuple

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .geometry_frenet import ReferenceLine, normalize_angle
from .parameters import ProjectionParameters
from .trajectory import Trajectory

logger = logging.getLogger(__name__)


class ObstacleKind(str, enum.Enum):
    STATIC = "static"
    DYNAMIC = "dynamic"


@dataclass(frozen=True)
class ObstaclePose:
    t: float
    x: float
    y: float
    heading: float


@dataclass(frozen=True)
class Obstacle:
    id: str
    length: float
    width: float
    kind: ObstacleKind
    trajectory: Tuple[ObstaclePose, ...]
    speed: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", ObstacleKind(self.kind))
        object.__setattr__(self, "trajectory", tuple(self.trajectory))
        if self.length <= 0 or self.width <= 0:
            raise ValueError(f"obstacle {self.id}: length and width must be > 0")
        if not self.trajectory:
            raise ValueError(f"obstacle {self.id}: at least one pose is required")
        if self.kind is ObstacleKind.STATIC and len(self.trajectory) != 1:
            raise ValueError(f"obstacle {self.id}: static obstacles have exactly one pose")
        times = [pose.t for pose in self.trajectory]
        if abs(times[0]) > 1e-9:
            raise ValueError(f"obstacle {self.id}: predicted trajectory must start at t=0")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError(f"obstacle {self.id}: predicted trajectory times must increase")
        if self.speed < 0:
            raise ValueError(f"obstacle {self.id}: speed must be >= 0")

    @property
    def horizon(self) -> float:
        return math.inf if self.kind is ObstacleKind.STATIC else self.trajectory[-1].t

    def poses_at(self, times: Sequence[float]) -> np.ndarray:
        """(len(times), 3) array of x, y, heading; constant velocity past the last pose."""
        times = np.asarray(times, dtype=float)
        track = np.array([(p.t, p.x, p.y, p.heading) for p in self.trajectory])
        if self.kind is ObstacleKind.STATIC:
            return np.repeat(track[:1, 1:], times.size, axis=0)
        heading = np.unwrap(track[:, 3])
        out = np.stack([
            np.interp(times, track[:, 0], track[:, 1]),
            np.interp(times, track[:, 0], track[:, 2]),
            np.interp(times, track[:, 0], heading),
        ], axis=1)
        beyond = times > track[-1, 0]
        if beyond.any():
            extra = times[beyond] - track[-1, 0]
            out[beyond, 0] = track[-1, 1] + self.speed * math.cos(heading[-1]) * extra
            out[beyond, 1] = track[-1, 2] + self.speed * math.sin(heading[-1]) * extra
            out[beyond, 2] = heading[-1]
        return out

    def pose_at(self, t: float) -> ObstaclePose:
        x, y, heading = self.poses_at([t])[0]
        return ObstaclePose(t, float(x), float(y), normalize_angle(float(heading)))

    def corners_at(self, times: Sequence[float]) -> np.ndarray:
        """(len(times), 4, 2) box corners."""
        poses = self.poses_at(times)
        cos, sin = np.cos(poses[:, 2]), np.sin(poses[:, 2])
        half_l, half_w = 0.5 * self.length, 0.5 * self.width
        corners = []
        for along, across in ((half_l, half_w), (half_l, -half_w), (-half_l, -half_w), (-half_l, half_w)):
            corners.append(np.stack([
                poses[:, 0] + along * cos - across * sin,
                poses[:, 1] + along * sin + across * cos,
            ], axis=1))
        return np.stack(corners, axis=1)

    def shifted(self, dt: float) -> "Obstacle":
        if self.kind is ObstacleKind.STATIC or dt <= 0:
            return self
        start = self.pose_at(dt)
        later = [
            ObstaclePose(p.t - dt, p.x, p.y, p.heading)
            for p in self.trajectory if p.t > dt + 1e-9
        ]
        return Obstacle(
            id=self.id, length=self.length, width=self.width, kind=self.kind,
            trajectory=(ObstaclePose(0.0, start.x, start.y, start.heading), *later),
            speed=self.speed,
        )


@dataclass(frozen=True)
class EgoFootprint:
    """Ego box around the rear axle: l_f ahead, l_r_geom behind, width w."""

    l_f: float
    l_r_geom: float
    width: float
    cap_radius: Optional[float] = None

    def __post_init__(self) -> None:
        if self.cap_radius is None:
            object.__setattr__(self, "cap_radius", 0.5 * self.width)
        if min(self.l_f, self.l_r_geom, self.width, self.cap_radius) <= 0:
            raise ValueError("ego footprint dimensions must be positive")

    @property
    def half_width(self) -> float:
        return 0.5 * self.width

    def longitudinal_extent(self, s, inflated: bool = True):
        cap = self.cap_radius if inflated else 0.0
        return s - self.l_r_geom - cap, s + self.l_f + cap


@dataclass(frozen=True)
class SlRegion:
    s_min: float
    s_max: float
    l_min: float
    l_max: float
    source_id: str
    interaction_time: Optional[float] = None

    def __post_init__(self) -> None:
        if not (self.s_min < self.s_max and self.l_min < self.l_max):
            raise ValueError(f"degenerate SL region for {self.source_id}")

    @property
    def s_center(self) -> float:
        return 0.5 * (self.s_min + self.s_max)

    def to_dict(self) -> dict:
        return {
            "source_id": self.source_id, "s_min": self.s_min, "s_max": self.s_max,
            "l_min": self.l_min, "l_max": self.l_max, "interaction_time": self.interaction_time,
        }


class RegionKind(str, enum.Enum):
    OBSTACLE = "obstacle"
    STOP_LINE = "stop_line"
    KEEP_CLEAR = "keep_clear"


@dataclass(frozen=True)
class StRegion:
    """Convex counterclockwise polygon of (t, σ) vertices, σ relative to the ego station."""

    polygon: Tuple[Tuple[float, float], ...]
    source_id: str
    kind: RegionKind = RegionKind.OBSTACLE
    is_static: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "polygon", tuple((float(t), float(s)) for t, s in self.polygon))
        if len(self.polygon) < 3:
            raise ValueError(f"ST region for {self.source_id} needs at least three vertices")

    @classmethod
    def band(cls, t_end: float, s_low: float, s_high: float, source_id: str, kind: RegionKind) -> "StRegion":
        """Region blocking [s_low, s_high] for the whole horizon."""
        return cls(((0.0, s_low), (t_end, s_low), (t_end, s_high), (0.0, s_high)), source_id, kind, True)

    @property
    def t_min(self) -> float:
        return min(t for t, _ in self.polygon)

    @property
    def t_max(self) -> float:
        return max(t for t, _ in self.polygon)

    def min_t_vertex(self) -> Tuple[float, float]:
        return min(self.polygon)

    def bounds_at(self, t: float) -> Optional[Tuple[float, float]]:
        lo, hi = self.bounds_over(np.array([t]))
        if np.isnan(lo[0]):
            return None
        return float(lo[0]), float(hi[0])

    def bounds_over(self, times: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Vertical slices of the polygon; NaN where t is outside it."""
        times = np.asarray(times, dtype=float)
        pts = np.array(self.polygon)
        t1, s1 = pts[:, 0], pts[:, 1]
        t2, s2 = np.roll(t1, -1), np.roll(s1, -1)
        tt = times[:, None]
        span = t2 - t1
        inside = (tt >= np.minimum(t1, t2) - 1e-9) & (tt <= np.maximum(t1, t2) + 1e-9)
        safe = np.where(np.abs(span) > 1e-12, span, 1.0)
        frac = np.clip((tt - t1) / safe, 0.0, 1.0)
        crossing = s1 + frac * (s2 - s1)
        vertical = np.abs(span) <= 1e-12
        lo = np.where(inside, np.where(vertical, np.minimum(s1, s2), crossing), np.inf).min(axis=1)
        hi = np.where(inside, np.where(vertical, np.maximum(s1, s2), crossing), -np.inf).max(axis=1)
        missing = ~np.isfinite(lo)
        lo[missing] = np.nan
        hi[missing] = np.nan
        return lo, hi

    def to_dict(self) -> dict:
        return {
            "source_id": self.source_id, "kind": self.kind.value, "static": self.is_static,
            "polygon": [list(v) for v in self.polygon],
        }


class LateralProfile(Protocol):
    def lateral(self, s) -> np.ndarray: ...


def sample_times(horizon: float, dt: float) -> np.ndarray:
    return np.round(np.arange(0.0, horizon + 0.5 * dt, dt), 9)


def _project_boxes(obstacle: Obstacle, ref: ReferenceLine, times: np.ndarray):
    """Per time: (valid, s_min, s_max, l_min, l_max) of the projected box."""
    corners = obstacle.corners_at(times)
    s, l, status = ref.project_xy(corners[:, :, 0].ravel(), corners[:, :, 1].ravel())
    shape = corners.shape[:2]
    s, l, status = s.reshape(shape), l.reshape(shape), status.reshape(shape)
    valid = np.all(status == 0, axis=1)
    return valid, s.min(axis=1), s.max(axis=1), l.min(axis=1), l.max(axis=1)


def project_sl(
    obstacles: Sequence[Obstacle],
    ref: ReferenceLine,
    prev_trajectory: Trajectory,
    ego_speed: float,
    *,
    footprint: EgoFootprint,
    road_bounds: Tuple[float, float],
    params: ProjectionParameters = ProjectionParameters(),
) -> List[SlRegion]:
    times = sample_times(params.horizon, params.dt)
    ego_s = prev_trajectory.station_profile(ref, times)
    ego_lo, ego_hi = footprint.longitudinal_extent(ego_s)
    road_lo, road_hi = road_bounds
    low_speed_threshold = max(params.low_speed_floor, params.low_speed_ratio * ego_speed)

    regions: List[SlRegion] = []
    for obstacle in sorted(obstacles, key=lambda o: o.id):
        if obstacle.kind is ObstacleKind.STATIC:
            valid, s_min, s_max, l_min, l_max = _project_boxes(obstacle, ref, times[:1])
            if not valid[0]:
                logger.warning("Static obstacle %s does not project onto the reference line", obstacle.id)
                continue
            regions.append(SlRegion(float(s_min[0]), float(s_max[0]), float(l_min[0]), float(l_max[0]), obstacle.id))
            continue

        valid, s_min, s_max, l_min, l_max = _project_boxes(obstacle, ref, times)
        overlap = valid & (s_min <= ego_hi) & (s_max >= ego_lo) & (l_min <= road_hi) & (l_max >= road_lo)
        if not overlap.any():
            continue
        first = int(np.argmax(overlap))
        pose = obstacle.pose_at(times[first])
        _, _, ref_heading, _, _ = ref.pose(0.5 * (s_min[first] + s_max[first]))
        along = math.cos(pose.heading - ref_heading) * obstacle.speed
        oncoming = along < 0.0
        slow = obstacle.speed < low_speed_threshold
        if not (oncoming or slow):
            logger.debug("Obstacle %s skipped in SL: same direction at %.1f m/s", obstacle.id, obstacle.speed)
            continue
        for k in np.flatnonzero(overlap):
            regions.append(SlRegion(
                float(s_min[k]), float(s_max[k]), float(l_min[k]), float(l_max[k]),
                obstacle.id, interaction_time=float(times[k]),
            ))
    return regions


def _convex_polygon(points: List[Tuple[float, float]]) -> Optional[Tuple[Tuple[float, float], ...]]:
    try:
        hull = ConvexHull(np.array(points))
    except QhullError:
        return None
    return tuple((float(points[i][0]), float(points[i][1])) for i in hull.vertices)


def _is_convex_run(lower: List[Tuple[float, float]], upper: List[Tuple[float, float]]) -> bool:
    ring = np.array(lower + upper[::-1])
    x, y = ring[:, 0], ring[:, 1]
    area = 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))
    try:
        hull_area = ConvexHull(ring).volume
    except QhullError:
        return False
    return hull_area <= area + 1e-9 * max(1.0, area)


def _stitch(times: np.ndarray, lows: np.ndarray, highs: np.ndarray, blocked: np.ndarray, dt: float, horizon: float):
    """Group consecutive blocked samples into convex polygons."""
    polygons = []
    run: List[int] = []

    def close(indices: List[int]) -> None:
        lower = [(times[i], lows[i]) for i in indices]
        upper = [(times[i], highs[i]) for i in indices]
        if len(indices) == 1:
            i = indices[0]
            other = times[i] + dt if times[i] + dt <= horizon + 1e-9 else times[i] - dt
            lower.append((other, lows[i]))
            upper.append((other, highs[i]))
        polygon = _convex_polygon(lower + upper)
        if polygon is not None:
            polygons.append(polygon)

    for k in np.flatnonzero(blocked):
        if run and k == run[-1] + 1:
            candidate = run + [int(k)]
            if _is_convex_run([(times[i], lows[i]) for i in candidate], [(times[i], highs[i]) for i in candidate]):
                run = candidate
            else:
                close(run)
                run = [run[-1], int(k)]
        else:
            if run:
                close(run)
            run = [int(k)]
    if run:
        close(run)
    return polygons


def project_st(
    obstacles: Sequence[Obstacle],
    path: LateralProfile,
    ref: ReferenceLine,
    horizon: float,
    *,
    footprint: EgoFootprint,
    ego_station: float,
    path_end: float,
    params: ProjectionParameters = ProjectionParameters(),
) -> List[StRegion]:
    """Blocked path-relative station intervals per time, stitched into polygons."""
    times = sample_times(horizon, params.dt)
    span = path_end - ego_station
    step = params.station_step
    offsets = np.linspace(-footprint.l_r_geom, footprint.l_f,
                          int(math.ceil((footprint.l_f + footprint.l_r_geom) / step)) + 1)
    half_w = footprint.half_width

    def body_lateral(sigmas: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        stations = ego_station + sigmas[:, None] + offsets[None, :]
        lat = np.asarray(path.lateral(stations.ravel())).reshape(stations.shape)
        return lat.min(axis=1) - half_w, lat.max(axis=1) + half_w

    whole = np.arange(0.0, span + 0.5 * step, step)
    path_lo, path_hi = body_lateral(whole)
    path_lo, path_hi = float(path_lo.min()), float(path_hi.max())

    regions: List[StRegion] = []
    for obstacle in sorted(obstacles, key=lambda o: o.id):
        valid, s_min, s_max, l_min, l_max = _project_boxes(obstacle, ref, times)
        lo = s_min - footprint.l_f - footprint.cap_radius - ego_station
        hi = s_max + footprint.l_r_geom + footprint.cap_radius - ego_station
        maybe = valid & (lo <= span) & (hi >= 0.0) & (l_min <= path_hi) & (l_max >= path_lo)
        sigma_in = np.full(times.size, np.nan)
        sigma_out = np.full(times.size, np.nan)
        for k in np.flatnonzero(maybe):
            top = min(hi[k], span)
            inner = np.arange(math.floor(lo[k] / step) + 1, math.ceil(top / step)) * step
            inner = inner[(inner > lo[k]) & (inner < top)]
            sigmas = np.concatenate(([lo[k]], inner, [top]))
            body_lo, body_hi = body_lateral(sigmas)
            hit = (l_min[k] <= body_hi) & (l_max[k] >= body_lo)
            if hit.any():
                sigma_in[k] = sigmas[hit].min()
                sigma_out[k] = sigmas[hit].max()
        blocked = ~np.isnan(sigma_in) & (sigma_out > sigma_in)
        if not blocked.any():
            continue
        static = obstacle.kind is ObstacleKind.STATIC
        for polygon in _stitch(times, sigma_in, sigma_out, blocked, params.dt, horizon):
            regions.append(StRegion(polygon, obstacle.id, RegionKind.OBSTACLE, static))
    regions.sort(key=lambda r: (r.source_id, r.t_min))
    return regions
