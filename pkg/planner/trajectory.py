import logging
import math
from dataclasses import dataclass
from typing import Dict, Iterator, List, NamedTuple, Sequence

import numpy as np

from .exceptions import OutOfRange
from .geometry_frenet import CartesianState, FrenetState, ReferenceLine, frenet_to_cartesian

logger = logging.getLogger(__name__)

OUTPUT_STEP = 0.02


class TrajectoryPoint(NamedTuple):
    t: float
    x: float
    y: float
    heading: float
    kappa: float
    v: float
    a: float


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Time-parameterized ego states; t is relative to the cycle start."""

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    heading: np.ndarray
    kappa: np.ndarray
    v: np.ndarray
    a: np.ndarray

    def __post_init__(self) -> None:
        for name in ("t", "x", "y", "heading", "kappa", "v", "a"):
            values = np.array(getattr(self, name), dtype=float)
            values.setflags(write=False)
            object.__setattr__(self, name, values)
        if self.t.size == 0:
            raise ValueError("a trajectory needs at least one point")
        if np.any(np.diff(self.t) <= 0):
            raise ValueError("trajectory times must be strictly increasing")
        if np.any(self.v < 0):
            raise ValueError("trajectory speeds must be non-negative")

    @classmethod
    def from_points(cls, points: Sequence[TrajectoryPoint]) -> "Trajectory":
        columns = np.array(points, dtype=float).reshape(-1, 7).T
        return cls(*columns)

    def __len__(self) -> int:
        return self.t.size

    def __iter__(self) -> Iterator[TrajectoryPoint]:
        for row in zip(self.t, self.x, self.y, self.heading, self.kappa, self.v, self.a):
            yield TrajectoryPoint(*(float(v) for v in row))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Trajectory):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, name), getattr(other, name))
            for name in ("t", "x", "y", "heading", "kappa", "v", "a")
        )

    @property
    def duration(self) -> float:
        return float(self.t[-1])

    def arc_lengths(self) -> np.ndarray:
        return np.concatenate(([0.0], np.cumsum(np.hypot(np.diff(self.x), np.diff(self.y)))))

    def kinematic_residual(self) -> float:
        """max |Δs − v̄·Δt| between consecutive points."""
        if len(self) < 2:
            return 0.0
        ds = np.hypot(np.diff(self.x), np.diff(self.y))
        expected = 0.5 * (self.v[1:] + self.v[:-1]) * np.diff(self.t)
        return float(np.max(np.abs(ds - expected)))

    def state_at(self, t: float) -> CartesianState:
        """Linear interpolation between the bracketing points (exact on grid times)."""
        t = float(np.clip(t, self.t[0], self.t[-1]))
        idx = int(np.searchsorted(self.t, t, side="right") - 1)
        idx = min(max(idx, 0), len(self) - 1)
        if idx == len(self) - 1 or t == self.t[idx]:
            return CartesianState(self.x[idx], self.y[idx], self.heading[idx], self.kappa[idx], self.v[idx], self.a[idx])
        w = (t - self.t[idx]) / (self.t[idx + 1] - self.t[idx])

        def lerp(values: np.ndarray) -> float:
            return float(values[idx] + w * (values[idx + 1] - values[idx]))

        dh = math.remainder(self.heading[idx + 1] - self.heading[idx], 2.0 * math.pi)
        return CartesianState(
            lerp(self.x), lerp(self.y), float(self.heading[idx] + w * dh),
            lerp(self.kappa), lerp(self.v), lerp(self.a),
        )

    def shifted(self, dt: float) -> "Trajectory":
        """Re-based copy starting at relative time ``dt``, for the next cycle."""
        if dt <= 0:
            return self
        start = self.state_at(dt)
        keep = self.t > dt + 1e-9
        return Trajectory(
            np.concatenate(([0.0], self.t[keep] - dt)),
            np.concatenate(([start.x], self.x[keep])),
            np.concatenate(([start.y], self.y[keep])),
            np.concatenate(([start.heading], self.heading[keep])),
            np.concatenate(([start.kappa], self.kappa[keep])),
            np.concatenate(([start.v], self.v[keep])),
            np.concatenate(([start.a], self.a[keep])),
        )

    def station_profile(self, ref: ReferenceLine, times: np.ndarray) -> np.ndarray:
        """Station of the trajectory on ``ref`` at each time, extrapolated at constant speed."""
        s, _, status = ref.project_xy(self.x, self.y)
        valid = status == 0
        if not valid.any():
            raise OutOfRange("trajectory does not project onto the reference line")
        t, s, v = self.t[valid], np.maximum.accumulate(s[valid]), self.v[valid]
        times = np.asarray(times, dtype=float)
        profile = np.interp(times, t, s)
        beyond = times > t[-1]
        profile[beyond] = s[-1] + v[-1] * (times[beyond] - t[-1])
        return profile

    def to_rows(self) -> List[Dict[str, float]]:
        return [point._asdict() for point in self]


def straight_ahead(
    ego: CartesianState,
    start: FrenetState,
    ref: ReferenceLine,
    horizon: float,
    step: float = OUTPUT_STEP,
) -> Trajectory:
    """Constant-speed trajectory along the lane center, used before a previous cycle exists."""
    times = np.arange(0.0, horizon + 0.5 * step, step)
    points = []
    for t in times:
        s = min(start.s + ego.v * t, ref.total_length)
        state = frenet_to_cartesian(FrenetState(s=s, l=0.0), ref, s_dot=ego.v)
        points.append(TrajectoryPoint(float(t), state.x, state.y, state.heading, state.kappa, ego.v, 0.0))
    return Trajectory.from_points(points)
