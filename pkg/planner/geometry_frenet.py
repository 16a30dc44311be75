"""
Reference lines and Cartesian <-> Frenet conversion.

Sign convention: l > 0 is left of the reference direction. Between samples
the reference is a quintic Hermite curve per segment, fitted on (x, y) with
the sampled heading and curvature as first and second derivative data.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.spatial import cKDTree

from .exceptions import AmbiguousProjection, CurvatureSingularity, OutOfRange
from .spline_core import quintic_hermite

logger = logging.getLogger(__name__)

MAX_SAMPLE_SPACING = 1.0
HEADING_TOLERANCE = 1e-2
DENSIFY_STEP = 0.5
TIE_TOLERANCE = 1e-6
NEWTON_ITERATIONS = 10
NEWTON_TOLERANCE = 1e-6

PROJECTION_OK = 0
PROJECTION_OUT_OF_RANGE = 1
PROJECTION_AMBIGUOUS = 2


def normalize_angle(angle: float) -> float:
    """Map to (−π, π]."""
    wrapped = math.remainder(angle, 2.0 * math.pi)
    return math.pi if wrapped == -math.pi else wrapped


@dataclass(frozen=True)
class CartesianState:
    x: float
    y: float
    heading: float
    kappa: float = 0.0
    v: float = 0.0
    a: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "heading", normalize_angle(float(self.heading)))


@dataclass(frozen=True)
class FrenetState:
    s: float
    l: float
    dl: float = 0.0
    ddl: float = 0.0
    dddl: float = 0.0


class ReferenceLine:
    """Immutable sampled lane-center curve with arc-length parameter s."""

    def __init__(self, s, x, y, heading, kappa, dkappa) -> None:
        arrays = [np.array(v, dtype=float) for v in (s, x, y, heading, kappa, dkappa)]
        if len({a.size for a in arrays}) != 1 or arrays[0].ndim != 1:
            raise ValueError("reference samples must be 1-D arrays of equal length")
        s, x, y, heading, kappa, dkappa = arrays
        if s.size < 2:
            raise ValueError("a reference line needs at least two samples")
        if abs(s[0]) > 1e-9:
            raise ValueError("reference stations must start at 0")
        spacing = np.diff(s)
        if np.any(spacing <= 0):
            raise ValueError("reference stations must be strictly increasing")
        if np.any(spacing > MAX_SAMPLE_SPACING + 1e-9):
            raise ValueError(f"reference sample spacing exceeds {MAX_SAMPLE_SPACING} m")
        heading = np.array([normalize_angle(h) for h in heading])
        _check_headings(s, x, y, heading, kappa)

        for a in (s, x, y, heading, kappa, dkappa):
            a.setflags(write=False)
        self.s, self.x, self.y = s, x, y
        self.heading, self.kappa, self.dkappa = heading, kappa, dkappa
        self._tree = cKDTree(np.column_stack((x, y)))

        h = spacing
        cos0, sin0 = np.cos(heading[:-1]), np.sin(heading[:-1])
        cos1, sin1 = np.cos(heading[1:]), np.sin(heading[1:])
        self._cx = quintic_hermite(x[:-1], cos0, -kappa[:-1] * sin0, x[1:], cos1, -kappa[1:] * sin1, h)
        self._cy = quintic_hermite(y[:-1], sin0, kappa[:-1] * cos0, y[1:], sin1, kappa[1:] * cos1, h)

    # -- construction ---------------------------------------------------------

    @classmethod
    def from_polyline(cls, points: Sequence[Sequence[float]], step: float = DENSIFY_STEP) -> "ReferenceLine":
        """Densify a sparse (x, y) polyline through a natural cubic spline."""
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2 or pts.shape[0] < 2 or pts.shape[1] != 2:
            raise ValueError("a polyline needs at least two (x, y) points")
        chord = np.concatenate(([0.0], np.cumsum(np.hypot(*np.diff(pts, axis=0).T))))
        if np.any(np.diff(chord) <= 0):
            raise ValueError("polyline points must be distinct")
        spline = CubicSpline(chord, pts, bc_type="natural")

        fine_u = np.linspace(0.0, chord[-1], max(int(math.ceil(chord[-1] / 0.05)), 2) + 1)
        speed = np.hypot(*spline(fine_u, 1).T)
        arc = np.concatenate(([0.0], np.cumsum(0.5 * (speed[1:] + speed[:-1]) * np.diff(fine_u))))

        count = max(int(math.ceil(arc[-1] / step)), 1) + 1
        s = np.linspace(0.0, arc[-1], count)
        u = np.interp(s, arc, fine_u)
        xy, d1, d2 = spline(u), spline(u, 1), spline(u, 2)
        heading = np.arctan2(d1[:, 1], d1[:, 0])
        kappa = (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]) / np.hypot(d1[:, 0], d1[:, 1]) ** 3
        dkappa = np.gradient(kappa, s) if count > 2 else np.zeros(count)
        return cls(s, xy[:, 0], xy[:, 1], heading, kappa, dkappa)

    # -- evaluation -----------------------------------------------------------

    @property
    def total_length(self) -> float:
        return float(self.s[-1])

    def __len__(self) -> int:
        return self.s.size

    def _segment(self, s: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        idx = np.clip(np.searchsorted(self.s, s, side="right") - 1, 0, self.s.size - 2)
        return idx, s - self.s[idx]

    def _derivatives(self, s: np.ndarray):
        idx, u = self._segment(s)
        cx, cy = self._cx[idx], self._cy[idx]
        powers = u[:, None] ** np.arange(6)[None, :]
        pos = np.stack([(cx * powers).sum(1), (cy * powers).sum(1)], axis=1)
        k1 = np.array([0, 1, 2, 3, 4, 5], dtype=float)
        d1 = np.stack([(cx[:, 1:] * k1[1:] * powers[:, :5]).sum(1),
                       (cy[:, 1:] * k1[1:] * powers[:, :5]).sum(1)], axis=1)
        k2 = np.array([2, 6, 12, 20], dtype=float)
        d2 = np.stack([(cx[:, 2:] * k2 * powers[:, :4]).sum(1),
                       (cy[:, 2:] * k2 * powers[:, :4]).sum(1)], axis=1)
        return idx, u, pos, d1, d2

    def poses(self, s) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(x, y, heading, kappa, dkappa) at stations s, clamped to [0, total_length]."""
        s = np.clip(np.atleast_1d(np.asarray(s, dtype=float)), 0.0, self.total_length)
        idx, u, pos, d1, d2 = self._derivatives(s)
        heading = np.arctan2(d1[:, 1], d1[:, 0])
        norm = np.hypot(d1[:, 0], d1[:, 1])
        kappa = (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]) / norm**3
        frac = u / (self.s[idx + 1] - self.s[idx])
        dkappa = self.dkappa[idx] + frac * (self.dkappa[idx + 1] - self.dkappa[idx])
        return pos[:, 0], pos[:, 1], heading, kappa, dkappa

    def pose(self, s: float) -> Tuple[float, float, float, float, float]:
        return tuple(float(v[0]) for v in self.poses(s))

    # -- projection -----------------------------------------------------------

    def project_xy(self, x, y) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """
        Project points onto the line. Returns (s, l, status) arrays where
        status is PROJECTION_OK, PROJECTION_OUT_OF_RANGE or PROJECTION_AMBIGUOUS.
        """
        px = np.atleast_1d(np.asarray(x, dtype=float))
        py = np.atleast_1d(np.asarray(y, dtype=float))
        points = np.column_stack((px, py))
        dmin, nearest = self._tree.query(points)
        nearest = np.asarray(nearest, dtype=int)
        ties = self._tree.query_ball_point(points, dmin + TIE_TOLERANCE)
        ambiguous = np.array(
            [any(abs(index - best) > 1 for index in indices) for indices, best in zip(ties, nearest)], dtype=bool,
        )

        lo = self.s[np.maximum(nearest - 1, 0)]
        hi = self.s[np.minimum(nearest + 1, self.s.size - 1)]
        s = self.s[nearest].copy()
        active = np.ones(px.size, dtype=bool)
        for _ in range(NEWTON_ITERATIONS):
            if not active.any():
                break
            _, _, pos, d1, d2nd = self._derivatives(s)
            rx, ry = pos[:, 0] - px, pos[:, 1] - py
            f = rx * d1[:, 0] + ry * d1[:, 1]
            df = d1[:, 0] ** 2 + d1[:, 1] ** 2 + rx * d2nd[:, 0] + ry * d2nd[:, 1]
            step = np.where(active & (df > 0), f / np.where(df > 0, df, 1.0), 0.0)
            updated = np.clip(s - step, lo, hi)
            active &= np.abs(updated - s) > NEWTON_TOLERANCE
            s = updated

        xs, ys, heading, _, _ = self.poses(s)
        l = -(px - xs) * np.sin(heading) + (py - ys) * np.cos(heading)
        along = (px - xs) * np.cos(heading) + (py - ys) * np.sin(heading)
        out_of_range = ((s <= 0.0) & (along < -TIE_TOLERANCE)) | (
            (s >= self.total_length) & (along > TIE_TOLERANCE)
        )
        status = np.full(px.size, PROJECTION_OK)
        status[out_of_range] = PROJECTION_OUT_OF_RANGE
        status[ambiguous] = PROJECTION_AMBIGUOUS
        return s, l, status


def _check_headings(s, x, y, heading, kappa) -> None:
    chord = np.empty(s.size)
    chord[1:-1] = np.arctan2(y[2:] - y[:-2], x[2:] - x[:-2])
    chord[0] = np.arctan2(y[1] - y[0], x[1] - x[0]) - 0.5 * kappa[0] * (s[1] - s[0])
    chord[-1] = np.arctan2(y[-1] - y[-2], x[-1] - x[-2]) + 0.5 * kappa[-1] * (s[-1] - s[-2])
    error = np.abs(np.remainder(heading - chord + np.pi, 2.0 * np.pi) - np.pi)
    worst = int(np.argmax(error))
    if error[worst] > HEADING_TOLERANCE:
        raise ValueError(
            f"reference heading at s={s[worst]:.3f} deviates {error[worst]:.4f} rad from the local tangent"
        )


def _raise_for_status(status: int, state_xy: Tuple[float, float]) -> None:
    if status == PROJECTION_AMBIGUOUS:
        raise AmbiguousProjection(f"point {state_xy} is equidistant to separate parts of the reference line")
    if status == PROJECTION_OUT_OF_RANGE:
        raise OutOfRange(f"point {state_xy} projects beyond an end of the reference line")


def project_to_frenet(state: CartesianState, ref: ReferenceLine) -> FrenetState:
    s, l, status = ref.project_xy(state.x, state.y)
    _raise_for_status(int(status[0]), (state.x, state.y))
    s, l = float(s[0]), float(l[0])
    _, _, ref_heading, ref_kappa, ref_dkappa = ref.pose(s)

    delta = normalize_angle(state.heading - ref_heading)
    tan_delta, cos_delta = math.tan(delta), math.cos(delta)
    one_minus = 1.0 - ref_kappa * l
    dl = one_minus * tan_delta
    kappa_l_prime = ref_dkappa * l + ref_kappa * dl
    ddl = -kappa_l_prime * tan_delta + one_minus / cos_delta**2 * (
        state.kappa * one_minus / cos_delta - ref_kappa
    )
    return FrenetState(s=s, l=l, dl=dl, ddl=ddl, dddl=0.0)


def station_rates(state: CartesianState, ref: ReferenceLine) -> Tuple[float, float]:
    """Longitudinal (ṡ, s̈) of a Cartesian state along the reference line."""
    fs = project_to_frenet(state, ref)
    _, _, ref_heading, ref_kappa, ref_dkappa = ref.pose(fs.s)
    delta = normalize_angle(state.heading - ref_heading)
    cos_delta = math.cos(delta)
    one_minus = 1.0 - ref_kappa * fs.l
    s_dot = state.v * cos_delta / one_minus
    kappa_l_prime = ref_dkappa * fs.l + ref_kappa * fs.dl
    delta_prime = one_minus / cos_delta * state.kappa - ref_kappa
    s_ddot = (state.a * cos_delta - s_dot**2 * (fs.dl * delta_prime - kappa_l_prime)) / one_minus
    return s_dot, s_ddot


def frenet_to_cartesian(
    fs: FrenetState,
    ref: ReferenceLine,
    s_dot: Optional[float] = None,
    s_ddot: float = 0.0,
) -> CartesianState:
    """Inverse mapping; v and a are filled only when ``s_dot`` is given."""
    if fs.s < -1e-9 or fs.s > ref.total_length + 1e-9:
        raise OutOfRange(f"station {fs.s} outside [0, {ref.total_length}]")
    rx, ry, ref_heading, ref_kappa, ref_dkappa = ref.pose(fs.s)
    if ref_kappa != 0.0 and abs(fs.l) * abs(ref_kappa) >= 1.0:
        raise CurvatureSingularity(f"|l|={abs(fs.l)} reaches the curvature radius {1.0 / abs(ref_kappa):.3f}")

    x = rx - math.sin(ref_heading) * fs.l
    y = ry + math.cos(ref_heading) * fs.l
    one_minus = 1.0 - ref_kappa * fs.l
    delta = math.atan2(fs.dl, one_minus)
    cos_delta = math.cos(delta)
    tan_delta = fs.dl / one_minus
    kappa_l_prime = ref_dkappa * fs.l + ref_kappa * fs.dl
    kappa = ((fs.ddl + kappa_l_prime * tan_delta) * cos_delta**2 / one_minus + ref_kappa) * cos_delta / one_minus

    v = a = 0.0
    if s_dot is not None:
        l_dot = fs.dl * s_dot
        v = math.hypot(one_minus * s_dot, l_dot)
        delta_prime = one_minus / cos_delta * kappa - ref_kappa
        a = s_ddot * one_minus / cos_delta + s_dot**2 / cos_delta * (fs.dl * delta_prime - kappa_l_prime)
    return CartesianState(x=x, y=y, heading=ref_heading + delta, kappa=kappa, v=v, a=a)
