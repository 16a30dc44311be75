"""
Piecewise polynomial splines and the quadratic-form assembly behind every
QP in the planner.

A spline of order m over knots x_0 < ... < x_n has n segments; segment k is
expanded in the local coordinate (x - x_k) and owns m + 1 consecutive
entries of the stacked parameter vector p. All smoothness functionals
(integrals of squared derivatives), the guidance functional and the linear
constraints are expressed directly in p, so a QP over p is exactly a fit of
the spline.
"""

import enum
import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, List, Sequence, Tuple, Union

import numpy as np

from .exceptions import GuidanceDomainMismatch, InfeasibleBox, OutOfDomain

logger = logging.getLogger(__name__)

DOMAIN_TOLERANCE = 1e-9
DEFAULT_JOINT_ORDER = 3

_GAUSS_NODES, _GAUSS_WEIGHTS = np.polynomial.legendre.leggauss(5)


def quintic_hermite(p0, v0, a0, p1, v1, a1, h):
    """
    Coefficients c0..c5 of the quintic matching value, first and second
    derivative at both ends of [0, h]. Works elementwise on arrays.
    """
    h = np.asarray(h, dtype=float)
    dp = np.asarray(p1, dtype=float) - np.asarray(p0, dtype=float)
    c3 = (20.0 * dp - (8.0 * v1 + 12.0 * v0) * h - (3.0 * a0 - a1) * h**2) / (2.0 * h**3)
    c4 = (-30.0 * dp + (14.0 * v1 + 16.0 * v0) * h + (3.0 * a0 - 2.0 * a1) * h**2) / (2.0 * h**4)
    c5 = (12.0 * dp - 6.0 * (v1 + v0) * h + (a1 - a0) * h**2) / (2.0 * h**5)
    return np.stack(np.broadcast_arrays(
        np.asarray(p0, dtype=float), np.asarray(v0, dtype=float), 0.5 * np.asarray(a0, dtype=float),
        c3, c4, c5,
    ), axis=-1)


def _derivative_factors(order: int, derivative: int) -> np.ndarray:
    """k!/(k-d)! for k = 0..order (zero where k < d)."""
    return np.array([
        math.perm(k, derivative) if k >= derivative else 0.0
        for k in range(order + 1)
    ], dtype=float)


def local_basis(order: int, local_x, derivative: int = 0) -> np.ndarray:
    """Rows of d^derivative/dx^derivative [1, x, ..., x^order] at local_x."""
    local_x = np.atleast_1d(np.asarray(local_x, dtype=float))
    factors = _derivative_factors(order, derivative)
    powers = np.clip(np.arange(order + 1) - derivative, 0, None)
    return factors[None, :] * local_x[:, None] ** powers[None, :]


@dataclass(frozen=True, eq=False)
class Spline:
    knots: np.ndarray
    coeffs: np.ndarray

    def __post_init__(self) -> None:
        knots = np.asarray(self.knots, dtype=float)
        coeffs = np.atleast_2d(np.asarray(self.coeffs, dtype=float))
        if knots.ndim != 1 or knots.size < 2:
            raise ValueError("a spline needs at least two knots")
        if np.any(np.diff(knots) <= 0):
            raise ValueError("spline knots must be strictly increasing")
        if coeffs.shape[0] != knots.size - 1:
            raise ValueError("one coefficient row is required per knot interval")
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "coeffs", coeffs)

    @property
    def order(self) -> int:
        return self.coeffs.shape[1] - 1

    @property
    def segment_count(self) -> int:
        return self.coeffs.shape[0]

    @property
    def params(self) -> np.ndarray:
        return self.coeffs.reshape(-1).copy()

    @property
    def domain(self) -> Tuple[float, float]:
        return float(self.knots[0]), float(self.knots[-1])

    @classmethod
    def from_params(cls, knots: Sequence[float], order: int, params: np.ndarray) -> "Spline":
        knots = np.asarray(knots, dtype=float)
        return cls(knots, np.asarray(params, dtype=float).reshape(knots.size - 1, order + 1))

    def segment_index(self, x) -> np.ndarray:
        idx = np.searchsorted(self.knots, x, side="right") - 1
        return np.clip(idx, 0, self.segment_count - 1)

    def evaluate(self, x, derivative: int = 0):
        """f^(derivative)(x); scalar in, scalar out."""
        if derivative > self.order:
            raise ValueError(f"derivative {derivative} exceeds spline order {self.order}")
        xs = np.asarray(x, dtype=float)
        lo, hi = self.domain
        if np.any(xs < lo - DOMAIN_TOLERANCE) or np.any(xs > hi + DOMAIN_TOLERANCE):
            raise OutOfDomain(f"x outside spline domain [{lo}, {hi}]")
        flat = np.clip(np.atleast_1d(xs), lo, hi)
        seg = self.segment_index(flat)
        rows = local_basis(self.order, flat - self.knots[seg], derivative)
        values = np.einsum("ij,ij->i", rows, self.coeffs[seg])
        return float(values[0]) if xs.ndim == 0 else values.reshape(xs.shape)


def evaluate(spline: Spline, x, order: int = 0):
    return spline.evaluate(x, order)


def basis_row(knots: np.ndarray, order: int, x: float, derivative: int = 0) -> np.ndarray:
    """Row r with r·p = f^(derivative)(x) for the spline over ``knots``."""
    knots = np.asarray(knots, dtype=float)
    lo, hi = knots[0], knots[-1]
    if x < lo - DOMAIN_TOLERANCE or x > hi + DOMAIN_TOLERANCE:
        raise OutOfDomain(f"x={x} outside spline domain [{lo}, {hi}]")
    seg = int(np.clip(np.searchsorted(knots, x, side="right") - 1, 0, knots.size - 2))
    row = np.zeros((knots.size - 1) * (order + 1))
    start = seg * (order + 1)
    row[start:start + order + 1] = local_basis(order, x - knots[seg], derivative)[0]
    return row


# -- quadratic costs ------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class QuadraticCost:
    """value(p) = pᵀQp − 2cᵀp + constant."""

    Q: np.ndarray
    c: np.ndarray
    constant: float = 0.0

    @property
    def size(self) -> int:
        return self.c.size

    def value(self, p: np.ndarray) -> float:
        p = np.asarray(p, dtype=float)
        return float(p @ self.Q @ p - 2.0 * self.c @ p + self.constant)

    def scaled(self, factor: float) -> "QuadraticCost":
        return QuadraticCost(self.Q * factor, self.c * factor, self.constant * factor)

    def __add__(self, other: "QuadraticCost") -> "QuadraticCost":
        if self.size != other.size:
            raise ValueError("cannot add costs over different parameter vectors")
        return QuadraticCost(self.Q + other.Q, self.c + other.c, self.constant + other.constant)


@lru_cache(maxsize=256)
def _segment_gram(order: int, derivative: int, length: float) -> np.ndarray:
    """∫_0^length x_(i) x_(i)ᵀ dx for the local monomial basis, power rule."""
    factors = _derivative_factors(order, derivative)
    block = np.zeros((order + 1, order + 1))
    for a in range(derivative, order + 1):
        for b in range(derivative, order + 1):
            power = (a - derivative) + (b - derivative) + 1
            block[a, b] = factors[a] * factors[b] * length**power / power
    block.setflags(write=False)
    return block


def smoothness_cost(knots: Sequence[float], order: int, derivative: int, weight: float = 1.0) -> QuadraticCost:
    """w ∫ (f^(derivative))² dx as a block-diagonal quadratic form."""
    if not 0 <= derivative <= order:
        raise ValueError(f"derivative order {derivative} not in [0, {order}]")
    knots = np.asarray(knots, dtype=float)
    size = (knots.size - 1) * (order + 1)
    Q = np.zeros((size, size))
    for k, length in enumerate(np.diff(knots)):
        sl = slice(k * (order + 1), (k + 1) * (order + 1))
        Q[sl, sl] = weight * _segment_gram(order, derivative, float(length))
    return QuadraticCost(Q, np.zeros(size), 0.0)


def guidance_cost(
    knots: Sequence[float],
    order: int,
    guide_x: Sequence[float],
    guide_y: Sequence[float],
    weight: float = 1.0,
) -> QuadraticCost:
    """
    w ∫ (f − g)² dx for a piecewise-linear guidance g given by samples.

    Integrals against g use 5-point Gauss–Legendre on every sub-interval
    between knots and guidance breakpoints, which is exact for these
    polynomial integrands.
    """
    knots = np.asarray(knots, dtype=float)
    gx = np.asarray(guide_x, dtype=float)
    gy = np.asarray(guide_y, dtype=float)
    if gx.size < 2 or gx.size != gy.size:
        raise GuidanceDomainMismatch("guidance needs at least two (x, g) samples of equal length")
    if gx[0] > knots[0] + DOMAIN_TOLERANCE or gx[-1] < knots[-1] - DOMAIN_TOLERANCE:
        raise GuidanceDomainMismatch(
            f"guidance covers [{gx[0]}, {gx[-1]}] but the spline spans [{knots[0]}, {knots[-1]}]"
        )

    base = smoothness_cost(knots, order, 0, weight)
    c = np.zeros(base.size)
    constant = 0.0
    for k in range(knots.size - 1):
        a, b = knots[k], knots[k + 1]
        inner = gx[(gx > a) & (gx < b)]
        edges = np.concatenate(([a], inner, [b]))
        lo, hi = edges[:-1], edges[1:]
        half = 0.5 * (hi - lo)
        xs = (0.5 * (hi + lo))[:, None] + half[:, None] * _GAUSS_NODES[None, :]
        ws = (half[:, None] * _GAUSS_WEIGHTS[None, :]).ravel()
        xs = xs.ravel()
        g = np.interp(xs, gx, gy)
        rows = local_basis(order, xs - a, 0)
        sl = slice(k * (order + 1), (k + 1) * (order + 1))
        c[sl] += weight * rows.T @ (ws * g)
        constant += weight * float(ws @ (g * g))
    return QuadraticCost(base.Q, c, constant)


# -- linear constraints -----------------------------------------------------------

class ConstraintTag(str, enum.Enum):
    BOUNDARY = "boundary"
    SMOOTHNESS_JOINT = "smoothness-joint"
    MONOTONICITY = "monotonicity"
    INITIAL_CONDITION = "initial-condition"


@dataclass(frozen=True)
class Bound:
    """lower ≤ f^(derivative)(x) + heading·f^(derivative+1)(x) ≤ upper."""

    x: float
    lower: float = -math.inf
    upper: float = math.inf
    derivative: int = 0
    heading: float = 0.0
    tag: ConstraintTag = ConstraintTag.BOUNDARY


@dataclass(frozen=True)
class Equality:
    x: float
    value: float
    derivative: int = 0
    tag: ConstraintTag = ConstraintTag.INITIAL_CONDITION


@dataclass(frozen=True)
class Monotone:
    """f(points[i]) ≤ f(points[i+1]) for consecutive points."""

    points: Tuple[float, ...]


ConstraintSpec = Union[Bound, Equality, Monotone]


@dataclass(eq=False)
class LinearConstraintSet:
    """Rows a·p = b (equalities) and a·p ≤ b (inequalities) with provenance."""

    size: int
    A_eq: np.ndarray = None
    b_eq: np.ndarray = None
    eq_tags: List[ConstraintTag] = field(default_factory=list)
    A_in: np.ndarray = None
    b_in: np.ndarray = None
    in_tags: List[ConstraintTag] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.A_eq is None:
            self.A_eq = np.zeros((0, self.size))
            self.b_eq = np.zeros(0)
        if self.A_in is None:
            self.A_in = np.zeros((0, self.size))
            self.b_in = np.zeros(0)
        if self.A_eq.shape[1] != self.size or self.A_in.shape[1] != self.size:
            raise ValueError("constraint rows must match the parameter count")

    @property
    def row_count(self) -> int:
        return self.A_eq.shape[0] + self.A_in.shape[0]

    def add_equality(self, row: np.ndarray, value: float, tag: ConstraintTag) -> None:
        self.A_eq = np.vstack([self.A_eq, row])
        self.b_eq = np.append(self.b_eq, value)
        self.eq_tags.append(tag)

    def add_inequality(self, row: np.ndarray, value: float, tag: ConstraintTag) -> None:
        self.A_in = np.vstack([self.A_in, row])
        self.b_in = np.append(self.b_in, value)
        self.in_tags.append(tag)

    def extend(self, other: "LinearConstraintSet") -> None:
        if other.size != self.size:
            raise ValueError("cannot merge constraint sets over different parameter vectors")
        self.A_eq = np.vstack([self.A_eq, other.A_eq])
        self.b_eq = np.concatenate([self.b_eq, other.b_eq])
        self.eq_tags.extend(other.eq_tags)
        self.A_in = np.vstack([self.A_in, other.A_in])
        self.b_in = np.concatenate([self.b_in, other.b_in])
        self.in_tags.extend(other.in_tags)

    def violations(self, p: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """(|A_eq p − b_eq|, max(A_in p − b_in, 0))."""
        return np.abs(self.A_eq @ p - self.b_eq), np.maximum(self.A_in @ p - self.b_in, 0.0)


def build_constraints(
    knots: Sequence[float],
    order: int,
    specs: Iterable[ConstraintSpec],
    joint_order: int = DEFAULT_JOINT_ORDER,
) -> LinearConstraintSet:
    knots = np.asarray(knots, dtype=float)
    size = (knots.size - 1) * (order + 1)
    eq_rows: List[np.ndarray] = []
    eq_vals: List[float] = []
    eq_tags: List[ConstraintTag] = []
    in_rows: List[np.ndarray] = []
    in_vals: List[float] = []
    in_tags: List[ConstraintTag] = []

    block = order + 1
    for k in range(1, knots.size - 1):
        length = knots[k] - knots[k - 1]
        for j in range(min(joint_order, order) + 1):
            row = np.zeros(size)
            row[(k - 1) * block:k * block] = local_basis(order, length, j)[0]
            row[k * block:(k + 1) * block] -= local_basis(order, 0.0, j)[0]
            eq_rows.append(row)
            eq_vals.append(0.0)
            eq_tags.append(ConstraintTag.SMOOTHNESS_JOINT)

    for spec in specs:
        if isinstance(spec, Equality):
            eq_rows.append(basis_row(knots, order, spec.x, spec.derivative))
            eq_vals.append(float(spec.value))
            eq_tags.append(spec.tag)
        elif isinstance(spec, Bound):
            if spec.lower > spec.upper:
                raise InfeasibleBox(f"bound at x={spec.x}: lower {spec.lower} > upper {spec.upper}")
            row = basis_row(knots, order, spec.x, spec.derivative)
            if spec.heading:
                row = row + spec.heading * basis_row(knots, order, spec.x, spec.derivative + 1)
            if math.isfinite(spec.upper):
                in_rows.append(row)
                in_vals.append(float(spec.upper))
                in_tags.append(spec.tag)
            if math.isfinite(spec.lower):
                in_rows.append(-row)
                in_vals.append(-float(spec.lower))
                in_tags.append(spec.tag)
        elif isinstance(spec, Monotone):
            points = list(spec.points)
            for a, b in zip(points, points[1:]):
                in_rows.append(basis_row(knots, order, a) - basis_row(knots, order, b))
                in_vals.append(0.0)
                in_tags.append(ConstraintTag.MONOTONICITY)
        else:
            raise TypeError(f"unsupported constraint spec {spec!r}")

    return LinearConstraintSet(
        size=size,
        A_eq=np.array(eq_rows).reshape(-1, size),
        b_eq=np.array(eq_vals, dtype=float),
        eq_tags=eq_tags,
        A_in=np.array(in_rows).reshape(-1, size),
        b_in=np.array(in_vals, dtype=float),
        in_tags=in_tags,
    )
