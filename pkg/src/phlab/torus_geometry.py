"""Flat-torus arithmetic: points mod 1, tangent vectors and projective directions."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DIRECTION_TOL = 1e-9


def _reduce(v: float) -> float:
    r = v - math.floor(v)
    if r >= 1.0:  # v slightly below an integer can round up to exactly 1.0
        r = 0.0
    return r + 0.0  # folds -0.0 into 0.0


@dataclass(frozen=True)
class TorusPoint:
    """A point of R^2/Z^2; coordinates are reduced into [0, 1) on construction."""

    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"non-finite torus coordinates ({self.x}, {self.y})")
        object.__setattr__(self, "x", _reduce(float(self.x)))
        object.__setattr__(self, "y", _reduce(float(self.y)))

    def isclose(self, other: TorusPoint, tol: float = 1e-9) -> bool:
        return torus_distance(self, other) <= tol

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def to_list(self) -> list[float]:
        return [self.x, self.y]


@dataclass(frozen=True)
class TangentVector:
    vx: float
    vy: float

    def norm(self) -> float:
        return math.hypot(self.vx, self.vy)

    def as_array(self) -> np.ndarray:
        return np.array([self.vx, self.vy])

    def direction(self) -> Direction:
        if self.vx == 0.0 and self.vy == 0.0:
            raise ValueError("the zero vector has no direction")
        return Direction.from_vector(self.vx, self.vy)


@dataclass(frozen=True)
class Direction:
    """An element of the projective line, stored as an angle in [0, pi)."""

    theta: float

    def __post_init__(self):
        if not math.isfinite(self.theta):
            raise ValueError("non-finite angle")
        t = math.fmod(float(self.theta), math.pi)
        if t < 0.0:
            t += math.pi
        if t >= math.pi:
            t = 0.0
        object.__setattr__(self, "theta", t + 0.0)

    @classmethod
    def from_vector(cls, vx: float, vy: float) -> Direction:
        return cls(math.atan2(vy, vx))

    @classmethod
    def from_slope(cls, slope: float) -> Direction:
        return cls(math.atan(slope))

    @property
    def slope(self) -> float:
        """dy/dx; infinite for the vertical direction."""
        c = math.cos(self.theta)
        return math.inf if c == 0.0 else math.tan(self.theta)

    def unit(self) -> np.ndarray:
        return np.array([math.cos(self.theta), math.sin(self.theta)])

    def isclose(self, other: Direction, tol: float = DIRECTION_TOL) -> bool:
        return angle_between(self, other) <= tol


def wrap(raw_x: float, raw_y: float) -> TorusPoint:
    if not (math.isfinite(raw_x) and math.isfinite(raw_y)):
        raise ValueError(f"non-finite input ({raw_x}, {raw_y})")
    return TorusPoint(raw_x, raw_y)


def as_point(p) -> TorusPoint:
    """Coerce a TorusPoint, pair or length-2 array into a TorusPoint."""
    if isinstance(p, TorusPoint):
        return p
    x, y = p
    return TorusPoint(float(x), float(y))


def torus_distance(p, q) -> float:
    p, q = as_point(p), as_point(q)
    dx = abs(p.x - q.x)
    dy = abs(p.y - q.y)
    return math.hypot(min(dx, 1.0 - dx), min(dy, 1.0 - dy))


def projective_distance(t1: float, t2: float) -> float:
    d = abs(t1 - t2) % math.pi
    return min(d, math.pi - d)


def angle_between(a: Direction, b: Direction) -> float:
    return projective_distance(a.theta, b.theta)


# Array helpers used by the vectorised kernels elsewhere in the package.

def wrap_array(z: np.ndarray) -> np.ndarray:
    """Reduce an (..., 2) array into [0, 1)."""
    r = z - np.floor(z)
    r[r >= 1.0] = 0.0
    return r + 0.0


def signed_offset(d: np.ndarray) -> np.ndarray:
    """Shortest representative of a displacement, componentwise in [-1/2, 1/2)."""
    return d - np.floor(d + 0.5)


def torus_distance_array(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    return np.hypot(*np.moveaxis(signed_offset(np.asarray(p) - np.asarray(q)), -1, 0))


def angles_of(v: np.ndarray) -> np.ndarray:
    """Projective angles in [0, pi) of an (..., 2) array of nonzero vectors."""
    t = np.arctan2(v[..., 1], v[..., 0]) % np.pi
    return np.where(t >= np.pi, 0.0, t)
