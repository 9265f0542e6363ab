"""Finite-depth model of the inverse limit: past words, the shift and the fiber metric."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Protocol

import numpy as np

from .errors import GeometryError, SchemaError
from .map_registry import MapSpec
from .rng import make_rng, substream
from .torus_geometry import TorusPoint, as_point, torus_distance_array, wrap_array

DEFAULT_DEPTH = 40
CONSISTENCY_TOL = 1e-10
MATCH_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class PastWord:
    """A base point x_0 with branch choices; ``points[k]`` is x_{-k}."""

    fmap: MapSpec
    branches: tuple
    points: np.ndarray = field(repr=False)

    @property
    def base(self) -> TorusPoint:
        return TorusPoint(*self.points[0])

    @property
    def depth(self) -> int:
        return len(self.branches)

    def point(self, k: int) -> TorusPoint:
        """The coordinate x_{-k}."""
        return TorusPoint(*self.points[k])

    def truncate(self, depth: int) -> PastWord:
        if not 0 <= depth <= self.depth:
            raise ValueError(f"cannot truncate a depth-{self.depth} word to {depth}")
        return PastWord(self.fmap, self.branches[:depth], self.points[: depth + 1])

    def back(self, k: int) -> PastWord:
        """The word based at x_{-k} (its own past is the remaining tail)."""
        return PastWord(self.fmap, self.branches[k:], self.points[k:])

    def consistency_residual(self) -> float:
        if self.depth == 0:
            return 0.0
        img = self.fmap.evaluate_array(self.points[1:])
        return float(np.max(torus_distance_array(img, self.points[:-1])))

    def to_dict(self) -> dict:
        return {"base": [float(v) for v in self.points[0]], "branches": [int(b) for b in self.branches]}

    @classmethod
    def from_dict(cls, fmap: MapSpec, d: dict) -> PastWord:
        base = as_point(d["base"])
        return from_branches(fmap, base, d["branches"])

    def __eq__(self, other):
        if not isinstance(other, PastWord):
            return NotImplemented
        return (self.fmap == other.fmap and self.branches == other.branches
                and np.array_equal(self.points[0], other.points[0]))

    def __hash__(self):
        return hash((self.branches, float(self.points[0, 0]), float(self.points[0, 1])))


class Chooser(Protocol):
    def choose(self, fmap: MapSpec, point: np.ndarray, level: int) -> int: ...


class UniformChooser:
    """Branch drawn uniformly at every level from a seeded Philox stream."""

    def __init__(self, seed: int):
        self.seed = seed
        self.rng = make_rng(seed)

    def choose(self, fmap, point, level):
        return int(self.rng.integers(fmap.degree))


class FixedChooser:
    def __init__(self, index: int):
        self.index = index

    def choose(self, fmap, point, level):
        if not 0 <= self.index < fmap.degree:
            raise SchemaError(f"branch index {self.index} out of range for degree {fmap.degree}")
        return self.index


class SequenceChooser:
    """Explicit branch list; falls back to ``then`` once the list is exhausted."""

    def __init__(self, branches, then: Chooser | None = None):
        self.branches = list(branches)
        self.then = then

    def choose(self, fmap, point, level):
        if level < len(self.branches):
            return int(self.branches[level])
        if self.then is None:
            raise SchemaError("branch sequence exhausted")
        return self.then.choose(fmap, point, level)


class TrapChooser:
    """Prefer the first branch whose preimage lies in S (given as a mask function)."""

    def __init__(self, inside: Callable[[np.ndarray], np.ndarray], levels: int | None = None,
                 then: Chooser | None = None):
        self.inside = inside
        self.levels = levels
        self.then = then

    def choose(self, fmap, point, level):
        if self.levels is not None and level >= self.levels:
            return self.then.choose(fmap, point, level)
        pre = fmap.all_preimages(point[None, :])[0]
        hits = np.nonzero(self.inside(pre))[0]
        if hits.size == 0:
            raise GeometryError(f"trap set: no inverse branch at level {level} lands in S")
        return int(hits[0])


def ball_set(center, radius: float) -> Callable[[np.ndarray], np.ndarray]:
    c = as_point(center).as_array()
    return lambda pts: torus_distance_array(pts, c) < radius


def support_box_set(fmap: MapSpec, shrink: float = 1.0) -> Callable[[np.ndarray], np.ndarray]:
    """Mask of points inside the (optionally shrunk) perturbation box."""
    if fmap.perturbation is None:
        raise SchemaError("map has no perturbation box")

    def inside(pts):
        uc, _ = fmap._local(np.asarray(pts, dtype=float))
        a = fmap.perturbation.a_box * shrink
        return (np.abs(uc[..., 0]) < a) & (np.abs(uc[..., 1]) < a)

    return inside


def from_branches(fmap: MapSpec, p, branches) -> PastWord:
    """Build a word from an explicit branch sequence."""
    p = as_point(p)
    branches = tuple(int(b) for b in branches)
    if any(not 0 <= b < fmap.degree for b in branches):
        raise SchemaError("branch index out of range")
    pts = np.empty((len(branches) + 1, 2))
    pts[0] = (p.x, p.y)
    for k, b in enumerate(branches):
        pts[k + 1] = fmap.preimages(pts[k][None, :], np.array([b]))[0]
    return PastWord(fmap, branches, pts)


def extend_past(fmap: MapSpec, p, chooser: Chooser, depth: int = DEFAULT_DEPTH) -> PastWord:
    if depth < 0:
        raise SchemaError("depth must be >= 0")
    p = as_point(p)
    pts = np.empty((depth + 1, 2))
    pts[0] = (p.x, p.y)
    branches = []
    for k in range(depth):
        b = chooser.choose(fmap, pts[k], k)
        branches.append(b)
        pts[k + 1] = fmap.preimages(pts[k][None, :], np.array([b]))[0]
    return PastWord(fmap, tuple(branches), pts)


def deepen(w: PastWord, extra: int, chooser: Chooser) -> PastWord:
    """Extend an existing word by ``extra`` further levels."""
    tail = extend_past(w.fmap, w.point(w.depth), chooser, extra)
    return PastWord(w.fmap, w.branches + tail.branches,
                    np.concatenate([w.points, tail.points[1:]]))


def shift(fmap: MapSpec, w: PastWord) -> PastWord:
    """Apply the lifted map: new base f(x_0), old base becomes x_{-1}."""
    new_base = fmap.evaluate_array(w.points[:1])
    pre = fmap.all_preimages(new_base)[0]
    b = int(np.argmin(torus_distance_array(pre, w.points[0])))
    return PastWord(fmap, (b,) + w.branches, np.concatenate([new_base, w.points]))


def shift_n(fmap: MapSpec, w: PastWord, n: int) -> PastWord:
    for _ in range(n):
        w = shift(fmap, w)
    return w


def companion_past(w: PastWord, p, depth: int | None = None) -> PastWord:
    """Past of a point near ``w.base`` whose backward orbit shadows that of ``w``.

    Used for points on the local unstable or centre curve through the base:
    at each level the preimage closest to the corresponding coordinate of ``w``
    is selected.
    """
    fmap = w.fmap
    depth = w.depth if depth is None else depth
    p = as_point(p)
    pts = np.empty((depth + 1, 2))
    pts[0] = (p.x, p.y)
    for k in range(depth):
        pts[k + 1] = fmap.preimage_near(pts[k][None, :], w.points[k + 1][None, :])[0]
    return PastWord(fmap, _branch_labels(fmap, pts), pts)


def companion_pasts(w: PastWord, pts0: np.ndarray, depth: int | None = None) -> np.ndarray:
    """Vectorised companion pasts: returns an (N, depth+1, 2) array of backward orbits."""
    fmap = w.fmap
    depth = w.depth if depth is None else depth
    pts0 = wrap_array(np.asarray(pts0, dtype=float).reshape(-1, 2))
    out = np.empty((pts0.shape[0], depth + 1, 2))
    out[:, 0] = pts0
    for k in range(depth):
        target = np.broadcast_to(w.points[k + 1], out[:, k].shape)
        out[:, k + 1] = fmap.preimage_near(out[:, k], target)
    return out


def _branch_labels(fmap: MapSpec, pts: np.ndarray) -> tuple:
    """Recover branch indices for a consistent backward orbit."""
    if len(pts) < 2:
        return ()
    pre = fmap.all_preimages(pts[:-1])  # (n, d, 2)
    d = torus_distance_array(pre, pts[1:, None, :])
    return tuple(int(b) for b in np.argmin(d, axis=1))


def batch_pasts(fmap: MapSpec, p, branches: np.ndarray) -> np.ndarray:
    """Backward orbits of one base point for many branch sequences.

    ``branches`` has shape (count, depth); the result has shape (count, depth+1, 2).
    """
    p = as_point(p)
    branches = np.asarray(branches, dtype=int)
    count, depth = branches.shape
    out = np.empty((count, depth + 1, 2))
    out[:, 0] = (p.x, p.y)
    for k in range(depth):
        out[:, k + 1] = fmap.preimages(out[:, k], branches[:, k])
    return out


def words_from_batch(fmap: MapSpec, branches: np.ndarray, points: np.ndarray) -> list[PastWord]:
    return [PastWord(fmap, tuple(int(b) for b in br), pts) for br, pts in zip(branches, points)]


def random_branches(fmap: MapSpec, depth: int, count: int, seed: int) -> np.ndarray:
    """Uniform branch sequences, one substream per row.

    Row i depends only on (seed, i), and its first k entries do not depend on
    ``depth``, so samples are prefix-stable in both count and depth.
    """
    out = np.zeros((count, depth), dtype=np.int64)
    if depth:
        for i in range(count):
            out[i] = substream(seed, i).integers(fmap.degree, size=depth)
    return out


class NEDistance(NamedTuple):
    value: float
    exact: bool  # False when the words agree on every available coordinate


def ne_distance(w1: PastWord, w2: PastWord, tol: float = MATCH_TOL) -> NEDistance:
    """2^{-n} with n the largest integer such that x_i = y_i for all |i| < n.

    Forward coordinates are determined by the base, so agreement is checked on
    the base and then on x_{-1}, x_{-2}, .... If the words agree on every
    available coordinate the returned value is the bound 2^{-(depth+1)} and
    ``exact`` is False.
    """
    depth = min(w1.depth, w2.depth)
    d = torus_distance_array(w1.points[: depth + 1], w2.points[: depth + 1])
    bad = np.nonzero(d > tol)[0]
    if bad.size:
        return NEDistance(2.0 ** (-int(bad[0])), True)
    return NEDistance(2.0 ** (-(depth + 1)), False)


@dataclass(frozen=True)
class FiberSample:
    base: TorusPoint
    words: tuple
    depth: int


def fiber_sample(fmap: MapSpec, p, depth: int, count: int, seed: int) -> FiberSample:
    """``count`` distinct pasts of p of the given depth, uniform over branch choices."""
    p = as_point(p)
    total = fmap.degree ** depth
    if count > total:
        raise SchemaError(f"requested {count} words but the fiber has only {total} at depth {depth}")
    rng = make_rng(seed)
    if total <= 2**62:
        codes = rng.choice(total, size=count, replace=False)
        digits = np.empty((count, depth), dtype=int)
        for k in range(depth):
            digits[:, k] = codes % fmap.degree
            codes = codes // fmap.degree
    else:
        seen, rows = set(), []
        while len(rows) < count:
            row = tuple(int(v) for v in rng.integers(fmap.degree, size=depth))
            if row not in seen:
                seen.add(row)
                rows.append(row)
        digits = np.array(rows, dtype=int).reshape(count, depth)
    pts = batch_pasts(fmap, p, digits)
    return FiberSample(p, tuple(words_from_batch(fmap, digits, pts)), depth)


def preimage_cloud(fmap: MapSpec, p, k: int) -> np.ndarray:
    """All depth-k preimages of p as an (degree^k, 2) array."""
    pts = as_point(p).as_array()[None, :]
    for _ in range(k):
        pts = fmap.all_preimages(pts).reshape(-1, 2)
    return pts


def max_gap(points: np.ndarray, probes: int = 4096, seed: int = 0) -> float:
    """Largest distance from a random probe to the nearest point (density check)."""
    rng = make_rng(seed)
    q = rng.random((probes, 2))
    best = np.full(probes, math.inf)
    for chunk in np.array_split(points, max(1, len(points) // 2048)):
        d = torus_distance_array(q[:, None, :], chunk[None, :, :])
        best = np.minimum(best, d.min(axis=1))
    return float(best.max())
