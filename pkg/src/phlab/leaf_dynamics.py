"""Invariant curves and their geometry.

Unstable arcs are built by the graph transform: a short segment tangent to
E^u at x_{-k} is pushed forward k times and trimmed. Centre curves integrate
the E^c direction field with RK4. On top of these sit the centre holonomy
between unstable leaves, specialness and coverage probes, and the drift
experiment for coupled configurations.

All polylines are stored in lifted coordinates (R^2); the base vertex of an
arc sits at the wrapped coordinates of its base point, so two arcs through
the same base point share one lift frame.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .cocycle_splitting import (
    LyapunovNormParams,
    center_along_past,
    center_vectors_at,
    cocycle_norm,
    default_lyapunov_params,
    seed_vectors,
    stopping_times,
    unstable_field,
)
from .curves import DEFAULT_BUDGET, arclength, grid_lengths, push_polyline, refine_uniform, simplify_polyline
from .errors import BudgetExceeded, ConvergenceError, DegenerateCoupling, GeometryError, SchemaError
from .map_registry import MapSpec
from .natural_extension import (
    MATCH_TOL,
    PastWord,
    TrapChooser,
    UniformChooser,
    _branch_labels,
    batch_pasts,
    extend_past,
    random_branches,
)
from .rng import substream
from .torus_geometry import TorusPoint, angles_of, as_point, projective_distance, torus_distance_array, wrap_array

DEFAULT_RESOLUTION = 1e-3
SEED_LENGTH = 1e-4
MAX_TURN = 1e-4  # largest angle between consecutive chords of an arc
CENTER_FIELD_DEPTH = 30
CENTER_STEP_TOL = 1e-10
MAX_HALVINGS = 10
HOLONOMY_RADIUS = 0.2
HOLONOMY_TOL = 1e-10
DEFAULT_BETA = 100.0
_MIN_GAP = 1e-9  # no vertex closer than this to a trimmed end


# -- unstable arcs --------------------------------------------------------------------

@dataclass
class UnstableArc:
    """A piece of W^u(w) as a lifted polyline with signed arclength ``s`` (s = 0 at the base)."""

    past: PastWord
    points: np.ndarray
    s: np.ndarray
    base_index: int

    @property
    def torus_points(self) -> np.ndarray:
        return wrap_array(self.points)

    @property
    def length(self) -> float:
        return float(self.s[-1] - self.s[0])

    def point_at(self, s) -> np.ndarray:
        """Lifted point(s) at arclength s (linear interpolation along the polyline)."""
        s = np.asarray(s, dtype=float)
        if np.any(s < self.s[0] - 1e-12) or np.any(s > self.s[-1] + 1e-12):
            raise GeometryError(f"arclength outside the arc [{self.s[0]:.4g}, {self.s[-1]:.4g}]")
        return np.stack([np.interp(s, self.s, self.points[:, 0]),
                         np.interp(s, self.s, self.points[:, 1])], axis=-1)

    def chord_angles(self) -> np.ndarray:
        return angles_of(np.diff(self.points, axis=0))

    def write_csv(self, path) -> None:
        write_curve_csv(self.s, self.torus_points, path)


def _subdivide(pts: np.ndarray, base: int, max_len: float) -> tuple[np.ndarray, int]:
    seg = np.hypot(*np.diff(pts, axis=0).T)
    pieces = np.maximum(1, np.ceil(seg / max_len)).astype(np.int64)
    starts = np.repeat(pts[:-1], pieces, axis=0)
    deltas = np.repeat(np.diff(pts, axis=0) / pieces[:, None], pieces, axis=0)
    offs = np.arange(pieces.sum()) - np.repeat(np.cumsum(pieces) - pieces, pieces)
    out = np.concatenate([starts + offs[:, None] * deltas, pts[-1:]])
    return out, int(pieces[:base].sum())


def _refine_keep_base(fmap: MapSpec, pts: np.ndarray, base: int, max_seg: float,
                      max_turn: float) -> tuple[np.ndarray, int]:
    anchor = pts[base].copy()
    out = refine_uniform(fmap, pts, max_seg, max_turn)
    hit = np.nonzero(np.all(out == anchor, axis=1))[0]
    return out, int(hit[0])


def _trim(pts: np.ndarray, base: int, lo: float, hi: float) -> tuple[np.ndarray, np.ndarray, int]:
    s = arclength(pts)
    s = s - s[base]
    inside = (s > lo + _MIN_GAP) & (s < hi - _MIN_GAP)
    x = np.concatenate([[np.interp(lo, s, pts[:, 0])], pts[inside, 0], [np.interp(hi, s, pts[:, 0])]])
    y = np.concatenate([[np.interp(lo, s, pts[:, 1])], pts[inside, 1], [np.interp(hi, s, pts[:, 1])]])
    new_s = np.concatenate([[lo], s[inside], [hi]])
    new_base = int(np.nonzero(inside[: base + 1])[0].size)  # +1 for the leading endpoint, -1 for index
    return np.stack([x, y], axis=1), new_s, new_base


def unstable_arc(fmap: MapSpec, w: PastWord, radius: float, resolution: float = DEFAULT_RESOLUTION,
                 seed_length: float = SEED_LENGTH) -> UnstableArc:
    """The arc of W^u(w) of half-length ``radius`` around the base point.

    A segment along E^u(x_{-k}) is pushed forward k times, where k is the
    first level at which the required seed half-length drops below
    ``seed_length`` (or the word depth). The polyline is refined before every
    push so that image segments are at most ``resolution`` long and turn by
    at most MAX_TURN * resolution / DEFAULT_RESOLUTION between chords, which
    keeps the discretisation error second order in ``resolution``.
    """
    if not (radius > 0 and resolution > 0):
        raise SchemaError("radius and resolution must be positive")
    max_turn = MAX_TURN * resolution / DEFAULT_RESOLUTION
    vec, stretch = unstable_field(fmap, w.points[None])
    vec, stretch = vec[0], stretch[0]
    cum = np.concatenate([[1.0], np.cumprod(stretch)])
    for slack in (2.0, 4.0, 8.0):
        need = slack * radius / cum
        small = np.nonzero(need <= seed_length)[0]
        k = int(small[0]) if small.size else w.depth
        h = need[k]
        pts = w.points[k] + np.linspace(-h, h, 9)[:, None] * vec[k]
        base = 4
        for j in range(k, 0, -1):
            pts, base = _refine_keep_base(fmap, pts, base, resolution, max_turn)
            pts = fmap.lift(pts)
            pts = pts + np.round(w.points[j - 1] - pts[base])
        pts, base = _subdivide(pts, base, resolution)
        s = arclength(pts)
        s = s - s[base]
        if s[0] <= -radius and s[-1] >= radius:
            out, new_s, new_base = _trim(pts, base, -radius, radius)
            return UnstableArc(w, out, new_s, new_base)
    raise GeometryError(f"arc of radius {radius} could not be grown from depth {w.depth}")


def arc_pasts(arc: UnstableArc, pts: np.ndarray, depth: int | None = None) -> np.ndarray:
    """Backward orbits (N, depth+1, 2) of lifted points on or near the arc.

    Points are pulled back with the inverse of the lifted map, in the lift
    frame anchored at the arc's past, so no inverse branch has to be chosen.
    Every orbit shadows the arc's own past.
    """
    w = arc.past
    return shadow_pasts(w.fmap, w, arc.points[arc.base_index], pts, depth)


def shadow_pasts(fmap: MapSpec, w: PastWord, base_lift: np.ndarray, pts: np.ndarray,
                 depth: int | None = None) -> np.ndarray:
    depth = w.depth if depth is None else depth
    if depth > w.depth:
        raise SchemaError(f"depth {depth} exceeds the word depth {w.depth}")
    pts = np.asarray(pts, dtype=float).reshape(-1, 2)
    out = np.empty((pts.shape[0], depth + 1, 2))
    z = pts.copy()
    b = np.asarray(base_lift, dtype=float).reshape(1, 2)
    out[:, 0] = wrap_array(z)
    for j in range(1, depth + 1):
        shift = np.round(fmap.lift(w.points[j][None]) - b)
        both = fmap.lift_inverse(np.concatenate([b + shift, z + shift]))
        b, z = both[:1], both[1:]
        out[:, j] = wrap_array(z)
    return out


def write_curve_csv(s: np.ndarray, pts: np.ndarray, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["arclength", "x", "y"])
        for si, (x, y) in zip(s, pts):
            wr.writerow([f"{si:.17g}", f"{x:.17g}", f"{y:.17g}"])


# -- centre curves --------------------------------------------------------------------

@dataclass
class CenterCurve:
    """A piece of the centre curve through a point; lifted polyline with unit tangents."""

    points: np.ndarray
    s: np.ndarray
    base_index: int
    tangents: np.ndarray

    @property
    def torus_points(self) -> np.ndarray:
        return wrap_array(self.points)

    def point_at(self, s: float) -> np.ndarray:
        """Cubic Hermite interpolation using the field directions at the vertices."""
        if not self.s[0] - 1e-12 <= s <= self.s[-1] + 1e-12:
            raise GeometryError("arclength outside the centre curve")
        i = int(np.clip(np.searchsorted(self.s, s) - 1, 0, len(self.s) - 2))
        return _hermite(self.points[i], self.points[i + 1], self.tangents[i], self.tangents[i + 1],
                        self.s[i + 1] - self.s[i], (s - self.s[i]) / (self.s[i + 1] - self.s[i]))

    def write_csv(self, path) -> None:
        write_curve_csv(self.s, self.torus_points, path)


def _hermite(z0, z1, t0, t1, h, th):
    h00 = 2 * th**3 - 3 * th**2 + 1
    h10 = th**3 - 2 * th**2 + th
    h01 = -2 * th**3 + 3 * th**2
    h11 = th**3 - th**2
    return h00 * z0 + h10 * h * t0 + h01 * z1 + h11 * h * t1


class _CenterStepper:
    """RK4 along the E^c field for several curves at once, with step-doubling control."""

    def __init__(self, fmap: MapSpec, depth: int, tol: float):
        self.fmap = fmap
        self.depth = depth
        self.tol = tol

    def field(self, z: np.ndarray, ref: np.ndarray) -> np.ndarray:
        v = center_vectors_at(self.fmap, z, self.depth)
        flip = np.einsum("ij,ij->i", v, ref) < 0
        v[flip] *= -1.0
        return v

    def rk4(self, z, ref, h):
        k1 = self.field(z, ref)
        return self._finish(z, k1, h)

    def _finish(self, z, k1, h):
        k2 = self.field(z + 0.5 * h[:, None] * k1, k1)
        k3 = self.field(z + 0.5 * h[:, None] * k2, k2)
        k4 = self.field(z + h[:, None] * k3, k3)
        return z + (h[:, None] / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4), k4

    def step(self, z, ref, h):
        """One accepted step per row; returns new points, tangents and the steps used.

        The full step and the first half step share their first stage and are
        evaluated together; rejected rows are retried with half the step.
        """
        h = h.copy()
        k1 = self.field(z, ref)
        n = len(z)
        for _ in range(MAX_HALVINGS + 1):
            both, _ = self._finish(np.concatenate([z, z]), np.concatenate([k1, k1]),
                                   np.concatenate([h, 0.5 * h]))
            full, half = both[:n], both[n:]
            two, t_end = self.rk4(half, k1, 0.5 * h)
            err = np.abs(full - two).max(axis=1)
            if np.all(err <= self.tol):
                return two, self.field(two, t_end), h
            h = np.where(err > self.tol, 0.5 * h, h)
        raise ConvergenceError(f"centre-curve step rejected after {MAX_HALVINGS} halvings")


def _lifted_start(p) -> np.ndarray:
    if isinstance(p, TorusPoint):
        return p.as_array()
    return np.asarray(p, dtype=float).reshape(2)


def center_curve(fmap: MapSpec, p, radius: float, resolution: float = DEFAULT_RESOLUTION,
                 depth: int = CENTER_FIELD_DEPTH, tol: float = CENTER_STEP_TOL) -> CenterCurve:
    """Centre curve of half-length ``radius`` through p (a TorusPoint or lifted coordinates).

    Orientation follows the centre eigenvector of the linear part.
    """
    if not (radius > 0 and resolution > 0):
        raise SchemaError("radius and resolution must be positive")
    z0 = _lifted_start(p)
    ref = seed_vectors(fmap)[1]
    st = _CenterStepper(fmap, depth, tol)
    e0 = st.field(z0[None], ref[None])[0]
    if fmap.is_linear:
        n = max(1, math.ceil(radius / resolution))
        s = np.linspace(-radius, radius, 2 * n + 1)
        return CenterCurve(z0 + s[:, None] * e0, s, n, np.broadcast_to(e0, (2 * n + 1, 2)).copy())
    z = np.stack([z0, z0])
    tan = np.stack([e0, -e0])
    travelled = np.zeros(2)
    sides = [[(0.0, z0, e0)], [(0.0, z0, -e0)]]
    while np.any(travelled < radius - 1e-15):
        active = travelled < radius - 1e-15
        h = np.where(active, np.minimum(resolution, radius - travelled), 0.0)
        h = np.maximum(h, 0.0)
        idx = np.nonzero(active)[0]
        nz, nt, used = st.step(z[idx], tan[idx], h[idx])
        for r, i in enumerate(idx):
            travelled[i] += used[r]
            z[i], tan[i] = nz[r], nt[r]
            sides[i].append((travelled[i], nz[r].copy(), nt[r].copy()))
    fwd, bwd = sides
    s = np.array([-t for t, _, _ in bwd[::-1]] + [t for t, _, _ in fwd[1:]])
    pts = np.array([q for _, q, _ in bwd[::-1]] + [q for _, q, _ in fwd[1:]])
    tans = np.array([-v for _, _, v in bwd[::-1]] + [v for _, _, v in fwd[1:]])
    return CenterCurve(pts, s, len(bwd) - 1, tans)


# -- centre holonomy ------------------------------------------------------------------

@dataclass(frozen=True)
class HolonomyResult:
    point: TorusPoint
    lifted: tuple
    displacement: float  # signed centre arclength travelled from p_u
    arc_parameter: float  # arclength of the crossing on the target arc


def _signed_distance(arc_pts: np.ndarray, z: np.ndarray) -> tuple[float, float]:
    """Signed distance from z to the polyline and the arclength of the foot point."""
    a, b = arc_pts[:-1], arc_pts[1:]
    d = b - a
    len2 = np.einsum("ij,ij->i", d, d)
    t = np.clip(np.einsum("ij,ij->i", z - a, d) / len2, 0.0, 1.0)
    foot = a + t[:, None] * d
    dist = np.hypot(*(z - foot).T)
    i = int(np.argmin(dist))
    cross = d[i, 0] * (z - a[i])[1] - d[i, 1] * (z - a[i])[0]
    s_cum = arclength(arc_pts)
    return float(np.sign(cross) * dist[i]), float(s_cum[i] + t[i] * math.sqrt(len2[i]))


def cs_holonomy(fmap: MapSpec, arc_x: UnstableArc, arc_y: UnstableArc, p_u,
                search_radius: float = HOLONOMY_RADIUS, tol: float = HOLONOMY_TOL,
                resolution: float = DEFAULT_RESOLUTION, depth: int = CENTER_FIELD_DEPTH) -> HolonomyResult:
    """Slide p_u (arclength on arc_x, or a point on it) along its centre curve onto arc_y."""
    if not arc_x.past.base.isclose(arc_y.past.base, 1e-9):
        raise SchemaError("holonomy needs two arcs through the same base point")
    if isinstance(p_u, (int, float, np.floating)):
        start = arc_x.point_at(float(p_u))
    else:
        q = as_point(p_u).as_array()
        k = int(np.argmin(torus_distance_array(arc_x.torus_points, q)))
        start = arc_x.points[k] + (((q - arc_x.torus_points[k]) + 0.5) % 1.0 - 0.5)
    y_pts = arc_y.points
    y_s0 = arc_y.s[0]
    g0, foot0 = _signed_distance(y_pts, start)
    if abs(g0) <= tol:
        return HolonomyResult(as_point(start), tuple(start), 0.0, foot0 + y_s0)
    ref = seed_vectors(fmap)[1]
    st = _CenterStepper(fmap, depth, CENTER_STEP_TOL)
    e0 = st.field(start[None], ref[None])[0]
    z = np.stack([start, start])
    tan = np.stack([e0, -e0])
    travelled = np.zeros(2)
    prev_g = np.array([g0, g0])
    while True:
        h = np.minimum(resolution, search_radius - travelled)
        if np.all(h <= 0):
            raise GeometryError(f"centre curve does not cross the target arc within {search_radius}")
        live = np.nonzero(h > 0)[0]
        nz, nt, used = st.step(z[live], tan[live], h[live])
        for r, i in enumerate(live):
            g, _ = _signed_distance(y_pts, nz[r])
            if np.sign(g) != np.sign(prev_g[i]):
                sign = 1.0 if i == 0 else -1.0
                z0, t0 = z[i], tan[i]
                lo, hi = 0.0, 1.0
                hstep = used[r]
                while (hi - lo) * hstep > tol:
                    mid = 0.5 * (lo + hi)
                    gm, _ = _signed_distance(y_pts, _hermite(z0, nz[r], t0, nt[r], hstep, mid))
                    if np.sign(gm) == np.sign(prev_g[i]):
                        lo = mid
                    else:
                        hi = mid
                th = 0.5 * (lo + hi)
                zc = _hermite(z0, nz[r], t0, nt[r], hstep, th)
                _, foot = _signed_distance(y_pts, zc)
                disp = sign * (travelled[i] + th * hstep)
                return HolonomyResult(as_point(zc), tuple(zc), float(disp), foot + y_s0)
            prev_g[i] = g
            travelled[i] += used[r]
            z[i], tan[i] = nz[r], nt[r]


# -- specialness ----------------------------------------------------------------------

@dataclass(frozen=True)
class SpecialnessReport:
    base: TorusPoint
    depth: int
    sample_count: int
    angle_spread: float
    per_word_angles: np.ndarray = field(repr=False)
    trapped: bool = False

    def to_dict(self) -> dict:
        return {"base": self.base.to_list(), "depth": self.depth, "sample_count": self.sample_count,
                "angle_spread": self.angle_spread, "trapped": self.trapped}

    def rows(self):
        return [(i, float(t)) for i, t in enumerate(self.per_word_angles)]


def max_projective_spread(theta: np.ndarray) -> float:
    """Largest pairwise projective distance among directions theta in [0, pi)."""
    t = np.sort(np.mod(np.asarray(theta, dtype=float), math.pi))
    if t.size < 2:
        return 0.0
    target = (t + 0.5 * math.pi) % math.pi
    j = np.searchsorted(t, target) % t.size
    best = 0.0
    for cand in (j, (j - 1) % t.size):
        d = np.abs(t - t[cand]) % math.pi
        best = max(best, float(np.max(np.minimum(d, math.pi - d))))
    return best


def specialness_probe(fmap: MapSpec, p, depth: int = 40, samples: int = 1024, seed: int = 0,
                      trap=None, trap_levels: int = 1) -> SpecialnessReport:
    """Spread of E^u at p over random pasts (plus one past trapped in ``trap`` if given)."""
    if samples < 2:
        raise SchemaError("specialness needs at least two samples")
    p = as_point(p)
    br = random_branches(fmap, depth, samples, seed)
    pasts = batch_pasts(fmap, p, br)
    trapped = False
    if trap is not None:
        w = extend_past(fmap, p, TrapChooser(trap, trap_levels, UniformChooser(seed)), depth)
        pasts = np.concatenate([pasts, w.points[None]])
        trapped = True
    vec, _ = unstable_field(fmap, pasts)
    theta = angles_of(vec[:, 0])
    return SpecialnessReport(p, depth, samples, max_projective_spread(theta), theta, trapped)


# -- coverage -------------------------------------------------------------------------

@dataclass(frozen=True)
class CoverageReport:
    grid_n: int
    visited_fraction: tuple
    final_mask: np.ndarray = field(repr=False)
    iterations: int = 0
    final_points: int = 0

    def to_dict(self) -> dict:
        return {"grid_n": self.grid_n, "visited_fraction": list(self.visited_fraction),
                "iterations": self.iterations, "final_points": self.final_points}

    def write_pbm(self, path) -> None:
        write_mask_pbm(self.final_mask, path)


def write_mask_pbm(mask: np.ndarray, path) -> None:
    """Plain PBM (P1); image rows run from the top (large y) down, columns are x."""
    img = np.asarray(mask, dtype=bool).T[::-1]
    with open(path, "w") as fh:
        fh.write(f"P1\n{img.shape[1]} {img.shape[0]}\n")
        for row in img:
            fh.write(" ".join("1" if v else "0" for v in row) + "\n")


def minimality_probe(fmap: MapSpec, arc, iterations: int, grid_n: int = 64,
                     budget: int = DEFAULT_BUDGET, max_seg: float = DEFAULT_RESOLUTION) -> CoverageReport:
    """Cumulative grid cells visited by f^k(arc), k = 0..iterations."""
    if iterations < 0 or grid_n < 1:
        raise SchemaError("iterations must be >= 0 and grid_n >= 1")
    pts = arc.points if isinstance(arc, UnstableArc) else np.asarray(arc, dtype=float)
    if fmap.is_linear:
        pts = simplify_polyline(pts, 1e-12)  # images of straight pieces stay straight
    mask = grid_lengths(pts, grid_n) > 0
    fractions = [float(mask.mean())]
    for k in range(iterations):
        try:
            pts = push_polyline(fmap, pts, max_seg, budget)
        except BudgetExceeded as exc:
            partial = CoverageReport(grid_n, tuple(fractions), mask.copy(), k, len(pts))
            raise BudgetExceeded(str(exc), partial=partial) from exc
        mask |= grid_lengths(pts, grid_n) > 0
        fractions.append(float(mask.mean()))
    return CoverageReport(grid_n, tuple(fractions), mask, iterations, len(pts))


# -- coupled configurations and drift --------------------------------------------------

@dataclass(frozen=True)
class Configuration:
    x_word: PastWord
    y_word: PastWord
    x_u: float  # signed unstable arclength of x^u from x_0
    ell: int


@dataclass(frozen=True)
class DriftRecord:
    tau: int
    t: int
    m: int
    ell: int
    epsilon: float
    alpha: float
    d_u: float
    center_displacement_before: float
    center_displacement_after: float
    unstable_length_at_depth: float
    center_offset_at_depth: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def coupling_angle(fmap: MapSpec, x_word: PastWord, y_word: PastWord, ell: int) -> float:
    """alpha(x_{-ell}, y_{-ell}): projective angle between the two E^u at depth ell."""
    vx, _ = unstable_field(fmap, x_word.points[None])
    vy, _ = unstable_field(fmap, y_word.points[None])
    return projective_distance(float(angles_of(vx[0, ell])), float(angles_of(vy[0, ell])))


def _check_shared(x_word: PastWord, y_word: PastWord, ell: int) -> None:
    if ell > min(x_word.depth, y_word.depth):
        raise SchemaError(f"ell = {ell} exceeds the word depth")
    d = torus_distance_array(x_word.points[: ell + 1], y_word.points[: ell + 1])
    if np.max(d) > MATCH_TOL:
        raise SchemaError(f"the words do not share their first {ell} levels")


def y_configuration(fmap: MapSpec, x_word: PastWord, y_word: PastWord, x_u, epsilon: float, ell: int,
                    beta: float = DEFAULT_BETA, params: LyapunovNormParams | None = None,
                    resolution: float = DEFAULT_RESOLUTION) -> DriftRecord:
    """Coupled configurations: centre displacement between x^u and y^u before and after tau steps.

    The holonomy is evaluated at depth ell, where the two unstable leaves
    through x_{-ell} are straight to working precision: the unstable length of
    the pulled-back segment [x, x^u] is integrated along the arc, the crossing
    with W^u(y_{-ell}) along E^c is solved linearly, and the offset is carried
    to time 0 and then to time m = tau by the centre cocycle (the normal-form
    charts are linear in these coordinates).
    """
    _check_shared(x_word, y_word, ell)
    alpha = coupling_angle(fmap, x_word, y_word, ell)
    if alpha <= 1.0 / beta:
        raise DegenerateCoupling(f"coupling angle {alpha:.3e} does not exceed 1/beta = {1.0 / beta:.3e}")
    s_u = float(x_u)
    if not 1.0 / beta < abs(s_u) < 1.0:
        raise SchemaError(f"unstable distance {abs(s_u):.4g} must lie in (1/beta, 1)")
    params = params or default_lyapunov_params(fmap)
    arc = unstable_arc(fmap, x_word, abs(s_u) + 4 * resolution, resolution)
    lo, hi = sorted((0.0, s_u))
    inner = (arc.s > lo) & (arc.s < hi)
    s_grid = np.concatenate([[lo], arc.s[inner], [hi]])
    pasts = arc_pasts(arc, arc.point_at(s_grid))
    _, su = unstable_field(fmap, pasts)
    log_stretch = np.sum(np.log(su[:, :ell]), axis=1)
    d_u_ell = math.copysign(float(np.trapezoid(np.exp(-log_stretch), s_grid)), s_u)

    vx, _ = unstable_field(fmap, x_word.points[None])
    vy, _ = unstable_field(fmap, y_word.points[None])
    e1, e2 = vx[0, ell], vy[0, ell]
    if e1 @ e2 < 0:
        e2 = -e2
    ec = center_along_past(fmap, x_word.points[None])[0][0, ell]
    t_h = np.linalg.solve(np.column_stack([e2, -ec]), d_u_ell * e1)
    h = float(t_h[1])

    u_past = pasts[0] if s_u < 0 else pasts[-1]
    u_word = PastWord(fmap, _branch_labels(fmap, u_past), u_past)
    _, sc_u = center_along_past(fmap, u_past[None])
    before = h * float(np.exp(np.sum(np.log(sc_u[0, :ell]))))
    rec = stopping_times(fmap, x_word, u_word, epsilon, ell, params)
    m = rec.tau
    after = before * cocycle_norm(fmap, u_word, "c", m)
    return DriftRecord(rec.tau, rec.t, m, ell, epsilon, alpha, abs(s_u), before, after, d_u_ell, h)


def random_configurations(fmap: MapSpec, count: int, ell: int, seed: int = 0, beta: float = DEFAULT_BETA,
                          depth: int = 40, d_u: float | None = None, batch: int = 32,
                          max_batches: int = 200) -> list[Configuration]:
    """Admissible (beta, ell) configurations for a perturbed map.

    x_{-ell} is the image of a uniform point of the perturbation box; one past
    goes back through that point, the other takes an independent uniform
    branch at the first level. Pairs whose angle at depth ell does not exceed
    1/beta are rejected. The unstable distance is uniform in (1/beta, 1) with
    a random sign unless ``d_u`` is given.
    """
    if fmap.perturbation is None:
        raise DegenerateCoupling("linear maps are special: every coupling angle vanishes")
    pert = fmap.perturbation
    q = pert.q.as_array()
    out: list[Configuration] = []
    for b in range(max_batches):
        rng = substream(seed, b)
        uc = rng.uniform(-pert.a_box, pert.a_box, (batch, 2))
        zp = wrap_array(q + uc @ fmap.frame.T)
        z = fmap.evaluate_array(zp)
        tails = rng.integers(fmap.degree, size=(2, batch, depth))
        first_b = rng.integers(fmap.degree, size=batch)
        pa = np.empty((batch, depth + 1, 2))
        pb = np.empty((batch, depth + 1, 2))
        pa[:, 0] = pb[:, 0] = z
        pa[:, 1] = zp
        pb[:, 1] = fmap.preimages(z, first_b)
        for k in range(1, depth):
            pa[:, k + 1] = fmap.preimages(pa[:, k], tails[0, :, k])
            pb[:, k + 1] = fmap.preimages(pb[:, k], tails[1, :, k])
        va, _ = unstable_field(fmap, pa)
        vb, _ = unstable_field(fmap, pb)
        ta, tb = angles_of(va[:, 0]), angles_of(vb[:, 0])
        ang = np.abs(ta - tb) % math.pi
        ang = np.minimum(ang, math.pi - ang)
        for i in np.nonzero(ang > 1.0 / beta)[0]:
            fwd = np.empty((ell + 1, 2))
            fwd[0] = z[i]
            for k in range(ell):
                fwd[k + 1] = fmap.evaluate_array(fwd[k][None])[0]
            head = fwd[::-1]
            words = []
            for past in (pa[i], pb[i]):
                pts = np.concatenate([head, past[1:]])
                words.append(PastWord(fmap, _branch_labels(fmap, pts), pts))
            if d_u is None:
                mag = rng.uniform(1.0 / beta, 1.0)
                s_u = float(mag if rng.random() < 0.5 else -mag)
            else:
                s_u = float(d_u)
            out.append(Configuration(words[0], words[1], s_u, ell))
            if len(out) == count:
                return out
    raise GeometryError(f"found only {len(out)} admissible configurations")


@dataclass
class DriftSummary:
    records: list
    epsilon: float
    beta_hat: float  # smallest b with every |R^c| in [epsilon / b, epsilon * b]

    def rows(self):
        for r in self.records:
            yield (r.ell, r.tau, r.t, r.m, r.alpha, r.d_u, r.center_displacement_before,
                   r.center_displacement_after)


def fitted_beta(values, epsilon: float) -> float:
    v = np.abs(np.asarray(values, dtype=float)) / epsilon
    return float(np.max(np.maximum(v, 1.0 / v)))


def drift_experiment(fmap: MapSpec, count: int = 100, ell_range: tuple = (15, 25), epsilon: float = 0.01,
                     beta: float = DEFAULT_BETA, seed: int = 0, d_u: float | None = None) -> DriftSummary:
    """Y-configurations spread evenly over ell in ell_range (inclusive)."""
    lo, hi = int(ell_range[0]), int(ell_range[1])
    if lo > hi or count < 1:
        raise SchemaError("need count >= 1 and ell_range[0] <= ell_range[1]")
    ells = np.arange(lo, hi + 1)
    per = np.full(ells.size, count // ells.size)
    per[: count % ells.size] += 1
    params = default_lyapunov_params(fmap)
    records = []
    for ell, k in zip(ells, per):
        if k == 0:
            continue
        for c in random_configurations(fmap, int(k), int(ell), seed=seed * 1009 + int(ell), beta=beta, d_u=d_u):
            records.append(y_configuration(fmap, c.x_word, c.y_word, c.x_u, epsilon, c.ell, beta, params))
    return DriftSummary(records, epsilon, fitted_beta([r.center_displacement_after for r in records], epsilon))


def drift_slope(fmap: MapSpec, ells, per_ell: int = 3, epsilon: float = 0.01, seed: int = 0,
                d_u: float = 0.5) -> tuple[float, np.ndarray, np.ndarray]:
    """Least-squares slope of log |centre displacement before iteration| against ell.

    Returns (slope, ells, displacements); the unstable distance is held at d_u.
    """
    params = default_lyapunov_params(fmap)
    xs, ys = [], []
    for ell in ells:
        for c in random_configurations(fmap, per_ell, int(ell), seed=seed * 1009 + int(ell), d_u=d_u):
            r = y_configuration(fmap, c.x_word, c.y_word, c.x_u, epsilon, c.ell, params=params)
            xs.append(int(ell))
            ys.append(abs(r.center_displacement_before))
    xs, ys = np.array(xs), np.array(ys)
    return float(np.polyfit(xs, np.log(ys), 1)[0]), xs, ys
