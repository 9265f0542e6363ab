"""Affine structure on unstable and centre curves.

The density along a curve through x is the truncated product
rho_x(y) = prod_{k=1..N} lambda(x_{-k}) / lambda(y_{-k}), where lambda is the
one-step stretch of the relevant bundle and y_{-k} is the backward orbit of
y shadowing that of x. The chart R_x is the integral of rho_x against
arclength, so that R_{f(x)}(f(y)) = lambda_x R_x(y).

rho is treated as piecewise linear between polyline vertices; R is its exact
integral (the trapezoid rule at vertices) and Phi = R^{-1} inverts it exactly.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .cocycle_splitting import center_along_past, center_vectors_at, unstable_field
from .errors import ConvergenceError, GeometryError, SchemaError
from .leaf_dynamics import (
    DEFAULT_RESOLUTION,
    CenterCurve,
    UnstableArc,
    _signed_distance,
    center_curve,
    shadow_pasts,
    unstable_arc,
)
from .map_registry import MapSpec
from .natural_extension import DEFAULT_DEPTH, PastWord, UniformChooser, _branch_labels, extend_past, shift
from .torus_geometry import TorusPoint, as_point, wrap_array

TRUNCATION_DEPTH = DEFAULT_DEPTH
LAST_FACTOR_TOL = 1e-6
CU_RADIUS = 0.1


# -- densities ------------------------------------------------------------------------

@dataclass
class DensityProfile:
    curve: UnstableArc | CenterCurve
    base_index: int
    rho: np.ndarray
    truncation_depth: int
    last_factor_deviation: float


def _curve_kind(curve) -> str:
    if isinstance(curve, UnstableArc):
        return "u"
    if isinstance(curve, CenterCurve):
        return "c"
    raise SchemaError(f"unsupported curve type {type(curve).__name__}")


def default_center_word(fmap: MapSpec, curve: CenterCurve, depth: int = TRUNCATION_DEPTH,
                        seed: int = 0) -> PastWord:
    """Uniform random past of a centre curve's base point (no trap)."""
    base = wrap_array(curve.points[curve.base_index][None])[0]
    return extend_past(fmap, base, UniformChooser(seed), depth)


def curve_log_stretches(fmap: MapSpec, curve, depth: int = TRUNCATION_DEPTH,
                        word: PastWord | None = None, pts: np.ndarray | None = None) -> np.ndarray:
    """log lambda(y_{-k}) for k = 1..depth at every vertex y (or at ``pts``); shape (N, depth).

    Unstable arcs use their own past; centre curves use ``word`` (default: a
    uniform random past of the base point).
    """
    kind = _curve_kind(curve)
    pts = curve.points if pts is None else np.asarray(pts, dtype=float).reshape(-1, 2)
    base_lift = curve.points[curve.base_index]
    if kind == "u":
        w = curve.past
        if depth > w.depth:
            raise SchemaError(f"truncation depth {depth} exceeds the arc's past depth {w.depth}")
        pasts = shadow_pasts(fmap, w, base_lift, pts, w.depth)
        _, st = unstable_field(fmap, pasts)
    else:
        w = word if word is not None else default_center_word(fmap, curve, depth)
        if depth > w.depth:
            raise SchemaError(f"truncation depth {depth} exceeds the word depth {w.depth}")
        pasts = shadow_pasts(fmap, w, base_lift, pts, depth)
        _, st = center_along_past(fmap, pasts)
    return np.log(st[:, :depth])


def _profile_from_logs(curve, logs: np.ndarray, base: int, depth: int) -> DensityProfile:
    rel = logs[base][None, :] - logs
    rho = np.exp(np.sum(rel, axis=1))
    last = float(np.max(np.abs(np.expm1(rel[:, -1])))) if depth else 0.0
    if last > LAST_FACTOR_TOL:
        raise ConvergenceError(f"density product not converged: last factor deviates by {last:.3e}")
    return DensityProfile(curve, base, rho, depth, last)


def density_profile(fmap: MapSpec, curve, truncation_depth: int = TRUNCATION_DEPTH,
                    base_index: int | None = None, word: PastWord | None = None) -> DensityProfile:
    """rho_base at every vertex of the curve."""
    base = curve.base_index if base_index is None else int(base_index)
    logs = curve_log_stretches(fmap, curve, truncation_depth, word)
    return _profile_from_logs(curve, logs, base, truncation_depth)


def density_rho(fmap: MapSpec, curve, target: int, truncation_depth: int = TRUNCATION_DEPTH,
                base_index: int | None = None, word: PastWord | None = None) -> float:
    """rho_base(target) for two vertices of the curve."""
    base = curve.base_index if base_index is None else int(base_index)
    idx = np.array([base, int(target)])
    logs = curve_log_stretches(fmap, curve, truncation_depth, word, curve.points[idx])
    return float(_profile_from_logs(curve, logs, 0, truncation_depth).rho[1])


# -- charts ---------------------------------------------------------------------------

@dataclass
class NormalChart:
    """R along a curve: signed, zero at the base vertex, increasing with arclength."""

    curve: UnstableArc | CenterCurve
    s: np.ndarray  # arclength at vertices, measured from the base vertex
    rho: np.ndarray
    R: np.ndarray
    base_index: int
    truncation_depth: int

    def _segment(self, s: np.ndarray) -> np.ndarray:
        return np.clip(np.searchsorted(self.s, s, side="right") - 1, 0, len(self.s) - 2)

    def R_at(self, s) -> np.ndarray:
        """R at arclength s from the base vertex (exact integral of the linear rho)."""
        s = np.asarray(s, dtype=float)
        if np.any(s < self.s[0] - 1e-12) or np.any(s > self.s[-1] + 1e-12):
            raise GeometryError("arclength outside the chart")
        i = self._segment(s)
        h = self.s[i + 1] - self.s[i]
        t = s - self.s[i]
        r0, r1 = self.rho[i], self.rho[i + 1]
        return self.R[i] + r0 * t + 0.5 * (r1 - r0) * t * t / h

    def phi(self, r) -> np.ndarray:
        """Arclength from the base vertex with R(s) = r."""
        r = np.asarray(r, dtype=float)
        if np.any(r < self.R[0] - 1e-12) or np.any(r > self.R[-1] + 1e-12):
            raise GeometryError("chart value outside the chart range")
        i = np.clip(np.searchsorted(self.R, r, side="right") - 1, 0, len(self.R) - 2)
        h = self.s[i + 1] - self.s[i]
        r0, r1 = self.rho[i], self.rho[i + 1]
        c = r - self.R[i]
        a = 0.5 * (r1 - r0) / h
        # root of a t^2 + r0 t - c = 0 in the stable form
        disc = np.sqrt(np.maximum(r0 * r0 + 4.0 * a * c, 0.0))
        t = 2.0 * c / (r0 + disc)
        return self.s[i] + t

    def point(self, r) -> np.ndarray:
        """Lifted curve point Phi(r)."""
        s = float(self.phi(r))
        s_curve = s + self.curve.s[self.base_index] - self.s[self.base_index]
        return np.asarray(self.curve.point_at(s_curve), dtype=float)

    def slope_at_base(self) -> float:
        b = self.base_index
        j = b + 1 if b + 1 < len(self.s) else b - 1
        return float((self.R[j] - self.R[b]) / (self.s[j] - self.s[b]))

    def rows(self):
        for si, ri, Ri in zip(self.s, self.rho, self.R):
            yield float(si), float(ri), float(Ri)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["arclength", "rho", "R"])
            for row in self.rows():
                wr.writerow([f"{v:.17g}" for v in row])


def chart_from_profile(profile: DensityProfile) -> NormalChart:
    curve = profile.curve
    b = profile.base_index
    s = curve.s - curve.s[b]
    seg = np.diff(s) * 0.5 * (profile.rho[:-1] + profile.rho[1:])
    R = np.concatenate([[0.0], np.cumsum(seg)])
    R -= R[b]
    return NormalChart(curve, s, profile.rho, R, b, profile.truncation_depth)


def normal_chart(fmap: MapSpec, curve, truncation_depth: int = TRUNCATION_DEPTH,
                 base_index: int | None = None, word: PastWord | None = None) -> NormalChart:
    return chart_from_profile(density_profile(fmap, curve, truncation_depth, base_index, word))


def rebase(chart: NormalChart, base_index: int) -> NormalChart:
    """The chart of the same curve based at another vertex.

    rho_b = rho_a / rho_a(b) holds exactly for the truncated products, so no
    stretches need to be recomputed.
    """
    rho = chart.rho / chart.rho[base_index]
    prof = DensityProfile(chart.curve, int(base_index), rho, chart.truncation_depth, 0.0)
    return chart_from_profile(prof)


# -- affine transitions ---------------------------------------------------------------

@dataclass(frozen=True)
class AffineCheckReport:
    slope: float
    offset: float
    residual: float
    density_at_base: float  # rho_b(a), the predicted slope

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def affine_transition(chart_a: NormalChart, chart_b: NormalChart) -> AffineCheckReport:
    """Least-squares fit of R_b as an affine function of R_a over the shared vertices."""
    if chart_a.curve is not chart_b.curve and not np.array_equal(chart_a.curve.points, chart_b.curve.points):
        raise SchemaError("affine transitions need two charts on the same curve")
    x, y = chart_a.R, chart_b.R
    design = np.column_stack([x, np.ones_like(x)])
    (slope, offset), *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = float(np.max(np.abs(design @ np.array([slope, offset]) - y)))
    return AffineCheckReport(float(slope), float(offset), resid, float(chart_b.rho[chart_a.base_index]))


# -- conjugacy checks -----------------------------------------------------------------

def base_stretch(fmap: MapSpec, w: PastWord, bundle: str) -> float:
    """lambda^u or lambda^c at the base point of w."""
    x = w.points[0][None]
    if bundle == "u":
        vec, _ = unstable_field(fmap, w.points[None])
        e = vec[0, 0]
    elif bundle == "c":
        e = center_vectors_at(fmap, x)[0]
    else:
        raise SchemaError(f"unknown bundle {bundle!r}")
    return float(np.linalg.norm(fmap.jacobian_array(x)[0] @ e))


def conjugacy_residual(fmap: MapSpec, chart: NormalChart, image_chart: NormalChart, stretch: float,
                       margin: float = 0.0) -> float:
    """sup over vertices y of |R_{f(x)}(f(y)) - stretch * R_x(y)|.

    ``image_chart`` lives on a curve through f(x) long enough to contain the
    image of the first curve; f(y) is located on it by its nearest foot point.
    Vertices within ``margin`` of either end are skipped.
    """
    curve, img = chart.curve, image_chart.curve
    keep = (chart.s >= chart.s[0] + margin) & (chart.s <= chart.s[-1] - margin)
    z = fmap.lift(curve.points[keep])
    shift_vec = np.round(fmap.lift(curve.points[chart.base_index][None])[0] - img.points[img.base_index])
    z = z - shift_vec
    worst = 0.0
    s0 = img.s[0] - img.s[img.base_index]
    for zi, Ri in zip(z, chart.R[keep]):
        _, foot = _signed_distance(img.points, zi)
        worst = max(worst, abs(float(image_chart.R_at(foot + s0)) - stretch * Ri))
    return worst


# -- centre-unstable chart ------------------------------------------------------------

class CenterUnstableChart:
    """Phi_x(t, s) = Phi^u_{y}(beta(s) t) with y = Phi^c_x(s) and beta(s) = rho^u_y(x).

    The centre curve and its chart are built once; the unstable arc through
    each Phi^c(s) is built on demand.
    """

    def __init__(self, fmap: MapSpec, word: PastWord, radius: float = CU_RADIUS,
                 resolution: float = DEFAULT_RESOLUTION, truncation_depth: int = TRUNCATION_DEPTH):
        self.fmap, self.word, self.radius = fmap, word, radius
        self.resolution, self.depth = resolution, truncation_depth
        self.center = center_curve(fmap, word.points[0], 2.0 * radius, resolution)
        self.center_chart = normal_chart(fmap, self.center, truncation_depth, word=word)
        _, su = unstable_field(fmap, word.points[None])
        self._log_base = np.log(su[0, :truncation_depth])

    def center_word(self, s: float) -> tuple[PastWord, np.ndarray]:
        y = self.center_chart.point(s)
        past = shadow_pasts(self.fmap, self.word, self.center.points[self.center.base_index], y[None])[0]
        return PastWord(self.fmap, _branch_labels(self.fmap, past), past), y

    def beta(self, wy: PastWord) -> float:
        _, su = unstable_field(self.fmap, wy.points[None])
        rel = np.log(su[0, : self.depth]) - self._log_base
        if abs(math.expm1(rel[-1])) > LAST_FACTOR_TOL:
            raise ConvergenceError("transverse density not converged")
        return float(np.exp(np.sum(rel)))

    def __call__(self, t: float, s: float) -> TorusPoint:
        if abs(t) > self.radius or abs(s) > self.radius:
            raise GeometryError(f"({t}, {s}) lies outside the chart of radius {self.radius}")
        wy, _ = self.center_word(s)
        r = self.beta(wy) * t
        if r == 0.0:
            return as_point(wy.points[0])
        arc = unstable_arc(self.fmap, wy, 1.5 * abs(r) + 4 * self.resolution, self.resolution)
        chart = normal_chart(self.fmap, arc, self.depth)
        return as_point(wrap_array(chart.point(r)[None])[0])


def cu_chart(fmap: MapSpec, word: PastWord, t: float, s: float, radius: float = CU_RADIUS,
             resolution: float = DEFAULT_RESOLUTION) -> TorusPoint:
    return CenterUnstableChart(fmap, word, radius, resolution)(t, s)


def cu_equivariance_residual(fmap: MapSpec, word: PastWord, samples, radius: float = CU_RADIUS,
                             resolution: float = DEFAULT_RESOLUTION) -> float:
    """max |f(Phi_x(t, s)) - Phi_{f x}(lambda^u t, lambda^c s)| over (t, s) samples."""
    lu, lc = base_stretch(fmap, word, "u"), base_stretch(fmap, word, "c")
    here = CenterUnstableChart(fmap, word, radius, resolution)
    fw = shift(fmap, word)
    there = CenterUnstableChart(fmap, fw, radius * max(lu, lc) * 1.05, resolution)
    worst = 0.0
    for t, s in samples:
        a = fmap.evaluate_array(here(t, s).as_array()[None])[0]
        b = there(lu * t, lc * s).as_array()
        d = (a - b + 0.5) % 1.0 - 0.5
        worst = max(worst, float(np.hypot(*d)))
    return worst
