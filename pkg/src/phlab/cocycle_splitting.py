"""The splitting E^u + E^c, per-step stretches, exponents, Lyapunov norms and stopping times.

Conventions: a past word stores x_0, x_{-1}, ..., x_{-D}. E^u at x_{-k} is obtained
by pushing a seed vector forward from x_{-D}; E^c at a point is obtained by
pulling a seed vector back along its forward orbit. The default seed is the
corresponding eigenvector of the linear part, which lies inside the invariant
cones of every example; any other seed inside the cone converges to the same
answer at rate (lambda_c / lambda_u)^depth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import ConvergenceError, SchemaError
from .map_registry import MapSpec
from .natural_extension import PastWord, companion_past
from .rng import make_rng
from .torus_geometry import (
    Direction,
    TangentVector,
    angles_of,
    as_point,
    projective_distance,
)

CENTER_DEPTH = 40
DIRECTION_RESIDUAL_MAX = 1e-6
STOPPING_CAP = 10_000
_GENERIC_ANGLE = 1.0


def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def seed_vectors(fmap: MapSpec) -> tuple[np.ndarray, np.ndarray]:
    """Default seeds (unstable, centre) for the direction iterations."""
    s = fmap.splitting
    if s is None:
        g = np.array([math.cos(_GENERIC_ANGLE), math.sin(_GENERIC_ANGLE)])
        return g, np.array([-g[1], g[0]])
    return s.e_u.copy(), s.e_c.copy()


def _seed(vec, fallback) -> np.ndarray:
    if vec is None:
        return fallback
    if isinstance(vec, Direction):
        return vec.unit()
    if isinstance(vec, TangentVector):
        return _unit(vec.as_array())
    return _unit(np.asarray(vec, dtype=float))


# -- direction fields ---------------------------------------------------------------

def unstable_field(fmap: MapSpec, past: np.ndarray, seed=None) -> tuple[np.ndarray, np.ndarray]:
    """E^u along backward orbits.

    ``past`` has shape (N, D+1, 2) with past[:, k] = x_{-k}. Returns unit vectors
    (N, D+1, 2) at every level and stretches (N, D) where stretches[:, k-1] is
    |Df(x_{-k}) e^u(x_{-k})|. Vectors at level k have converged like
    (lambda_c/lambda_u)^(D-k).
    """
    past = np.asarray(past, dtype=float)
    n, d1, _ = past.shape
    depth = d1 - 1
    vec = np.empty((n, d1, 2))
    stretch = np.empty((n, depth))
    v = np.broadcast_to(_seed(seed, seed_vectors(fmap)[0]), (n, 2)).copy()
    vec[:, depth] = v
    for k in range(depth, 0, -1):
        jac = fmap.jacobian_array(past[:, k])
        w = np.einsum("nij,nj->ni", jac, v)
        s = np.linalg.norm(w, axis=-1)
        stretch[:, k - 1] = s
        v = w / s[:, None]
        vec[:, k - 1] = v
    return vec, stretch


def forward_orbit(fmap: MapSpec, p: np.ndarray, n: int) -> np.ndarray:
    """Points p, f(p), ..., f^n(p) for an (N, 2) array; shape (N, n+1, 2)."""
    p = np.asarray(p, dtype=float).reshape(-1, 2)
    out = np.empty((p.shape[0], n + 1, 2))
    out[:, 0] = p
    for k in range(n):
        out[:, k + 1] = fmap.evaluate_array(out[:, k])
    return out


def center_field(fmap: MapSpec, orbit: np.ndarray, depth: int = CENTER_DEPTH,
                 seed=None) -> tuple[np.ndarray, np.ndarray]:
    """E^c along orbit segments P_0, ..., P_T (shape (T+1, 2) or (S, T+1, 2)).

    The vector at P_i is pulled back from P_min(i+depth, T). Returns unit vectors
    (..., T+1, 2) and stretches (..., T) with stretches[i] = |Df(P_i) e^c(P_i)|;
    entries within ``depth`` of the end are less converged.
    """
    orbit = np.asarray(orbit, dtype=float)
    single = orbit.ndim == 2
    if single:
        orbit = orbit[None]
    s, t1, _ = orbit.shape
    jac = fmap.jacobian_array(orbit[:, :-1])
    jinv = np.empty((s, t1 + depth, 2, 2))
    jinv[:, : t1 - 1] = np.linalg.inv(jac)
    jinv[:, t1 - 1:] = np.eye(2)
    v = np.broadcast_to(_seed(seed, seed_vectors(fmap)[1]), (s, t1, 2)).copy()
    idx = np.arange(t1)
    for j in range(depth, 0, -1):
        v = np.einsum("snij,snj->sni", jinv[:, idx + j - 1], v)
        v /= np.linalg.norm(v, axis=-1, keepdims=True)
    stretch = np.linalg.norm(np.einsum("snij,snj->sni", jac, v[:, :-1]), axis=-1)
    if single:
        return v[0], stretch[0]
    return v, stretch


def center_vectors_at(fmap: MapSpec, pts: np.ndarray, depth: int = CENTER_DEPTH,
                      seed=None) -> np.ndarray:
    """E^c unit vectors at many points at once (pull back along each forward orbit)."""
    pts = np.asarray(pts, dtype=float).reshape(-1, 2)
    orb = forward_orbit(fmap, pts, depth)
    v = np.broadcast_to(_seed(seed, seed_vectors(fmap)[1]), pts.shape).copy()
    if fmap.is_linear:
        jinv = np.linalg.inv(fmap.M)
        for _ in range(depth):
            v = v @ jinv.T
            v /= np.linalg.norm(v, axis=-1, keepdims=True)
        return v
    jinv = np.linalg.inv(fmap.jacobian_array(orb[:, :depth]))
    for k in range(depth - 1, -1, -1):
        v = np.einsum("nij,nj->ni", jinv[:, k], v)
        v /= np.linalg.norm(v, axis=-1, keepdims=True)
    return v


def center_along_past(fmap: MapSpec, past: np.ndarray, depth: int = CENTER_DEPTH,
                      e0: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """E^c and centre stretches along backward orbits (N, D+1, 2).

    E^c at x_0 comes from the forward orbit; it is then pulled back along the
    past, which is the stable direction of the iteration. Returns vectors
    (N, D+1, 2) and stretches (N, D) with stretches[:, k-1] = lambda^c(x_{-k}).
    """
    past = np.asarray(past, dtype=float)
    n, d1, _ = past.shape
    vec = np.empty((n, d1, 2))
    stretch = np.empty((n, d1 - 1))
    v = center_vectors_at(fmap, past[:, 0], depth) if e0 is None else np.broadcast_to(e0, (n, 2)).copy()
    vec[:, 0] = v
    for k in range(1, d1):
        jinv = np.linalg.inv(fmap.jacobian_array(past[:, k]))
        w = np.einsum("nij,nj->ni", jinv, v)
        s = np.linalg.norm(w, axis=-1)
        stretch[:, k - 1] = 1.0 / s
        v = w / s[:, None]
        vec[:, k] = v
    return vec, stretch


# -- public direction API -----------------------------------------------------------

@dataclass(frozen=True)
class SplittingEstimate:
    e_u: Direction
    e_c: Direction
    depth: int
    residual_u: float
    residual_c: float

    def __post_init__(self):
        if projective_distance(self.e_u.theta, self.e_c.theta) <= 1e-6:
            raise ConvergenceError("E^u and E^c are not transverse (angle <= 1e-6)")


def _unstable_with_residual(fmap, w: PastWord, seed):
    if w.depth < 10:
        raise SchemaError("unstable_direction needs a word of depth >= 10")
    vec, _ = unstable_field(fmap, w.points[None], seed)
    shallow, _ = unstable_field(fmap, w.points[None, : w.depth], seed)
    a, b = angles_of(vec[0, 0]), angles_of(shallow[0, 0])
    res = projective_distance(float(a), float(b))
    if res > DIRECTION_RESIDUAL_MAX:
        raise ConvergenceError(
            f"unstable direction not converged: successive depths differ by {res:.2e}")
    return Direction(float(a)), res


def unstable_direction(fmap: MapSpec, w: PastWord, seed=None) -> Direction:
    """E^u(w) by forward push of ``seed`` from x_{-depth}."""
    return _unstable_with_residual(fmap, w, seed)[0]


def _center_with_residual(fmap, p, depth, seed):
    if depth < 10:
        raise SchemaError("center_direction needs depth >= 10")
    pt = as_point(p).as_array()
    v = center_vectors_at(fmap, pt, depth, seed)[0]
    v1 = center_vectors_at(fmap, pt, depth - 1, seed)[0]
    a, b = float(angles_of(v)), float(angles_of(v1))
    res = projective_distance(a, b)
    if res > DIRECTION_RESIDUAL_MAX:
        raise ConvergenceError(
            f"center direction not converged: successive depths differ by {res:.2e}")
    return Direction(a), res


def center_direction(fmap: MapSpec, p, depth: int = CENTER_DEPTH, seed=None) -> Direction:
    """E^c(p) by pulling ``seed`` back along the forward orbit of p."""
    return _center_with_residual(fmap, p, depth, seed)[0]


def splitting_estimate(fmap: MapSpec, w: PastWord, center_depth: int = CENTER_DEPTH) -> SplittingEstimate:
    eu, ru = _unstable_with_residual(fmap, w, None)
    ec, rc = _center_with_residual(fmap, w.base, center_depth, None)
    return SplittingEstimate(eu, ec, w.depth, ru, rc)


# -- cocycles -----------------------------------------------------------------------

def cocycle_norm(fmap: MapSpec, w_or_point, bundle: str, n: int) -> float:
    """lambda^*(n): product of per-step stretches of the bundle along x_0, ..., x_{n-1}."""
    if n < 0:
        raise SchemaError("n must be >= 0")
    if bundle == "u":
        if not isinstance(w_or_point, PastWord):
            raise SchemaError("the unstable cocycle needs a past word")
        return float(np.prod(unstable_forward_stretches(fmap, w_or_point, n)))
    if bundle == "c":
        base = w_or_point.points[0] if isinstance(w_or_point, PastWord) else as_point(w_or_point).as_array()
        orb = forward_orbit(fmap, base, n + CENTER_DEPTH)[0]
        _, st = center_field(fmap, orb)
        return float(np.prod(st[:n]))
    raise SchemaError("bundle must be 'c' or 'u'")


def unstable_forward_stretches(fmap: MapSpec, w: PastWord, n: int) -> np.ndarray:
    """Stretches of E^u at x_0, ..., x_{n-1} (E^u pushed forward from the past)."""
    vec, _ = unstable_field(fmap, w.points[None])
    v = vec[0, 0]
    z = w.points[:1].copy()
    out = np.empty(n)
    for k in range(n):
        u = fmap.jacobian_array(z)[0] @ v
        out[k] = np.linalg.norm(u)
        v = u / out[k]
        z = fmap.evaluate_array(z)
    return out


def past_stretches(fmap: MapSpec, w: PastWord) -> tuple[np.ndarray, np.ndarray]:
    """(lambda^u(x_{-k}), lambda^c(x_{-k})) for k = 1..depth."""
    _, su = unstable_field(fmap, w.points[None])
    _, sc = center_along_past(fmap, w.points[None])
    return su[0], sc[0]


class ExponentEstimate(NamedTuple):
    value: float
    n: int
    stderr: float

    def to_dict(self):
        return {"value": self.value, "n": self.n, "stderr": self.stderr}


def _batch_means(samples: np.ndarray, batches: int = 10) -> ExponentEstimate:
    means = np.array([b.mean() for b in np.array_split(samples, batches)])
    return ExponentEstimate(float(samples.mean()), int(samples.size),
                            float(means.std(ddof=1) / math.sqrt(batches)))


def _orbit_segments(fmap, start, n, seed, restart, extra):
    """Orbit segments covering n useful steps, shape (S, restart + extra + 1, 2).

    Segment 0 starts at ``start``; the others start at Philox-uniform points.
    Restarting keeps the statistics Lebesgue-typical even for maps whose
    floating-point orbits collapse (multiplication by 2 mod 1 exhausts the
    mantissa in ~53 steps).
    """
    count = -(-n // restart)
    starts = np.empty((count, 2))
    starts[0] = as_point(start).as_array()
    starts[1:] = make_rng(seed).random((count - 1, 2))
    return forward_orbit(fmap, starts, restart + extra)


def center_exponent(fmap: MapSpec, start, n: int = 100_000, seed: int = 0,
                    restart: int = 1000) -> ExponentEstimate:
    """Birkhoff average of log lambda^c along orbits; batch-means stderr over 10 batches."""
    if n < 1000:
        raise SchemaError("center_exponent needs n >= 1000")
    orb = _orbit_segments(fmap, start, n, seed, restart, CENTER_DEPTH)
    _, st = center_field(fmap, orb)
    return _batch_means(np.log(st[:, :restart]).ravel()[:n])


def unstable_exponent(fmap: MapSpec, start, n: int = 100_000, seed: int = 0,
                      restart: int = 1000, burn_in: int = 40) -> ExponentEstimate:
    """Birkhoff average of log lambda^u (E^u pushed forward after a burn-in)."""
    if n < 1000:
        raise SchemaError("unstable_exponent needs n >= 1000")
    orb = _orbit_segments(fmap, start, n, seed, restart, burn_in)
    s = orb.shape[0]
    v = np.broadcast_to(seed_vectors(fmap)[0], (s, 2)).copy()
    st = np.empty((s, restart + burn_in))
    for k in range(restart + burn_in):
        u = np.einsum("sij,sj->si", fmap.jacobian_array(orb[:, k]), v)
        st[:, k] = np.linalg.norm(u, axis=-1)
        v = u / st[:, k, None]
    return _batch_means(np.log(st[:, burn_in:]).ravel()[:n])


def mean_log_det(fmap: MapSpec, start, n: int = 100_000, seed: int = 0,
                 restart: int = 1000) -> ExponentEstimate:
    orb = _orbit_segments(fmap, start, n, seed, restart, 0)
    dets = np.abs(np.linalg.det(fmap.jacobian_array(orb[:, :restart])))
    return _batch_means(np.log(dets).ravel()[:n])


# -- Lyapunov norms -------------------------------------------------------------------

@dataclass(frozen=True)
class LyapunovNormParams:
    lam: float
    truncation_k: int = 40
    center_exponent: float | None = field(default=None, compare=False)

    def __post_init__(self):
        if not self.lam > 0:
            raise SchemaError("Lyapunov-norm lambda must be positive")
        if self.truncation_k < 1:
            raise SchemaError("truncation_k must be >= 1")
        if self.center_exponent is not None and not self.lam < self.center_exponent:
            raise SchemaError(
                f"Lyapunov-norm lambda {self.lam} must be below the center exponent "
                f"{self.center_exponent}")


def default_lyapunov_params(fmap: MapSpec, truncation_k: int = 40, fraction: float = 0.5,
                            n: int = 20_000, seed: int = 0) -> LyapunovNormParams:
    est = center_exponent(fmap, (0.1234, 0.5678), n, seed)
    return LyapunovNormParams(fraction * est.value, truncation_k, est.value)


class LyapunovNormValue(NamedTuple):
    value: float
    last_term_fraction: float


def _series(stretch_back: np.ndarray, lam: float, k: int) -> tuple[float, float]:
    """sum_{j=0}^{k} prod_{i<=j} lambda_{-i}^{-2} e^{2 j lam}; stretch_back[i-1] = lambda(x_{-i})."""
    logs = np.concatenate([[0.0], np.cumsum(-2.0 * np.log(stretch_back[:k]) + 2.0 * lam)])
    terms = np.exp(logs)
    total = float(terms.sum())
    return total, float(terms[-1] / total)


def lyapunov_norm(fmap: MapSpec, w: PastWord, v, params: LyapunovNormParams) -> LyapunovNormValue:
    """Truncated Lyapunov norm of a centre vector at the point w."""
    k = params.truncation_k
    if k > w.depth:
        raise SchemaError(f"truncation_k = {k} exceeds the word depth {w.depth}")
    v = v if isinstance(v, TangentVector) else TangentVector(*v)
    vec, st = center_along_past(fmap, w.points[None, : k + 1])
    ang = projective_distance(float(angles_of(vec[0, 0])), v.direction().theta)
    if ang > 1e-6:
        raise SchemaError(f"vector is not in E^c (off by {ang:.2e} rad)")
    total, frac = _series(st[0], params.lam, k)
    if frac > 1e-3:
        raise ConvergenceError(
            f"Lyapunov series not converged: last term is {frac:.2e} of the total")
    return LyapunovNormValue(v.norm() * math.sqrt(total), frac)


def lyapunov_trace(fmap: MapSpec, w: PastWord, n_max: int, params: LyapunovNormParams) -> np.ndarray:
    """lambda-hat^c(n) for n = 0..n_max at the point w (unit centre vector)."""
    k = params.truncation_k
    if k > w.depth:
        raise SchemaError(f"truncation_k = {k} exceeds the word depth {w.depth}")
    fwd = forward_orbit(fmap, w.points[0], n_max + CENTER_DEPTH)[0]
    # Whole orbit x_{-k}, ..., x_{n_max + CENTER_DEPTH} in time order.
    seq = np.concatenate([w.points[k:0:-1], fwd])
    _, st = center_field(fmap, seq)
    logst = np.log(st)
    # stretch at time m (index m + k in seq)
    out = np.empty(n_max + 1)
    fracs = np.empty(n_max + 1)
    cum = np.concatenate([[0.0], np.cumsum(logst)])
    for m in range(n_max + 1):
        back = st[m: m + k][::-1]  # lambda(x_{m-1}), ..., lambda(x_{m-k})
        total, fracs[m] = _series(back, params.lam, k)
        growth = cum[m + k] - cum[k]  # log lambda^c over x_0..x_{m-1}
        out[m] = 0.5 * math.log(total) + growth
    if fracs.max() > 1e-3:
        raise ConvergenceError(
            f"Lyapunov series not converged: last term is {fracs.max():.2e} of the total")
    return np.exp(out - out[0])


def lyapunov_cocycle(fmap: MapSpec, w: PastWord, n: int, params: LyapunovNormParams) -> float:
    return float(lyapunov_trace(fmap, w, n, params)[n])


# -- stopping times -------------------------------------------------------------------

@dataclass(frozen=True)
class StoppingTimeRecord:
    tau: int
    t: int
    epsilon: float
    ell: int
    lyapunov_trace: tuple

    def to_dict(self) -> dict:
        return {"tau": self.tau, "t": self.t, "epsilon": self.epsilon, "ell": self.ell}


def domination_ratio(fmap: MapSpec, w: PastWord, ell: int) -> float:
    """lambda^c_{x_{-ell}}(ell) / lambda^u_{x_{-ell}}(ell) along the past of w."""
    if ell > w.depth:
        raise SchemaError(f"ell = {ell} exceeds the word depth {w.depth}")
    su, sc = past_stretches(fmap, w)
    return float(np.exp(np.sum(np.log(sc[:ell])) - np.sum(np.log(su[:ell]))))


def _first_crossing(fmap, w, params, threshold, cap):
    n = 64
    while True:
        tr = lyapunov_trace(fmap, w, n, params)
        hit = np.nonzero(tr >= threshold)[0]
        if hit.size:
            return int(hit[0]), tr[: hit[0] + 1]
        if n >= cap:
            raise ConvergenceError(f"stopping time exceeds the cap {cap}")
        n = min(2 * n, cap)


def stopping_times(fmap: MapSpec, x_word: PastWord, x_u, epsilon: float, ell: int,
                   params: LyapunovNormParams, cap: int = STOPPING_CAP) -> StoppingTimeRecord:
    """tau = least k with lambda-hat_{x^u}(k) d_ell >= epsilon; t = least n with
    lambda-hat_x(n) >= lambda-hat_{x^u}(tau), where d_ell is the centre/unstable
    ratio accumulated from x_{-ell} to x_0."""
    if not 0.0 < epsilon < 1.0:
        raise SchemaError("epsilon must lie in (0, 1)")
    if ell > x_word.depth:
        raise SchemaError(f"ell = {ell} exceeds the word depth {x_word.depth}")
    u_word = x_u if isinstance(x_u, PastWord) else companion_past(x_word, x_u)
    d_ell = domination_ratio(fmap, x_word, ell)
    tau, trace_u = _first_crossing(fmap, u_word, params, epsilon / d_ell, cap)
    t, _ = _first_crossing(fmap, x_word, params, float(trace_u[tau]), cap)
    return StoppingTimeRecord(tau, t, epsilon, ell, tuple(float(v) for v in trace_u))


# -- distortion -----------------------------------------------------------------------

def holder_distortion_probe(fmap: MapSpec, pair, n: int) -> float:
    """sup_{L <= n} |sum_{l<L} phi(a_l) - phi(b_l)| with phi = log lambda^c.

    Two past words are compared along their backward orbits (points on one
    unstable curve approach each other in the past); two torus points are
    compared along their forward orbits.
    """
    a, b = pair
    if isinstance(a, PastWord) and isinstance(b, PastWord):
        if n > min(a.depth, b.depth):
            raise SchemaError("probe length exceeds the word depth")
        past = np.stack([a.points[: n + 1], b.points[: n + 1]])
        _, st = center_along_past(fmap, past)
        # phi at x_0, x_{-1}, ..., x_{-(n-1)}
        e0 = center_vectors_at(fmap, past[:, 0])
        s0 = np.linalg.norm(np.einsum("nij,nj->ni", fmap.jacobian_array(past[:, 0]), e0), axis=-1)
        phi = np.log(np.concatenate([s0[:, None], st[:, : n - 1]], axis=1))
    else:
        pa, pb = as_point(a).as_array(), as_point(b).as_array()
        phi = []
        for p in (pa, pb):
            orb = forward_orbit(fmap, p, n + CENTER_DEPTH)[0]
            phi.append(np.log(center_field(fmap, orb)[1][:n]))
        phi = np.stack(phi)
    partial = np.cumsum(phi[0] - phi[1])
    return float(np.max(np.abs(partial))) if n > 0 else 0.0

