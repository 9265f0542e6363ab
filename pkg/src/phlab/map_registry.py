"""Torus endomorphisms: linear maps and their bump perturbations.

A perturbed map is ``f = M . phi`` where ``phi`` shears points inside a small
box around ``q`` along the centre axis of a local frame::

    phi(u, c) = (u, c + eps * a * psi1(u / a) * psi2(c / a))

in frame coordinates ``(u, c)`` centred at ``q``. The ``standard`` frame uses the
coordinate axes; the ``eigenframe`` uses unit eigenvectors of the matrix
(unstable first). Every kernel here is vectorised over ``(N, 2)`` arrays; the
scalar wrappers at the bottom take and return :class:`TorusPoint`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import ConvergenceError, NumericalError, SchemaError
from .torus_geometry import (
    Direction,
    TorusPoint,
    as_point,
    projective_distance,
    signed_offset,
    torus_distance_array,
    wrap_array,
)

KINDS = ("linear", "perturbed-linear")
FRAMES = ("standard", "eigenframe")

NEWTON_TOL = 1e-12
NEWTON_MAX_ITER = 50
NEWTON_DAMPING = 0.5


# Bump profiles. Connectors on 1/2 <= |s| <= 1 are quintic Hermite segments
# matching value, slope and curvature at both ends, so both profiles are C^2.

def _h0(s):
    return 1.0 - 10.0 * s**3 + 15.0 * s**4 - 6.0 * s**5


def _dh0(s):
    return -30.0 * s**2 + 60.0 * s**3 - 30.0 * s**4


def _h1(s):
    return s - 6.0 * s**3 + 8.0 * s**4 - 3.0 * s**5


def _dh1(s):
    return 1.0 - 18.0 * s**2 + 32.0 * s**3 - 15.0 * s**4


def psi1(x):
    """Odd C^2 bump: slope 2 on [-1/2, 1/2], psi1(+-1/2) = +-1, zero for |x| >= 1."""
    x = np.asarray(x, dtype=float)
    ax = np.abs(x)
    s = np.clip(2.0 * ax - 1.0, 0.0, 1.0)
    outer = _h0(s) + _h1(s)  # connector slope in s is 2 * (1/2) = 1
    val = np.where(ax <= 0.5, 2.0 * ax, np.where(ax < 1.0, outer, 0.0))
    return np.sign(x) * val


def dpsi1(x):
    x = np.asarray(x, dtype=float)
    ax = np.abs(x)
    s = np.clip(2.0 * ax - 1.0, 0.0, 1.0)
    outer = 2.0 * (_dh0(s) + _dh1(s))
    return np.where(ax <= 0.5, 2.0, np.where(ax < 1.0, outer, 0.0))


def psi2(x):
    """Even C^2 plateau: 1 on [-1/2, 1/2], zero for |x| >= 1."""
    ax = np.abs(np.asarray(x, dtype=float))
    s = np.clip(2.0 * ax - 1.0, 0.0, 1.0)
    return np.where(ax <= 0.5, 1.0, np.where(ax < 1.0, _h0(s), 0.0))


def dpsi2(x):
    x = np.asarray(x, dtype=float)
    ax = np.abs(x)
    s = np.clip(2.0 * ax - 1.0, 0.0, 1.0)
    inner = np.where((ax > 0.5) & (ax < 1.0), 2.0 * _dh0(s), 0.0)
    return np.sign(x) * inner


@dataclass(frozen=True)
class Perturbation:
    q: TorusPoint
    a_box: float
    eps: float
    frame: str = "standard"

    def __post_init__(self):
        object.__setattr__(self, "q", as_point(self.q))
        if not (self.a_box > 0 and math.isfinite(self.a_box)):
            raise SchemaError("perturbation a_box must be a positive real")
        if not (self.eps > 0 and math.isfinite(self.eps)):
            raise SchemaError("perturbation eps must be a positive real")
        if self.frame not in FRAMES:
            raise SchemaError(f"perturbation frame must be one of {FRAMES}, got {self.frame!r}")


@dataclass(frozen=True)
class LinearSplitting:
    """Eigen-data of the matrix: unit eigenvectors and eigenvalue moduli."""

    e_u: np.ndarray
    e_c: np.ndarray
    lam_u: float
    lam_c: float


def _eigen_splitting(m: np.ndarray) -> LinearSplitting | None:
    vals, vecs = np.linalg.eig(m)
    if np.any(np.abs(vals.imag) > 1e-12):
        return None
    vals = vals.real
    vecs = vecs.real
    order = np.argsort(-np.abs(vals))
    lu, lc = np.abs(vals[order])
    if lu - lc < 1e-12:
        return None
    e_u = vecs[:, order[0]] / np.linalg.norm(vecs[:, order[0]])
    e_c = vecs[:, order[1]] / np.linalg.norm(vecs[:, order[1]])
    if e_u[0] < 0 or (e_u[0] == 0 and e_u[1] < 0):
        e_u = -e_u
    if e_u[0] * e_c[1] - e_u[1] * e_c[0] < 0:
        e_c = -e_c
    return LinearSplitting(e_u, e_c, float(lu), float(lc))


@dataclass(frozen=True)
class MapSpec:
    kind: str
    matrix: tuple
    perturbation: Perturbation | None = None
    name: str = field(default="", compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemaError(f"kind must be one of {KINDS}, got {self.kind!r}")
        try:
            mat = tuple(int(v) for v in self.matrix)
        except (TypeError, ValueError) as exc:
            raise SchemaError("matrix must be four integers a, b, c, d") from exc
        if len(mat) != 4 or any(float(a) != float(b) for a, b in zip(mat, self.matrix)):
            raise SchemaError("matrix must be four integers a, b, c, d")
        object.__setattr__(self, "matrix", mat)
        a, b, c, d = mat
        det = a * d - b * c
        if det == 0:
            raise SchemaError("matrix determinant must be nonzero")
        if abs(det) < 2:
            raise SchemaError(
                f"invariant |det| >= 2 violated: det = {det} gives an invertible map, "
                "not a non-invertible endomorphism")
        if self.kind == "linear" and self.perturbation is not None:
            raise SchemaError("kind 'linear' takes no perturbation")
        if self.kind == "perturbed-linear":
            if self.perturbation is None:
                raise SchemaError("kind 'perturbed-linear' requires a perturbation")
            if self.perturbation.frame == "eigenframe" and self.splitting is None:
                raise SchemaError("eigenframe needs real eigenvalues of distinct modulus")
            radius = self.box_radius
            tau = self.branch_separation
            if not radius < tau / 2:
                raise SchemaError(
                    f"perturbation support (radius {radius:.4g}) must lie in a ball of "
                    f"radius below half the branch separation tau/2 = {tau / 2:.4g}")

    # -- derived data -------------------------------------------------------

    @cached_property
    def M(self) -> np.ndarray:
        a, b, c, d = self.matrix
        return np.array([[a, b], [c, d]], dtype=float)

    @cached_property
    def Minv(self) -> np.ndarray:
        return np.linalg.inv(self.M)

    @property
    def det(self) -> int:
        a, b, c, d = self.matrix
        return a * d - b * c

    @property
    def degree(self) -> int:
        return abs(self.det)

    @cached_property
    def splitting(self) -> LinearSplitting | None:
        return _eigen_splitting(self.M)

    @cached_property
    def coset_reps(self) -> np.ndarray:
        """Offsets c_i in [0,1)^2 with preimages of p equal to Minv p + c_i (mod 1)."""
        n = self.degree
        reps = {}
        for k1 in range(n):
            for k2 in range(n):
                c = wrap_array(self.Minv @ np.array([k1, k2], dtype=float))
                c = np.where(np.abs(c - 1.0) < 1e-12, 0.0, c)
                reps.setdefault((round(c[0], 9), round(c[1], 9)), c)
        if len(reps) != n:
            raise NumericalError("failed to enumerate inverse-branch offsets")
        return np.array([reps[k] for k in sorted(reps)])

    @cached_property
    def branch_separation(self) -> float:
        """Minimal torus distance between distinct preimages of a point (linear part)."""
        reps = self.coset_reps
        return float(np.min(torus_distance_array(reps[1:], 0.0 * reps[1:])))

    @cached_property
    def frame(self) -> np.ndarray:
        """Columns (e_u, e_c) of the perturbation frame."""
        if self.perturbation is None or self.perturbation.frame == "standard":
            return np.eye(2)
        s = self.splitting
        return np.column_stack([s.e_u, s.e_c])

    @cached_property
    def frame_inv(self) -> np.ndarray:
        return np.linalg.inv(self.frame)

    @property
    def box_radius(self) -> float:
        """Radius of the smallest ball around q containing the support box."""
        if self.perturbation is None:
            return 0.0
        a = self.perturbation.a_box
        corners = self.frame @ np.array([[a, a, -a, -a], [a, -a, a, -a]])
        return float(np.max(np.hypot(corners[0], corners[1])))

    @property
    def is_linear(self) -> bool:
        return self.perturbation is None

    # -- vectorised kernels -------------------------------------------------

    def _local(self, z):
        """Frame coordinates (u, c) of z relative to q, plus the in-box mask."""
        p = self.perturbation
        d = signed_offset(z - np.array([p.q.x, p.q.y]))
        uc = d @ self.frame_inv.T
        a = p.a_box
        mask = (np.abs(uc[..., 0]) < a) & (np.abs(uc[..., 1]) < a)
        return uc, mask

    def displacement(self, z: np.ndarray) -> np.ndarray:
        """phi(z) - z for an (N, 2) array (zero for linear maps)."""
        z = np.asarray(z, dtype=float)
        if self.perturbation is None:
            return np.zeros_like(z)
        p = self.perturbation
        uc, mask = self._local(z)
        a = p.a_box
        delta = np.zeros(z.shape[:-1])
        if np.any(mask):
            u = uc[mask, 0] / a
            c = uc[mask, 1] / a
            delta[mask] = p.eps * a * psi1(u) * psi2(c)
        return delta[..., None] * self.frame[:, 1]

    def lift(self, z: np.ndarray) -> np.ndarray:
        """The lifted map on R^2: M (z + displacement(z)), without reduction."""
        z = np.asarray(z, dtype=float)
        return (z + self.displacement(z)) @ self.M.T

    def evaluate_array(self, z: np.ndarray) -> np.ndarray:
        return wrap_array(self.lift(z))

    def jacobian_array(self, z: np.ndarray) -> np.ndarray:
        """Jacobians (N, 2, 2) of the lifted map."""
        z = np.asarray(z, dtype=float)
        shape = z.shape[:-1]
        jac = np.broadcast_to(self.M, shape + (2, 2)).copy()
        if self.perturbation is None:
            return jac
        p = self.perturbation
        uc, mask = self._local(z)
        if np.any(mask):
            a = p.a_box
            u = uc[mask, 0] / a
            c = uc[mask, 1] / a
            du = p.eps * dpsi1(u) * psi2(c)
            dc = p.eps * psi1(u) * dpsi2(c)
            grad = np.stack([du, dc], axis=-1) @ self.frame_inv  # physical gradient
            ec = self.frame[:, 1]
            dphi = np.eye(2) + ec[None, :, None] * grad[:, None, :]
            jac[mask] = self.M @ dphi
        return jac

    def newton_preimage(self, p: np.ndarray, z0: np.ndarray, tol: float = NEWTON_TOL,
                        max_iter: int = NEWTON_MAX_ITER) -> np.ndarray:
        """Solve f(z) = p (mod 1) from seeds z0; arrays of shape (N, 2)."""
        p = np.asarray(p, dtype=float)
        z = np.array(z0, dtype=float)
        res = signed_offset(self.lift(z) - p)
        if self.perturbation is None:
            z = z - res @ self.Minv.T
            return wrap_array(z)
        norm = np.hypot(res[:, 0], res[:, 1])
        active = norm > 0.01 * tol
        for _ in range(max_iter):
            if not np.any(active):
                break
            idx = np.nonzero(active)[0]
            jac = self.jacobian_array(z[idx])
            step = np.linalg.solve(jac, res[idx][..., None])[..., 0]
            trial = z[idx] - step
            tres = signed_offset(self.lift(trial) - p[idx])
            tnorm = np.hypot(tres[:, 0], tres[:, 1])
            worse = tnorm > norm[idx]
            if np.any(worse):
                trial[worse] = z[idx][worse] - NEWTON_DAMPING * step[worse]
                tres[worse] = signed_offset(self.lift(trial[worse]) - p[idx][worse])
                tnorm[worse] = np.hypot(tres[worse, 0], tres[worse, 1])
            stalled = tnorm >= norm[idx]
            z[idx] = np.where(stalled[:, None], z[idx], trial)
            res[idx] = np.where(stalled[:, None], res[idx], tres)
            norm[idx] = np.minimum(norm[idx], tnorm)
            active[idx] = (norm[idx] > 0.01 * tol) & ~stalled
        bad = np.nonzero(norm > tol)[0]
        if bad.size:
            err = ConvergenceError(
                f"Newton failed to reach residual {tol:g} for {bad.size} point(s); "
                f"first offending index {int(bad[0])}, residual {norm[bad[0]]:.3e}")
            err.indices = bad
            raise err
        return wrap_array(z)

    def lift_inverse(self, w: np.ndarray, tol: float = NEWTON_TOL,
                     max_iter: int = NEWTON_MAX_ITER) -> np.ndarray:
        """Inverse of the lifted map on R^2 (a diffeomorphism), without reduction.

        Pulling a lifted curve back with this map needs no branch choices.
        """
        w = np.asarray(w, dtype=float).reshape(-1, 2)
        z = w @ self.Minv.T
        if self.perturbation is None:
            return z
        for _ in range(max_iter):
            res = self.lift(z) - w
            err = np.abs(res).max(axis=-1)
            bad = err > tol * np.maximum(1.0, np.abs(w).max(axis=-1)) * 0.01
            if not np.any(bad):
                return z
            step = np.linalg.solve(self.jacobian_array(z[bad]), res[bad][..., None])[..., 0]
            z[bad] -= step
        res = np.abs(self.lift(z) - w).max()
        if res > tol * max(1.0, float(np.abs(w).max())):
            raise ConvergenceError(f"lifted inverse did not converge (residual {res:.3e})")
        return z

    def preimages(self, p: np.ndarray, branch: np.ndarray) -> np.ndarray:
        """Inverse branch number ``branch[i]`` applied to ``p[i]``."""
        p = np.asarray(p, dtype=float).reshape(-1, 2)
        branch = np.broadcast_to(np.asarray(branch, dtype=int), p.shape[:1])
        seed = wrap_array(p @ self.Minv.T + self.coset_reps[branch])
        if self.perturbation is None:
            return seed
        try:
            return self.newton_preimage(p, seed)
        except ConvergenceError as exc:
            i = int(exc.indices[0])
            raise ConvergenceError(
                f"inverse branch {int(branch[i])} did not converge at point {p[i].tolist()}"
            ) from exc

    def all_preimages(self, p: np.ndarray) -> np.ndarray:
        """All preimages, shape (N, degree, 2), in branch order."""
        p = np.asarray(p, dtype=float).reshape(-1, 2)
        n, d = p.shape[0], self.degree
        rep = np.repeat(p, d, axis=0)
        br = np.tile(np.arange(d), n)
        return self.preimages(rep, br).reshape(n, d, 2)

    def preimage_near(self, p: np.ndarray, target: np.ndarray) -> np.ndarray:
        """The preimage of each p[i] closest to target[i] (shadowing pull-back)."""
        p = np.asarray(p, dtype=float).reshape(-1, 2)
        target = np.asarray(target, dtype=float).reshape(-1, 2)
        seed = target + signed_offset(p - self.lift(target)) @ self.Minv.T
        if self.perturbation is None:
            return wrap_array(seed)
        return self.newton_preimage(p, seed)

    # -- serialisation --------------------------------------------------------

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "matrix": list(self.matrix)}
        if self.perturbation is not None:
            p = self.perturbation
            out["perturbation"] = {"q": [p.q.x, p.q.y], "a_box": p.a_box,
                                   "eps": p.eps, "frame": p.frame}
        return out

    @classmethod
    def from_dict(cls, d: dict) -> MapSpec:
        if not isinstance(d, dict):
            raise SchemaError("map config must be an object")
        unknown = set(d) - {"kind", "matrix", "perturbation", "name"}
        if unknown:
            raise SchemaError(f"unknown map fields: {sorted(unknown)}")
        if "kind" not in d or "matrix" not in d:
            raise SchemaError("map config needs 'kind' and 'matrix'")
        pert = d.get("perturbation")
        if pert is not None:
            try:
                qx, qy = pert["q"]
                pert = Perturbation(TorusPoint(float(qx), float(qy)), float(pert["a_box"]),
                                    float(pert["eps"]), pert.get("frame", "standard"))
            except (KeyError, TypeError, ValueError) as exc:
                if isinstance(exc, SchemaError):
                    raise
                raise SchemaError(f"malformed perturbation: {exc}") from exc
        return cls(d["kind"], tuple(d["matrix"]), pert, name=d.get("name", ""))


# -- the maps under study -------------------------------------------------------

MATRIX_A = (3, 0, 0, 2)
MATRIX_B = (3, 1, 1, 2)
DEFAULT_EPS = 0.01
DEFAULT_A_BOX = 0.1 / math.sqrt(2.0)  # box fits in the ball of radius 0.1 around q


def map_a() -> MapSpec:
    return MapSpec("linear", MATRIX_A, name="f_A")


def map_b() -> MapSpec:
    return MapSpec("linear", MATRIX_B, name="f_B")


def example3_map(eps: float = DEFAULT_EPS, a_box: float = DEFAULT_A_BOX) -> MapSpec:
    """f_A composed with a vertical shear around q = (2/3, 1/2), a preimage of (0, 0)."""
    pert = Perturbation(TorusPoint(2.0 / 3.0, 0.5), a_box, eps, "standard")
    return MapSpec("perturbed-linear", MATRIX_A, pert, name="example3")


def example4_map(eps: float = DEFAULT_EPS, a_box: float = DEFAULT_A_BOX) -> MapSpec:
    """f_B composed with a shear along E^c_B around q = (2/5, 4/5), a preimage of (0, 0)."""
    pert = Perturbation(TorusPoint(0.4, 0.8), a_box, eps, "eigenframe")
    return MapSpec("perturbed-linear", MATRIX_B, pert, name="example4")


NAMED_MAPS = {"f_A": map_a, "f_B": map_b, "example3": example3_map, "example4": example4_map}


def named_map(name: str) -> MapSpec:
    try:
        return NAMED_MAPS[name]()
    except KeyError:
        raise SchemaError(f"unknown map name {name!r}; known: {sorted(NAMED_MAPS)}") from None


# -- scalar API -------------------------------------------------------------------

def _pt_array(p) -> np.ndarray:
    p = as_point(p)
    return np.array([[p.x, p.y]])


def evaluate(fmap: MapSpec, p) -> TorusPoint:
    z = fmap.evaluate_array(_pt_array(p))[0]
    return TorusPoint(z[0], z[1])


def derivative(fmap: MapSpec, p) -> np.ndarray:
    jac = fmap.jacobian_array(_pt_array(p))[0]
    if abs(np.linalg.det(jac)) < 1e-8:
        raise NumericalError(
            f"derivative is singular at {as_point(p)}; the perturbation is too large "
            "for a local diffeomorphism")
    return jac


def inverse_branches(fmap: MapSpec, p) -> list[TorusPoint]:
    pts = fmap.all_preimages(_pt_array(p))[0]
    return [TorusPoint(x, y) for x, y in pts]


def branch_separation_on_grid(fmap: MapSpec, grid_n: int) -> float:
    """Empirical injectivity separation: min distance between distinct preimages."""
    g = (np.arange(grid_n) + 0.5) / grid_n
    pts = np.stack(np.meshgrid(g, g, indexing="ij"), axis=-1).reshape(-1, 2)
    pre = fmap.all_preimages(pts)
    d = fmap.degree
    best = math.inf
    for i in range(d):
        for j in range(i + 1, d):
            best = min(best, float(np.min(torus_distance_array(pre[:, i], pre[:, j]))))
    return best


# -- cone certification -------------------------------------------------------------

@dataclass(frozen=True)
class ConeField:
    """The constant cone of directions within ``half_width`` of ``center``."""

    center: Direction
    half_width: float

    def __post_init__(self):
        if not 0.0 < self.half_width < math.pi / 2:
            raise SchemaError("cone half_width must lie in (0, pi/2)")

    @classmethod
    def from_slopes(cls, lo: float, hi: float) -> ConeField:
        t1, t2 = math.atan(lo), math.atan(hi)
        return cls(Direction(0.5 * (t1 + t2)), 0.5 * abs(t2 - t1))

    def contains(self, d: Direction) -> bool:
        return projective_distance(d.theta, self.center.theta) <= self.half_width


@dataclass(frozen=True)
class ConeCertificate:
    ell: int
    sigma: float
    grid_n: int
    margin: float
    verified: bool
    tau: float = math.nan
    worst_cell: tuple | None = None

    def to_dict(self) -> dict:
        return {"ell": self.ell, "sigma": self.sigma, "grid_n": self.grid_n,
                "margin": self.margin, "verified": self.verified, "tau": self.tau,
                "worst_cell": list(self.worst_cell) if self.worst_cell else None}


def certify_cones(fmap: MapSpec, cone: ConeField, ell: int = 1, grid_n: int = 64,
                  interior: int = 7) -> ConeCertificate:
    """Sample Df^ell on cell centres of a grid against boundary and interior cone directions."""
    if grid_n < 16:
        raise SchemaError("certify_cones needs grid_n >= 16")
    if ell < 1:
        raise SchemaError("ell must be a positive integer")
    g = (np.arange(grid_n) + 0.5) / grid_n
    pts = np.stack(np.meshgrid(g, g, indexing="ij"), axis=-1).reshape(-1, 2)
    offsets = np.concatenate([[-1.0, 1.0], np.linspace(-1.0, 1.0, interior + 2)[1:-1]])
    thetas = cone.center.theta + cone.half_width * offsets
    vecs = np.stack([np.cos(thetas), np.sin(thetas)], axis=-1)  # (K, 2)

    prod = np.broadcast_to(np.eye(2), (pts.shape[0], 2, 2)).copy()
    z = pts.copy()
    for _ in range(ell):
        prod = fmap.jacobian_array(z) @ prod
        z = fmap.evaluate_array(z)
    img = np.einsum("nij,kj->nki", prod, vecs)  # (N, K, 2)
    stretch = np.hypot(img[..., 0], img[..., 1])
    ang = np.arctan2(img[..., 1], img[..., 0])
    d = np.abs(ang - cone.center.theta) % math.pi
    d = np.minimum(d, math.pi - d)
    clearance = cone.half_width - d

    per_point = np.minimum(clearance.min(axis=1), stretch.min(axis=1) - 1.0)
    worst = int(np.argmin(per_point))
    sigma = float(stretch.min())
    margin = float(clearance.min())
    verified = margin > 0.0 and sigma > 1.0
    tau = branch_separation_on_grid(fmap, min(grid_n, 32))
    cell = None if verified else (worst // grid_n, worst % grid_n)
    return ConeCertificate(ell, sigma, grid_n, margin, verified, tau, cell)
