"""Empirical u-Gibbs estimation on grid histograms.

Normalised arclength on an unstable arc is pushed forward; the mass of every
segment is split over grid cells by exact intersection length. The Cesàro
estimate averages the per-iterate histograms over the second half of the run
(iterates burn_in+1 .. N), which discards the transient of the seed arc.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .cocycle_splitting import center_vectors_at
from .curves import DEFAULT_BUDGET, grid_lengths, push_polyline, simplify_polyline
from .errors import BudgetExceeded, SchemaError
from .leaf_dynamics import DEFAULT_RESOLUTION, UnstableArc
from .map_registry import MapSpec

BINARY_MAGIC = b"UGIBBSv1"
NORMALIZATION_TOL = 1e-12
STRAIGHT_TOL = 1e-12  # linear maps: merge vertices this close to a chord before pushing


@dataclass
class GridHistogram:
    """Masses on half-open cells [i/n, (i+1)/n) x [j/n, (j+1)/n), indexed masses[i, j]."""

    grid_n: int
    masses: np.ndarray

    def __post_init__(self):
        self.masses = np.asarray(self.masses, dtype=float)
        if self.masses.shape != (self.grid_n, self.grid_n):
            raise SchemaError(f"masses must have shape ({self.grid_n}, {self.grid_n})")
        if np.any(self.masses < 0):
            raise SchemaError("masses must be non-negative")
        if abs(self.masses.sum() - 1.0) > NORMALIZATION_TOL:
            raise SchemaError(f"masses sum to {self.masses.sum():.15g}, not 1")

    @classmethod
    def from_weights(cls, weights: np.ndarray) -> GridHistogram:
        w = np.asarray(weights, dtype=float)
        total = w.sum()
        if not total > 0:
            raise SchemaError("cannot normalise an empty histogram")
        return cls(w.shape[0], w / total)

    @classmethod
    def uniform(cls, n: int) -> GridHistogram:
        return cls(n, np.full((n, n), 1.0 / (n * n)))

    def row_masses(self) -> np.ndarray:
        """Mass per horizontal row j (summed over i)."""
        return self.masses.sum(axis=0)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["i", "j", "mass"])
            for i in range(self.grid_n):
                for j in range(self.grid_n):
                    wr.writerow([i, j, f"{self.masses[i, j]:.17g}"])

    def to_bytes(self) -> bytes:
        """8-byte magic, then the grid as row-major little-endian float64 (n from the length)."""
        return BINARY_MAGIC + self.masses.astype("<f8").tobytes(order="C")

    @classmethod
    def from_bytes(cls, data: bytes) -> GridHistogram:
        if data[:8] != BINARY_MAGIC:
            raise SchemaError("not a UGIBBSv1 histogram")
        count, rem = divmod(len(data) - 8, 8)
        n = math.isqrt(count)
        if rem or n * n != count or n == 0:
            raise SchemaError(f"UGIBBSv1 payload of {len(data) - 8} bytes is not a square float64 grid")
        masses = np.frombuffer(data[8:], dtype="<f8").reshape(n, n)
        return cls(n, masses.astype(float))

    def write_binary(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def read_binary(cls, path) -> GridHistogram:
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def tv_distance(h1: GridHistogram, h2: GridHistogram) -> float:
    if h1.grid_n != h2.grid_n:
        raise SchemaError(f"grid sizes differ: {h1.grid_n} vs {h2.grid_n}")
    return float(0.5 * np.abs(h1.masses - h2.masses).sum())


def empirical_center_exponent(fmap: MapSpec, h: GridHistogram) -> float:
    """Sum of masses times log |Df e^c| at the cell centres."""
    n = h.grid_n
    c = (np.arange(n) + 0.5) / n
    pts = np.stack(np.meshgrid(c, c, indexing="ij"), axis=-1).reshape(-1, 2)
    if fmap.is_linear:
        return float(np.log(np.linalg.norm(fmap.M @ center_vectors_at(fmap, pts[:1])[0])))
    e = center_vectors_at(fmap, pts)
    stretch = np.linalg.norm(np.einsum("nij,nj->ni", fmap.jacobian_array(pts), e), axis=1)
    return float(np.sum(h.masses.reshape(-1) * np.log(stretch)))


def product_measure_reference(nu, grid_n: int) -> GridHistogram:
    """Lebesgue in x times nu in y.

    ``nu`` is "uniform", a list of atom positions (equal weights), or a list
    of (position, weight) pairs.
    """
    if isinstance(nu, str):
        if nu != "uniform":
            raise SchemaError(f"unknown reference measure {nu!r}")
        return GridHistogram.uniform(grid_n)
    atoms = [(a, 1.0) if np.isscalar(a) else (float(a[0]), float(a[1])) for a in nu]
    if not atoms:
        raise SchemaError("at least one atom is required")
    rows = np.zeros(grid_n)
    for y, wt in atoms:
        if not 0.0 <= y < 1.0:
            raise SchemaError(f"atom {y} outside [0, 1)")
        rows[int(np.floor(y * grid_n))] += wt
    rows /= rows.sum()
    return GridHistogram(grid_n, np.broadcast_to(rows / grid_n, (grid_n, grid_n)).copy())


@dataclass
class MeasureReport:
    histogram: GridHistogram  # Cesàro average, or the last iterate when cesaro is off
    last_histogram: GridHistogram
    tv_to_uniform: float
    center_exponent: float
    iterations: int
    burn_in: int
    cesaro: bool
    final_points: int
    tv_trace: tuple = field(default=())  # tv to uniform of each per-iterate histogram

    def to_dict(self) -> dict:
        return {"grid_n": self.histogram.grid_n, "tv_to_uniform": self.tv_to_uniform,
                "last_tv_to_uniform": tv_distance(self.last_histogram, GridHistogram.uniform(self.histogram.grid_n)),
                "center_exponent": self.center_exponent, "iterations": self.iterations,
                "burn_in": self.burn_in, "cesaro": self.cesaro, "final_points": self.final_points,
                "tv_trace": list(self.tv_trace)}


def push_arc_measure(fmap: MapSpec, arc, iterations: int, grid_n: int = 32, cesaro: bool = True,
                     burn_in: int | None = None, max_seg: float = DEFAULT_RESOLUTION,
                     budget: int = DEFAULT_BUDGET) -> MeasureReport:
    """Histogram of normalised arclength on f^N(arc), or its Cesàro average.

    The average runs over iterates burn_in+1 .. N; burn_in defaults to N // 2.
    """
    if iterations < 1 or grid_n < 1:
        raise SchemaError("iterations and grid_n must be >= 1")
    burn_in = iterations // 2 if burn_in is None else int(burn_in)
    if not 0 <= burn_in < iterations:
        raise SchemaError("burn_in must lie in [0, iterations)")
    pts = arc.points if isinstance(arc, UnstableArc) else np.asarray(arc, dtype=float)
    if fmap.is_linear:
        pts = simplify_polyline(pts, STRAIGHT_TOL)
    uniform = GridHistogram.uniform(grid_n)
    acc = np.zeros((grid_n, grid_n))
    last = None
    trace = []

    def report(k, h_avg, h_last):
        return MeasureReport(h_avg, h_last, tv_distance(h_avg, uniform), empirical_center_exponent(fmap, h_avg),
                             k, burn_in, cesaro, len(pts), tuple(trace))

    for k in range(1, iterations + 1):
        try:
            pts = push_polyline(fmap, pts, max_seg, budget)
        except BudgetExceeded as exc:
            partial = None
            if last is not None:
                avg = GridHistogram.from_weights(acc) if acc.sum() > 0 else last
                partial = report(k - 1, avg if cesaro else last, last)
            raise BudgetExceeded(str(exc), partial=partial) from exc
        last = GridHistogram.from_weights(grid_lengths(pts, grid_n))
        trace.append(tv_distance(last, uniform))
        if k > burn_in:
            acc += last.masses
    avg = GridHistogram.from_weights(acc) if cesaro else last
    return report(iterations, avg, last)
