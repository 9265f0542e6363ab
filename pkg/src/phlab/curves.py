"""Polyline machinery shared by leaf construction, coverage probes and measures.

Curves are stored as lifted polylines in R^2 (no wrapping between vertices),
so straight pieces stay straight under the affine part of the dynamics and
segment geometry is unambiguous.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import BudgetExceeded
from .map_registry import MapSpec
from .torus_geometry import signed_offset

DEFAULT_BUDGET = 10_000_000
FOLD_THRESHOLD = 64.0
_SPLIT_LEN = 0.5
SIMPLIFY_TOL = 1e-7


def arclength(pts: np.ndarray) -> np.ndarray:
    seg = np.hypot(*np.diff(pts, axis=0).T)
    return np.concatenate([[0.0], np.cumsum(seg)])


def _split_long(pts: np.ndarray, max_len: float) -> tuple[np.ndarray, np.ndarray]:
    """Insert equally spaced vertices so no segment exceeds max_len.

    Returns the new polyline and a mask of the inserted vertices.
    """
    seg = np.hypot(*np.diff(pts, axis=0).T)
    pieces = np.maximum(1, np.ceil(seg / max_len).astype(np.int64))
    if np.all(pieces == 1):
        return pts, np.zeros(len(pts), bool)
    starts = np.repeat(pts[:-1], pieces, axis=0)
    deltas = np.repeat(np.diff(pts, axis=0) / pieces[:, None], pieces, axis=0)
    offs = np.arange(pieces.sum()) - np.repeat(np.cumsum(pieces) - pieces, pieces)
    out = np.concatenate([starts + offs[:, None] * deltas, pts[-1:]])
    inserted = np.concatenate([offs > 0, [False]])
    return out, inserted


def _near_box(fmap: MapSpec, a: np.ndarray, b: np.ndarray, margin: float) -> np.ndarray:
    """Segments (length <= 1/2) passing within box radius + margin of the nearest copy of q."""
    p = fmap.perturbation
    q = np.array([p.q.x, p.q.y])
    mid = 0.5 * (a + b)
    qc = mid + signed_offset(q - mid)
    d = b - a
    len2 = np.einsum("ij,ij->i", d, d)
    t = np.clip(np.einsum("ij,ij->i", qc - a, d) / np.where(len2 > 0, len2, 1.0), 0.0, 1.0)
    closest = a + t[:, None] * d
    return np.hypot(*(closest - qc).T) <= fmap.box_radius + margin


def _drop_collinear(pts: np.ndarray, keep: np.ndarray, tol: float, passes: int = 4) -> np.ndarray:
    """Remove vertices lying within ``tol`` of the chord of their neighbours.

    Each pass only removes vertices of one index parity, so no two removed
    vertices are adjacent and each removal moves the curve by at most ``tol``.
    """
    for k in range(passes):
        if len(pts) < 3:
            break
        a, m, b = pts[:-2], pts[1:-1], pts[2:]
        chord = b - a
        cl = np.hypot(*chord.T)
        dev = np.abs(chord[:, 0] * (m - a)[:, 1] - chord[:, 1] * (m - a)[:, 0]) / np.where(cl > 0, cl, 1.0)
        drop = (dev < tol) & ~keep[1:-1] & (np.arange(1, len(pts) - 1) % 2 == k % 2)
        if not np.any(drop) and k > 0:
            break
        mask = np.concatenate([[True], ~drop, [True]])
        pts, keep = pts[mask], keep[mask]
    return pts


def simplify_polyline(pts: np.ndarray, tol: float, max_passes: int = 128) -> np.ndarray:
    """Drop vertices within ``tol`` of their neighbours' chord until none is left to drop.

    Deviations can accumulate over passes, so this is meant for exactly
    straight stretches (tol near rounding level); endpoints are kept.
    """
    pts = np.asarray(pts, dtype=float)
    for _ in range(max_passes // 2):
        n = len(pts)
        keep = np.zeros(n, bool)
        keep[[0, -1]] = True
        pts = _drop_collinear(pts, keep, tol, passes=2)
        if len(pts) == n:
            break
    return pts


def push_polyline(fmap: MapSpec, pts: np.ndarray, max_seg: float = 1e-3,
                  budget: int = DEFAULT_BUDGET, protect: np.ndarray | None = None,
                  simplify_tol: float = SIMPLIFY_TOL) -> np.ndarray:
    """Image of a lifted polyline under the lifted map, refined where the map is nonlinear.

    Affine regions map straight segments to straight segments exactly, so only
    segments that pass near the perturbation box are subdivided (so that their
    images are at most ``max_seg`` long). Afterwards vertices within
    ``simplify_tol`` of the chord of their neighbours are merged. ``protect``
    marks vertices that must survive; endpoints always do.
    """
    pts = np.asarray(pts, dtype=float)
    if fmap.is_linear:
        return fmap.lift(pts)
    keep = np.zeros(len(pts), bool) if protect is None else np.asarray(protect, bool).copy()
    keep[[0, -1]] = True
    work, inserted = _split_long(pts, _SPLIT_LEN)
    keep_w = np.zeros(len(work), bool)
    keep_w[~inserted] = keep
    near = _near_box(fmap, work[:-1], work[1:], 2 * max_seg)
    if np.any(near):
        lip = float(np.linalg.norm(fmap.M, 2)) * 1.25
        seg = np.hypot(*np.diff(work, axis=0).T)
        pieces = np.where(near, np.maximum(1, np.ceil(seg * lip / max_seg)), 1).astype(np.int64)
        total = int(pieces.sum()) + 1
        if total > budget:
            raise BudgetExceeded(f"polyline refinement needs {total} points (budget {budget})")
        starts = np.repeat(work[:-1], pieces, axis=0)
        deltas = np.repeat(np.diff(work, axis=0) / pieces[:, None], pieces, axis=0)
        offs = np.arange(pieces.sum()) - np.repeat(np.cumsum(pieces) - pieces, pieces)
        new = np.concatenate([starts + offs[:, None] * deltas, work[-1:]])
        keep_new = np.zeros(len(new), bool)
        keep_new[np.nonzero(np.concatenate([offs == 0, [True]]))[0]] = keep_w
        work, keep_w = new, keep_new
    img = fmap.lift(work)
    out = _drop_collinear(img, keep_w, simplify_tol)
    if len(out) > budget:
        raise BudgetExceeded(f"polyline has {len(out)} points (budget {budget})")
    return out


def refine_uniform(fmap: MapSpec, pts: np.ndarray, max_seg: float, max_turn: float | None = None,
                   max_rounds: int = 60, min_seg: float = 1e-9) -> np.ndarray:
    """Subdivide (at the current level) until every image segment is <= max_seg.

    Segments are cut into power-of-two pieces, so halving ``max_seg`` bisects
    every segment of the previous result. With ``max_turn`` set, segments next to an image vertex where consecutive
    chords turn by more than ``max_turn`` radians are halved as well.
    """
    pts = np.asarray(pts, dtype=float)
    for _ in range(max_rounds):
        img = fmap.lift(pts)
        d = np.diff(img, axis=0)
        seg = np.hypot(d[:, 0], d[:, 1])
        ratio = np.maximum(seg / max_seg, 1.0)
        pieces = np.exp2(np.ceil(np.log2(ratio) - 1e-12)).astype(np.int64)
        if max_turn is not None and len(seg) > 1:
            ang = np.arctan2(d[:, 1], d[:, 0])
            turn = np.abs((np.diff(ang) + np.pi) % (2 * np.pi) - np.pi)
            sharp = turn > max_turn
            halve = np.zeros(len(seg), bool)
            halve[:-1] |= sharp
            halve[1:] |= sharp
            halve &= seg > min_seg
            pieces = np.where(halve, np.maximum(pieces, 2), pieces)
        if np.all(pieces == 1):
            return pts
        starts = np.repeat(pts[:-1], pieces, axis=0)
        deltas = np.repeat(np.diff(pts, axis=0) / pieces[:, None], pieces, axis=0)
        offs = np.arange(pieces.sum()) - np.repeat(np.cumsum(pieces) - pieces, pieces)
        pts = np.concatenate([starts + offs[:, None] * deltas, pts[-1:]])
    return pts


# -- exact segment / grid-cell intersection lengths ----------------------------------

def _crossing_lengths(a: np.ndarray, b: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Cell index (i * n + j) and length for every piece of segments a->b cut by the grid."""
    d = b - a
    seg_len = np.hypot(d[:, 0], d[:, 1])
    ts = [np.zeros(len(a)), np.ones(len(a))]
    owners = [np.arange(len(a)), np.arange(len(a))]
    for ax in (0, 1):
        lo = np.minimum(a[:, ax], b[:, ax]) * n
        hi = np.maximum(a[:, ax], b[:, ax]) * n
        kmin = np.floor(lo).astype(np.int64) + 1
        kmax = np.ceil(hi).astype(np.int64) - 1
        cnt = np.maximum(kmax - kmin + 1, 0)
        if cnt.sum() == 0:
            continue
        own = np.repeat(np.arange(len(a)), cnt)
        k = np.repeat(kmin, cnt) + (np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt))
        t = (k / n - a[own, ax]) / d[own, ax]
        ts.append(t)
        owners.append(own)
    t = np.concatenate(ts)
    own = np.concatenate(owners)
    order = np.lexsort((t, own))
    t, own = t[order], own[order]
    same = own[1:] == own[:-1]
    t0, t1, o = t[:-1][same], t[1:][same], own[:-1][same]
    dt = t1 - t0
    pos = dt > 0
    t0, t1, o, dt = t0[pos], t1[pos], o[pos], dt[pos]
    mid = a[o] + (0.5 * (t0 + t1))[:, None] * d[o]
    cell = np.floor(mid * n).astype(np.int64) % n
    return cell[:, 0] * n + cell[:, 1], dt * seg_len[o]


def _fold_lengths(p: np.ndarray, q: np.ndarray, n: int) -> np.ndarray:
    """Exact cell lengths of one long straight segment, returned as an (n, n) array.

    The segment is cut into complete unit passes across the torus (along the
    dominant axis) plus two partial ends. Within one column of width 1/n a pass
    meets at most two rows, and the split between them is piecewise linear in
    the entry height; summing over passes therefore only needs counts and sums
    of entry heights over 2n intervals, obtained from one sorted array.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    d = q - p
    swap = abs(d[1]) > abs(d[0])
    if swap:
        p, q, d = p[::-1].copy(), q[::-1].copy(), d[::-1].copy()
    if d[0] < 0:
        p, q, d = q, p, -d
    reflect = d[1] < 0
    if reflect:
        p = np.array([p[0], -p[1]])
        q = np.array([q[0], -q[1]])
        d = q - p
    s = d[1] / d[0]
    out = np.zeros((n, n))
    x1 = math.ceil(p[0])
    x2 = math.floor(q[0])
    if x2 - x1 < 1:
        ends = [(p, q)]
    else:
        ends = [(p, np.array([x1, p[1] + s * (x1 - p[0])])),
                (np.array([x2, p[1] + s * (x2 - p[0])]), q)]
    for a, b in ends:
        if np.hypot(*(b - a)) > 0:
            cell, ln = _crossing_lengths(a[None], b[None], n)
            out += np.bincount(cell, ln, minlength=n * n).reshape(n, n)
    passes = x2 - x1
    if passes >= 1 and s == 0.0:
        # axis-aligned: each pass lies in a single row
        out[:, int(math.floor(p[1] * n)) % n] += passes / n
    elif passes >= 1:
        c0 = p[1] + s * (x1 - p[0])
        hc = ((c0 + s * np.arange(passes)) % 1.0) * n  # entry heights in row units
        hc = np.sort(np.where(hc >= n, 0.0, hc))
        cum = np.concatenate([[0.0], np.cumsum(hc)])
        piece = math.sqrt(1.0 + s * s) / n
        rows = np.arange(n, dtype=float)
        for i in range(n):
            shift = (s * i) % n
            # H = hc + shift (mod n). Row r receives the whole piece when H is in
            # [r, r + 1 - s) and shares it with row r + 1 on [r + 1 - s, r + 1).
            # One shared partition of hc-space keeps adjacent intervals seamless.
            bp = np.concatenate([(rows - shift) % n, (rows + 1.0 - s - shift) % n, [0.0, float(n)]])
            bp = np.unique(bp)
            idx = np.searchsorted(hc, bp, "left")
            cnt = np.diff(idx).astype(float)
            mid = 0.5 * (bp[:-1] + bp[1:])
            h_mid = (mid + shift) % n
            r = np.floor(h_mid).astype(np.int64) % n
            sum_h = np.diff(cum[idx]) + (h_mid - mid) * cnt
            split = (h_mid - r > 1.0 - s) if s > 0 else np.zeros(len(mid), bool)
            np.add.at(out[i], r[~split], piece * cnt[~split])
            if np.any(split):
                rs, cs, hs = r[split], cnt[split], sum_h[split]
                g1 = (cs * (rs + 1) - hs) / s  # sum of (r + 1 - H) / s
                np.add.at(out[i], rs, piece * g1)
                np.add.at(out[i], (rs + 1) % n, piece * (cs - g1))
    if reflect:
        out = out[:, ::-1]
    if swap:
        out = out.T
    return out


def grid_lengths(pts: np.ndarray, n: int) -> np.ndarray:
    """(n, n) table of polyline length per half-open grid cell, indexed [i_x, j_y]."""
    pts = np.asarray(pts, dtype=float)
    a, b = pts[:-1], pts[1:]
    seg = np.hypot(*(b - a).T)
    out = np.zeros(n * n)
    long = seg > FOLD_THRESHOLD
    short = ~long & (seg > 0)
    idx = np.nonzero(short)[0]
    for chunk in np.array_split(idx, max(1, int(seg[idx].sum() * n * 2 // 5_000_000) + 1)):
        if chunk.size:
            cell, ln = _crossing_lengths(a[chunk], b[chunk], n)
            out += np.bincount(cell, ln, minlength=n * n)
    out = out.reshape(n, n)
    for k in np.nonzero(long)[0]:
        out += _fold_lengths(a[k], b[k], n)
    return out
