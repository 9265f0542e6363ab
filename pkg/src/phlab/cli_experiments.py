"""Command-line experiment runner.

Every subcommand reads an optional JSON config, fills in defaults, runs one
pipeline and writes ``report.json`` (config echo and results), one CSV per
data table and ``metadata.json`` (wall time, versions, thread cap). Only the
metadata file carries timestamps, so identical configs give byte-identical
reports and CSV files.

Exit codes: 0 success, 1 golden mismatch, 2 schema error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import platform
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .cocycle_splitting import center_exponent, default_lyapunov_params, mean_log_det, stopping_times, unstable_exponent
from .errors import NumericalError, SchemaError
from .leaf_dynamics import (
    drift_experiment,
    drift_slope,
    minimality_probe,
    specialness_probe,
    unstable_arc,
)
from .map_registry import NAMED_MAPS, ConeField, MapSpec, certify_cones, named_map
from .measures import push_arc_measure, product_measure_reference, tv_distance
from .natural_extension import FixedChooser, UniformChooser, extend_past, shift, support_box_set
from .normal_forms import (
    affine_transition,
    base_stretch,
    conjugacy_residual,
    cu_equivariance_residual,
    density_rho,
    normal_chart,
    rebase,
)
from .rng import substream
from .torus_geometry import Direction, TorusPoint, wrap_array

COMMANDS = ("certify-cones", "exponents", "specialness", "unstable-arc", "minimality", "ugibbs",
            "normal-form-check", "stopping-times", "drift")

DEFAULT_MAPS = {"certify-cones": "f_B", "exponents": "f_B", "specialness": "f_B", "unstable-arc": "f_B",
                "minimality": "f_B", "ugibbs": "f_B", "normal-form-check": "example4",
                "stopping-times": "f_B", "drift": "example4"}

DEFAULT_PARAMS = {
    "certify-cones": {"slopes": None, "center_angle": None, "half_width": None, "ell": 1, "grid": 64},
    "exponents": {"n": 100_000, "start": [0.1234, 0.5678]},
    "specialness": {"point": [0.0, 0.0], "depth": 40, "samples": 1024, "trap": False},
    "unstable-arc": {"point": [0.1234, 0.5678], "branch": None, "depth": 40, "radius": 0.5,
                     "resolution": 1e-3},
    "minimality": {"point": [0.1234, 0.5678], "branch": None, "depth": 40, "radius": 0.5,
                   "iterations": 8, "grid": 64},
    "ugibbs": {"point": None, "branch": None, "seeds": 1, "depth": 40, "radius": 0.5, "iterations": 12,
               "grid": 32, "burn_in": None, "cesaro": True, "reference": "uniform"},
    "normal-form-check": {"point": None, "box_offset": [0.75, 0.3], "depth": 40, "radius": 0.1,
                          "resolution": 1e-3, "cu_grid": 5, "cu_radius": 0.05},
    "stopping-times": {"point": [0.1234, 0.5678], "epsilon": 0.01, "ell": 20, "depth": 40,
                       "quasi_isometry_ells": [5, 40]},
    "drift": {"count": 100, "ell_range": [15, 25], "epsilon": 0.01, "beta": 100.0, "d_u": None,
              "slope_ells": [10, 30], "slope_per_ell": 3},
}

GRID_PARAM = {"certify-cones": "grid", "minimality": "grid", "ugibbs": "grid"}


# -- configuration --------------------------------------------------------------------

def _map_from_config(value) -> MapSpec:
    if isinstance(value, str):
        return named_map(value)
    if isinstance(value, dict):
        return MapSpec.from_dict(value)
    raise SchemaError("'map' must be a map name or a map object")


def _map_to_config(fmap: MapSpec):
    if fmap.name in NAMED_MAPS and named_map(fmap.name) == fmap:
        return fmap.name
    return fmap.to_dict()


@dataclass
class ExperimentConfig:
    command: str
    map: MapSpec
    params: dict = field(default_factory=dict)
    seed: int = 0
    output_dir: str = "phlab-out"

    @classmethod
    def from_dict(cls, d: dict, command: str | None = None) -> ExperimentConfig:
        if not isinstance(d, dict):
            raise SchemaError("config must be a JSON object")
        unknown = set(d) - {"command", "map", "params", "seed", "output_dir"}
        if unknown:
            raise SchemaError(f"unknown config fields: {sorted(unknown)}")
        cmd = command or d.get("command")
        if d.get("command") not in (None, cmd):
            raise SchemaError(f"config is for {d['command']!r}, not {cmd!r}")
        if cmd not in COMMANDS:
            raise SchemaError(f"unknown command {cmd!r}; known: {list(COMMANDS)}")
        params = dict(d.get("params") or {})
        bad = set(params) - set(DEFAULT_PARAMS[cmd])
        if bad:
            raise SchemaError(f"unknown parameters for {cmd}: {sorted(bad)}")
        full = {**DEFAULT_PARAMS[cmd], **params}
        seed = d.get("seed", 0)
        if not isinstance(seed, int) or not 0 <= seed < 2**64:
            raise SchemaError("seed must be a 64-bit unsigned integer")
        return cls(cmd, _map_from_config(d.get("map", DEFAULT_MAPS[cmd])), full, seed,
                   str(d.get("output_dir", "phlab-out")))

    def to_dict(self) -> dict:
        return {"command": self.command, "map": _map_to_config(self.map), "params": self.params,
                "seed": self.seed, "output_dir": self.output_dir}


@dataclass
class Table:
    header: list
    rows: list

    def write(self, path: Path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(self.header)
            for row in self.rows:
                wr.writerow([_cell(v) for v in row])


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return v


@dataclass
class ReportBundle:
    report: dict
    tables: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    blobs: dict = field(default_factory=dict)  # extra files: name -> bytes or str

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(_jsonable(self.report), indent=2, sort_keys=True) + "\n")
        for name, table in self.tables.items():
            table.write(out / f"{name}.csv")
        for name, blob in self.blobs.items():
            mode = "wb" if isinstance(blob, bytes) else "w"
            with open(out / name, mode) as fh:
                fh.write(blob)
        (out / "metadata.json").write_text(json.dumps(_jsonable(self.metadata), indent=2, sort_keys=True) + "\n")
        return out


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        v = float(x)
        return v if math.isfinite(v) else str(v)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, TorusPoint):
        return [x.x, x.y]
    return x


# -- helpers --------------------------------------------------------------------------

def _point(fmap: MapSpec, value) -> TorusPoint:
    if value == "q":
        if fmap.perturbation is None:
            raise SchemaError("point 'q' needs a perturbed map")
        return fmap.perturbation.q
    try:
        x, y = value
        return TorusPoint(float(x), float(y))
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"point must be [x, y] or 'q', got {value!r}") from exc


def _word(fmap: MapSpec, p, branch, depth: int, seed: int):
    chooser = UniformChooser(seed) if branch is None else FixedChooser(int(branch))
    return extend_past(fmap, p, chooser, int(depth))


def _positive_int(params: dict, key: str, minimum: int = 1) -> int:
    v = params[key]
    if not isinstance(v, int) or isinstance(v, bool) or v < minimum:
        raise SchemaError(f"parameter {key!r} must be an integer >= {minimum}")
    return v


# -- pipelines ------------------------------------------------------------------------

def _certify_cones(cfg: ExperimentConfig) -> ReportBundle:
    p = cfg.params
    if p["slopes"] is not None:
        lo, hi = p["slopes"]
        cone = ConeField.from_slopes(float(lo), float(hi))
    elif p["center_angle"] is not None and p["half_width"] is not None:
        cone = ConeField(Direction(float(p["center_angle"])), float(p["half_width"]))
    else:
        sp = cfg.map.splitting
        if sp is None:
            raise SchemaError("give 'slopes' or 'center_angle' and 'half_width' for this map")
        theta = math.atan2(sp.e_u[1], sp.e_u[0])
        cone = ConeField(Direction(theta), 0.25)
    cert = certify_cones(cfg.map, cone, _positive_int(p, "ell"), _positive_int(p, "grid", 16))
    return ReportBundle({"certificate": cert.to_dict(),
                         "cone": {"center_angle": cone.center.theta, "half_width": cone.half_width}})


def _exponents(cfg: ExperimentConfig) -> ReportBundle:
    n = int(cfg.params["n"])
    start = _point(cfg.map, cfg.params["start"])
    c = center_exponent(cfg.map, start, n, cfg.seed)
    u = unstable_exponent(cfg.map, start, n, cfg.seed)
    d = mean_log_det(cfg.map, start, n, cfg.seed)
    return ReportBundle({"value": c.value, "center_exponent": c.to_dict(), "unstable_exponent": u.to_dict(),
                         "mean_log_det": d.to_dict()})


def _specialness(cfg: ExperimentConfig) -> ReportBundle:
    p = cfg.params
    trap = support_box_set(cfg.map) if p["trap"] and cfg.map.perturbation is not None else None
    rep = specialness_probe(cfg.map, _point(cfg.map, p["point"]), _positive_int(p, "depth"),
                            _positive_int(p, "samples"), cfg.seed, trap=trap)
    table = Table(["word", "theta"], [list(r) for r in rep.rows()])
    return ReportBundle({"specialness": rep.to_dict()}, {"angles": table})


def _unstable_arc(cfg: ExperimentConfig) -> ReportBundle:
    p = cfg.params
    w = _word(cfg.map, _point(cfg.map, p["point"]), p["branch"], p["depth"], cfg.seed)
    arc = unstable_arc(cfg.map, w, float(p["radius"]), float(p["resolution"]))
    rows = [[s, x, y] for s, (x, y) in zip(arc.s, arc.torus_points)]
    return ReportBundle({"vertices": len(arc.s), "length": arc.length, "base_index": arc.base_index},
                        {"arc": Table(["arclength", "x", "y"], rows)})


def _mask_pbm(mask: np.ndarray) -> str:
    n = mask.shape[0]
    lines = [f"P1\n{n} {n}"]
    for j in range(n - 1, -1, -1):
        lines.append(" ".join("1" if mask[i, j] else "0" for i in range(n)))
    return "\n".join(lines) + "\n"


def _minimality(cfg: ExperimentConfig) -> ReportBundle:
    p = cfg.params
    w = _word(cfg.map, _point(cfg.map, p["point"]), p["branch"], p["depth"], cfg.seed)
    arc = unstable_arc(cfg.map, w, float(p["radius"]))
    rep = minimality_probe(cfg.map, arc, _positive_int(p, "iterations", 0), _positive_int(p, "grid"))
    table = Table(["iteration", "visited_fraction"], [[k, f] for k, f in enumerate(rep.visited_fraction)])
    return ReportBundle({"coverage": rep.to_dict()}, {"coverage": table}, blobs={"mask.pbm": _mask_pbm(rep.final_mask)})


def _ugibbs(cfg: ExperimentConfig) -> ReportBundle:
    p = cfg.params
    seeds = _positive_int(p, "seeds")
    grid = _positive_int(p, "grid")
    reports = []
    for i in range(seeds):
        if p["point"] is not None and i == 0:
            pt = _point(cfg.map, p["point"])
        else:
            x, y = substream(cfg.seed, i).random(2)
            pt = TorusPoint(float(x), float(y))
        w = _word(cfg.map, pt, p["branch"], p["depth"], cfg.seed + i)
        arc = unstable_arc(cfg.map, w, float(p["radius"]))
        reports.append(push_arc_measure(cfg.map, arc, _positive_int(p, "iterations"), grid, bool(p["cesaro"]),
                                        p["burn_in"]))
    ref = product_measure_reference(p["reference"], grid)
    pair = max((tv_distance(a.histogram, b.histogram) for k, a in enumerate(reports) for b in reports[k + 1:]),
               default=0.0)
    h = reports[0].histogram
    table = Table(["i", "j", "mass"], [[i, j, h.masses[i, j]] for i in range(grid) for j in range(grid)])
    return ReportBundle({"runs": [r.to_dict() for r in reports],
                         "tv_to_reference": [tv_distance(r.histogram, ref) for r in reports],
                         "max_pairwise_tv": pair, "row_masses": h.row_masses()},
                        {"histogram": table}, blobs={"histogram.bin": h.to_bytes()})


def _normal_form_word(cfg: ExperimentConfig):
    p = cfg.params
    fmap = cfg.map
    if p["point"] is None and fmap.perturbation is not None:
        a = fmap.perturbation.a_box
        zp = wrap_array(fmap.perturbation.q.as_array() + fmap.frame @ (np.asarray(p["box_offset"], float) * a))
        inner = extend_past(fmap, zp, UniformChooser(cfg.seed), int(p["depth"]))
        return shift(fmap, inner).truncate(int(p["depth"]))
    pt = _point(fmap, p["point"] if p["point"] is not None else [0.1234, 0.5678])
    return extend_past(fmap, pt, UniformChooser(cfg.seed), int(p["depth"]))


def normal_form_residuals(fmap: MapSpec, w, radius: float, resolution: float, depth: int) -> dict:
    """Conjugacy residual of the unstable chart at ``resolution`` and at half of it."""
    lu = base_stretch(fmap, w, "u")
    fw = shift(fmap, w)
    out = {}
    for tag, res in (("coarse", 2 * resolution), ("fine", resolution)):
        arc = unstable_arc(fmap, w, radius, res)
        chart = normal_chart(fmap, arc, depth)
        img = normal_chart(fmap, unstable_arc(fmap, fw, 1.2 * lu * radius, res), depth)
        out[tag] = {"resolution": res, "residual": conjugacy_residual(fmap, chart, img, lu), "chart": chart}
    return out


def _normal_form_check(cfg: ExperimentConfig) -> ReportBundle:
    p = cfg.params
    fmap = cfg.map
    depth = int(p["depth"])
    w = _normal_form_word(cfg)
    res = normal_form_residuals(fmap, w, float(p["radius"]), float(p["resolution"]), depth)
    chart = res["fine"]["chart"]
    other = int(np.argmin(np.abs(chart.s - 0.5 * float(p["radius"]))))
    moved = rebase(chart, other)
    aff = affine_transition(chart, moved)
    rho_direct = density_rho(fmap, chart.curve, chart.base_index, depth, base_index=other)
    report = {
        "residual_coarse": res["coarse"]["residual"], "residual_fine": res["fine"]["residual"],
        "refinement_ratio": res["coarse"]["residual"] / max(res["fine"]["residual"], 1e-300),
        "slope_at_base": chart.slope_at_base(), "rho_min": float(chart.rho.min()),
        "rho_max": float(chart.rho.max()), "affine": aff.to_dict(), "rho_direct": rho_direct,
        "lambda_u": base_stretch(fmap, w, "u"), "lambda_c": base_stretch(fmap, w, "c"),
    }
    k = int(p["cu_grid"])
    if k > 0:
        r = float(p["cu_radius"])
        g = np.linspace(-0.8 * r, 0.8 * r, k)
        report["cu_equivariance"] = cu_equivariance_residual(fmap, w, [(a, b) for a in g for b in g], r)
    return ReportBundle(report, {"chart": Table(["arclength", "rho", "R"], [list(r) for r in chart.rows()])})


def _stopping_times(cfg: ExperimentConfig) -> ReportBundle:
    p = cfg.params
    w = extend_past(cfg.map, _point(cfg.map, p["point"]), UniformChooser(cfg.seed), int(p["depth"]))
    params = default_lyapunov_params(cfg.map)
    eps = float(p["epsilon"])
    rec = stopping_times(cfg.map, w, w.base, eps, int(p["ell"]), params)
    lo, hi = p["quasi_isometry_ells"]
    rows = []
    for ell in range(int(lo), min(int(hi), w.depth) + 1):
        r = stopping_times(cfg.map, w, w.base, eps, ell, params)
        rows.append([ell, r.tau, r.t])
    return ReportBundle({"stopping_times": rec.to_dict(), "lyapunov_lambda": params.lam},
                        {"stopping_times": Table(["ell", "tau", "t"], rows)})


def _drift(cfg: ExperimentConfig) -> ReportBundle:
    p = cfg.params
    summ = drift_experiment(cfg.map, _positive_int(p, "count"), tuple(p["ell_range"]), float(p["epsilon"]),
                            float(p["beta"]), cfg.seed, p["d_u"])
    lo, hi = p["slope_ells"]
    slope, _, _ = drift_slope(cfg.map, range(int(lo), int(hi) + 1), _positive_int(p, "slope_per_ell"),
                              float(p["epsilon"]), cfg.seed)
    sp = cfg.map.splitting
    expected = math.log(sp.lam_c / sp.lam_u) if sp is not None else None
    header = ["ell", "tau", "t", "m", "alpha", "d_u", "before", "after"]
    return ReportBundle({"beta_hat": summ.beta_hat, "configurations": len(summ.records),
                         "slope": slope, "expected_slope": expected},
                        {"drift": Table(header, [list(r) for r in summ.rows()])})


PIPELINES = {"certify-cones": _certify_cones, "exponents": _exponents, "specialness": _specialness,
             "unstable-arc": _unstable_arc, "minimality": _minimality, "ugibbs": _ugibbs,
             "normal-form-check": _normal_form_check, "stopping-times": _stopping_times, "drift": _drift}


def run(cfg: ExperimentConfig) -> ReportBundle:
    """Run one experiment; the report echoes the full config."""
    t0 = time.perf_counter()
    bundle = PIPELINES[cfg.command](cfg)
    bundle.report = {"config": cfg.to_dict(), "status": "ok", "results": bundle.report}
    bundle.metadata = run_metadata(cfg, time.perf_counter() - t0)
    return bundle


def run_metadata(cfg: ExperimentConfig, wall: float) -> dict:
    return {"wall_time_s": wall, "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            "phlab": __version__, "numpy": np.__version__, "python": platform.python_version(),
            "threads": thread_cap(), "rng": "numpy Philox-4x64", "seed": cfg.seed}


def thread_cap() -> int | None:
    raw = os.environ.get("PHLAB_THREADS")
    if raw is None or raw == "":
        return None
    try:
        n = int(raw)
    except ValueError:
        raise SchemaError(f"PHLAB_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise SchemaError(f"PHLAB_THREADS must be a positive integer, got {raw!r}")
    return n


# -- golden comparison ----------------------------------------------------------------

def _flatten(d, prefix=""):
    out = {}
    if isinstance(d, dict):
        for k, v in d.items():
            out.update(_flatten(v, f"{prefix}{k}."))
    elif isinstance(d, list):
        for i, v in enumerate(d):
            out.update(_flatten(v, f"{prefix}{i}."))
    else:
        out[prefix[:-1]] = d
    return out


def compare_golden(report: dict, golden, tolerances: dict | None = None) -> tuple[bool, list[str]]:
    """Field-by-field comparison; fields without a tolerance must match exactly.

    ``golden`` is a path to a report JSON or an already loaded dict. Returns
    (passed, listing) where the listing names every failing or missing field.
    """
    if not isinstance(golden, dict):
        with open(golden) as fh:
            golden = json.load(fh)
    tolerances = tolerances or {}
    a, b = _flatten(_jsonable(report)), _flatten(golden)
    listing = []
    for key in sorted(set(a) | set(b)):
        if key not in a:
            listing.append(f"MISSING in report: {key}")
            continue
        if key not in b:
            listing.append(f"MISSING in golden: {key}")
            continue
        x, y = a[key], b[key]
        tol = tolerances.get(key)
        numeric = all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in (x, y))
        if tol is not None and numeric:
            ok = abs(x - y) <= float(tol)
        else:
            ok = x == y
        if not ok:
            listing.append(f"FAIL {key}: report={x!r} golden={y!r}" + (f" tol={tol}" if tol is not None else ""))
    return not listing, listing


# -- entry point ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="phlab", description="Experiments on partially hyperbolic torus maps.")
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd in COMMANDS:
        sp = sub.add_parser(cmd)
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--map", help="map name (f_A, f_B, example3, example4); overrides the config")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--grid", type=int, help="grid size for commands that use one")
        sp.add_argument("--quiet", action="store_true")
    g = sub.add_parser("compare-golden")
    g.add_argument("report")
    g.add_argument("golden")
    g.add_argument("--tolerances", help="JSON object: dotted field name -> absolute tolerance")
    g.add_argument("--quiet", action="store_true")
    return parser


def _load_config(args) -> ExperimentConfig:
    raw = {}
    if args.config:
        try:
            with open(args.config) as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise SchemaError(f"cannot read config {args.config}: {exc}") from exc
    raw = dict(raw)
    if args.map:
        raw["map"] = args.map
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.out:
        raw["output_dir"] = args.out
    if args.grid is not None:
        if args.command not in GRID_PARAM:
            raise SchemaError(f"--grid does not apply to {args.command}")
        raw["params"] = {**raw.get("params", {}), GRID_PARAM[args.command]: args.grid}
    return ExperimentConfig.from_dict(raw, args.command)


def _say(quiet: bool, msg: str, stream=sys.stdout) -> None:
    if not quiet:
        print(msg, file=stream)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "compare-golden":
        try:
            with open(args.report) as fh:
                report = json.load(fh)
            tol = None
            if args.tolerances:
                with open(args.tolerances) as fh:
                    tol = json.load(fh)
            ok, listing = compare_golden(report, args.golden, tol)
        except (OSError, json.JSONDecodeError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        for line in listing:
            _say(args.quiet, line)
        _say(args.quiet, "PASS" if ok else "FAIL")
        return 0 if ok else 1
    cfg = None
    try:
        cfg = _load_config(args)
        with threadpool_limits(limits=thread_cap()):
            bundle = run(cfg)
    except SchemaError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        partial = getattr(exc, "partial", None)
        report = {"config": cfg.to_dict(), "status": "failed", "error": type(exc).__name__, "message": str(exc),
                  "partial": partial.to_dict() if hasattr(partial, "to_dict") else None}
        ReportBundle(report, metadata=run_metadata(cfg, float("nan"))).write(cfg.output_dir)
        return 3
    out = bundle.write(cfg.output_dir)
    _say(args.quiet, json.dumps(_jsonable(bundle.report["results"]), indent=2, sort_keys=True))
    _say(args.quiet, f"wrote {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
