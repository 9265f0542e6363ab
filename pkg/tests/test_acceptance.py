"""Acceptance criteria, one test each; every test records a PASS/FAIL line."""

import filecmp
import json
import math
import time

import numpy as np
import pytest

from phlab.cli_experiments import COMMANDS, main, normal_form_residuals
from phlab.cocycle_splitting import (
    LyapunovNormParams,
    center_along_past,
    center_direction,
    center_exponent,
    default_lyapunov_params,
    lyapunov_cocycle,
    lyapunov_norm,
    lyapunov_trace,
    stopping_times,
    unstable_direction,
)
from phlab.leaf_dynamics import (
    drift_experiment,
    drift_slope,
    minimality_probe,
    specialness_probe,
    unstable_arc,
)
from phlab.map_registry import ConeField, certify_cones
from phlab.measures import product_measure_reference, push_arc_measure, tv_distance
from phlab.natural_extension import (
    FixedChooser,
    UniformChooser,
    batch_pasts,
    extend_past,
    random_branches,
    shift_n,
    support_box_set,
)
from phlab.normal_forms import affine_transition, density_rho, normal_chart, rebase
from phlab.rng import substream
from phlab.torus_geometry import Direction, angles_of, projective_distance

from conftest import ACCEPTANCE_LINES, LAM_C_B, LAM_U_B, eigen_oracle
from test_normal_forms import box_image_word


def record(number, title, checks):
    """checks: list of (label, ok, detail). Records one line and asserts all."""
    ok = all(c[1] for c in checks)
    detail = "; ".join(f"{label}={d} [{'ok' if good else 'FAIL'}]" for label, good, d in checks)
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} {title} :: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def timed(fn):
    t0 = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - t0


def test_criterion_1_cone_certification(f_a, f_b):
    ca, ta = timed(lambda: certify_cones(f_a, ConeField.from_slopes(-0.5, 0.5), 1, 64))
    cb, tb = timed(lambda: certify_cones(f_b, ConeField.from_slopes(0.2, 1.2), 1, 64))
    cv, tv = timed(lambda: certify_cones(f_a, ConeField(Direction(math.pi / 2), 0.3), 1, 64))
    record(1, "cone certification", [
        ("f_A sigma", ca.verified and ca.sigma >= 2.68, f"{ca.sigma:.4f}"),
        ("f_B sigma", cb.verified and cb.sigma >= 3.4, f"{cb.sigma:.4f}"),
        ("f_A vertical verified", not cv.verified, cv.verified),
        ("runtime s", max(ta, tb, tv) < 1.0, f"{max(ta, tb, tv):.3f}"),
    ])


def test_criterion_2_splitting(f_b):
    def work():
        su, sc, _, _ = eigen_oracle((3, 1, 1, 2))
        w = extend_past(f_b, (0.1234, 0.5678), UniformChooser(0), 40)
        du = projective_distance(unstable_direction(f_b, w).theta, math.atan(su))
        dc = projective_distance(center_direction(f_b, w.base).theta, math.atan(sc))
        pasts = batch_pasts(f_b, w.base, random_branches(f_b, 40, 100, seed=1))
        th = angles_of(center_along_past(f_b, pasts)[0][:, 0])
        spread = max(projective_distance(t, th[0]) for t in th)
        return du, dc, spread

    (du, dc, spread), t = timed(work)
    record(2, "splitting", [
        ("E^u error", du <= 1e-9, f"{du:.2e}"), ("E^c error", dc <= 1e-9, f"{dc:.2e}"),
        ("E^c spread over 100 pasts", spread <= 1e-9, f"{spread:.2e}"),
        ("runtime s", t < 1.0, f"{t:.3f}"),
    ])


def test_criterion_3_center_exponent(f_a, f_b, ex4):
    def work():
        return [center_exponent(f, (0.1234, 0.5678), 100_000).value for f in (f_a, f_b, ex4)]

    (la, lb, l4), t = timed(work)
    target = math.log((5 - math.sqrt(5)) / 2)
    record(3, "center exponent", [
        ("f_A - log 2", la == math.log(2), f"{la - math.log(2):.1e}"),
        ("|f_B - log lc|", abs(lb - target) <= 1e-3, f"{abs(lb - target):.2e}"),
        ("|example4 - f_B|", abs(l4 - lb) <= 0.05, f"{abs(l4 - lb):.2e}"),
        ("runtime s", t < 5.0, f"{t:.2f}"),
    ])


def test_criterion_4_lyapunov_norm(f_b, ex4):
    lam = 0.5 * math.log(LAM_C_B)
    w = extend_past(f_b, (0.1234, 0.5678), UniformChooser(0), 60)
    ratio = lyapunov_norm(f_b, w, center_direction(f_b, w.base).unit(), LyapunovNormParams(lam, 60)).value
    limit = math.sqrt(LAM_C_B / (LAM_C_B - 1))
    params = default_lyapunov_params(ex4)
    worst_identity, worst_growth = 0.0, math.inf
    for seed in range(10):
        x = extend_past(ex4, substream(seed, 0).random(2), UniformChooser(seed), 40)
        whole = lyapunov_cocycle(ex4, x, 30, params)
        split = lyapunov_cocycle(ex4, x, 12, params) * lyapunov_cocycle(ex4, shift_n(ex4, x, 12).truncate(40),
                                                                         18, params)
        worst_identity = max(worst_identity, abs(whole - split) / whole)
        tr = lyapunov_trace(ex4, x, 50, params)
        worst_growth = min(worst_growth, float(np.min(tr / np.exp(np.arange(51) * params.lam))))
    record(4, "Lyapunov norm and cocycle", [
        ("|ratio - 1.9021..|", abs(ratio - limit) <= 1e-6, f"{abs(ratio - limit):.2e}"),
        ("cocycle identity rel", worst_identity <= 1e-10, f"{worst_identity:.1e}"),
        ("min lambda-hat(n) e^(-n lam)", worst_growth >= 1.0 - 1e-12, f"{worst_growth:.4f}"),
    ])


def test_criterion_5_stopping_times(f_a, f_b):
    recs = {}
    for name, f in (("f_B", f_b), ("f_A", f_a)):
        w = extend_past(f, (0.1234, 0.5678), UniformChooser(0), 40)
        recs[name] = stopping_times(f, w, w.base, 0.01, 20, default_lyapunov_params(f))
    w = extend_past(f_b, (0.1234, 0.5678), UniformChooser(0), 40)
    params = default_lyapunov_params(f_b)
    ells = np.arange(5, 41)
    taus = np.array([stopping_times(f_b, w, w.base, 0.01, int(e), params).tau for e in ells])
    slope = float(np.polyfit(ells, taus, 1)[0])
    dm = np.abs(ells[:, None] - ells[None, :])
    dt = np.abs(taus[:, None] - taus[None, :])
    additive = float(np.max(np.abs(dt - slope * dm)))
    b, a = recs["f_B"], recs["f_A"]
    record(5, "stopping times", [
        ("f_B tau,t", b.tau == b.t == 74, f"{b.tau},{b.t} (expected 74)"),
        ("f_A tau,t", a.tau == a.t == 27, f"{a.tau},{a.t} (expected 27)"),
        ("quasi-isometry slope", abs(slope - 2.98) <= 0.1, f"{slope:.3f}"),
        ("additive constant", additive <= 2, f"{additive:.2f}"),
    ])


def test_criterion_6_specialness(f_a, f_b, ex3, ex4):
    def work():
        sa = specialness_probe(f_a, (0.1234, 0.5678), 40, 1024).angle_spread
        sb = specialness_probe(f_b, (0.1234, 0.5678), 40, 1024).angle_spread
        s3 = specialness_probe(ex3, (0, 0), 40, 1024, trap=support_box_set(ex3)).angle_spread
        s4 = specialness_probe(ex4, ex4.perturbation.q, 40, 1024).angle_spread
        return sa, sb, s3, s4

    (sa, sb, s3, s4), t = timed(work)
    bound3 = math.atan(4 * ex3.perturbation.eps / 3) - 1e-4
    record(6, "specialness", [
        ("f_A spread", sa < 1e-8, f"{sa:.1e}"), ("f_B spread", sb < 1e-8, f"{sb:.1e}"),
        ("example3 spread", s3 >= bound3, f"{s3:.5f} >= {bound3:.5f}"),
        ("example4 spread", s4 > 1e-3, f"{s4:.5f}"),
        ("runtime s", t < 10.0, f"{t:.2f}"),
    ])


def test_criterion_7_normal_forms(f_b, ex4):
    w = extend_past(f_b, (0.1234, 0.5678), UniformChooser(0), 40)
    lin = normal_chart(f_b, unstable_arc(f_b, w, 0.3))
    lin_err = float(np.max(np.abs(lin.R - lin.s)))
    xw = box_image_word(ex4)
    res = normal_form_residuals(ex4, xw, 0.1, 1e-3, 40)
    fine, coarse = res["fine"]["residual"], res["coarse"]["residual"]
    chart = res["fine"]["chart"]
    b = int(np.argmin(np.abs(chart.s - 0.05)))
    aff = affine_transition(chart, rebase(chart, b))
    rho = density_rho(ex4, chart.curve, chart.base_index, base_index=b)
    record(7, "normal forms", [
        ("linear rho == 1", bool(np.all(lin.rho == 1.0)), "exact"),
        ("linear |R - s|", lin_err <= 1e-15, f"{lin_err:.1e}"),
        ("example4 residual", fine <= 1e-4, f"{fine:.2e}"),
        ("refinement drop", coarse / fine >= 3.5, f"{coarse / fine:.2f}x"),
        ("affine residual", aff.residual <= 1e-5, f"{aff.residual:.1e}"),
        ("|slope - rho|", abs(aff.slope - rho) <= 1e-4, f"{abs(aff.slope - rho):.1e}"),
    ])


def test_criterion_8_minimality(f_b, ex3):
    def work():
        arc_b = unstable_arc(f_b, extend_past(f_b, (0.1, 0.2), UniformChooser(1), 40), 0.5)
        rb = minimality_probe(f_b, arc_b, 8, 64)
        arc_3 = unstable_arc(ex3, extend_past(ex3, (0.3, 1 / 3), FixedChooser(0), 40), 0.5)
        r3 = minimality_probe(ex3, arc_3, 12, 64)
        return rb, r3

    (rb, r3), t = timed(work)
    rows = sorted(int(j) for j in np.nonzero(r3.final_mask.any(axis=0))[0])
    record(8, "minimality probes", [
        ("f_B coverage after 8", rb.visited_fraction[-1] >= 0.99, f"{rb.visited_fraction[-1]:.4f}"),
        ("example3 fraction over 12", max(r3.visited_fraction) <= 0.04, f"{max(r3.visited_fraction):.4f}"),
        ("example3 rows", rows == [21, 42], rows),
        ("runtime s", t < 60.0, f"{t:.1f}"),
    ])


def test_criterion_9_u_gibbs(f_b, ex3):
    reports = []
    for i in range(10):
        p = substream(0, i).random(2)
        arc = unstable_arc(f_b, extend_past(f_b, p, UniformChooser(i), 40), 0.5)
        reports.append(push_arc_measure(f_b, arc, 12, 32))
    tv_u = max(r.tv_to_uniform for r in reports)
    pair = max(tv_distance(a.histogram, b.histogram) for k, a in enumerate(reports) for b in reports[k + 1:])
    arc = unstable_arc(ex3, extend_past(ex3, (0.3, 1 / 3), FixedChooser(0), 40), 0.5)
    g = push_arc_measure(ex3, arc, 12, 32)
    rows = g.histogram.row_masses()
    ref_rows = product_measure_reference([1 / 3, 2 / 3], 32).row_masses()
    row_err = float(np.max(np.abs(rows - ref_rows)))
    record(9, "u-Gibbs estimation", [
        ("f_B tv to uniform (worst of 10)", tv_u <= 0.05, f"{tv_u:.2e}"),
        ("max pairwise tv", pair <= 0.05, f"{pair:.2e}"),
        ("example3 row-mass error", row_err <= 0.01, f"{row_err:.1e}"),
        ("example3 tv to uniform", g.tv_to_uniform >= 0.9, f"{g.tv_to_uniform:.4f}"),
    ])


def test_criterion_10_drift(ex4):
    def work():
        summ = drift_experiment(ex4, 100, (15, 25), 0.01)
        slope, _, _ = drift_slope(ex4, range(10, 31), per_ell=3)
        return summ, slope

    (summ, slope), t = timed(work)
    expected = math.log(LAM_C_B / LAM_U_B)
    record(10, "drift experiment", [
        ("configurations", len(summ.records) == 100, len(summ.records)),
        ("fitted beta-hat", summ.beta_hat <= 50, f"{summ.beta_hat:.1f}"),
        ("log-slope vs ell", abs(slope - expected) <= 0.15 * abs(expected), f"{slope:.4f} vs {expected:.4f}"),
        ("runtime s", t < 300.0, f"{t:.1f}"),
    ])


def _report_without_dir(directory):
    rep = json.loads((directory / "report.json").read_text())
    rep.get("config", {}).pop("output_dir", None)
    return rep


def test_criterion_11_determinism(tmp_path):
    checks = []
    for cmd in COMMANDS:
        dirs = [tmp_path / f"{cmd}-{k}" for k in range(2)]
        codes = [main([cmd, "--out", str(d), "--quiet"]) for d in dirs]
        csvs = sorted(p.name for p in dirs[0].glob("*.csv"))
        same = codes == [0, 0] and all(filecmp.cmp(dirs[0] / n, dirs[1] / n, shallow=False) for n in csvs)
        same = same and _report_without_dir(dirs[0]) == _report_without_dir(dirs[1])
        checks.append((cmd, same, f"{len(csvs)} csv + report"))
    record(11, "determinism", checks)
