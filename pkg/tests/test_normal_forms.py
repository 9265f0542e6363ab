import math

import numpy as np
import pytest

from phlab.cli_experiments import normal_form_residuals
from phlab.cocycle_splitting import holder_distortion_probe
from phlab.errors import ConvergenceError, GeometryError, SchemaError
from phlab.leaf_dynamics import center_curve, shadow_pasts, unstable_arc
from phlab.natural_extension import PastWord, UniformChooser, _branch_labels, extend_past, shift
from phlab.normal_forms import (
    CenterUnstableChart,
    affine_transition,
    base_stretch,
    density_profile,
    density_rho,
    normal_chart,
    rebase,
)
from phlab.torus_geometry import torus_distance, wrap_array

from conftest import LAM_C_B, LAM_U_B


def box_image_word(fmap, offset=(0.75, 0.3), seed=0, depth=40):
    """A word whose first past point sits in the perturbation box, off its linear plateau."""
    a = fmap.perturbation.a_box
    zp = wrap_array(fmap.perturbation.q.as_array() + fmap.frame @ (np.asarray(offset) * a))
    return shift(fmap, extend_past(fmap, zp, UniformChooser(seed), depth)).truncate(depth)


@pytest.fixture(scope="module")
def ex4_word(ex4):
    return box_image_word(ex4)


@pytest.fixture(scope="module")
def ex4_chart(ex4, ex4_word):
    return normal_chart(ex4, unstable_arc(ex4, ex4_word, 0.1))


def test_linear_maps_have_arclength_charts(f_b):
    w = extend_past(f_b, (0.3, 0.6), UniformChooser(0), 40)
    chart = normal_chart(f_b, unstable_arc(f_b, w, 0.3))
    assert np.all(chart.rho == 1.0)
    assert np.abs(chart.R - chart.s).max() <= 1e-15
    cc = center_curve(f_b, (0.3, 0.6), 0.3)
    cchart = normal_chart(f_b, cc, word=w)
    assert np.all(cchart.rho == 1.0)
    assert np.abs(cchart.R - cchart.s).max() <= 1e-15


def test_example4_density_is_nontrivial_and_bounded(ex4, ex4_word, ex4_chart):
    rho = ex4_chart.rho
    assert rho.max() - rho.min() > 1e-5
    assert ex4_chart.R[ex4_chart.base_index] == 0.0
    assert rho[ex4_chart.base_index] == 1.0
    assert ex4_chart.slope_at_base() == pytest.approx(1.0, abs=1e-4)
    assert np.all(np.diff(ex4_chart.R) > 0)


def test_center_density_within_distortion_bound(ex4):
    word = box_image_word(ex4, depth=60)
    curve = center_curve(ex4, word.points[0], 0.1)
    prof = density_profile(ex4, curve, 40, word=word)
    ends = [0, len(curve.s) - 1]
    pasts = shadow_pasts(ex4, word, curve.points[curve.base_index], curve.points[ends], 60)
    probes = [holder_distortion_probe(ex4, (word, PastWord(ex4, _branch_labels(ex4, q), q)), 41) for q in pasts]
    # |log rho| <= |partial sum to 41| + |first term| <= 2 sup of the partial sums
    c = math.exp(2 * max(probes))
    assert c > 1.0
    assert np.all((prof.rho[ends] > 1 / c) & (prof.rho[ends] < c))
    assert np.ptp(prof.rho) > 1e-3


def test_density_cocycle_relation(ex4, ex4_chart):
    arc = ex4_chart.curve
    x, y, z = arc.base_index, arc.base_index + 25, len(arc.s) - 7
    rho_xz = density_rho(ex4, arc, z, base_index=x)
    rho_yz = density_rho(ex4, arc, z, base_index=y)
    rho_xy = density_rho(ex4, arc, y, base_index=x)
    assert rho_xz == pytest.approx(rho_yz * rho_xy, rel=1e-8)
    assert ex4_chart.rho[z] == pytest.approx(rho_xz, rel=1e-12)


def test_rebase_matches_direct_profile(ex4, ex4_chart):
    b = ex4_chart.base_index + 40
    moved = rebase(ex4_chart, b)
    direct = density_profile(ex4, ex4_chart.curve, base_index=b)
    assert np.allclose(moved.rho, direct.rho, rtol=1e-12)
    assert moved.R[b] == 0.0


def test_phi_inverts_R(ex4_chart):
    rng = np.random.default_rng(0)
    s = rng.uniform(ex4_chart.s[0], ex4_chart.s[-1], 200)
    assert np.allclose(ex4_chart.phi(ex4_chart.R_at(s)), s, atol=1e-14)
    assert np.allclose(ex4_chart.R_at(ex4_chart.s), ex4_chart.R, atol=1e-15)
    with pytest.raises(GeometryError):
        ex4_chart.phi(ex4_chart.R[-1] + 1.0)
    with pytest.raises(GeometryError):
        ex4_chart.R_at(ex4_chart.s[0] - 1.0)


def test_affine_transitions(f_b, ex4, ex4_chart):
    same = affine_transition(ex4_chart, ex4_chart)
    assert same.slope == pytest.approx(1.0, abs=1e-12) and abs(same.offset) < 1e-12
    assert same.residual <= 1e-10
    w = extend_past(f_b, (0.3, 0.6), UniformChooser(0), 40)
    lin = normal_chart(f_b, unstable_arc(f_b, w, 0.3))
    j = lin.base_index + 50
    rep = affine_transition(lin, rebase(lin, j))
    assert rep.slope == pytest.approx(1.0, abs=1e-12)
    assert abs(rep.offset) == pytest.approx(lin.s[j], abs=1e-12)
    b = ex4_chart.base_index + 50
    rep = affine_transition(ex4_chart, rebase(ex4_chart, b))
    assert rep.residual <= 1e-5
    assert rep.slope == pytest.approx(density_rho(ex4, ex4_chart.curve, ex4_chart.base_index, base_index=b),
                                      abs=1e-4)
    with pytest.raises(SchemaError):
        affine_transition(ex4_chart, lin)


def test_conjugacy_residual_is_small(ex4, ex4_word):
    res = normal_form_residuals(ex4, ex4_word, 0.1, 1e-3, 40)
    assert res["fine"]["residual"] <= 1e-4


def test_base_stretches(f_b, ex4, ex4_word):
    w = extend_past(f_b, (0.3, 0.6), UniformChooser(0), 40)
    assert base_stretch(f_b, w, "u") == pytest.approx(LAM_U_B, rel=1e-12)
    assert base_stretch(f_b, w, "c") == pytest.approx(LAM_C_B, rel=1e-12)
    with pytest.raises(SchemaError):
        base_stretch(f_b, w, "s")


def test_shallow_truncation_does_not_converge(ex4, ex4_chart):
    with pytest.raises(ConvergenceError):
        density_profile(ex4, ex4_chart.curve, truncation_depth=1)
    with pytest.raises(SchemaError):
        density_profile(ex4, ex4_chart.curve, truncation_depth=80)


def test_cu_chart_restricts_to_the_one_dimensional_charts(ex4, ex4_word):
    cu = CenterUnstableChart(ex4, ex4_word, 0.05)
    uchart = normal_chart(ex4, unstable_arc(ex4, ex4_word, 0.1))
    for t in (-0.03, 0.02):
        assert torus_distance(cu(t, 0.0), wrap_array(uchart.point(t)[None])[0]) <= 1e-6
    for s in (-0.04, 0.03):
        assert torus_distance(cu(0.0, s), wrap_array(cu.center_chart.point(s)[None])[0]) <= 1e-12
    with pytest.raises(GeometryError):
        cu(0.2, 0.0)


def test_chart_csv(tmp_path, ex4_chart):
    ex4_chart.write_csv(tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "arclength,rho,R"
    assert len(lines) == len(ex4_chart.s) + 1
