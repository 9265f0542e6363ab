import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from phlab.torus_geometry import (
    Direction,
    TangentVector,
    TorusPoint,
    angle_between,
    angles_of,
    as_point,
    signed_offset,
    torus_distance,
    torus_distance_array,
    wrap,
    wrap_array,
)

from conftest import SLOPE_U_B

coords = st.floats(-50, 50, allow_nan=False)
angles = st.floats(-20, 20, allow_nan=False)


@pytest.mark.parametrize("raw, expected", [((1.25, -0.5), (0.25, 0.5)), ((0.0, 0.0), (0.0, 0.0)),
                                           ((3.0, 2.0), (0.0, 0.0))])
def test_wrap_examples(raw, expected):
    p = wrap(*raw)
    assert (p.x, p.y) == expected


def test_wrap_rejects_non_finite():
    with pytest.raises(ValueError):
        wrap(math.nan, 0.0)
    with pytest.raises(ValueError):
        wrap(0.0, math.inf)


def test_tiny_negative_wraps_inside_unit_interval():
    p = wrap(-1e-17, -0.0)
    assert 0.0 <= p.x < 1.0 and p.y == 0.0


@given(coords, coords)
def test_wrap_lands_in_unit_square_and_is_idempotent(x, y):
    p = wrap(x, y)
    assert 0.0 <= p.x < 1.0 and 0.0 <= p.y < 1.0
    assert wrap(p.x, p.y) == p


@given(coords, coords, coords, coords)
def test_distance_is_symmetric_and_bounded(a, b, c, d):
    p, q = wrap(a, b), wrap(c, d)
    assert torus_distance(p, q) == pytest.approx(torus_distance(q, p), abs=1e-15)
    assert 0.0 <= torus_distance(p, q) <= math.sqrt(0.5) + 1e-15


@given(coords, coords, st.integers(-5, 5), st.integers(-5, 5))
def test_distance_ignores_integer_translates(x, y, m, n):
    assert torus_distance((x, y), wrap(x + m, y + n)) < 1e-9


def test_distance_across_the_seam():
    assert torus_distance((0.95, 0.5), (0.05, 0.5)) == pytest.approx(0.1)


@pytest.mark.parametrize("t1, t2, expected", [(0.0, math.pi / 2, math.pi / 2),
                                              (0.0, math.atan(SLOPE_U_B), 0.5535743588970452),
                                              (1.1, 1.1, 0.0)])
def test_angle_examples(t1, t2, expected):
    assert angle_between(Direction(t1), Direction(t2)) == pytest.approx(expected, abs=1e-12)


def test_angle_oracle_value():
    # arctan of the unstable eigen-slope of (3 1; 1 2), via numpy's eigen solver
    vals, vecs = np.linalg.eigh(np.array([[3.0, 1.0], [1.0, 2.0]]))
    v = vecs[:, np.argmax(vals)]
    assert angle_between(Direction(0.0), Direction.from_vector(*v)) == pytest.approx(0.5536, abs=5e-5)


@given(angles, angles, st.integers(-4, 4))
def test_angle_symmetric_and_projective(a, b, k):
    da, db = Direction(a), Direction(b)
    assert angle_between(da, db) == pytest.approx(angle_between(db, da), abs=1e-12)
    assert angle_between(da, Direction(b + k * math.pi)) == pytest.approx(angle_between(da, db), abs=1e-9)
    assert 0.0 <= angle_between(da, db) <= math.pi / 2 + 1e-12


def test_direction_normalisation_and_slope():
    assert Direction(math.pi).theta == 0.0
    assert Direction(-math.pi / 4).slope == pytest.approx(-1.0)
    assert Direction(math.pi / 2).slope > 1e15 or math.isinf(Direction(math.pi / 2).slope)
    assert Direction.from_slope(2.0).isclose(Direction.from_vector(-1.0, -2.0))


def test_zero_vector_has_no_direction():
    with pytest.raises(ValueError):
        TangentVector(0.0, 0.0).direction()
    assert TangentVector(3.0, 4.0).norm() == 5.0


def test_array_helpers_agree_with_scalar_versions():
    rng = np.random.default_rng(3)
    p = rng.uniform(-3, 3, (50, 2))
    q = rng.uniform(-3, 3, (50, 2))
    w = wrap_array(p.copy())
    assert np.all((w >= 0) & (w < 1))
    d = torus_distance_array(p, q)
    assert np.allclose(d, [torus_distance(as_point(a), as_point(b)) for a, b in zip(w, wrap_array(q.copy()))])
    assert np.all(np.abs(signed_offset(p - q)) <= 0.5)
    v = rng.normal(size=(50, 2))
    assert np.allclose(angles_of(v), [Direction.from_vector(*r).theta for r in v])


def test_as_point_accepts_pairs_and_points():
    assert as_point((1.5, 2.25)) == TorusPoint(0.5, 0.25)
    p = TorusPoint(0.1, 0.2)
    assert as_point(p) is p
