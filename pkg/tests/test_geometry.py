import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kinstretch.geometry import (AccommodationProfile, Domain, NotOnBoundary, Tag, ZeroVelocity)


@pytest.fixture
def cyl():
    return Domain.cylinder(1.0, 1.0, 0.5)


def test_contains_examples(cyl):
    assert cyl.contains([0.0, 0.0, 0.0])
    # x1 = 2 = L / eps sits on the cap
    assert not cyl.contains([2.0, 0.0, 0.0])
    ball = Domain.ball(1.0, 0.25)
    # oracle: |x| = 3.9 < 1 / eps = 4 by the Euclidean norm
    assert ball.contains([3.9, 0.0, 0.0]) == (np.linalg.norm([3.9, 0, 0]) < 4.0)


def test_effective_dimensions(cyl):
    assert cyl.L == 2.0 and cyl.R == 2.0
    assert cyl.volume() == pytest.approx(2 * 2.0 * np.pi * 4.0)


def test_classify_examples(cyl):
    b = cyl.outward_normal([0.0, 2.0, 0.0])
    assert b.tag == Tag.LATERAL
    np.testing.assert_allclose(b.normal, [0, 1, 0])
    b = cyl.outward_normal([-2.0, 0.3, 0.1])
    assert b.tag == Tag.CAP1
    np.testing.assert_allclose(b.normal, [-1, 0, 0])
    assert cyl.outward_normal([2.0, 2.0, 0.0]).tag == Tag.SINGULAR_EDGE


def test_not_on_boundary(cyl):
    with pytest.raises(NotOnBoundary):
        cyl.outward_normal([0.0, 0.0, 0.0])


def test_exit_time_axial_and_radial(cyl):
    tb, xe, cls = cyl.exit_time([0, 0, 0], [1, 0, 0])
    assert tb == pytest.approx(2.0)
    np.testing.assert_allclose(xe, [-2, 0, 0])
    assert cls.tag == Tag.CAP1
    tb, xe, cls = cyl.exit_time([0, 0, 0], [0, -1, 0])
    assert tb == pytest.approx(2.0)
    np.testing.assert_allclose(xe, [0, 2, 0], atol=1e-12)
    assert cls.tag == Tag.LATERAL


def test_exit_time_ball_quadratic_oracle():
    ball = Domain.ball(1.0, 1.0)
    x, v = np.array([0.5, 0, 0]), np.array([1.0, 0, 0])
    # oracle: |x - t v|^2 = 1 solved by the quadratic formula, larger root
    a, b, c = v @ v, -2 * x @ v, x @ x - 1
    t = (-b + np.sqrt(b * b - 4 * a * c)) / (2 * a)
    tb, xe, _ = ball.exit_time(x, v)
    assert tb == pytest.approx(t) == pytest.approx(1.5)
    np.testing.assert_allclose(xe, [-1, 0, 0])


def test_zero_velocity(cyl):
    with pytest.raises(ZeroVelocity):
        cyl.exit_time([0, 0, 0], [0, 0, 0])


def test_accommodation_profiles():
    acc = AccommodationProfile("caps_diffuse")
    np.testing.assert_array_equal(acc.at_tag([Tag.CAP1, Tag.CAP2, Tag.LATERAL]), [1, 1, 0])
    with pytest.raises(ValueError):
        AccommodationProfile("constant", 0.0)
    with pytest.raises(ValueError):
        Domain.cylinder(1, 1, -1.0)


@settings(max_examples=60, deadline=None)
@given(st.floats(0.05, 1.0), st.floats(-0.9, 0.9), st.floats(-0.6, 0.6), st.floats(-0.6, 0.6),
       st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1))
def test_exit_point_lies_on_wall(eps, a, b, c, v1, v2, v3):
    d = Domain.cylinder(1.0, 1.0, eps)
    x = np.array([a * d.L, b * d.R, c * d.R])
    v = np.array([v1, v2, v3])
    if np.linalg.norm(v) < 1e-3:
        return
    tb, xe, tag, n = d.exit_times(x, v)
    if not np.isfinite(tb[0]):
        return
    assert tb[0] >= 0
    assert abs(d.signed_distance(xe[0])) <= 1e-8 * d.diameter
    # the path before the exit stays inside
    mid = x - 0.5 * tb[0] * v
    assert d.signed_distance(mid) >= -1e-9 * d.diameter


@settings(max_examples=40, deadline=None)
@given(st.floats(0.05, 1.0), st.floats(0, 2 * np.pi), st.floats(-0.99, 0.99))
def test_lateral_normal_is_radial(eps, phi, s):
    d = Domain.cylinder(1.0, 1.0, eps)
    x = np.array([s * d.L, d.R * np.cos(phi), d.R * np.sin(phi)])
    b = d.outward_normal(x)
    if b.tag == Tag.LATERAL:
        np.testing.assert_allclose(b.normal, [0, np.cos(phi), np.sin(phi)], atol=1e-12)
