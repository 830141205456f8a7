import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kinstretch import trajectories as tj
from kinstretch.geometry import Domain, Tag
from kinstretch.trajectories import (NonUnitNormal, PhasePoint, Reflection, Termination, circle_chain,
                                     reflect_specular, sample_diffuse, trace_backwards)


def test_reflect_examples():
    np.testing.assert_allclose(reflect_specular([0, 0, 1], [1, 2, 3]), [1, 2, -3])
    np.testing.assert_allclose(reflect_specular([0, 0, 1], [1, 2, 0]), [1, 2, 0])
    n = np.array([1, 1, 0]) / math.sqrt(2)
    # oracle: v - 2 (n.v) n = (1,0,0) - 2 (1/sqrt2) n = (0,-1,0)
    np.testing.assert_allclose(reflect_specular(n, [1, 0, 0]), [0, -1, 0], atol=1e-15)
    with pytest.raises(NonUnitNormal):
        reflect_specular([0, 0, 2], [1, 0, 0])


@settings(max_examples=80, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=3, max_size=3), st.lists(st.floats(-5, 5), min_size=3, max_size=3))
def test_reflection_is_involutive_isometry(nv, v):
    n = np.array(nv)
    if np.linalg.norm(n) < 1e-3:
        return
    n /= np.linalg.norm(n)
    v = np.array(v)
    w = reflect_specular(n, v)
    assert np.linalg.norm(w) == pytest.approx(np.linalg.norm(v), abs=1e-12)
    assert np.dot(n, w) == pytest.approx(-np.dot(n, v), abs=1e-12)
    np.testing.assert_allclose(reflect_specular(n, w), v, atol=1e-12)


def test_diffuse_sampler_moments():
    gen = np.random.default_rng(1)
    n = np.array([0.0, 0.6, 0.8])
    u = sample_diffuse(gen, n, size=1_000_000)
    un = u @ n
    assert np.all(un > 0)
    # oracle: Rayleigh(1) mean sqrt(pi/2)
    assert abs(un.mean() - math.sqrt(math.pi / 2)) < 1e-2
    tang = u - un[:, None] * n
    assert np.max(np.abs(tang.mean(axis=0))) < 5e-3


def test_trace_free_flight_beyond_horizon():
    d = Domain.cylinder(1, 1, 0.5)
    rec = trace_backwards(d, PhasePoint(1.0, [0, 0, 0], [1, 0, 0]), 1.0, np.random.default_rng(0))
    assert rec.terminated_by is Termination.REACHED_TIME_ZERO
    assert rec.events == []


def test_trace_first_event_on_cap_is_diffuse():
    d = Domain.cylinder(1, 1, 0.5)
    rec = trace_backwards(d, PhasePoint(5.0, [0, 0, 0], [1, 0, 0]), 5.0, np.random.default_rng(0))
    e = rec.events[0]
    assert e.t == pytest.approx(3.0)
    assert e.cls.tag == Tag.CAP1
    assert e.reflection is Reflection.DIFFUSE


def test_specular_chain_preserves_speed():
    d = Domain.cylinder(1, 1, 0.5)
    v = np.array([0.01, 0.7, 0.3])
    rec = trace_backwards(d, PhasePoint(40.0, [0, 0.5, 0.2], v), 40.0, np.random.default_rng(0))
    spec = [e for e in rec.events if e.reflection is Reflection.SPECULAR]
    assert len(spec) >= 3
    for e in spec:
        assert np.linalg.norm(e.v_out) == pytest.approx(np.linalg.norm(v), rel=1e-12)


def test_square_orbit_period_four():
    d = Domain.cylinder(1, 1, 0.5)
    R = d.R
    # from the footprint (R, 0) a chord at 45 degrees to the normal closes after four bounces
    x0 = np.array([0.0, R, 0.0])
    v0 = np.array([0.0, 1.0, -1.0])  # backwards motion x - s v heads to (0, R) direction
    xs, vs, ts = circle_chain(d, x0, v0, 8)
    np.testing.assert_allclose(xs[4], xs[0], atol=1e-9)
    np.testing.assert_allclose(xs[8], xs[4], atol=1e-9)
    chords = np.linalg.norm(np.diff(xs, axis=0), axis=1)
    np.testing.assert_allclose(chords, math.sqrt(2) * R, rtol=1e-12)


def test_diameter_orbit_period_two():
    d = Domain.cylinder(1, 1, 0.5)
    xs, vs, ts = circle_chain(d, [0, d.R, 0], [0, 1.0, 0], 4)
    np.testing.assert_allclose(xs[2], xs[0], atol=1e-9)
    np.testing.assert_allclose(np.diff(ts), -2 * d.R, rtol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.1, 1.0), st.floats(0, 2 * math.pi), st.floats(0.05, 0.95), st.floats(-1, 1),
       st.floats(0.2, 3.0))
def test_circle_chain_invariants(eps, phi, rho, axial, speed):
    d = Domain.cylinder(1, 1, eps)
    x0 = np.array([0.0, rho * d.R * math.cos(phi), rho * d.R * math.sin(phi)])
    v0 = np.array([axial, speed * math.cos(phi + 1.0), speed * math.sin(phi + 1.0)])
    rep = tj.verify_circle_chain(d, x0, v0, 50)
    assert rep.passed, rep.checks


def test_threshold_formulas():
    assert tj.epsilon_D(1, 2, 1) == 1.0
    assert tj.epsilon_S(1, 0.5, 2, 1) == 0.25


def test_cap_counterexample_above_threshold():
    d = Domain.cylinder(1, 1, 1.5)
    rep = tj.verify_single_bounce_cap(d, 0.5, 2.0, 1.0, 2000, seed=3)
    # axial flight across takes 2 L / (eps |v1|) = 2/3 < T
    assert rep.violations >= 1
    assert rep.passed


def test_cap_slow_particles_never_cross():
    d = Domain.cylinder(1, 1, 1.0)
    rep = tj.verify_single_bounce_cap(d, 0.05, 0.1, 1.0, 2000, seed=1, axial_probe=False)
    assert rep.violations == 0


def test_lateral_axial_velocity_never_rehits():
    d = Domain.cylinder(1, 1, 0.2)
    x = np.array([[0.0, d.R, 0.0]])
    v = np.array([[1.0, 0.0, 0.0]])
    _, _, stop, _, bounces, _ = tj._trace_specular_lateral(d, x, v, np.array([100.0]), 100)
    assert bounces[0] == 0


def test_angle_lemma_positive_and_stable():
    d = Domain.cylinder(1, 1, 0.5)
    a = tj.verify_diffuse_then_lateral_angle(d, 0.5, 10_000, 1.0, seed=0)
    b = tj.verify_diffuse_then_lateral_angle(d, 0.5, 100_000, 1.0, seed=0)
    A1 = a.constants["A_emp"].value
    A2 = b.constants["A_emp"].value
    assert A2 > 0
    assert abs(A1 - A2) <= 0.1 * A2


def test_jacobian_direct_and_degenerate():
    assert abs(tj.direct_map_det(3.0, 1.0)) == 8.0
    assert tj.direct_map_det(2.0, 2.0) == 0.0
