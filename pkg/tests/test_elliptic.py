import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kinstretch import elliptic as el
from kinstretch.elliptic import CylinderGrid, EllipticProblem, SingularSystem
from kinstretch.geometry import Domain


def test_zero_source_gives_zero():
    p = EllipticProblem(Domain.cylinder(1, 1, 0.5), "P1", 12, 6, 12)
    w, info = p.solve(np.zeros(p.grid.size))
    assert np.all(w == 0)


def test_grid_volume_matches_cylinder():
    g = CylinderGrid(2.0, 1.5, 8, 6, 12)
    assert g.vol.sum() == pytest.approx(2 * 2.0 * math.pi * 1.5 ** 2, rel=1e-13)
    with pytest.raises(ValueError):
        CylinderGrid(1, 1, 8, 4, 8)


def test_p2_rejects_incompatible_source():
    p = EllipticProblem(Domain.cylinder(1, 1, 1.0), "P2", 12, 6, 12)
    with pytest.raises(SingularSystem):
        p.solve(np.ones(p.grid.size), project=False)


def test_p2_neumann_mode_second_order():
    errs = []
    for nx in (12, 24):
        p = EllipticProblem(Domain.cylinder(1, 1, 0.5), "P2", nx, 6, 8)
        w_ex, xi = el.neumann_mode(p.grid, 0.5, 1.0)
        w, _ = p.solve(xi)
        errs.append(p.grid.l2(w - w_ex) / p.grid.l2(w_ex))
    # oracle: the separable 1-D solution (L / (pi eps))^2 cos(pi eps x1 / L)
    assert errs[1] < 0.01
    assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.15)


def test_manufactured_order():
    rows = el.manufactured_study()
    hs = [r[0] for r in rows]
    assert el.convergence_order(hs, [r[1] for r in rows]) == pytest.approx(2.0, abs=0.3)
    assert el.convergence_order(hs, [r[2] for r in rows]) == pytest.approx(2.0, abs=0.3)


def test_robin_wavenumber():
    k = el.robin_wavenumber(1.0, 1.0)
    assert k * math.tan(k) == pytest.approx(1.0, rel=1e-12)
    assert el.beta_of_alpha(1.0) == 1.0


def test_reflection_value_match_and_continuity():
    g = CylinderGrid(2.0, 1.0, 8, 6, 8)
    X, Y, Z = g.cartesian()
    u = (np.cos(0.7 * X) + 0.1 * X ** 3 * Y).ravel()
    ext, eg = el.reflect_extend(u, g)
    E = ext.reshape(eg.shape)
    U = u.reshape(g.shape)
    # left branch: u_hat(x1) = u(-x1 - 2L) at the cell centres of (-2L, -L)
    for i, x1 in enumerate(eg.x):
        if x1 < -g.L:
            j = int(np.argmin(np.abs(g.x - (-x1 - 2 * g.L))))
            assert g.x[j] == pytest.approx(-x1 - 2 * g.L)
            np.testing.assert_array_equal(E[i], U[j])
        elif x1 > g.L:
            j = int(np.argmin(np.abs(g.x - (-x1 + 2 * g.L))))
            np.testing.assert_array_equal(E[i], U[j])
    # even data: the cells either side of each seam carry equal values
    q = eg.nx // 4
    np.testing.assert_array_equal(E[q - 1], E[q])
    np.testing.assert_array_equal(E[3 * q - 1], E[3 * q])


def test_reflection_residual_neumann_caps():
    p = EllipticProblem(Domain.cylinder(1, 1, 1.0), "P2", 16, 6, 8)
    xi = el.random_source(p.grid, 1.0, np.random.default_rng(0))
    w, _ = p.solve(xi)
    ext, inner, jump = el.extension_residual(p, w, p.prepare_source(xi))
    assert jump == 0.0
    assert ext <= 2 * inner + 1e-12


def test_coercivity_positive():
    p = EllipticProblem(Domain.cylinder(1, 1, 1.0), "P1", 12, 6, 8)
    assert p.coercivity() > 0


@settings(max_examples=10, deadline=None)
@given(st.sampled_from(["P1", "P2"]), st.integers(0, 2 ** 31 - 1))
def test_stiffness_symmetric_psd(mode, seed):
    p = EllipticProblem(Domain.cylinder(1, 1, 0.7), mode, 8, 6, 8)
    assert abs(p.A - p.A.T).max() < 1e-12 * abs(p.A).max()
    x = np.random.default_rng(seed).standard_normal(p.grid.size)
    assert x @ (p.A @ x) >= -1e-10
    if mode == "P2":
        assert np.abs(p.A @ np.ones(p.grid.size)).max() < 1e-10


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.floats(0.1, 10.0))
def test_solution_linear_in_source(seed, scale):
    p = EllipticProblem(Domain.cylinder(1, 1, 0.5), "P1", 8, 6, 8, tol=1e-12)
    xi = el.random_source(p.grid, 0.5, np.random.default_rng(seed))
    w1, _ = p.solve(xi)
    w2, _ = p.solve(scale * xi)
    np.testing.assert_allclose(w2, scale * w1, rtol=1e-8, atol=1e-10 * np.abs(w2).max())
