import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tubewave.core import (
    CrossSection,
    Field,
    Params,
    TubeGrid,
    apply_operator,
    field_from_csv,
    field_to_csv,
    lattice_norm,
    p_laplacian_apply,
    rescale_forward,
    rescale_inverse,
    resolve_stencil,
)


def test_params_validation():
    with pytest.raises(ValueError):
        Params(1.5)
    with pytest.raises(ValueError):
        Params(float("nan"))
    assert Params(2.0).reaction_coefficient is None
    assert Params(4.0).reaction_coefficient == 0.5
    with pytest.raises(ValueError):
        Params(2.0).require_nonlinear()


def test_cross_section_geometry():
    s = CrossSection(2.0, 9)
    assert s.dz == 0.25
    assert s.mid_index == 4 and s.z[s.mid_index] == 1.0
    with pytest.raises(ValueError):
        CrossSection(1.0, 2)
    with pytest.raises(ValueError):
        CrossSection(-1.0, 5)


def test_symmetric_grid_has_origin_and_square_cells():
    g = TubeGrid.symmetric(CrossSection(1.0, 17), 3.0)
    assert g.square_cells
    k = g.index_of_y(0.0)
    assert k is not None and g.y[k] == 0.0
    assert g.index_of_y(0.03) is None
    with pytest.raises(ValueError):
        TubeGrid(CrossSection(1.0, 5), 1.0, 0.0, 5)


def test_field_is_read_only_and_finite():
    s = CrossSection(1.0, 5)
    f = Field(s, np.zeros(5))
    with pytest.raises(ValueError):
        f.values[0] = 1.0
    with pytest.raises(ValueError):
        Field(s, np.array([0, 1, np.nan, 1, 0.0]))
    with pytest.raises(ValueError):
        Field(s, np.zeros(4))


@pytest.mark.parametrize("two_d", [False, True])
def test_constant_field_gives_zero(two_d):
    s = CrossSection(1.0, 9)
    grid = TubeGrid.symmetric(s, 1.0) if two_d else s
    f = Field(grid, np.full(grid.shape, 3.0))
    assert np.all(p_laplacian_apply(f, Params(4.0)).values == 0.0)


def test_linear_field_has_constant_flux():
    s = CrossSection(1.0, 11)
    f = Field(s, 2.0 * s.z)
    out = p_laplacian_apply(f, Params(4.0), eps_reg=0.0).values
    assert np.max(np.abs(out[1:-1])) < 1e-10


def test_quadratic_matches_symbolic_value():
    # d/dx(|2x|^2 2x) = 24 x^2 = 6 at x = 0.5
    errs = []
    for n in (21, 41, 81):
        s = CrossSection(1.0, n)
        out = p_laplacian_apply(Field(s, s.z ** 2), Params(4.0), eps_reg=0.0).values
        errs.append(abs(out[s.mid_index] - 6.0))
    assert errs[0] < 1e-2
    # order >= 1 on three refinement levels
    assert errs[1] <= 0.55 * errs[0] + 1e-12 and errs[2] <= 0.55 * errs[1] + 1e-12


@pytest.mark.parametrize("lam", [0.5, 2.0])
@pytest.mark.parametrize("two_d", [False, True])
def test_homogeneity(lam, two_d, rng):
    s = CrossSection(1.0, 9)
    grid = TubeGrid.symmetric(s, 0.5) if two_d else s
    u = rng.random(grid.shape)
    p = Params(4.0)
    a = p_laplacian_apply(Field(grid, lam * u), p, eps_reg=0.0).values
    b = p_laplacian_apply(Field(grid, u), p, eps_reg=0.0).values
    np.testing.assert_allclose(a, lam ** 3 * b, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("p", [3.0, 4.0])
def test_lattice_reduces_to_line_for_y_independent_fields(p):
    s = CrossSection(1.0, 17)
    g = TubeGrid.symmetric(s, 0.5)
    prof = np.sin(np.pi * s.z) ** 1.5
    u = np.tile(prof, (g.n_y, 1))
    two = apply_operator(u, g, p, 1e-8, "lattice")
    one = apply_operator(prof, s, p, 1e-8)
    np.testing.assert_allclose(two[1:-1], np.tile(one, (g.n_y - 2, 1)), rtol=1e-12, atol=1e-14)


def test_lattice_is_isotropic_at_p4():
    # u = (x^2 + y^2)/2 has Lap_4 u = 4 r^2; the lattice stencil is exact up to O(h^2)
    s = CrossSection(2.0, 33)
    g = TubeGrid.symmetric(s, 1.0)
    Y, Z = np.meshgrid(g.y, g.z - 1.0, indexing="ij")
    u = 0.5 * (Y ** 2 + Z ** 2)
    out = apply_operator(u, g, 4.0, 0.0, "lattice")
    exact = 4.0 * (Y ** 2 + Z ** 2)
    err = np.max(np.abs(out - exact)[1:-1, 1:-1])
    assert err < 0.05


def test_stencil_selection():
    s = CrossSection(1.0, 9)
    sq = TubeGrid.symmetric(s, 1.0)
    rect = TubeGrid(s, -1.0, 1.0, 11)
    assert resolve_stencil(s, 4.0) == "line"
    assert resolve_stencil(sq, 4.0) == "lattice"
    assert resolve_stencil(sq, 3.0) == "face"
    assert resolve_stencil(rect, 4.0) == "face"
    with pytest.raises(ValueError):
        resolve_stencil(rect, 4.0, "lattice")
    with pytest.raises(ValueError):
        resolve_stencil(sq, 4.0, "spectral")
    assert lattice_norm(2.0) == 2.0


def test_rescale_examples():
    p = Params(4.0)
    for t in (0.3, 1.0, 7.0):
        v, tau = rescale_forward(t ** -0.5, t, p)
        assert v == pytest.approx(1.0, rel=1e-14) and tau == pytest.approx(math.log(t))
    assert rescale_forward(0.25, 0.0, p, shifted=True) == (0.25, 0.0)
    v, tau = rescale_forward(3 * math.exp(-1), math.exp(2), p)
    assert v == pytest.approx(3.0, rel=1e-14) and tau == pytest.approx(2.0, rel=1e-14)
    assert rescale_inverse(1.0, 0.0, p) == (1.0, 1.0)
    u, t = rescale_inverse(3.0, 2.0, p)
    assert u == pytest.approx(3 * math.exp(-1), rel=1e-14) and t == pytest.approx(math.exp(2))
    with pytest.raises(ValueError):
        rescale_forward(1.0, 0.0, p)
    with pytest.raises(ValueError):
        rescale_forward(1.0, -0.5, p, shifted=True)


@settings(max_examples=60, deadline=None)
@given(u=st.floats(1e-6, 1e3), t=st.floats(1e-3, 1e3), p=st.floats(2.1, 8.0),
       shifted=st.booleans())
def test_rescale_round_trip(u, t, p, shifted):
    params = Params(p)
    v, tau = rescale_forward(u, t, params, shifted)
    u2, t2 = rescale_inverse(v, tau, params, shifted)
    assert u2 == pytest.approx(u, rel=1e-12)
    assert t2 == pytest.approx(t, rel=1e-12, abs=1e-12)


def test_csv_round_trip(tmp_path, rng):
    s = CrossSection(1.0, 9)
    g = TubeGrid.symmetric(s, 0.5)
    f = Field(g, rng.random(g.shape), 1.25)
    path = tmp_path / "f.csv"
    text = field_to_csv(f, path)
    assert text.startswith("# grid: 9,")
    back = field_from_csv(path)
    np.testing.assert_array_equal(back.values, f.values)
    assert back.time_tag == 1.25 and back.grid.shape == g.shape
    prof = Field(s, np.sin(np.pi * s.z))
    field_to_csv(prof, tmp_path / "p.csv")
    back = field_from_csv(tmp_path / "p.csv")
    np.testing.assert_array_equal(back.values, prof.values)
