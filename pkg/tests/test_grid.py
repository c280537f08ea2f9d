import numpy as np
import pytest

from ipslab.errors import GridError
from ipslab.grid import (
    BoundaryField,
    ScalarField,
    VectorField,
    build_grid,
    discrete_gradient,
    discrete_laplacian,
    divergence_field,
    face_normal_derivative,
    integrate_surface,
    integrate_volume,
    normal_derivative,
    set_boundary,
    surface_flux_integral,
)


def unit_grid(n):
    return build_grid((1.0, 1.0, 1.0), (n, n, n))


def test_counts_and_spacing_small():
    g = build_grid((1.0, 1.0, 1.0), (3, 3, 3))
    assert g.shape == (5, 5, 5)
    assert g.interior_count == 27
    assert g.boundary_count == 98
    assert g.h == (0.25, 0.25, 0.25)
    assert len(g.boundary_nodes) == 98
    assert len(g.boundary_normals) == 98


def test_rejects_bad_sizes():
    with pytest.raises(GridError):
        build_grid((1.0, 1.0), (4, 4, 4))
    with pytest.raises(GridError):
        build_grid((1.0, 1.0, 1.0), (2, 4, 4))  # below minimum
    with pytest.raises(GridError):
        build_grid((0.0, 1.0, 1.0), (4, 4, 4))


def test_normals_face_priority():
    g = unit_grid(4)
    idx = g.boundary_index
    normals = g.boundary_normals
    # corner gets the x-face normal
    assert tuple(normals[idx[(0, 0, 0)]]) == (-1, 0, 0)
    # y-z edge node with interior x index gets the y-face normal
    assert tuple(normals[idx[(2, 0, 0)]]) == (0, -1, 0)
    assert tuple(normals[idx[(2, 5, 0)]]) == (0, 1, 0)
    # plain face node
    assert tuple(normals[idx[(2, 2, 5)]]) == (0, 0, 1)
    assert np.all(np.abs(normals).sum(axis=1) == 1)


def test_volume_weights_sum_to_volume():
    g = build_grid((1.0, 2.0, 0.5), (5, 7, 4))
    assert integrate_volume(ScalarField(g, np.ones(g.shape))) == pytest.approx(1.0, rel=1e-13)
    total = float(g.volume_weights.sum())
    assert total == pytest.approx(1.0 * 2.0 * 0.5 / 1.0, rel=1e-13)


def test_surface_weights_sum_to_area():
    g = build_grid((1.0, 1.0, 1.0), (6, 6, 6))
    assert integrate_surface(BoundaryField(g, np.ones(g.boundary_count))) == pytest.approx(
        6.0, rel=1e-13
    )


def test_laplacian_annihilates_affine():
    g = unit_grid(6)
    f = ScalarField.from_function(g, lambda x, y, z: 2.0 + 3 * x - 5 * y + 0.5 * z)
    lap = discrete_laplacian(f)
    assert np.max(np.abs(lap.interior())) < 1e-12


def test_laplacian_exact_on_quadratic():
    g = unit_grid(5)
    f = ScalarField.from_function(g, lambda x, y, z: x**2)
    lap = discrete_laplacian(f)
    assert np.allclose(lap.interior(), 2.0, atol=1e-11)


def test_gradient_exact_on_affine_and_bilinear():
    g = unit_grid(5)
    f = ScalarField.from_function(g, lambda x, y, z: 1 + 2 * x - y + 4 * z)
    grad = discrete_gradient(f)
    assert np.allclose(grad[0].values, 2.0, atol=1e-12)
    assert np.allclose(grad[1].values, -1.0, atol=1e-12)
    assert np.allclose(grad[2].values, 4.0, atol=1e-12)
    # centered and one-sided second-order stencils are exact on x*y too
    f2 = ScalarField.from_function(g, lambda x, y, z: x * y)
    g2 = discrete_gradient(f2)
    X, Y, _ = g.coords
    assert np.allclose(g2[0].values, Y, atol=1e-12)
    assert np.allclose(g2[1].values, X, atol=1e-12)


def test_divergence_of_linear_vector_field():
    g = unit_grid(5)
    vec = VectorField.from_function(g, lambda x, y, z: (2 * x, -3 * y, 7 * z))
    div = divergence_field(vec)
    assert np.allclose(div.values, 6.0, atol=1e-11)


def test_normal_derivative_on_linear_field():
    g = unit_grid(4)
    f = ScalarField.from_function(g, lambda x, y, z: 3 * x + 2 * y - z)
    nd = normal_derivative(f)
    normals = g.boundary_normals
    expected = normals @ np.array([3.0, 2.0, -1.0])
    assert np.allclose(nd.values, expected, atol=1e-11)


def test_normal_derivative_exact_order_on_cubic():
    # fourth derivatives vanish, so the one-sided stencil error is a pure
    # h^2 term and the observed rate must be 2 up to round-off
    def f(x, y, z):
        return x**3 + 2 * y**3 - z**3 + x * y * z

    def exact_grad(p):
        x, y, z = p
        return np.array([3 * x**2 + y * z, 6 * y**2 + x * z, -3 * z**2 + x * y])

    errs = []
    for n in (8, 16):
        g = unit_grid(n)
        nd = normal_derivative(ScalarField.from_function(g, f))
        exact = np.array(
            [
                exact_grad(g.boundary_coords[i]) @ g.boundary_normals[i]
                for i in range(g.boundary_count)
            ]
        )
        errs.append(np.max(np.abs(nd.values - exact)))
    rate = np.log(errs[0] / errs[1]) / np.log(17 / 9)  # h = 1/(n+1)
    assert rate == pytest.approx(2.0, abs=0.02)


def test_normal_derivative_converges_on_point_source_kernel():
    # kernel centered outside the box: smooth but with slowly decaying
    # higher derivatives, so max-norm rates approach 2 from below
    x0 = np.array([-0.4, 0.3, 0.55])

    def kern(x, y, z):
        r = np.sqrt((x - x0[0]) ** 2 + (y - x0[1]) ** 2 + (z - x0[2]) ** 2)
        return 1.0 / (4 * np.pi * r)

    errs = []
    for n in (8, 16, 32):
        g = unit_grid(n)
        nd = normal_derivative(ScalarField.from_function(g, kern))
        p = g.boundary_coords
        nrm = g.boundary_normals.astype(float)
        d = p - x0
        r = np.linalg.norm(d, axis=1)
        exact = -np.einsum("ij,ij->i", d, nrm) / (4 * np.pi * r**3)
        errs.append(np.max(np.abs(nd.values - exact)))
    assert np.log(errs[0] / errs[1]) / np.log(17 / 9) > 1.4
    assert np.log(errs[1] / errs[2]) / np.log(33 / 17) > 1.6
    assert errs[2] < 5e-3


def test_summation_by_parts_symmetry():
    # trapezoid weights are uniform h^3 on the interior, so for fields
    # vanishing on the walls the pairing with the 7-point operator is the
    # symmetric stiffness matrix and the asymmetry is pure round-off
    rng = np.random.default_rng(7)
    g = unit_grid(6)
    u = ScalarField.zeros(g)
    v = ScalarField.zeros(g)
    u.values[1:-1, 1:-1, 1:-1] = rng.standard_normal((6, 6, 6))
    v.values[1:-1, 1:-1, 1:-1] = rng.standard_normal((6, 6, 6))
    a = integrate_volume(ScalarField(g, discrete_laplacian(u).values * v.values))
    b = integrate_volume(ScalarField(g, u.values * discrete_laplacian(v).values))
    scale = max(abs(a), abs(b), 1.0)
    assert abs(a - b) / scale < 1e-13


def test_quadrature_second_order_on_smooth_integrand():
    exact = (1 - np.cos(1.0)) ** 3  # integral of sin(x)sin(y)sin(z) over unit box

    def f(x, y, z):
        return np.sin(x) * np.sin(y) * np.sin(z)

    errs = []
    for n in (8, 16, 32):
        g = unit_grid(n)
        errs.append(abs(integrate_volume(ScalarField.from_function(g, f)) - exact))
    rate = np.log(errs[0] / errs[2]) / np.log(33 / 9)  # h = 1/(n+1)
    assert 1.8 < rate < 2.2


def test_face_normal_derivative_covers_edges():
    g = unit_grid(4)
    f = ScalarField.from_function(g, lambda x, y, z: x * 1.0)
    # on the x- face the outward derivative of x is -1 everywhere incl. edges
    d = face_normal_derivative(f, 0, 0)
    assert np.allclose(d, -1.0, atol=1e-12)
    d = face_normal_derivative(f, 0, 1)
    assert np.allclose(d, 1.0, atol=1e-12)
    # transverse faces see zero
    d = face_normal_derivative(f, 1, 0)
    assert np.allclose(d, 0.0, atol=1e-12)


def test_surface_flux_integral_divergence_theorem():
    # u = x^2: flux integral of du/dnu over the surface equals integral of
    # laplacian(u) = 2 over the box, exactly for quadratics
    g = unit_grid(6)
    f = ScalarField.from_function(g, lambda x, y, z: x**2)
    val = surface_flux_integral(f, lambda axis, side, X, Y, Z: np.ones_like(X))
    assert val == pytest.approx(2.0, rel=1e-12)


def test_boundary_field_roundtrip_and_scatter():
    g = unit_grid(4)
    f = ScalarField.from_function(g, lambda x, y, z: x + 10 * y + 100 * z)
    b = f.boundary_values()
    full = b.scatter()
    nodes = g.boundary_nodes
    assert np.allclose(full[nodes[:, 0], nodes[:, 1], nodes[:, 2]], b.values)
    assert full[2, 2, 2] == 0.0
    z = ScalarField.zeros(g)
    set_boundary(z, b)
    assert np.allclose(z.values[nodes[:, 0], nodes[:, 1], nodes[:, 2]], b.values)
    assert np.max(np.abs(z.interior())) == 0.0


def test_field_shape_validation():
    g = unit_grid(4)
    with pytest.raises(GridError):
        ScalarField(g, np.zeros((3, 3, 3)))
    with pytest.raises(GridError):
        BoundaryField(g, np.zeros(7))


def test_trilinear_at_matches_function_for_linear():
    g = unit_grid(5)
    f = ScalarField.from_function(g, lambda x, y, z: 2 * x - y + 3 * z + 1)
    for p in ([0.3, 0.4, 0.5], [0.11, 0.77, 0.2], [0.5, 0.5, 0.5]):
        assert f.at(p) == pytest.approx(2 * p[0] - p[1] + 3 * p[2] + 1, abs=1e-12)
