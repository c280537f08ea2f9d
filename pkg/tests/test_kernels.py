import numpy as np
import pytest

from ipslab import kernels as K
from ipslab.errors import KernelError
from ipslab.grid import ScalarField, build_grid, discrete_laplacian, integrate_volume
from ipslab.numutil import fit_rate, geometric_distances


def test_point_values():
    assert K.eval_G((1.0, 0.0, 0.0)) == pytest.approx(1.0 / (4 * np.pi), rel=1e-14)
    g = K.eval_gradG((1.0, 0.0, 0.0))
    assert np.allclose(g, [-1.0 / (4 * np.pi), 0.0, 0.0], atol=1e-15)
    # scaling: G is homogeneous of degree -1
    assert K.eval_G((0.5, 0.0, 0.0)) == pytest.approx(2.0 / (4 * np.pi), rel=1e-14)


def test_hessian_symmetric_traceless():
    rng = np.random.default_rng(3)
    z = rng.standard_normal((20, 3))
    H = K.eval_hessG(z)
    assert np.allclose(H, np.swapaxes(H, -1, -2), atol=1e-15)
    tr = np.trace(H, axis1=-2, axis2=-1)
    scale = np.max(np.abs(H), axis=(-2, -1))
    assert np.all(np.abs(tr) <= 1e-12 * scale)


def test_hessian_is_gradient_jacobian():
    z0 = np.array([0.3, -0.7, 0.45])
    H = K.eval_hessG(z0)
    eps = 1e-6
    num = np.empty((3, 3))
    for j in range(3):
        dz = np.zeros(3)
        dz[j] = eps
        num[:, j] = (K.eval_gradG(z0 + dz) - K.eval_gradG(z0 - dz)) / (2 * eps)
    assert np.allclose(H, num, rtol=1e-6, atol=1e-8)


def test_singularity_rejected():
    with pytest.raises(KernelError):
        K.eval_G((0.0, 0.0, 0.0))
    with pytest.raises(KernelError):
        K.eval_gradG(np.array([[1.0, 0, 0], [1e-15, 0, 0]]))


def test_sampled_partial_is_discretely_harmonic():
    # grad G components are harmonic away from the pole; the 7-point
    # stencil residual at a node at distance r from the pole is O(h^2)
    # times the local higher-derivative scale 1/(4 pi r^6), with an
    # h-independent constant
    x0 = np.array([-0.5, 0.4, 0.62])
    consts = []
    for n in (10, 16):
        g = build_grid((1.0, 1.0, 1.0), (n, n, n))
        X, Y, Z = g.coords
        disp = np.stack([X - x0[0], Y - x0[1], Z - x0[2]], axis=-1)
        comp = K.eval_gradG(disp)[..., 0]
        lap = discrete_laplacian(ScalarField(g, comp)).interior()
        r = np.sqrt((X - x0[0]) ** 2 + (Y - x0[1]) ** 2 + (Z - x0[2]) ** 2)
        r = r[1:-1, 1:-1, 1:-1]
        h = g.h[0]
        consts.append(np.max(np.abs(lap) * 4 * np.pi * r**6 / h**2))
    assert consts[0] < 25.0
    assert consts[1] < 25.0
    assert consts[1] == pytest.approx(consts[0], rel=0.2)


def test_cone_full_sphere_closed_form():
    val = K.cone_energy_integral((0, 0, 1), np.pi, (0, 0, 1), 0.01, 1.0)
    assert val == pytest.approx((1.0 / (12 * np.pi)) * (1 / 0.01 - 1.0), rel=1e-12)


def test_cone_angular_closed_form_battery():
    # cap integral of (omega.b)^2 has the closed form
    #   t^2 * 2 pi (1-c^3)/3 + (1-t^2) * pi (2/3 - c + c^3/3),  c = cos(theta), t = a.b
    eps, R = 0.01, 1.0
    rng = np.random.default_rng(11)
    for _ in range(6):
        a = rng.standard_normal(3)
        a /= np.linalg.norm(a)
        b = rng.standard_normal(3)
        b /= np.linalg.norm(b)
        theta = rng.uniform(0.2, np.pi / 2)
        c = np.cos(theta)
        t = a @ b
        ang = t**2 * 2 * np.pi * (1 - c**3) / 3 + (1 - t**2) * np.pi * (2 / 3 - c + c**3 / 3)
        expect = (1 / eps - 1 / R) * ang / (16 * np.pi**2)
        got = K.cone_energy_integral(a, theta, b, eps, R)
        assert got == pytest.approx(expect, rel=1e-11)


def test_cone_divergence_rate_battery():
    # value ~ c/eps: halving eps doubles the value; fitted exponent -1
    cases = [
        ((0, 0, 1), 0.5, (0, 0, 1)),
        ((0, 0, 1), 0.5, (1, 0, 0)),        # b orthogonal to the axis
        ((1, 1, 1) / np.sqrt(3), 0.3, (1, -1, 0) / np.sqrt(2)),
        ((0, 1, 0), 1.0, (0, 1, 0)),
        ((1, 0, 0), 0.2, (0, 0, 1)),        # narrow cone, orthogonal b
    ]
    eps_list = geometric_distances(1e-2, 5, factor=np.sqrt(10))
    for a, theta, b in cases:
        vals = [K.cone_energy_integral(a, theta, b, e, 1.0) for e in eps_list]
        rate, _, r2 = fit_rate(eps_list, np.array(vals))
        assert rate == pytest.approx(-1.0, abs=0.05)
        # direct doubling check at small eps
        v1 = K.cone_energy_integral(a, theta, b, 1e-4, 1.0)
        v2 = K.cone_energy_integral(a, theta, b, 5e-5, 1.0)
        assert v2 / v1 == pytest.approx(2.0, rel=2e-3)


def test_cone_rejects_degenerate():
    with pytest.raises(KernelError):
        K.cone_energy_integral((0, 0, 1), 0.0, (0, 0, 1), 0.01, 1.0)
    with pytest.raises(KernelError):
        K.cone_energy_integral((0, 0, 1), 0.5, (0, 0, 1), 0.5, 0.2)


def test_exterior_energy_center_agrees_with_surface_form():
    x = np.array([0.5, 0.5, 0.5])
    vol = K.exterior_hess_energy(x)
    surf = -K.boundary_grad_hess_flux(x)
    assert vol == pytest.approx(surf, rel=1e-3)


def test_exterior_energy_cross_agrees_and_symmetric():
    x = np.array([0.2, 0.35, 0.6])
    y = np.array([0.55, 0.5, 0.3])
    vol = K.exterior_hess_energy(x, y)
    surf = -K.boundary_grad_hess_flux(x, y)
    assert vol == pytest.approx(surf, rel=1e-3)
    assert K.exterior_hess_energy(y, x) == pytest.approx(vol, rel=1e-4)


def test_exterior_energy_far_tail_bracket():
    # the contribution beyond the bounding cube lies between the closed-form
    # tails over the inscribed and circumscribed spheres
    box = np.array([1.0, 1.0, 1.0])
    x = np.array([0.3, 0.5, 0.45])
    half = 2.0 * float(np.linalg.norm(box))
    far = K._far_value(x, x, box, half)
    d = x - box / 2.0
    hi = 3.0 / (8 * np.pi**2) * K.exterior_ball_tail(d, half)
    lo = 3.0 / (8 * np.pi**2) * K.exterior_ball_tail(d, half * np.sqrt(3.0))
    assert lo <= far <= hi


def test_exterior_ball_tail_limits():
    # centered pole reduces to 4 pi / (3 R^3); value grows as pole nears shell
    assert K.exterior_ball_tail((0, 0, 0), 2.0) == pytest.approx(
        4 * np.pi / (3 * 8.0), rel=1e-12
    )
    a = K.exterior_ball_tail((0.5, 0, 0), 2.0)
    b = K.exterior_ball_tail((1.5, 0, 0), 2.0)
    assert b > a > K.exterior_ball_tail((0, 0, 0), 2.0)


def test_exterior_energy_near_face_rate():
    ds = geometric_distances(0.12, 6)
    vals = np.array([K.exterior_hess_energy(np.array([d, 0.5, 0.5])) for d in ds])
    rate, _, r2 = fit_rate(ds, vals)
    assert rate == pytest.approx(-3.0, abs=0.1)
    assert r2 > 0.999
    # near a wall the half-space closed form 1/(16 pi d^3) dominates
    assert vals[-1] * ds[-1] ** 3 * 16 * np.pi == pytest.approx(1.0, rel=1e-3)


def test_exterior_energy_rejects_outside_pole():
    with pytest.raises(KernelError):
        K.exterior_hess_energy(np.array([1.2, 0.5, 0.5]))


def test_boundary_grad_norm_translation_and_margin():
    box = (1.0, 1.0, 1.0)
    v1 = K.boundary_grad_norm(np.array([0.4, 0.5, 0.5]), box)
    v2 = K.boundary_grad_norm(np.array([0.6, 0.5, 0.5]), box)
    assert v1 == pytest.approx(v2, rel=1e-6)  # mirror symmetry of the box
    center = K.boundary_grad_norm(np.array([0.5, 0.5, 0.5]), box)
    assert center < 1.0  # bounded well away from the walls


def test_boundary_over_exterior_ratio_vanishes():
    ds = geometric_distances(0.12, 6)
    ratio = np.array(
        [
            K.boundary_grad_norm(np.array([d, 0.5, 0.5]))
            / K.exterior_hess_energy(np.array([d, 0.5, 0.5]))
            for d in ds
        ]
    )
    rate, _, _ = fit_rate(ds, ratio)
    assert rate >= 0.4
    assert np.all(np.diff(ratio[::-1]) < 0) or ratio[-1] < ratio[0]


def test_ball_grad_sq_closed_form_far_limit():
    # far pole: integral ~ volume * |grad G at center distance|^2
    c = np.array([0.5, 0.5, 0.5])
    rho = 0.1
    x = c + np.array([30.0, 0, 0])
    vol = 4 / 3 * np.pi * rho**3
    expect = vol / (16 * np.pi**2 * 30.0**4)
    assert K.ball_grad_sq_integral(c, rho, x) == pytest.approx(expect, rel=1e-3)


def test_ball_grad_sq_matches_lattice_quadrature():
    # lattice quadrature of |grad G|^2 over the nodal ball mask approaches
    # the closed form as the grid refines (staircase geometry limits rate)
    c = (0.5, 0.5, 0.5)
    rho = 0.2
    x = np.array([0.85, 0.15, 0.2])
    exact = K.ball_grad_sq_integral(c, rho, x)
    errs = []
    for n in (16, 32, 48):
        g = build_grid((1.0, 1.0, 1.0), (n, n, n))
        X, Y, Z = g.coords
        mask = (X - c[0]) ** 2 + (Y - c[1]) ** 2 + (Z - c[2]) ** 2 <= rho**2
        disp = np.stack([X - x[0], Y - x[1], Z - x[2]], axis=-1)
        integ = np.sum(K.eval_gradG(disp) ** 2, axis=-1)
        errs.append(abs(integrate_volume(ScalarField(g, integ), mask) - exact) / exact)
    assert errs[-1] < 0.02
    assert errs[-1] < errs[0]


def test_ball_grad_sq_rejects_inside_pole():
    with pytest.raises(KernelError):
        K.ball_grad_sq_integral((0.5, 0.5, 0.5), 0.2, (0.5, 0.5, 0.6))
