"""Fundamental-solution kernel of the Laplacian and its singular integrals.

Closed forms: G(z) = 1/(4 pi |z|), grad G(z) = -z/(4 pi |z|^3),
hess G(z) = (3 zz^T/|z|^2 - I)/(4 pi |z|^3).  On top of those this module
evaluates the truncated-cone energy of |grad G . b|^2, the energy of
hess G over the exterior of the box (also the cross version with two
poles), and surface integrals of grad G over the box walls.  Analytic
tails and whole-ball integrals with closed forms are exposed for use as
oracles and for exact-geometry denominators.
"""

from __future__ import annotations

import numpy as np

from . import _accel
from .errors import KernelError, QuadratureError

FOUR_PI = 4.0 * np.pi
SIXTEEN_PI2 = 16.0 * np.pi**2
_MIN_R = 1e-14


def _radii(z):
    r = np.sqrt(np.sum(np.asarray(z, dtype=float) ** 2, axis=-1))
    if np.any(r < _MIN_R):
        raise KernelError("kernel evaluated at (or too near) its singular point")
    return r


def eval_G(z):
    """Fundamental solution at displacement z; z may be (..., 3)."""
    return 1.0 / (FOUR_PI * _radii(z))


def eval_gradG(z):
    z = np.asarray(z, dtype=float)
    r = _radii(z)
    return -z / (FOUR_PI * r**3)[..., None]


def eval_hessG(z):
    z = np.asarray(z, dtype=float)
    r = _radii(z)
    zhat = z / r[..., None]
    outer = zhat[..., :, None] * zhat[..., None, :]
    eye = np.eye(3).reshape((1,) * (z.ndim - 1) + (3, 3))
    return (3.0 * outer - eye) / (FOUR_PI * r**3)[..., None, None]


# ---------------------------------------------------------------- 1D panels

_GAUSS_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _gauss(order: int):
    if order not in _GAUSS_CACHE:
        _GAUSS_CACHE[order] = np.polynomial.legendre.leggauss(order)
    return _GAUSS_CACHE[order]


def _rule_on_segments(segments, order: int):
    xg, wg = _gauss(order)
    nodes = []
    weights = []
    for a, b in segments:
        mid = 0.5 * (a + b)
        half = 0.5 * (b - a)
        nodes.append(mid + half * xg)
        weights.append(half * wg)
    return np.concatenate(nodes), np.concatenate(weights)


def _graded_from(start: float, stop: float, w1: float, ratio: float = 2.0):
    """Panels from `start` toward `stop`, widths w1, w1*ratio, ..."""
    segs = []
    sgn = 1.0 if stop > start else -1.0
    pos = start
    w = w1
    while (stop - pos) * sgn > 1e-14:
        step = min(w, (stop - pos) * sgn)
        nxt = pos + sgn * step
        segs.append((min(pos, nxt), max(pos, nxt)))
        pos = nxt
        w *= ratio
    return segs


def _graded_around(a: float, b: float, clusters, w1: float):
    """Cover [a, b] with panels graded toward each cluster point."""
    cl = sorted(min(max(float(c), a), b) for c in clusters)
    # merge clusters closer than one first-panel width
    merged = []
    for c in cl:
        if not merged or c - merged[-1] > w1:
            merged.append(c)
    cuts = [a]
    for c0, c1 in zip(merged, merged[1:]):
        cuts.append(0.5 * (c0 + c1))
    cuts.append(b)
    segs = []
    for c, lo, hi in zip(merged, cuts, cuts[1:]):
        if c - lo > 1e-14:
            segs.extend(_graded_from(c, lo, w1))
        if hi - c > 1e-14:
            segs.extend(_graded_from(c, hi, w1))
    return sorted(segs)


def _mapped_halfline(edge: float, direction: float, scale: float, order: int,
                     panels=((0.0, 0.5), (0.5, 1.0))):
    """Rule for z = edge + direction*scale*t/(1-t), t in [0, 1)."""
    t, wt = _rule_on_segments(panels, order)
    z = edge + direction * scale * t / (1.0 - t)
    w = wt * scale / (1.0 - t) ** 2
    return z, w


# ------------------------------------------------- truncated cone integral


def cone_energy_integral(axis, half_angle: float, b, eps: float, R: float,
                         n_mu: int = 32, n_phi: int = 64) -> float:
    """Integral of |grad G(z) . b|^2 over the truncated cone.

    The cone opens around `axis` with the given half-angle (pass pi for
    the full sphere of directions) and is truncated radially to
    eps <= |z| <= R.  The radial factor integrates in closed form; the
    angular factor uses Gauss x trapezoid quadrature, which is exact here
    because the integrand is a degree-2 polynomial in the direction.
    """
    if not (0.0 < eps < R):
        raise KernelError(f"need 0 < eps < R, got eps={eps}, R={R}")
    if not (0.0 < half_angle <= np.pi):
        raise KernelError(f"degenerate cone half-angle {half_angle}")
    a = np.asarray(axis, dtype=float)
    a = a / np.linalg.norm(a)
    bv = np.asarray(b, dtype=float)
    if abs(np.linalg.norm(bv) - 1.0) > 1e-10:
        raise KernelError("direction b must be a unit vector")
    # orthonormal frame (e1, e2, a)
    trial = np.array([1.0, 0.0, 0.0])
    if abs(trial @ a) > 0.9:
        trial = np.array([0.0, 1.0, 0.0])
    e1 = trial - (trial @ a) * a
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(a, e1)

    mu, wmu = _rule_on_segments([(np.cos(half_angle), 1.0)], n_mu)
    phi = 2.0 * np.pi * np.arange(n_phi) / n_phi
    wphi = 2.0 * np.pi / n_phi
    s = np.sqrt(1.0 - mu**2)
    # omega grid: (n_mu, n_phi, 3)
    omega = (
        mu[:, None, None] * a[None, None, :]
        + s[:, None, None] * np.cos(phi)[None, :, None] * e1[None, None, :]
        + s[:, None, None] * np.sin(phi)[None, :, None] * e2[None, None, :]
    )
    ang = np.sum((omega @ bv) ** 2 * wmu[:, None] * wphi)
    return float((1.0 / eps - 1.0 / R) * ang / SIXTEEN_PI2)


# ------------------------------------------------ analytic oracle integrals


def exterior_ball_tail(d, R: float) -> float:
    """Closed form of the integral of |z - d|^-6 over |z| > R, |d| < R."""
    a = float(np.linalg.norm(np.asarray(d, dtype=float)))
    if a >= R:
        raise KernelError("pole must lie inside the sphere")
    if a < 1e-12:
        return 4.0 * np.pi / (3.0 * R**3)
    return (np.pi / (2.0 * a)) * (
        0.5 / (R - a) ** 2 + (a / 3.0) / (R - a) ** 3
        - 0.5 / (R + a) ** 2 + (a / 3.0) / (R + a) ** 3
    )


def ball_grad_sq_integral(center, radius: float, x) -> float:
    """Closed form of the integral of |grad G(z - x)|^2 over a ball.

    Requires x strictly outside the closed ball; used as the exact
    geometric denominator when estimating the jump amplitude from the
    indicator along an approach line.
    """
    a = float(np.linalg.norm(np.asarray(x, dtype=float) - np.asarray(center, dtype=float)))
    rho = float(radius)
    if a <= rho:
        raise KernelError("pole must be strictly outside the ball")
    term1 = a / (a - rho) - 1.0 - np.log(a / (a - rho))
    term2 = np.log((a + rho) / a) + a / (a + rho) - 1.0
    return (np.pi / a) * (term1 - term2) / SIXTEEN_PI2


# ------------------------------------------- exterior hessian energy (box)


def _box_margin(pt: np.ndarray, box: np.ndarray) -> float:
    return float(min(np.min(pt), np.min(box - pt)))


def _ring_value(x: np.ndarray, y: np.ndarray, box: np.ndarray,
                half: float, w1: float, order: int) -> float:
    """Quadrature over the bounding cube (side 2*half around the box
    center) minus the box, with panels graded toward the box walls and
    toward the pole projections."""
    center = box / 2.0
    total = 0.0
    axes_rules = {}
    for axis in range(3):
        lo_seg = _graded_from(0.0, center[axis] - half, w1)
        hi_seg = _graded_from(box[axis], center[axis] + half, w1)
        in_seg = _graded_around(0.0, box[axis], (x[axis], y[axis]), w1)
        axes_rules[axis] = {
            "LO": _rule_on_segments(lo_seg, order),
            "HI": _rule_on_segments(hi_seg, order),
            "IN": _rule_on_segments(in_seg, order),
        }
    labels = ("LO", "IN", "HI")
    for l0 in labels:
        for l1 in labels:
            for l2 in labels:
                if l0 == l1 == l2 == "IN":
                    continue
                n0, w0 = axes_rules[0][l0]
                n1, wv1 = axes_rules[1][l1]
                n2, w2 = axes_rules[2][l2]
                pts = np.stack(
                    [c.ravel() for c in np.meshgrid(n0, n1, n2, indexing="ij")],
                    axis=1,
                )
                wts = (
                    w0[:, None, None] * wv1[None, :, None] * w2[None, None, :]
                ).ravel()
                total += _accel.hess_dot_sum(pts, wts, x, y)
    return total


def _far_value(x: np.ndarray, y: np.ndarray, box: np.ndarray,
               half: float, order: int = 10) -> float:
    """Quadrature over the exterior of the bounding cube; the mapping
    t -> edge + scale*t/(1-t) makes the decaying integrand polynomial-
    smooth, so a fixed moderate order suffices."""
    center = box / 2.0
    scale = 2.0 * half
    rules = {}
    for axis in range(3):
        lo_edge = center[axis] - half
        hi_edge = center[axis] + half
        rules[axis] = {
            "LO": _mapped_halfline(lo_edge, -1.0, scale, order),
            "HI": _mapped_halfline(hi_edge, +1.0, scale, order),
            "IN": _rule_on_segments(
                [(lo_edge + i * 2 * half / 6, lo_edge + (i + 1) * 2 * half / 6) for i in range(6)],
                order,
            ),
        }
    labels = ("LO", "IN", "HI")
    total = 0.0
    for l0 in labels:
        for l1 in labels:
            for l2 in labels:
                if l0 == l1 == l2 == "IN":
                    continue
                n0, w0 = rules[0][l0]
                n1, wv1 = rules[1][l1]
                n2, w2 = rules[2][l2]
                pts = np.stack(
                    [c.ravel() for c in np.meshgrid(n0, n1, n2, indexing="ij")],
                    axis=1,
                )
                wts = (
                    w0[:, None, None] * wv1[None, :, None] * w2[None, None, :]
                ).ravel()
                total += _accel.hess_dot_sum(pts, wts, x, y)
    return total


def exterior_hess_energy(x, y=None, box=(1.0, 1.0, 1.0), rtol: float = 1e-4,
                         max_level: int = 7, order: int = 8) -> float:
    """Energy integral of hess G(z-x) : hess G(z-y) over the box exterior.

    The exterior splits at a bounding cube whose half-width is twice the
    box diameter: the finite ring is integrated with graded panels that
    refine until two successive levels agree to rtol; the unbounded rest
    uses a mapped rule whose accuracy exceeds the target by construction.
    """
    box = np.asarray(box, dtype=float)
    x = np.asarray(x, dtype=float).reshape(3)
    y = x if y is None else np.asarray(y, dtype=float).reshape(3)
    for p in (x, y):
        if _box_margin(p, box) <= 0.0:
            raise KernelError("poles must lie strictly inside the box")
    half = 2.0 * float(np.linalg.norm(box))
    far = _far_value(x, y, box, half)
    margin = min(_box_margin(x, box), _box_margin(y, box))
    w1_start = min(box.min() / 4.0, max(margin, 1e-3) * 4.0)
    prev = None
    w1 = w1_start
    for _ in range(max_level):
        val = far + _ring_value(x, y, box, half, w1, order)
        if prev is not None and abs(val - prev) <= rtol * max(abs(val), 1e-300):
            return val
        prev = val
        w1 /= 2.0
    raise QuadratureError(
        f"exterior energy did not converge to rtol={rtol}; last value {prev}"
    )


# ------------------------------------------------------ box-wall integrals


def _face_rule(box: np.ndarray, axis: int, side: int, clusters_2d, w1: float,
               order: int):
    """Tensor rule on one wall; returns points (m, 3), weights, normal."""
    taxes = [a for a in range(3) if a != axis]
    rules = []
    for pos, a in enumerate(taxes):
        segs = _graded_around(0.0, box[a], [c[pos] for c in clusters_2d], w1)
        rules.append(_rule_on_segments(segs, order))
    (n1, w1d), (n2, w2d) = rules
    coord = 0.0 if side == 0 else box[axis]
    pts = np.empty((len(n1), len(n2), 3))
    pts[..., axis] = coord
    pts[..., taxes[0]] = n1[:, None]
    pts[..., taxes[1]] = n2[None, :]
    wts = (w1d[:, None] * w2d[None, :]).ravel()
    nu = np.zeros(3)
    nu[axis] = -1.0 if side == 0 else 1.0
    return pts.reshape(-1, 3), wts, nu


def _converge_faces(face_eval, box: np.ndarray, clusters, rtol: float,
                    max_level: int, order: int, w1_start: float):
    prev = None
    w1 = w1_start
    for _ in range(max_level):
        total = 0.0
        for axis in range(3):
            taxes = [a for a in range(3) if a != axis]
            cl2 = [(c[taxes[0]], c[taxes[1]]) for c in clusters]
            for side in (0, 1):
                pts, wts, nu = _face_rule(box, axis, side, cl2, w1, order)
                total += face_eval(pts, wts, nu)
        if prev is not None and abs(total - prev) <= rtol * max(abs(total), 1e-300):
            return total
        prev = total
        w1 /= 2.0
    raise QuadratureError(f"wall quadrature did not converge; last value {prev}")


def boundary_grad_norm(x, box=(1.0, 1.0, 1.0), rtol: float = 1e-6,
                       max_level: int = 9, order: int = 8) -> float:
    """Squared L2 norm of grad G(.-x) over the box walls."""
    box = np.asarray(box, dtype=float)
    x = np.asarray(x, dtype=float).reshape(3)
    if _box_margin(x, box) <= 0.0:
        raise KernelError("pole must lie strictly inside the box")

    def face_eval(pts, wts, nu):
        d = pts - x
        r4 = np.sum(d * d, axis=1) ** 2
        return float(np.dot(wts, 1.0 / (SIXTEEN_PI2 * r4)))

    margin = _box_margin(x, box)
    w1 = min(box.min() / 4.0, max(margin, 1e-4) * 2.0)
    return _converge_faces(face_eval, box, [x], rtol, max_level, order, w1)


def boundary_grad_hess_flux(x, y=None, box=(1.0, 1.0, 1.0), rtol: float = 1e-5,
                            max_level: int = 9, order: int = 8) -> float:
    """Wall integral of grad G(z-x) . (hess G(z-y) nu) dS.

    By the exterior Green identity its negative equals
    exterior_hess_energy(x, y); used as that operation's oracle and as
    the boundary term of the energy decompositions.
    """
    box = np.asarray(box, dtype=float)
    x = np.asarray(x, dtype=float).reshape(3)
    y = x if y is None else np.asarray(y, dtype=float).reshape(3)
    for p in (x, y):
        if _box_margin(p, box) <= 0.0:
            raise KernelError("poles must lie strictly inside the box")

    def face_eval(pts, wts, nu):
        return _accel.grad_hess_flux_sum(pts, wts, x, y, nu)

    margin = min(_box_margin(x, box), _box_margin(y, box))
    w1 = min(box.min() / 4.0, max(margin, 1e-4) * 2.0)
    return _converge_faces(face_eval, box, [x, y], rtol, max_level, order, w1)
