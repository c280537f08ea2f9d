"""Hot numerical kernels with a numba path and a pure-numpy fallback.

The jit path is used when numba imports cleanly and the environment
variable IPSLAB_JIT is not "0".  Both paths compute identical sums up to
floating-point associativity; tests pin their agreement, and
benchmarks/bench_kernels.py measures the speed difference.
"""

from __future__ import annotations

import os

import numpy as np

FOUR_PI = 4.0 * np.pi
SIXTEEN_PI2 = 16.0 * np.pi**2

_WANT_JIT = os.environ.get("IPSLAB_JIT", "1") != "0"

if _WANT_JIT:
    try:
        from numba import njit

        HAVE_JIT = True
    except Exception:  # pragma: no cover - numba present in the pinned env
        HAVE_JIT = False
else:
    HAVE_JIT = False


def _hess_dot_sum_np(pts: np.ndarray, wts: np.ndarray, x: np.ndarray, y: np.ndarray) -> float:
    u = pts - x
    v = pts - y
    ru = np.sqrt(np.einsum("ij,ij->i", u, u))
    rv = np.sqrt(np.einsum("ij,ij->i", v, v))
    dot = np.einsum("ij,ij->i", u, v) / (ru * rv)
    vals = (9.0 * dot * dot - 3.0) / (SIXTEEN_PI2 * ru**3 * rv**3)
    return float(np.dot(wts, vals))


def _grad_dot_sum_np(pts: np.ndarray, wts: np.ndarray, x: np.ndarray, y: np.ndarray) -> float:
    u = pts - x
    v = pts - y
    ru3 = np.einsum("ij,ij->i", u, u) ** 1.5
    rv3 = np.einsum("ij,ij->i", v, v) ** 1.5
    vals = np.einsum("ij,ij->i", u, v) / (SIXTEEN_PI2 * ru3 * rv3)
    return float(np.dot(wts, vals))


def _grad_hess_flux_sum_np(pts, wts, x, y, nu) -> float:
    # integrand: grad G(z-x) . (hess G(z-y) nu)
    u = pts - x
    v = pts - y
    ru = np.sqrt(np.einsum("ij,ij->i", u, u))
    rv = np.sqrt(np.einsum("ij,ij->i", v, v))
    vn = (v @ nu) / rv
    uv = np.einsum("ij,ij->i", u, v) / (ru * rv)
    un = (u @ nu) / ru
    vals = -(3.0 * vn * uv - un) / (SIXTEEN_PI2 * ru**2 * rv**3)
    return float(np.dot(wts, vals))


def _source_matrix_np(targets: np.ndarray, sources: np.ndarray) -> np.ndarray:
    d = targets[:, None, :] - sources[None, :, :]
    r = np.sqrt(np.einsum("ijk,ijk->ij", d, d))
    return 1.0 / (FOUR_PI * r)


def _source_grad_matrix_np(targets: np.ndarray, sources: np.ndarray) -> np.ndarray:
    """(m, 3, k): component c of grad_t G(t - s) for each target/source pair."""
    d = targets[:, None, :] - sources[None, :, :]
    r = np.sqrt(np.einsum("ijk,ijk->ij", d, d))
    out = -d / (FOUR_PI * r**3)[:, :, None]
    return np.ascontiguousarray(np.swapaxes(out, 1, 2))


if HAVE_JIT:

    @njit(cache=True, fastmath=False)
    def _hess_dot_sum_jit(pts, wts, x, y):  # pragma: no cover - exercised via dispatcher
        total = 0.0
        for i in range(pts.shape[0]):
            u0 = pts[i, 0] - x[0]
            u1 = pts[i, 1] - x[1]
            u2 = pts[i, 2] - x[2]
            v0 = pts[i, 0] - y[0]
            v1 = pts[i, 1] - y[1]
            v2 = pts[i, 2] - y[2]
            ru2 = u0 * u0 + u1 * u1 + u2 * u2
            rv2 = v0 * v0 + v1 * v1 + v2 * v2
            ru = np.sqrt(ru2)
            rv = np.sqrt(rv2)
            dot = (u0 * v0 + u1 * v1 + u2 * v2) / (ru * rv)
            total += wts[i] * (9.0 * dot * dot - 3.0) / (SIXTEEN_PI2 * ru2 * ru * rv2 * rv)
        return total

    @njit(cache=True, fastmath=False)
    def _grad_dot_sum_jit(pts, wts, x, y):  # pragma: no cover
        total = 0.0
        for i in range(pts.shape[0]):
            u0 = pts[i, 0] - x[0]
            u1 = pts[i, 1] - x[1]
            u2 = pts[i, 2] - x[2]
            v0 = pts[i, 0] - y[0]
            v1 = pts[i, 1] - y[1]
            v2 = pts[i, 2] - y[2]
            ru2 = u0 * u0 + u1 * u1 + u2 * u2
            rv2 = v0 * v0 + v1 * v1 + v2 * v2
            ru3 = ru2 * np.sqrt(ru2)
            rv3 = rv2 * np.sqrt(rv2)
            total += wts[i] * (u0 * v0 + u1 * v1 + u2 * v2) / (SIXTEEN_PI2 * ru3 * rv3)
        return total

    @njit(cache=True, fastmath=False)
    def _grad_hess_flux_sum_jit(pts, wts, x, y, nu):  # pragma: no cover
        total = 0.0
        for i in range(pts.shape[0]):
            u0 = pts[i, 0] - x[0]
            u1 = pts[i, 1] - x[1]
            u2 = pts[i, 2] - x[2]
            v0 = pts[i, 0] - y[0]
            v1 = pts[i, 1] - y[1]
            v2 = pts[i, 2] - y[2]
            ru2 = u0 * u0 + u1 * u1 + u2 * u2
            rv2 = v0 * v0 + v1 * v1 + v2 * v2
            ru = np.sqrt(ru2)
            rv = np.sqrt(rv2)
            vn = (v0 * nu[0] + v1 * nu[1] + v2 * nu[2]) / rv
            uv = (u0 * v0 + u1 * v1 + u2 * v2) / (ru * rv)
            un = (u0 * nu[0] + u1 * nu[1] + u2 * nu[2]) / ru
            total += wts[i] * (-(3.0 * vn * uv - un)) / (SIXTEEN_PI2 * ru2 * rv2 * rv)
        return total

    @njit(cache=True, fastmath=False)
    def _source_matrix_jit(targets, sources):  # pragma: no cover
        m = targets.shape[0]
        k = sources.shape[0]
        out = np.empty((m, k))
        for i in range(m):
            for j in range(k):
                d0 = targets[i, 0] - sources[j, 0]
                d1 = targets[i, 1] - sources[j, 1]
                d2 = targets[i, 2] - sources[j, 2]
                out[i, j] = 1.0 / (FOUR_PI * np.sqrt(d0 * d0 + d1 * d1 + d2 * d2))
        return out

    @njit(cache=True, fastmath=False)
    def _source_grad_matrix_jit(targets, sources):  # pragma: no cover
        m = targets.shape[0]
        k = sources.shape[0]
        out = np.empty((m, 3, k))
        for i in range(m):
            for j in range(k):
                d0 = targets[i, 0] - sources[j, 0]
                d1 = targets[i, 1] - sources[j, 1]
                d2 = targets[i, 2] - sources[j, 2]
                r2 = d0 * d0 + d1 * d1 + d2 * d2
                c = -1.0 / (FOUR_PI * r2 * np.sqrt(r2))
                out[i, 0, j] = c * d0
                out[i, 1, j] = c * d1
                out[i, 2, j] = c * d2
        return out


def _as_point(p) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(p, dtype=float).reshape(3))


def hess_dot_sum(pts, wts, x, y) -> float:
    """Weighted sum of hessG(p - x) : hessG(p - y) over sample points."""
    pts = np.ascontiguousarray(pts, dtype=float)
    wts = np.ascontiguousarray(wts, dtype=float)
    if HAVE_JIT:
        return float(_hess_dot_sum_jit(pts, wts, _as_point(x), _as_point(y)))
    return _hess_dot_sum_np(pts, wts, _as_point(x), _as_point(y))


def grad_dot_sum(pts, wts, x, y) -> float:
    """Weighted sum of gradG(p - x) . gradG(p - y)."""
    pts = np.ascontiguousarray(pts, dtype=float)
    wts = np.ascontiguousarray(wts, dtype=float)
    if HAVE_JIT:
        return float(_grad_dot_sum_jit(pts, wts, _as_point(x), _as_point(y)))
    return _grad_dot_sum_np(pts, wts, _as_point(x), _as_point(y))


def grad_hess_flux_sum(pts, wts, x, y, nu) -> float:
    """Weighted sum of gradG(p - x) . (hessG(p - y) nu) for a fixed normal."""
    pts = np.ascontiguousarray(pts, dtype=float)
    wts = np.ascontiguousarray(wts, dtype=float)
    if HAVE_JIT:
        return float(_grad_hess_flux_sum_jit(pts, wts, _as_point(x), _as_point(y), _as_point(nu)))
    return _grad_hess_flux_sum_np(pts, wts, _as_point(x), _as_point(y), _as_point(nu))


def source_matrix(targets, sources) -> np.ndarray:
    """Point-source value matrix G(t - s), shape (targets, sources)."""
    targets = np.ascontiguousarray(targets, dtype=float)
    sources = np.ascontiguousarray(sources, dtype=float)
    if HAVE_JIT:
        return _source_matrix_jit(targets, sources)
    return _source_matrix_np(targets, sources)


def source_grad_matrix(targets, sources) -> np.ndarray:
    """Point-source gradient rows, shape (targets, 3, sources)."""
    targets = np.ascontiguousarray(targets, dtype=float)
    sources = np.ascontiguousarray(sources, dtype=float)
    if HAVE_JIT:
        return _source_grad_matrix_jit(targets, sources)
    return _source_grad_matrix_np(targets, sources)
