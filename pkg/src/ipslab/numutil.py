"""Small numeric helpers: deterministic reductions, rate fits, interpolation."""

from __future__ import annotations

import numpy as np


def pairwise_sum(values) -> float:
    """Sum values with a fixed pairwise tree, independent of chunking.

    Used for every aggregation whose result lands in a report, so that
    rerunning with a different worker count reproduces identical bytes.
    """
    buf = np.ascontiguousarray(values, dtype=np.float64).ravel()
    n = buf.size
    if n == 0:
        return 0.0
    buf = buf.copy()
    while n > 1:
        half = n // 2
        buf[:half] = buf[:half] + buf[half : 2 * half]
        if n % 2:
            buf[half - 1] += buf[n - 1]
        n = half
    return float(buf[0])


def fit_rate(distances, values):
    """Least-squares slope of log|value| against log(distance).

    Returns (exponent, intercept, r2).  Distances must be positive and
    strictly decreasing; at least 4 points are required.  Values of mixed
    sign cannot be fitted on a log scale, so the fit runs on |values| and
    a sign flip inside the series is reported by raising ValueError.
    """
    d = np.asarray(distances, dtype=float)
    v = np.asarray(values, dtype=float)
    if d.size < 4:
        raise ValueError(f"rate fit needs >= 4 points, got {d.size}")
    if d.size != v.size:
        raise ValueError("distances and values length mismatch")
    if np.any(d <= 0):
        raise ValueError("distances must be positive")
    if np.any(np.diff(d) >= 0):
        raise ValueError("distances must be strictly decreasing")
    if np.any(v == 0):
        raise ValueError("zero value in rate fit")
    signs = np.sign(v)
    if not (np.all(signs > 0) or np.all(signs < 0)):
        raise ValueError("sign change inside value series; fit |values| per sign segment")
    ld = np.log(d)
    lv = np.log(np.abs(v))
    coef = np.polyfit(ld, lv, 1)
    pred = np.polyval(coef, ld)
    ss_res = float(np.sum((lv - pred) ** 2))
    ss_tot = float(np.sum((lv - lv.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return float(coef[0]), float(coef[1]), float(r2)


def trilinear(values3d: np.ndarray, spacings, point) -> float:
    """Trilinear interpolation on a lattice with node i at i*h per axis."""
    h = np.asarray(spacings, dtype=float)
    p = np.asarray(point, dtype=float) / h
    shape = values3d.shape
    idx = np.floor(p).astype(int)
    idx = np.minimum(np.maximum(idx, 0), np.array(shape) - 2)
    frac = p - idx
    acc = 0.0
    for di in (0, 1):
        wi = frac[0] if di else 1.0 - frac[0]
        for dj in (0, 1):
            wj = frac[1] if dj else 1.0 - frac[1]
            for dk in (0, 1):
                wk = frac[2] if dk else 1.0 - frac[2]
                acc += wi * wj * wk * values3d[idx[0] + di, idx[1] + dj, idx[2] + dk]
    return float(acc)


def geometric_distances(d0: float, count: int, factor: float = 2.0) -> np.ndarray:
    """Strictly decreasing geometric sequence d0, d0/factor, ..."""
    if d0 <= 0 or count < 1 or factor <= 1:
        raise ValueError("need d0 > 0, count >= 1, factor > 1")
    return d0 / factor ** np.arange(count, dtype=float)


def series_blows_up(values, factor: float = 4.0, tail: int = 3) -> bool:
    """Decision rule for 'this norm series diverges'.

    True when the series grew by at least `factor` from first to last
    entry and the last `tail` increments are all positive.  A finite
    level ladder cannot certify a limit; this is the recorded surrogate.
    """
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        return False
    if not np.all(np.isfinite(v)) or v[0] <= 0:
        return False
    incs = np.diff(v)[-min(tail, v.size - 1):]
    return bool(v[-1] >= factor * v[0] and np.all(incs > 0))
