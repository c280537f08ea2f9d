"""Obstacle geometry and the potential supported on it.

The obstacle D is a union of primitive shapes (balls, axis-aligned
boxes).  Each shape carries a jump sign and a constant amplitude, with an
optional smooth variation that only switches on deeper than one collar
below the shape boundary, so the jump floor |V| >= C holds in the collar
by construction.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import PotentialError
from .grid import GridSpec, ScalarField


@dataclass(frozen=True)
class Ball:
    center: tuple[float, float, float]
    radius: float

    def __post_init__(self):
        if self.radius <= 0:
            raise PotentialError(f"ball radius must be positive, got {self.radius}")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "radius", float(self.radius))

    def signed_distance(self, x, y, z):
        """Negative inside, zero on the sphere, positive outside."""
        c = self.center
        r = np.sqrt((x - c[0]) ** 2 + (y - c[1]) ** 2 + (z - c[2]) ** 2)
        return r - self.radius

    def bounds(self):
        c = np.array(self.center)
        return c - self.radius, c + self.radius

    def volume(self) -> float:
        return 4.0 / 3.0 * np.pi * self.radius**3


@dataclass(frozen=True)
class BoxShape:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lo)
        hi = tuple(float(v) for v in self.hi)
        if any(a >= b for a, b in zip(lo, hi)):
            raise PotentialError(f"degenerate box corners {lo}, {hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    def signed_distance(self, x, y, z):
        lo, hi = np.array(self.lo), np.array(self.hi)
        qs = [np.maximum(lo[a] - c, c - hi[a]) for a, c in enumerate((x, y, z))]
        inside = np.minimum(np.maximum(np.maximum(qs[0], qs[1]), qs[2]), 0.0)
        outside = np.sqrt(sum(np.maximum(q, 0.0) ** 2 for q in qs))
        return outside + inside

    def bounds(self):
        return np.array(self.lo), np.array(self.hi)

    def volume(self) -> float:
        lo, hi = self.bounds()
        return float(np.prod(hi - lo))


@dataclass(frozen=True)
class Shape:
    """One signed component of the obstacle.

    The nodal value inside is sign * (amplitude + variation * ramp), where
    the ramp is a smoothstep of interior depth that is identically zero up
    to one collar below the boundary and one past two collars.
    """

    geometry: Ball | BoxShape
    sign: int = 1
    amplitude: float = 1.0
    variation: float = 0.0

    def __post_init__(self):
        if self.sign not in (-1, 1):
            raise PotentialError(f"jump sign must be +1 or -1, got {self.sign}")
        if self.amplitude <= 0:
            raise PotentialError("amplitude must be positive")
        if self.variation <= -self.amplitude:
            raise PotentialError(
                "interior variation would flip the sign of V inside the shape"
            )

    def value(self, x, y, z, collar: float):
        """Signed potential value; zero outside the closed shape."""
        sd = self.geometry.signed_distance(x, y, z)
        inside = sd <= 0.0
        depth = -sd
        if self.variation != 0.0 and collar > 0.0:
            t = np.clip((depth - collar) / collar, 0.0, 1.0)
            ramp = t * t * (3.0 - 2.0 * t)
        else:
            ramp = 0.0
        mag = self.amplitude + self.variation * ramp
        return np.where(inside, self.sign * mag, 0.0)


@dataclass(frozen=True)
class ObstacleSpec:
    shapes: tuple[Shape, ...]
    collar: float = 0.04

    def __post_init__(self):
        object.__setattr__(self, "shapes", tuple(self.shapes))
        if self.collar <= 0:
            raise PotentialError("collar thickness must be positive")
        self._check_opposite_signs_disjoint()

    def _check_opposite_signs_disjoint(self):
        shapes = self.shapes
        for i in range(len(shapes)):
            for j in range(i + 1, len(shapes)):
                if shapes[i].sign == shapes[j].sign:
                    continue
                if _closures_meet(shapes[i].geometry, shapes[j].geometry):
                    raise PotentialError(
                        "shapes with opposite jump signs must have disjoint closures"
                    )

    def margin_to_walls(self, extents) -> float:
        """Smallest distance from any shape closure to the box boundary."""
        ext = np.asarray(extents, dtype=float)
        m = np.inf
        for s in self.shapes:
            lo, hi = s.geometry.bounds()
            m = min(m, float(np.min(lo)), float(np.min(ext - hi)))
        return m

    def uniform_sign(self):
        """+1 or -1 when every shape agrees, else None; None when empty."""
        signs = {s.sign for s in self.shapes}
        if len(signs) == 1:
            return signs.pop()
        return None

    def jump_floor(self) -> float:
        if not self.shapes:
            return 0.0
        return min(s.amplitude for s in self.shapes)


def _closures_meet(a, b) -> bool:
    """Exact closure-intersection test for the supported primitive pairs."""
    if isinstance(a, Ball) and isinstance(b, Ball):
        gap = np.linalg.norm(np.array(a.center) - np.array(b.center))
        return gap <= a.radius + b.radius
    if isinstance(a, Ball) and isinstance(b, BoxShape):
        return float(b.signed_distance(*a.center)) <= a.radius
    if isinstance(b, Ball):
        return _closures_meet(b, a)
    lo_a, hi_a = a.bounds()
    lo_b, hi_b = b.bounds()
    return bool(np.all(lo_a <= hi_b) and np.all(lo_b <= hi_a))


def distance_to_obstacle_boundary(obstacle: ObstacleSpec, point) -> float:
    """Signed distance to D: positive outside all shapes, negative inside.

    Exact for a single primitive and for disjoint unions; for overlapping
    same-sign shapes it is the min over shapes (a lower bound on the true
    distance inside the overlap).
    """
    if not obstacle.shapes:
        return np.inf
    x, y, z = (float(c) for c in point)
    return float(min(s.geometry.signed_distance(x, y, z) for s in obstacle.shapes))


def obstacle_value(obstacle: ObstacleSpec, point) -> float:
    """Exact potential value at a point (first containing shape wins)."""
    x, y, z = (float(c) for c in point)
    for s in obstacle.shapes:
        v = float(s.value(x, y, z, obstacle.collar))
        if v != 0.0:
            return v
    return 0.0


@dataclass
class PotentialSpec:
    """Obstacle plus its nodal sampling on one grid."""

    obstacle: ObstacleSpec
    grid: GridSpec
    V: ScalarField
    jump_floor: float

    @cached_property
    def support_mask(self) -> np.ndarray:
        """Lattice nodes lying in the closed obstacle."""
        X, Y, Z = self.grid.coords
        m = np.zeros(self.grid.shape, dtype=bool)
        for s in self.obstacle.shapes:
            m |= s.geometry.signed_distance(X, Y, Z) <= 0.0
        return m

    @property
    def is_zero(self) -> bool:
        return len(self.obstacle.shapes) == 0


def sample_potential(grid: GridSpec, obstacle: ObstacleSpec) -> PotentialSpec:
    """Nodewise sampling of the signed potential onto the lattice.

    A node belongs to a shape iff its center lies in the closed shape; no
    cut cells.  Shapes are applied in order, first containing shape wins.
    """
    if obstacle.shapes and obstacle.margin_to_walls(grid.extents) <= 0.0:
        raise PotentialError("obstacle must be strictly inside the box")
    X, Y, Z = grid.coords
    vals = np.zeros(grid.shape)
    unset = np.ones(grid.shape, dtype=bool)
    for s in obstacle.shapes:
        v = s.value(X, Y, Z, obstacle.collar)
        take = unset & (v != 0.0)
        vals[take] = v[take]
        unset &= ~take
    return PotentialSpec(obstacle, grid, ScalarField(grid, vals), obstacle.jump_floor())


def ball_obstacle(center, radius, amplitude, sign=None, variation=0.0, collar=0.04):
    """Single-ball obstacle; sign inferred from the amplitude when omitted."""
    if sign is None:
        sign = 1 if amplitude > 0 else -1
    return ObstacleSpec(
        (Shape(Ball(tuple(center), radius), sign, abs(amplitude), variation),),
        collar=collar,
    )


def box_obstacle(lo, hi, amplitude, sign=None, variation=0.0, collar=0.04):
    if sign is None:
        sign = 1 if amplitude > 0 else -1
    return ObstacleSpec(
        (Shape(BoxShape(tuple(lo), tuple(hi)), sign, abs(amplitude), variation),),
        collar=collar,
    )


def empty_obstacle() -> ObstacleSpec:
    return ObstacleSpec(())


@dataclass(frozen=True)
class WellPosednessReport:
    lambda_min: float
    flagged: bool
    floor: float
    iterations: int
    residual: float


def check_wellposed(grid: GridSpec, potential, floor: float = 1e-2,
                    tol: float = 1e-8, max_iter: int = 400) -> WellPosednessReport:
    """Estimate the smallest-magnitude eigenvalue of the Dirichlet operator.

    `potential` may be a PotentialSpec, a ScalarField, a raw lattice array,
    or a constant.  Inverse power iteration drives the estimate; the report
    is flagged when |lambda_min| falls below `floor`.  Iteration failure
    raises instead of flagging, so a near-singular operator and a broken
    iteration are never conflated.
    """
    from .solver import estimate_smallest_eigenvalue

    if potential is None:
        v = np.zeros(grid.shape)
    elif isinstance(potential, PotentialSpec):
        v = potential.V.values
    elif isinstance(potential, ScalarField):
        v = potential.values
    elif np.isscalar(potential):
        v = np.full(grid.shape, float(potential))
    else:
        v = np.asarray(potential, dtype=float)
        if v.shape != grid.shape:
            raise PotentialError("potential array shape does not match lattice")
    lam, iters, res = estimate_smallest_eigenvalue(grid, v, tol=tol, max_iter=max_iter)
    return WellPosednessReport(lam, abs(lam) < floor, floor, iters, res)
