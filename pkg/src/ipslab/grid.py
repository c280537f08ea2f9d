"""Structured box lattice with discrete operators and quadrature.

The computational domain is an axis-aligned box discretized by a tensor
lattice.  Node (i, j, k) sits at (i*h0, j*h1, k*h2); index 0 and n+1 per
axis are boundary layers, 1..n are interior.  All fields are plain numpy
arrays over the full lattice so stencil code stays vectorized.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import GridError
from .numutil import pairwise_sum, trilinear

# (axis, side) pairs in the fixed face order used everywhere: x-, x+, y-, y+, z-, z+.
FACES = ((0, 0), (0, 1), (1, 0), (1, 1), (2, 0), (2, 1))


@dataclass(frozen=True)
class GridSpec:
    """Geometry and index maps of the box lattice.

    Parameters
    ----------
    extents : tuple of float
        Side lengths of the box.
    n : tuple of int
        Interior node counts per axis; lattice has n + 2 nodes per axis.

    Spacings are derived as extent / (n + 1) per axis.  Boundary nodes are
    enumerated once in lexicographic (i, j, k) order and each carries one
    outward unit normal; nodes on edges and corners take the normal of the
    first face containing them in x, y, z priority order.
    """

    extents: tuple[float, float, float]
    n: tuple[int, int, int]

    def __post_init__(self):
        if len(self.extents) != 3 or len(self.n) != 3:
            raise GridError("extents and n must have three components")
        if any(e <= 0 for e in self.extents):
            raise GridError(f"non-positive extent in {self.extents}")
        if any(int(m) != m or m < 3 for m in self.n):
            raise GridError(f"interior counts must be integers >= 3, got {self.n}")
        object.__setattr__(self, "extents", tuple(float(e) for e in self.extents))
        object.__setattr__(self, "n", tuple(int(m) for m in self.n))

    @property
    def h(self) -> tuple[float, float, float]:
        return tuple(e / (m + 1) for e, m in zip(self.extents, self.n))

    @property
    def shape(self) -> tuple[int, int, int]:
        """Full lattice shape including boundary layers."""
        return tuple(m + 2 for m in self.n)

    @property
    def interior_count(self) -> int:
        n0, n1, n2 = self.n
        return n0 * n1 * n2

    @property
    def boundary_count(self) -> int:
        s0, s1, s2 = self.shape
        return s0 * s1 * s2 - self.interior_count

    @cached_property
    def axis_coords(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return tuple(
            np.arange(s, dtype=float) * h for s, h in zip(self.shape, self.h)
        )

    @cached_property
    def coords(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Meshgrid node coordinates X, Y, Z over the full lattice."""
        return tuple(np.meshgrid(*self.axis_coords, indexing="ij"))

    @cached_property
    def interior_mask(self) -> np.ndarray:
        m = np.zeros(self.shape, dtype=bool)
        m[1:-1, 1:-1, 1:-1] = True
        return m

    @cached_property
    def boundary_nodes(self) -> np.ndarray:
        """(m, 3) int array of boundary lattice indices, lexicographic."""
        return np.argwhere(~self.interior_mask)

    @cached_property
    def boundary_index(self) -> dict[tuple[int, int, int], int]:
        return {tuple(node): i for i, node in enumerate(self.boundary_nodes)}

    @cached_property
    def boundary_normals(self) -> np.ndarray:
        """(m, 3) outward unit normals, face-priority at edges and corners."""
        nodes = self.boundary_nodes
        normals = np.zeros((len(nodes), 3), dtype=np.int8)
        top = np.array(self.shape) - 1
        for row, (i, j, k) in enumerate(nodes):
            for axis, idx in enumerate((i, j, k)):
                if idx == 0:
                    normals[row, axis] = -1
                    break
                if idx == top[axis]:
                    normals[row, axis] = 1
                    break
        return normals

    @cached_property
    def boundary_coords(self) -> np.ndarray:
        h = np.array(self.h)
        return self.boundary_nodes * h

    @cached_property
    def volume_weights(self) -> np.ndarray:
        """Trapezoidal node weights; sums to the box volume exactly."""
        w = np.ones(self.shape)
        for axis, s in enumerate(self.shape):
            t = np.ones(s)
            t[0] = t[-1] = 0.5
            sh = [1, 1, 1]
            sh[axis] = s
            w = w * t.reshape(sh)
        return w * np.prod(self.h)

    @cached_property
    def surface_weights(self) -> np.ndarray:
        """Per boundary node: summed trapezoid weights of every face it lies on."""
        w = np.zeros(len(self.boundary_nodes))
        acc = np.zeros(self.shape)
        for axis, side in FACES:
            fw = self._face_weights(axis)
            sl = [slice(None)] * 3
            sl[axis] = 0 if side == 0 else -1
            acc[tuple(sl)] += fw
        nodes = self.boundary_nodes
        w[:] = acc[nodes[:, 0], nodes[:, 1], nodes[:, 2]]
        return w

    def _face_weights(self, axis: int) -> np.ndarray:
        """2D trapezoid weights over the two axes transverse to `axis`."""
        taxes = [a for a in range(3) if a != axis]
        w = np.ones(tuple(self.shape[a] for a in taxes))
        for pos, a in enumerate(taxes):
            t = np.ones(self.shape[a])
            t[0] = t[-1] = 0.5
            sh = [1, 1]
            sh[pos] = self.shape[a]
            w = w * t.reshape(sh)
        return w * self.h[taxes[0]] * self.h[taxes[1]]

    def face_slice(self, axis: int, side: int) -> tuple:
        sl = [slice(None)] * 3
        sl[axis] = 0 if side == 0 else self.shape[axis] - 1
        return tuple(sl)

    def contains(self, point, margin: float = 0.0) -> bool:
        p = np.asarray(point, dtype=float)
        lo = margin
        return bool(np.all(p > lo) and np.all(p < np.array(self.extents) - margin))


def build_grid(extents, n) -> GridSpec:
    """Validate sizes and construct the lattice description."""
    return GridSpec(tuple(extents), tuple(n))


@dataclass
class ScalarField:
    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.grid.shape:
            raise GridError(
                f"field shape {self.values.shape} does not match lattice {self.grid.shape}"
            )

    @classmethod
    def zeros(cls, grid: GridSpec) -> "ScalarField":
        return cls(grid, np.zeros(grid.shape))

    @classmethod
    def from_function(cls, grid: GridSpec, fn) -> "ScalarField":
        X, Y, Z = grid.coords
        return cls(grid, np.asarray(fn(X, Y, Z), dtype=float))

    def check_finite(self):
        if not np.all(np.isfinite(self.values)):
            raise GridError("non-finite values in scalar field")

    def interior(self) -> np.ndarray:
        return self.values[1:-1, 1:-1, 1:-1]

    def boundary_values(self) -> "BoundaryField":
        nodes = self.grid.boundary_nodes
        return BoundaryField(self.grid, self.values[nodes[:, 0], nodes[:, 1], nodes[:, 2]])

    def at(self, point) -> float:
        return trilinear(self.values, self.grid.h, point)


@dataclass
class VectorField:
    """Three scalar components on one shared lattice."""

    components: tuple[ScalarField, ScalarField, ScalarField]

    def __post_init__(self):
        g = self.components[0].grid
        if any(c.grid is not g and c.grid != g for c in self.components):
            raise GridError("vector components must share one grid")

    @property
    def grid(self) -> GridSpec:
        return self.components[0].grid

    @classmethod
    def zeros(cls, grid: GridSpec) -> "VectorField":
        return cls(tuple(ScalarField.zeros(grid) for _ in range(3)))

    @classmethod
    def from_function(cls, grid: GridSpec, fn) -> "VectorField":
        """fn maps meshgrid X, Y, Z to a 3-tuple of component arrays."""
        X, Y, Z = grid.coords
        comps = fn(X, Y, Z)
        return cls(tuple(ScalarField(grid, np.asarray(c, dtype=float)) for c in comps))

    def __getitem__(self, i: int) -> ScalarField:
        return self.components[i]

    def at(self, point) -> np.ndarray:
        return np.array([c.at(point) for c in self.components])


@dataclass
class BoundaryField:
    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.grid.boundary_count,):
            raise GridError(
                f"boundary field length {self.values.shape} != {self.grid.boundary_count}"
            )

    @classmethod
    def zeros(cls, grid: GridSpec) -> "BoundaryField":
        return cls(grid, np.zeros(grid.boundary_count))

    @classmethod
    def from_function(cls, grid: GridSpec, fn) -> "BoundaryField":
        p = grid.boundary_coords
        return cls(grid, np.asarray(fn(p[:, 0], p[:, 1], p[:, 2]), dtype=float))

    def scatter(self) -> np.ndarray:
        """Full-lattice array with these values on the boundary, zero inside."""
        out = np.zeros(self.grid.shape)
        nodes = self.grid.boundary_nodes
        out[nodes[:, 0], nodes[:, 1], nodes[:, 2]] = self.values
        return out


def set_boundary(field: ScalarField, bfield: BoundaryField) -> None:
    nodes = field.grid.boundary_nodes
    field.values[nodes[:, 0], nodes[:, 1], nodes[:, 2]] = bfield.values


def discrete_laplacian(fld: ScalarField) -> ScalarField:
    """Seven-point second difference; meaningful on interior nodes only.

    Boundary nodes of the result are zero.  Boundary values of the input
    participate where the stencil touches the wall.
    """
    u = fld.values
    h = fld.grid.h
    out = np.zeros_like(u)
    core = out[1:-1, 1:-1, 1:-1]
    core += (u[2:, 1:-1, 1:-1] - 2 * u[1:-1, 1:-1, 1:-1] + u[:-2, 1:-1, 1:-1]) / h[0] ** 2
    core += (u[1:-1, 2:, 1:-1] - 2 * u[1:-1, 1:-1, 1:-1] + u[1:-1, :-2, 1:-1]) / h[1] ** 2
    core += (u[1:-1, 1:-1, 2:] - 2 * u[1:-1, 1:-1, 1:-1] + u[1:-1, 1:-1, :-2]) / h[2] ** 2
    return ScalarField(fld.grid, out)


def discrete_gradient(fld: ScalarField) -> VectorField:
    """Centered differences inside, second-order one-sided on the walls."""
    g = np.gradient(fld.values, *fld.grid.h, edge_order=2)
    return VectorField(tuple(ScalarField(fld.grid, gi) for gi in g))


def divergence_field(vec: VectorField) -> ScalarField:
    """Pointwise divergence by centered/one-sided differences per component."""
    grid = vec.grid
    acc = np.zeros(grid.shape)
    for axis in range(3):
        acc += np.gradient(vec[axis].values, grid.h[axis], axis=axis, edge_order=2)
    return ScalarField(grid, acc)


def normal_derivative(fld: ScalarField) -> BoundaryField:
    """Outward normal derivative at every boundary node.

    Second-order one-sided stencil (3 nodes inward along the assigned
    normal).  Edge and corner nodes differentiate along their priority
    face normal.
    """
    grid = fld.grid
    u = fld.values
    nodes = grid.boundary_nodes
    normals = grid.boundary_normals
    out = np.empty(len(nodes))
    for axis, side in FACES:
        rows = np.nonzero(normals[:, axis] == (1 if side else -1))[0]
        if len(rows) == 0:
            continue
        idx = nodes[rows].copy()
        h = grid.h[axis]
        step = -1 if side else 1
        u0 = u[idx[:, 0], idx[:, 1], idx[:, 2]]
        idx[:, axis] += step
        u1 = u[idx[:, 0], idx[:, 1], idx[:, 2]]
        idx[:, axis] += step
        u2 = u[idx[:, 0], idx[:, 1], idx[:, 2]]
        # derivative along outward normal = -(d/d inward)
        out[rows] = (3 * u0 - 4 * u1 + u2) / (2 * h)
    return BoundaryField(grid, out)


def face_normal_derivative(fld: ScalarField, axis: int, side: int) -> np.ndarray:
    """Outward normal derivative over one whole face as a 2D array.

    Unlike normal_derivative this treats edge nodes as members of the face
    being integrated, so surface quadrature of fluxes has a well-defined
    normal everywhere on the face.
    """
    u = fld.values
    h = fld.grid.h[axis]
    sl0 = list(fld.grid.face_slice(axis, side))
    sl1 = list(sl0)
    sl2 = list(sl0)
    if side == 0:
        sl1[axis] = 1
        sl2[axis] = 2
    else:
        top = fld.grid.shape[axis] - 1
        sl1[axis] = top - 1
        sl2[axis] = top - 2
    u0 = u[tuple(sl0)]
    u1 = u[tuple(sl1)]
    u2 = u[tuple(sl2)]
    return (3 * u0 - 4 * u1 + u2) / (2 * h)


def surface_flux_integral(fld: ScalarField, other_on_faces) -> float:
    """Integral over the box surface of (d fld / d nu) * other.

    `other_on_faces(axis, side, P0, P1, P2)` returns the second factor
    sampled on the face's 2D coordinate arrays.  Fluxes are taken per face
    so the normal is unambiguous on edges.
    """
    grid = fld.grid
    total = []
    for axis, side in FACES:
        dn = face_normal_derivative(fld, axis, side)
        w = grid._face_weights(axis)
        sl = grid.face_slice(axis, side)
        X, Y, Z = grid.coords
        vals = other_on_faces(axis, side, X[sl], Y[sl], Z[sl])
        total.append(pairwise_sum(dn * vals * w))
    return pairwise_sum(total)


def integrate_volume(fld: ScalarField, region_mask=None) -> float:
    """Quadrature over the box or a masked node subset (h^3-type weights)."""
    w = fld.grid.volume_weights
    if region_mask is None:
        return pairwise_sum(fld.values * w)
    mask = np.asarray(region_mask, dtype=bool)
    if mask.shape != fld.grid.shape:
        raise GridError("region mask shape does not match lattice")
    return pairwise_sum(np.where(mask, fld.values * w, 0.0))


def integrate_surface(bfld: BoundaryField) -> float:
    """Quadrature over all six faces (h^2-type trapezoid weights)."""
    return pairwise_sum(bfld.values * bfld.grid.surface_weights)
