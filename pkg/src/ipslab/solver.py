"""Discrete Dirichlet solves, the boundary flux map, and weak pairings.

The operator is the 7-point (-laplacian + V) on interior nodes.  Two
matrices are kept: the interior system A for solving, and a full-lattice
energy matrix K whose quadratic form is the edge-midpoint quadrature of
int grad(a).grad(b) + V a b.  K is symmetric by construction and, for a
field satisfying the discrete equation with zero interior load, the
pairing <Lambda_V f, g> = ext(g)^T K u_f does not depend on which
extension of g is used; that makes DtN pairings symmetric to solver
round-off rather than to discretization order.

Constant-coefficient solves diagonalize exactly in the type-I discrete
sine basis, so V = 0 problems are solved directly by DST and general V
uses conjugate gradients with the DST inverse Laplacian as the
preconditioner.
"""

from __future__ import annotations

import hashlib
import os
import struct
import tempfile
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.fft import dstn, idstn
from scipy.sparse.linalg import LinearOperator, cg, splu

from .errors import EigenIterationError, SizeGuardError, SolverError
from .grid import (
    FACES,
    BoundaryField,
    GridSpec,
    ScalarField,
    VectorField,
    normal_derivative,
)
from .kernels import eval_gradG
from .numutil import pairwise_sum
from .potential import PotentialSpec

SOLVE_RTOL = 1e-12
RESIDUAL_REQUIRED = 1e-10
DENSE_ORACLE_MAX_INTERIOR = 1331
DENSE_DTN_MAX_BOUNDARY = 20000
_EIG_DIRECT_MAX_INTERIOR = 20000


def _coerce_v(grid: GridSpec, potential) -> np.ndarray:
    if potential is None:
        return np.zeros(grid.shape)
    if isinstance(potential, PotentialSpec):
        return potential.V.values
    if isinstance(potential, ScalarField):
        return potential.values
    if np.isscalar(potential):
        return np.full(grid.shape, float(potential))
    v = np.asarray(potential, dtype=float)
    if v.shape != grid.shape:
        raise SolverError("potential array shape does not match the lattice")
    return v


def _interior_matrix(grid: GridSpec, v: np.ndarray) -> sp.csr_matrix:
    mats = []
    eyes = [sp.identity(m, format="csr") for m in grid.n]
    for axis, (m, h) in enumerate(zip(grid.n, grid.h)):
        main = np.full(m, 2.0 / h**2)
        off = np.full(m - 1, -1.0 / h**2)
        T = sp.diags([off, main, off], (-1, 0, 1), format="csr")
        pieces = [eyes[0], eyes[1], eyes[2]]
        pieces[axis] = T
        mats.append(sp.kron(sp.kron(pieces[0], pieces[1]), pieces[2], format="csr"))
    A = mats[0] + mats[1] + mats[2]
    A = A + sp.diags(v[1:-1, 1:-1, 1:-1].ravel())
    return A.tocsr()


def _energy_matrix(grid: GridSpec, v: np.ndarray) -> sp.csr_matrix:
    """Full-lattice edge stiffness plus potential mass, symmetric."""
    shape = grid.shape
    N = int(np.prod(shape))
    idx = np.arange(N).reshape(shape)
    rows, cols, vals = [], [], []
    for axis in range(3):
        fw = grid._face_weights(axis) / grid.h[axis]
        sh = [1, 1, 1]
        taxes = [a for a in range(3) if a != axis]
        sh[taxes[0]] = shape[taxes[0]]
        sh[taxes[1]] = shape[taxes[1]]
        cshape = list(shape)
        cshape[axis] = shape[axis] - 1
        c = np.broadcast_to(fw.reshape(sh), cshape).ravel()
        sl_p = [slice(None)] * 3
        sl_p[axis] = slice(None, -1)
        sl_q = [slice(None)] * 3
        sl_q[axis] = slice(1, None)
        p = idx[tuple(sl_p)].ravel()
        q = idx[tuple(sl_q)].ravel()
        rows.extend((p, q, p, q))
        cols.extend((p, q, q, p))
        vals.extend((c, c, -c, -c))
    mass = (grid.volume_weights * v).ravel()
    node = np.arange(N)
    rows.append(node)
    cols.append(node)
    vals.append(mass)
    K = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(N, N),
    )
    return K.tocsr()


class SchrodingerOperator:
    """Assembled discrete operator for one grid and one potential."""

    def __init__(self, grid: GridSpec, potential=None):
        self.grid = grid
        self.potential = potential if isinstance(potential, PotentialSpec) else None
        self.v_values = _coerce_v(grid, potential)
        self.is_zero_potential = not np.any(self.v_values)
        nodes = grid.boundary_nodes
        self._boundary_flat = np.ravel_multi_index(
            (nodes[:, 0], nodes[:, 1], nodes[:, 2]), grid.shape
        )

    @cached_property
    def A(self) -> sp.csr_matrix:
        return _interior_matrix(self.grid, self.v_values)

    @cached_property
    def K(self) -> sp.csr_matrix:
        return _energy_matrix(self.grid, self.v_values)

    @cached_property
    def _dst_lams(self) -> np.ndarray:
        lams = []
        for m, h in zip(self.grid.n, self.grid.h):
            k = np.arange(1, m + 1)
            lams.append((4.0 / h**2) * np.sin(np.pi * k / (2 * (m + 1))) ** 2)
        return (
            lams[0][:, None, None] + lams[1][None, :, None] + lams[2][None, None, :]
        )

    def _laplace_solve(self, b3: np.ndarray) -> np.ndarray:
        return idstn(dstn(b3, type=1) / self._dst_lams, type=1)

    @cached_property
    def _precond(self) -> LinearOperator:
        shape = tuple(self.grid.n)

        def apply(r):
            return self._laplace_solve(r.reshape(shape)).ravel()

        N = int(np.prod(shape))
        return LinearOperator((N, N), matvec=apply, dtype=float)

    def solve_interior(self, b3: np.ndarray, rtol: float = SOLVE_RTOL) -> np.ndarray:
        """Solve A x = b for the interior block; b3 is interior-shaped."""
        if not np.any(b3):
            return np.zeros_like(b3)
        if self.is_zero_potential:
            x3 = self._laplace_solve(b3)
            self._require_residual(x3.ravel(), b3.ravel())
            return x3
        b = b3.ravel()
        x, info = cg(self.A, b, rtol=rtol, atol=0.0, M=self._precond, maxiter=2000)
        if info != 0:
            raise SolverError(f"conjugate gradients did not converge (info={info})")
        self._require_residual(x, b)
        return x.reshape(b3.shape)

    def _require_residual(self, x: np.ndarray, b: np.ndarray):
        nb = np.linalg.norm(b)
        if nb == 0.0:
            return
        rel = np.linalg.norm(b - self.A @ x) / nb
        if rel > RESIDUAL_REQUIRED:
            raise SolverError(f"solution residual {rel:.3e} above {RESIDUAL_REQUIRED}")

    def boundary_gather(self, full_flat: np.ndarray) -> np.ndarray:
        return full_flat[self._boundary_flat]


def build_operator(grid: GridSpec, potential=None) -> SchrodingerOperator:
    return SchrodingerOperator(grid, potential)


def _boundary_coupling(grid: GridSpec, gs: np.ndarray) -> np.ndarray:
    """Move known wall values of the stencil into the interior load."""
    b3 = np.zeros(tuple(grid.n))
    for axis, side in FACES:
        sl_wall = list(grid.face_slice(axis, side))
        # restrict the transverse directions to interior indices
        for a in range(3):
            if a != axis:
                sl_wall[a] = slice(1, -1)
        layer = [slice(None)] * 3
        layer[axis] = 0 if side == 0 else -1
        b3[tuple(layer)] += gs[tuple(sl_wall)] / grid.h[axis] ** 2
    return b3


def solve_dirichlet(op: SchrodingerOperator, g: BoundaryField | None = None,
                    rhs: ScalarField | None = None) -> ScalarField:
    """Solve (-lap + V) u = rhs inside, u = g on the walls."""
    grid = op.grid
    b3 = np.zeros(tuple(grid.n))
    if rhs is not None:
        b3 += rhs.interior()
    gs = None
    if g is not None:
        gs = g.scatter()
        b3 += _boundary_coupling(grid, gs)
    x = op.solve_interior(b3)
    full = np.zeros(grid.shape) if gs is None else gs.copy()
    full[1:-1, 1:-1, 1:-1] = x
    return ScalarField(grid, full)


def dense_oracle_solve(op: SchrodingerOperator, g: BoundaryField | None = None,
                       rhs: ScalarField | None = None) -> ScalarField:
    """Same discretization, brute-force dense LU; cross-validation only."""
    if op.grid.interior_count > DENSE_ORACLE_MAX_INTERIOR:
        raise SizeGuardError(
            f"dense oracle limited to {DENSE_ORACLE_MAX_INTERIOR} interior nodes"
        )
    grid = op.grid
    b3 = np.zeros(tuple(grid.n))
    if rhs is not None:
        b3 += rhs.interior()
    gs = None
    if g is not None:
        gs = g.scatter()
        b3 += _boundary_coupling(grid, gs)
    x = np.linalg.solve(op.A.toarray(), b3.ravel())
    rel = np.linalg.norm(b3.ravel() - op.A @ x)
    nb = np.linalg.norm(b3.ravel())
    if nb > 0 and rel / nb > 1e-12:
        raise SolverError("dense oracle residual unexpectedly large")
    full = np.zeros(grid.shape) if gs is None else gs.copy()
    full[1:-1, 1:-1, 1:-1] = x.reshape(tuple(grid.n))
    return ScalarField(grid, full)


def apply_dtn(op: SchrodingerOperator, f: BoundaryField) -> BoundaryField:
    """Boundary flux map: one Dirichlet solve plus the one-sided stencil."""
    return normal_derivative(solve_dirichlet(op, f))


def dtn_pairing_from_solution(op: SchrodingerOperator, u: ScalarField,
                              g: BoundaryField) -> float:
    """Weak pairing <Lambda_V f, g> given the already-solved field u_f."""
    Ku = op.K @ u.values.ravel()
    return pairwise_sum(g.values * op.boundary_gather(Ku))


def dtn_pairing(op: SchrodingerOperator, f: BoundaryField, g: BoundaryField) -> float:
    return dtn_pairing_from_solution(op, solve_dirichlet(op, f), g)


def energy_form(op: SchrodingerOperator, a, b) -> float:
    """Edge-quadrature energy int grad(a).grad(b) + V a b over the box."""
    av = a.values if isinstance(a, ScalarField) else np.asarray(a, dtype=float)
    bv = b.values if isinstance(b, ScalarField) else np.asarray(b, dtype=float)
    Kb = op.K @ bv.ravel()
    return pairwise_sum(av.ravel() * Kb)


def energy_form_vector(op: SchrodingerOperator, a: VectorField, b: VectorField) -> float:
    return pairwise_sum([energy_form(op, a[j], b[j]) for j in range(3)])


def harmonic_extension_batch(op: SchrodingerOperator, traces: np.ndarray,
                             block: int = 96) -> np.ndarray:
    """Laplace extensions of many wall traces at once via the transform solve.

    ``traces`` has one column per trace, rows ordered like the boundary-node
    list.  Returns flattened full-lattice fields, one column per trace.
    Restricted to the zero-potential operator, where the fast direct path
    applies; the per-column residual is still enforced.
    """
    if not op.is_zero_potential:
        raise SolverError("batch extension needs the zero-potential operator")
    grid = op.grid
    traces = np.asarray(traces, dtype=float)
    if traces.ndim != 2 or traces.shape[0] != grid.boundary_count:
        raise SolverError("traces must be (boundary_count, k)")
    k = traces.shape[1]
    out = np.empty((int(np.prod(grid.shape)), k))
    ni = tuple(grid.n)
    for lo in range(0, k, block):
        cols = range(lo, min(lo + block, k))
        B = np.empty((len(cols),) + ni)
        gss = []
        for i, c in enumerate(cols):
            gs = BoundaryField(grid, traces[:, c]).scatter()
            gss.append(gs)
            B[i] = _boundary_coupling(grid, gs)
        X = idstn(dstn(B, type=1, axes=(1, 2, 3)) / op._dst_lams[None], type=1,
                  axes=(1, 2, 3))
        resid = op.A @ X.reshape(len(cols), -1).T - B.reshape(len(cols), -1).T
        bn = np.linalg.norm(B.reshape(len(cols), -1), axis=1)
        bad = bn > 0
        if np.any(np.linalg.norm(resid, axis=0)[bad] > RESIDUAL_REQUIRED * bn[bad]):
            raise SolverError("batch extension residual above tolerance")
        for i, c in enumerate(cols):
            full = gss[i]
            full[1:-1, 1:-1, 1:-1] = X[i]
            out[:, c] = full.ravel()
    return out


# ------------------------------------------------------- kernel-data solves


def grad_kernel_lattice(grid: GridSpec, x) -> np.ndarray:
    """grad G(node - x) over the full lattice, shape lattice + (3,)."""
    X, Y, Z = grid.coords
    x = np.asarray(x, dtype=float)
    disp = np.stack([X - x[0], Y - x[1], Z - x[2]], axis=-1)
    return eval_gradG(disp)


def grad_kernel_traces(grid: GridSpec, x, negate: bool = False) -> list[BoundaryField]:
    """Boundary traces of the three components of grad G(. - x)."""
    p = grid.boundary_coords - np.asarray(x, dtype=float)
    vals = eval_gradG(p)
    if negate:
        vals = -vals
    return [BoundaryField(grid, np.ascontiguousarray(vals[:, j])) for j in range(3)]


def solve_w(op: SchrodingerOperator, x) -> VectorField:
    """Zero-trace solves with load -V grad G(. - x), one per component."""
    gk = grad_kernel_lattice(op.grid, x)
    comps = []
    for j in range(3):
        rhs = ScalarField(op.grid, -op.v_values * gk[..., j])
        comps.append(solve_dirichlet(op, None, rhs))
    return VectorField(tuple(comps))


def solve_w1(op: SchrodingerOperator, x) -> VectorField:
    """Homogeneous-load solves carrying the kernel gradient as wall data."""
    traces = grad_kernel_traces(op.grid, x)
    return VectorField(tuple(solve_dirichlet(op, tr, None) for tr in traces))


def solve_W(op: SchrodingerOperator, x) -> VectorField:
    """Combined probe field: load -V grad G and wall data grad G."""
    gk = grad_kernel_lattice(op.grid, x)
    traces = grad_kernel_traces(op.grid, x)
    comps = []
    for j in range(3):
        rhs = ScalarField(op.grid, -op.v_values * gk[..., j])
        comps.append(solve_dirichlet(op, traces[j], rhs))
    return VectorField(tuple(comps))


def solve_H(grid: GridSpec, x) -> VectorField:
    """Harmonic correctors with wall data MINUS grad G(. - x).

    The sign of the wall data is what makes the corrected kernel traces
    reproducible from probe sequences, so it is fixed here and tested.
    """
    zero_op = build_operator(grid, None)
    traces = grad_kernel_traces(grid, x, negate=True)
    return VectorField(tuple(solve_dirichlet(zero_op, tr, None) for tr in traces))


def solve_wstar(op: SchrodingerOperator, x, H: VectorField | None = None) -> VectorField:
    """Zero-trace solves with load -V (grad G + H)."""
    if H is None:
        H = solve_H(op.grid, x)
    gk = grad_kernel_lattice(op.grid, x)
    comps = []
    for j in range(3):
        rhs = ScalarField(op.grid, -op.v_values * (gk[..., j] + H[j].values))
        comps.append(solve_dirichlet(op, None, rhs))
    return VectorField(tuple(comps))


# ------------------------------------------------------------- dense DtN map


def _grid_hash(grid: GridSpec) -> bytes:
    hsh = hashlib.sha256()
    hsh.update(np.asarray(grid.extents, dtype="<f8").tobytes())
    hsh.update(np.asarray(grid.n, dtype="<i8").tobytes())
    return hsh.digest()


def _potential_hash(v: np.ndarray) -> bytes:
    return hashlib.sha256(np.ascontiguousarray(v, dtype="<f8").tobytes()).digest()


@dataclass
class DtnMap:
    grid: GridSpec
    flux: np.ndarray       # column j: boundary flux of the e_j solve
    pairing: np.ndarray    # column j: energy pairing row, symmetric
    grid_hash: bytes
    potential_hash: bytes

    def apply(self, f: BoundaryField) -> BoundaryField:
        return BoundaryField(self.grid, self.flux @ f.values)


_CACHE_MAGIC = b"DTNC"
_CACHE_VERSION = 1


def _cache_path(cache_dir: str, gh: bytes, ph: bytes) -> str:
    return os.path.join(cache_dir, f"dtn_{gh.hex()[:16]}_{ph.hex()[:16]}.bin")


def _write_cache(path: str, gh: bytes, ph: bytes, flux: np.ndarray, pairing: np.ndarray):
    m = flux.shape[0]
    os.makedirs(os.path.dirname(path), exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path), suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(_CACHE_MAGIC)
            fh.write(struct.pack("<I", _CACHE_VERSION))
            fh.write(gh)
            fh.write(ph)
            fh.write(struct.pack("<Q", m))
            fh.write(np.ascontiguousarray(flux, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(pairing, dtype="<f8").tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_cache(path: str, gh: bytes, ph: bytes, m: int):
    try:
        with open(path, "rb") as fh:
            if fh.read(4) != _CACHE_MAGIC:
                return None
            (version,) = struct.unpack("<I", fh.read(4))
            if version != _CACHE_VERSION:
                return None
            if fh.read(32) != gh or fh.read(32) != ph:
                return None
            (mm,) = struct.unpack("<Q", fh.read(8))
            if mm != m:
                return None
            flux = np.frombuffer(fh.read(m * m * 8), dtype="<f8").reshape(m, m).copy()
            pairing = np.frombuffer(fh.read(m * m * 8), dtype="<f8").reshape(m, m).copy()
            return flux, pairing
    except (OSError, struct.error):
        return None


def assemble_dense_dtn(op: SchrodingerOperator, cache_dir: str | None = None) -> DtnMap:
    """Column-by-column boundary flux map with an on-disk binary cache."""
    grid = op.grid
    m = grid.boundary_count
    if m > DENSE_DTN_MAX_BOUNDARY:
        raise SizeGuardError(f"dense DtN limited to {DENSE_DTN_MAX_BOUNDARY} boundary nodes")
    gh = _grid_hash(grid)
    ph = _potential_hash(op.v_values)
    path = _cache_path(cache_dir, gh, ph) if cache_dir else None
    if path and os.path.exists(path):
        loaded = _read_cache(path, gh, ph, m)
        if loaded is not None:
            return DtnMap(grid, loaded[0], loaded[1], gh, ph)
    flux = np.empty((m, m))
    pairing = np.empty((m, m))
    f = BoundaryField.zeros(grid)
    for j in range(m):
        f.values[:] = 0.0
        f.values[j] = 1.0
        u = solve_dirichlet(op, f)
        flux[:, j] = normal_derivative(u).values
        pairing[:, j] = op.boundary_gather(op.K @ u.values.ravel())
    if path:
        _write_cache(path, gh, ph, flux, pairing)
    return DtnMap(grid, flux, pairing, gh, ph)


# --------------------------------------------------- smallest eigenvalue


def estimate_smallest_eigenvalue(grid: GridSpec, potential, tol: float = 1e-8,
                                 max_iter: int = 400):
    """Inverse power iteration for the eigenvalue nearest zero.

    Returns (lambda, iterations, residual).  Small systems factorize the
    interior matrix directly so indefinite and near-singular operators are
    handled; larger systems fall back to preconditioned CG applies, which
    assumes positive definiteness (adequate for the screening use).
    """
    op = build_operator(grid, potential)
    N = op.A.shape[0]
    if N <= _EIG_DIRECT_MAX_INTERIOR:
        lu = splu(op.A.tocsc())
        apply_inv = lu.solve
    else:
        def apply_inv(b):
            x, info = cg(op.A, b, rtol=1e-10, atol=0.0, M=op._precond, maxiter=4000)
            if info != 0:
                raise EigenIterationError(
                    "inner solve for the eigen iteration did not converge"
                )
            return x

    x = np.ones(N) / np.sqrt(N)
    lam_old = None
    for k in range(max_iter):
        y = apply_inv(x)
        ny = np.linalg.norm(y)
        if not np.isfinite(ny) or ny == 0.0:
            raise EigenIterationError("inverse iteration produced a degenerate vector")
        y /= ny
        Ay = op.A @ y
        lam = float(y @ Ay)
        if lam_old is not None and abs(lam - lam_old) <= tol * max(abs(lam), 1.0):
            res = float(np.linalg.norm(Ay - lam * y))
            return lam, k + 1, res
        lam_old = lam
        x = y
    raise EigenIterationError(f"no convergence in {max_iter} inverse iterations")
