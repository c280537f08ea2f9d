"""Point indicators computed from boundary data of the lattice operator.

Side A of the laboratory: every indicator functional of the probe family
(probe, singular-sources, and the completely integrated variant, plus
their two-point liftings) is evaluated along at least two independent
computational routes, and the spread between routes is reported next to
the value.  The routes are

  * direct formulas: obstacle-weighted quadratures of kernel fields and
    of the solved correction fields,
  * energy forms: quadratic forms of the lattice energy matrix plus
    exterior kernel quadratures,
  * boundary-map forms: pairings of the flux map applied to kernel
    traces, and level-by-level needle-sequence estimators.

Nothing here mutates the operator; scans over many probe points are safe
to run in parallel, one worker per point.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import IndicatorError, QuadratureError
from .grid import (
    BoundaryField,
    GridSpec,
    ScalarField,
    VectorField,
    divergence_field,
    surface_flux_integral,
)
from .kernels import (
    ball_grad_sq_integral,
    boundary_grad_hess_flux,
    eval_G,
    eval_gradG,
    exterior_hess_energy,
)
from .needles import NeedleSequence, level_trace
from .numutil import pairwise_sum
from .potential import Ball, distance_to_obstacle_boundary
from .solver import (
    RESIDUAL_REQUIRED,
    SOLVE_RTOL,
    SchrodingerOperator,
    _grid_hash,
    _potential_hash,
    build_operator,
    dtn_pairing_from_solution,
    energy_form,
    energy_form_vector,
    grad_kernel_lattice,
    grad_kernel_traces,
    solve_H,
    solve_W,
    solve_dirichlet,
    solve_w,
    solve_w1,
    solve_wstar,
)

# Quadrature budgets for the continuum kernel integrals entering the
# identities.  A failed adaptive pass is retried once at ten times the
# budget and flagged, never silently dropped.
EXTERIOR_RTOL = 1e-4
FLUX_RTOL = 1e-5

# Stencil evaluations degrade this close to a wall or to the obstacle.
NEAR_STENCIL_FACTOR = 3.0

TAG_DIRECT = "direct-formula"
TAG_ENERGY = "energy-form"

ESTIMATOR_MODES = ("probe", "ssm", "cim", "lifting-probe", "lifting-ssm")


def level_tag(n: int) -> str:
    return f"dtn-limit-at-level-{n}"


# ---------------------------------------------------------------- results


@dataclass(frozen=True)
class IndicatorResult:
    """One indicator evaluation: named route values plus their spreads.

    `primary` names the entry of `values` an operation stands behind;
    the other entries are the independent routes it was checked against.
    `residuals` holds absolute gaps between routes and identity sides.
    """

    x: tuple[float, float, float]
    y: tuple[float, float, float] | None
    values: Mapping[str, float]
    primary: str
    methods: Mapping[str, str]
    residuals: Mapping[str, float]
    flags: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "x", tuple(float(c) for c in self.x))
        if self.y is not None:
            object.__setattr__(self, "y", tuple(float(c) for c in self.y))
        object.__setattr__(self, "values", dict(self.values))
        object.__setattr__(self, "methods", dict(self.methods))
        object.__setattr__(self, "residuals", dict(self.residuals))
        object.__setattr__(self, "flags", tuple(str(f) for f in self.flags))
        if self.primary not in self.values:
            raise IndicatorError(f"primary key {self.primary!r} missing from values")
        for name, table in (("value", self.values), ("residual", self.residuals)):
            for k, v in table.items():
                if not np.isfinite(v):
                    raise IndicatorError(f"non-finite {name} {k!r}: {v}")
                table[k] = float(v)
        for k in self.values:
            if k not in self.methods:
                raise IndicatorError(f"value {k!r} carries no method tag")

    @property
    def value(self) -> float:
        return self.values[self.primary]


# ------------------------------------------------------- point validation


def _as_point(p, name: str) -> np.ndarray:
    arr = np.asarray(p, dtype=float).reshape(-1)
    if arr.shape != (3,) or not np.all(np.isfinite(arr)):
        raise IndicatorError(f"{name} must be a finite 3-vector, got {p!r}")
    return arr


def require_probe_point(op: SchrodingerOperator, p, name: str = "probe point"
                        ) -> tuple[float, float, float]:
    """Reject points outside the open box, on a lattice node, or in the
    closed obstacle.  Kernel quadratures are meaningless in all three cases."""
    arr = _as_point(p, name)
    grid = op.grid
    if not grid.contains(arr):
        raise IndicatorError(f"{name} {tuple(arr)} must lie strictly inside the box")
    h = np.asarray(grid.h)
    off = arr - h * np.round(arr / h)
    if float(np.linalg.norm(off)) < 1e-6 * float(h.min()):
        raise IndicatorError(
            f"{name} {tuple(arr)} sits on a lattice node; nudge it off the lattice")
    pot = op.potential
    if pot is not None and not pot.is_zero:
        if distance_to_obstacle_boundary(pot.obstacle, arr) <= 0.0:
            raise IndicatorError(
                f"{name} {tuple(arr)} must stay outside the closed obstacle")
    return tuple(float(c) for c in arr)


def _near_flags(op: SchrodingerOperator, p, label: str) -> list[str]:
    grid = op.grid
    arr = np.asarray(p, dtype=float)
    near = NEAR_STENCIL_FACTOR * float(max(grid.h))
    ext = np.asarray(grid.extents)
    wall = float(min(arr.min(), (ext - arr).min()))
    flags = []
    if wall < near:
        flags.append(f"{label}-within-3h-of-wall")
    pot = op.potential
    if pot is not None and not pot.is_zero:
        if distance_to_obstacle_boundary(pot.obstacle, arr) < near:
            flags.append(f"{label}-within-3h-of-obstacle")
    return flags


# ----------------------------------------------------------- math helpers


def _vdot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.einsum("...i,...i->...", a, b)


def _v_integral(op: SchrodingerOperator, values: np.ndarray) -> float:
    """Quadrature of V * values over the box (V vanishes off the obstacle)."""
    return pairwise_sum((op.v_values * values * op.grid.volume_weights).ravel())


def _vec_values(vf: VectorField) -> np.ndarray:
    return np.stack([vf[j].values for j in range(3)], axis=-1)


def kernel_lattice(grid: GridSpec, x) -> np.ndarray:
    """G(node - x) over the full lattice."""
    X, Y, Z = grid.coords
    x = np.asarray(x, dtype=float)
    disp = np.stack([X - x[0], Y - x[1], Z - x[2]], axis=-1)
    return eval_G(disp)


def divergence_at(vec: VectorField, point) -> float:
    """Divergence of a lattice vector field at an off-lattice point.

    Centered differences on the lattice first, trilinear interpolation of
    the resulting scalar second; interpolating before differencing would
    cost an order of accuracy.
    """
    return divergence_field(vec).at(point)


def _kernel_grad_face(y: np.ndarray, j: int) -> Callable:
    def on_face(axis, side, X, Y, Z):
        disp = np.stack([X - y[0], Y - y[1], Z - y[2]], axis=-1)
        return eval_gradG(disp)[..., j]

    return on_face


def _surface_pairing(vec: VectorField, y: np.ndarray) -> float:
    """Wall integral of (normal derivative of vec) . grad G(. - y)."""
    return pairwise_sum(
        [surface_flux_integral(vec[j], _kernel_grad_face(y, j)) for j in range(3)])


def _exterior_energy(x, y, box, flags: list[str]) -> float:
    try:
        return exterior_hess_energy(x, y=y, box=box, rtol=EXTERIOR_RTOL)
    except QuadratureError:
        flags.append("exterior-quadrature-degraded")
        return exterior_hess_energy(x, y=y, box=box, rtol=EXTERIOR_RTOL * 10)


def _wall_flux(x, y, box, flags: list[str]) -> float:
    try:
        return boundary_grad_hess_flux(x, y=y, box=box, rtol=FLUX_RTOL)
    except QuadratureError:
        flags.append("wall-flux-quadrature-degraded")
        return boundary_grad_hess_flux(x, y=y, box=box, rtol=FLUX_RTOL * 10)


# ------------------------------------------------------------ field cache


class ProbeFields:
    """Lazy per-point solve cache shared by the indicator operations.

    Binds one operator and one probe point and materializes kernel
    arrays, correction-field solves, their lattice divergences, and the
    continuum exterior quadratures on first use.  Instances are cheap to
    create and safe to drop; hand the same instance to several
    operations to avoid repeating solves.
    """

    def __init__(self, op: SchrodingerOperator, x, op_free: SchrodingerOperator | None = None):
        self.op = op
        self.x = require_probe_point(op, x)
        self._op_free = op_free
        self._cache: dict[str, object] = {}

    def _get(self, key: str, make: Callable):
        if key not in self._cache:
            self._cache[key] = make()
        return self._cache[key]

    @property
    def op_free(self) -> SchrodingerOperator:
        if self._op_free is None:
            self._op_free = build_operator(self.op.grid, None)
        return self._op_free

    @property
    def grad_kernel(self) -> np.ndarray:
        return self._get("gk", lambda: grad_kernel_lattice(self.op.grid, self.x))

    @property
    def kernel_scalar(self) -> np.ndarray:
        return self._get("ks", lambda: kernel_lattice(self.op.grid, self.x))

    @property
    def kernel_traces(self) -> list[BoundaryField]:
        return self._get("ktr", lambda: grad_kernel_traces(self.op.grid, self.x))

    @property
    def kernel_sq(self) -> float:
        """Obstacle-weighted squared kernel gradient, the leading probe term."""
        return self._get(
            "ksq", lambda: _v_integral(self.op, _vdot(self.grad_kernel, self.grad_kernel)))

    @property
    def w(self) -> VectorField:
        return self._get("w", lambda: solve_w(self.op, self.x))

    @property
    def w1(self) -> VectorField:
        return self._get("w1", lambda: solve_w1(self.op, self.x))

    @property
    def H(self) -> VectorField:
        return self._get("H", lambda: solve_H(self.op.grid, self.x))

    @property
    def wstar(self) -> VectorField:
        return self._get("wstar", lambda: solve_wstar(self.op, self.x, H=self.H))

    @property
    def W_direct(self) -> VectorField:
        """Combined-field solve, independent of the w + w1 split."""
        return self._get("W", lambda: solve_W(self.op, self.x))

    @property
    def w_div(self) -> ScalarField:
        return self._get("w_div", lambda: divergence_field(self.w))

    @property
    def w1_div(self) -> ScalarField:
        return self._get("w1_div", lambda: divergence_field(self.w1))

    @property
    def wstar_div(self) -> ScalarField:
        return self._get("wstar_div", lambda: divergence_field(self.wstar))

    @property
    def W_direct_div(self) -> ScalarField:
        return self._get("W_div", lambda: divergence_field(self.W_direct))

    @property
    def weak_solution(self) -> ScalarField:
        def make():
            rhs = ScalarField(self.op.grid, -self.op.v_values * self.kernel_scalar)
            return solve_dirichlet(self.op, None, rhs)

        return self._get("weak", make)

    def exterior_self(self, flags: list[str]) -> float:
        key = "ext_self"
        if key not in self._cache:
            local: list[str] = []
            val = _exterior_energy(self.x, None, self.op.grid.extents, local)
            self._cache[key] = (val, tuple(local))
        val, cached_flags = self._cache[key]
        flags.extend(cached_flags)
        return val

    def flux_self(self, flags: list[str]) -> float:
        key = "flux_self"
        if key not in self._cache:
            local: list[str] = []
            val = _wall_flux(self.x, None, self.op.grid.extents, local)
            self._cache[key] = (val, tuple(local))
        val, cached_flags = self._cache[key]
        flags.extend(cached_flags)
        return val

    @property
    def kernel_dtn_gap(self) -> float:
        """Pairing of the flux-map difference against the kernel traces.

        Reuses the stored solves: under the potential the extension of the
        kernel trace is w1, and the free extension is minus the harmonic
        corrector, so no further solves are needed.
        """

        def make():
            terms = []
            for j in range(3):
                with_v = dtn_pairing_from_solution(self.op, self.w1[j],
                                                   self.kernel_traces[j])
                free = -dtn_pairing_from_solution(self.op_free, self.H[j],
                                                  self.kernel_traces[j])
                terms.append(with_v - free)
            return pairwise_sum(terms)

        return self._get("dtn_gap", make)


def _fields(op, x, fields: ProbeFields | None) -> ProbeFields:
    if fields is None:
        return ProbeFields(op, x)
    if fields.op is not op:
        raise IndicatorError("fields cache was built for a different operator")
    if tuple(fields.x) != tuple(require_probe_point(op, x)):
        raise IndicatorError("fields cache was built for a different point")
    return fields


# -------------------------------------------------------- probe indicator


def probe_indicator_direct(op: SchrodingerOperator, x,
                           fields: ProbeFields | None = None) -> IndicatorResult:
    """Probe indicator at x.

    Direct route: obstacle quadrature of the squared kernel gradient plus
    the scattered-correction cross term.  Checked against the energy
    route, which trades the cross term for minus the energy of the
    correction field.
    """
    f = _fields(op, x, fields)
    cross = _v_integral(op, _vdot(_vec_values(f.w), f.grad_kernel))
    direct = f.kernel_sq + cross
    energy = f.kernel_sq - energy_form_vector(op, f.w, f.w)
    return IndicatorResult(
        x=f.x, y=None,
        values={"probe": direct, "probe_energy": energy},
        primary="probe",
        methods={"probe": TAG_DIRECT, "probe_energy": TAG_ENERGY},
        residuals={"probe_route_gap": abs(direct - energy)},
        flags=tuple(_near_flags(op, f.x, "x")),
    )


def probe_lifting(op: SchrodingerOperator, x, y,
                  fields_x: ProbeFields | None = None,
                  fields_y: ProbeFields | None = None) -> IndicatorResult:
    """Two-point probe indicator.

    Returns the manifestly symmetric energy route (correction-energy
    pairing plus the kernel cross quadrature); the one-sided direct route
    is evaluated as well and the gap recorded.
    """
    fx = _fields(op, x, fields_x)
    fy = fx if _same_point(x, y) else _fields(op, y, fields_y)
    cross = _v_integral(op, _vdot(fx.grad_kernel, fy.grad_kernel))
    sym = cross - energy_form_vector(op, fx.w, fy.w)
    direct = cross + _v_integral(op, _vdot(_vec_values(fx.w), fy.grad_kernel))
    flags = _near_flags(op, fx.x, "x") + _near_flags(op, fy.x, "y")
    return IndicatorResult(
        x=fx.x, y=fy.x,
        values={"lifting": sym, "lifting_direct": direct},
        primary="lifting",
        methods={"lifting": TAG_ENERGY, "lifting_direct": TAG_DIRECT},
        residuals={"lifting_route_gap": abs(sym - direct)},
        flags=tuple(flags),
    )


def _same_point(x, y) -> bool:
    return bool(np.array_equal(np.asarray(x, dtype=float), np.asarray(y, dtype=float)))


# ----------------------------------------------- singular-sources indicator


def ssm_indicator(op: SchrodingerOperator, x, y=None,
                  fields_x: ProbeFields | None = None,
                  fields_y: ProbeFields | None = None) -> IndicatorResult:
    """Divergence of the scattered correction field of x, read at y.

    Route (i): lattice divergence of the solved field, interpolated at y.
    Route (ii): wall-flux plus obstacle-quadrature representation.  The
    representation is returned; the stencil value and the consistency of
    both with the two-point probe indicator are reported as residuals.
    """
    fx = _fields(op, x, fields_x)
    same = y is None or _same_point(x, y)
    if same:
        fy = fx
    else:
        fy = _fields(op, y, fields_y)
    yp = np.asarray(fy.x if not same else fx.x, dtype=float)

    stencil = fx.w_div.at(yp)
    surf = _surface_pairing(fx.w, yp)
    cross = _v_integral(op, _vdot(fx.grad_kernel, fy.grad_kernel)) if not same \
        else fx.kernel_sq
    vol = cross + _v_integral(op, _vdot(_vec_values(fx.w), fy.grad_kernel))
    representation = vol - surf

    # independent lifting value for the surface relation check
    lifting = cross - energy_form_vector(op, fx.w, fy.w)

    flags = _near_flags(op, fx.x, "x") + ([] if same else _near_flags(op, fy.x, "y"))
    if not same and float(np.linalg.norm(yp - np.asarray(fx.x))) \
            < NEAR_STENCIL_FACTOR * float(max(op.grid.h)):
        flags.append("y-within-3h-of-x-singularity")

    return IndicatorResult(
        x=fx.x, y=None if same else fy.x,
        values={"ssm": representation, "ssm_stencil": stencil,
                "ssm_surface_term": surf, "ssm_lifting": lifting},
        primary="ssm",
        methods={"ssm": TAG_DIRECT, "ssm_stencil": TAG_DIRECT,
                 "ssm_surface_term": TAG_DIRECT, "ssm_lifting": TAG_ENERGY},
        residuals={
            "ssm_route_gap": abs(representation - stencil),
            "ssm_surface_relation": abs(lifting - (stencil + surf)),
        },
        flags=tuple(dict.fromkeys(flags)),
    )


# ------------------------------------------------------ companion indicator


def i1_indicator(op: SchrodingerOperator, x, y=None,
                 fields_x: ProbeFields | None = None,
                 fields_y: ProbeFields | None = None) -> IndicatorResult:
    """Companion indicator of the decomposition, in three routes.

    Surface route: minus the energy pairing of the two trace-lift fields
    plus the wall flux of the kernel pair.  Exterior route: same energy
    pairing against minus the exterior Hessian energy.  Boundary-map
    route: flux-map pairing of the kernel traces subtracted from the
    kernel wall flux.  The boundary-map route is returned.
    """
    fx = _fields(op, x, fields_x)
    same = y is None or _same_point(x, y)
    fy = fx if same else _fields(op, y, fields_y)
    box = op.grid.extents
    flags: list[str] = []

    lift_energy = energy_form_vector(op, fx.w1, fy.w1)
    if same:
        flux_xy = fx.flux_self(flags)
        flux_yx = flux_xy
        ext = fx.exterior_self(flags)
    else:
        flux_xy = _wall_flux(fx.x, fy.x, box, flags)
        flux_yx = _wall_flux(fy.x, fx.x, box, flags)
        ext = _exterior_energy(fx.x, fy.x, box, flags)

    surface_route = -lift_energy + flux_xy
    exterior_route = -lift_energy - ext
    # flux-map route: the lift of the x-side kernel trace is w1, so its
    # wall flux against the y-side kernel trace is a stored pairing
    pair = pairwise_sum([
        dtn_pairing_from_solution(op, fx.w1[j], fy.kernel_traces[j])
        for j in range(3)
    ])
    dtn_route = flux_yx - pair

    flags.extend(_near_flags(op, fx.x, "x"))
    if not same:
        flags.extend(_near_flags(op, fy.x, "y"))

    return IndicatorResult(
        x=fx.x, y=None if same else fy.x,
        values={"i1": dtn_route, "i1_surface": surface_route,
                "i1_exterior": exterior_route},
        primary="i1",
        methods={"i1": TAG_DIRECT, "i1_surface": TAG_ENERGY,
                 "i1_exterior": TAG_ENERGY},
        residuals={
            "i1_surface_vs_exterior": abs(surface_route - exterior_route),
            "i1_surface_vs_dtn": abs(surface_route - dtn_route),
            "i1_exterior_vs_dtn": abs(exterior_route - dtn_route),
        },
        flags=tuple(dict.fromkeys(flags)),
    )


def w1_divergence_decomposition(op: SchrodingerOperator, x,
                                fields: ProbeFields | None = None) -> IndicatorResult:
    """Three-term split of the trace-lift divergence at its own pole.

    Term one: minus the flux-map pairing of the kernel traces.  Term two:
    the kernel self wall flux.  Term three: the obstacle quadrature of
    the lift against the kernel gradient.  Their sum must match the
    stencil divergence of the lift field.
    """
    f = _fields(op, x, fields)
    flags: list[str] = []
    term_pair = -pairwise_sum([
        dtn_pairing_from_solution(op, f.w1[j], f.kernel_traces[j]) for j in range(3)
    ])
    term_flux = f.flux_self(flags)
    term_volume = _v_integral(op, _vdot(_vec_values(f.w1), f.grad_kernel))
    total = pairwise_sum([term_pair, term_flux, term_volume])
    stencil = f.w1_div.at(np.asarray(f.x))
    flags.extend(_near_flags(op, f.x, "x"))
    return IndicatorResult(
        x=f.x, y=None,
        values={"w1_div": stencil, "w1_div_terms": total,
                "pairing_term": term_pair, "flux_term": term_flux,
                "volume_term": term_volume},
        primary="w1_div",
        methods={"w1_div": TAG_DIRECT, "w1_div_terms": TAG_ENERGY,
                 "pairing_term": TAG_ENERGY, "flux_term": TAG_DIRECT,
                 "volume_term": TAG_DIRECT},
        residuals={"w1_split_gap": abs(total - stencil)},
        flags=tuple(dict.fromkeys(flags)),
    )


# ------------------------------------------------------------ decomposition


def ips_decomposition(op: SchrodingerOperator, x, y=None,
                      fields_x: ProbeFields | None = None,
                      fields_y: ProbeFields | None = None) -> IndicatorResult:
    """Decomposition identity: divergence sum against indicator sum.

    At a single point the two correction-field divergences must add up to
    the probe indicator plus its companion.  With a second point the
    identity gains two antisymmetric wall-flux terms.  Both sides are
    evaluated by routes that share no intermediate quantities.
    """
    fx = _fields(op, x, fields_x)
    same = y is None or _same_point(x, y)
    fy = fx if same else _fields(op, y, fields_y)
    yp = np.asarray(fy.x)
    flags: list[str] = []

    div_sum = fx.w_div.at(yp) + fx.w1_div.at(yp)

    if same:
        probe = fx.kernel_sq - energy_form_vector(op, fx.w, fx.w)
        companion = -energy_form_vector(op, fx.w1, fx.w1) - fx.exterior_self(flags)
        surface = 0.0
        indicator_sum = probe + companion
    else:
        cross = _v_integral(op, _vdot(fx.grad_kernel, fy.grad_kernel))
        probe = cross - energy_form_vector(op, fx.w, fy.w)
        companion = -energy_form_vector(op, fx.w1, fy.w1) \
            - _exterior_energy(fx.x, fy.x, op.grid.extents, flags)
        surface = _surface_pairing(fy.w, np.asarray(fx.x)) \
            - _surface_pairing(fx.w, yp)
        indicator_sum = probe + companion + surface

    gap = abs(div_sum - indicator_sum)
    scale = max(abs(div_sum), abs(indicator_sum), 1e-300)
    flags.extend(_near_flags(op, fx.x, "x"))
    if not same:
        flags.extend(_near_flags(op, fy.x, "y"))

    return IndicatorResult(
        x=fx.x, y=None if same else fy.x,
        values={"div_sum": div_sum, "indicator_sum": indicator_sum,
                "probe_part": probe, "companion_part": companion,
                "surface_part": surface},
        primary="div_sum",
        methods={"div_sum": TAG_DIRECT, "indicator_sum": TAG_ENERGY,
                 "probe_part": TAG_ENERGY, "companion_part": TAG_ENERGY,
                 "surface_part": TAG_DIRECT},
        residuals={"decomposition_abs": gap, "decomposition_rel": gap / scale},
        flags=tuple(dict.fromkeys(flags)),
    )


def ips_function(op: SchrodingerOperator, x,
                 fields: ProbeFields | None = None) -> IndicatorResult:
    """Divergence of the combined probe field at its own pole.

    Direct route: stencil divergence of the combined-field solve.  Energy
    route: minus the field energy, plus the obstacle kernel quadrature,
    minus the exterior Hessian energy.  Split route: sum of the two
    separate correction-field divergences.
    """
    f = _fields(op, x, fields)
    flags: list[str] = []
    xp = np.asarray(f.x)
    direct = f.W_direct_div.at(xp)
    energy = -energy_form_vector(op, f.W_direct, f.W_direct) + f.kernel_sq \
        - f.exterior_self(flags)
    split = f.w_div.at(xp) + f.w1_div.at(xp)
    flags.extend(_near_flags(op, f.x, "x"))
    return IndicatorResult(
        x=f.x, y=None,
        values={"ips": direct, "ips_energy": energy, "ips_split": split},
        primary="ips",
        methods={"ips": TAG_DIRECT, "ips_energy": TAG_ENERGY,
                 "ips_split": TAG_DIRECT},
        residuals={"ips_vs_energy": abs(direct - energy),
                   "ips_vs_split": abs(direct - split)},
        flags=tuple(dict.fromkeys(flags)),
    )


def integro_differential_check(op: SchrodingerOperator, x, y,
                               fields_x: ProbeFields | None = None,
                               fields_y: ProbeFields | None = None) -> IndicatorResult:
    """Symmetrized combined-field identity at a point pair.

    The symmetric part of the cross divergences plus the combined-field
    energy pairing must equal the obstacle kernel quadrature minus the
    exterior Hessian pairing.  All four terms are evaluated separately.
    """
    fx = _fields(op, x, fields_x)
    same = _same_point(x, y)
    fy = fx if same else _fields(op, y, fields_y)
    flags: list[str] = []

    div_part = 0.5 * (fx.W_direct_div.at(np.asarray(fy.x))
                      + fy.W_direct_div.at(np.asarray(fx.x)))
    energy_part = energy_form_vector(op, fx.W_direct, fy.W_direct)
    cross = _v_integral(op, _vdot(fx.grad_kernel, fy.grad_kernel)) if not same \
        else fx.kernel_sq
    ext = fx.exterior_self(flags) if same \
        else _exterior_energy(fx.x, fy.x, op.grid.extents, flags)

    lhs = div_part + energy_part
    rhs = cross - ext
    gap = abs(lhs - rhs)
    scale = max(abs(lhs), abs(rhs), 1e-300)
    flags.extend(_near_flags(op, fx.x, "x"))
    if not same:
        flags.extend(_near_flags(op, fy.x, "y"))

    return IndicatorResult(
        x=fx.x, y=fy.x,
        values={"symmetric_lhs": lhs, "symmetric_rhs": rhs,
                "divergence_part": div_part, "energy_part": energy_part,
                "kernel_part": cross, "exterior_part": ext},
        primary="symmetric_lhs",
        methods={"symmetric_lhs": TAG_DIRECT, "symmetric_rhs": TAG_ENERGY,
                 "divergence_part": TAG_DIRECT, "energy_part": TAG_ENERGY,
                 "kernel_part": TAG_DIRECT, "exterior_part": TAG_ENERGY},
        residuals={"identity_abs": gap, "identity_rel": gap / scale},
        flags=tuple(dict.fromkeys(flags)),
    )


def orthogonality_defect(op: SchrodingerOperator, x, y,
                         fields_x: ProbeFields | None = None,
                         fields_y: ProbeFields | None = None) -> float:
    """Energy pairing of a zero-trace correction against a trace lift.

    Vanishes identically in exact arithmetic because the lift solves the
    homogeneous equation; the returned number is pure solver residual.
    """
    fx = _fields(op, x, fields_x)
    fy = fx if _same_point(x, y) else _fields(op, y, fields_y)
    return energy_form_vector(op, fx.w, fy.w1)


# ------------------------------------------- completely integrated indicator


def cim_indicator(op: SchrodingerOperator, x,
                  fields: ProbeFields | None = None) -> IndicatorResult:
    """Completely integrated indicator at x.

    Direct route: obstacle quadrature of the corrected kernel (kernel
    gradient plus harmonic corrector) squared, plus its cross term with
    the corrected correction field.  Checked against the stencil
    divergence of that correction field and against the relation that
    rebuilds the value from the probe routes plus the flux-map pairing of
    the kernel traces.
    """
    f = _fields(op, x, fields)
    flags: list[str] = []
    corrected = f.grad_kernel + _vec_values(f.H)
    direct = _v_integral(op, _vdot(corrected, corrected)) \
        + _v_integral(op, _vdot(_vec_values(f.wstar), corrected))

    stencil = f.wstar_div.at(np.asarray(f.x))

    probe = f.kernel_sq - energy_form_vector(op, f.w, f.w)
    companion = -energy_form_vector(op, f.w1, f.w1) - f.exterior_self(flags)
    w1_point = f.w1_div.at(np.asarray(f.x))
    gap = f.kernel_dtn_gap
    relation = probe + 2.0 * (companion - w1_point) + gap
    div_relation = f.w_div.at(np.asarray(f.x)) + (companion - w1_point) + gap

    flags.extend(_near_flags(op, f.x, "x"))
    return IndicatorResult(
        x=f.x, y=None,
        values={"cim": direct, "wstar_div": stencil,
                "cim_relation": relation, "wstar_div_relation": div_relation,
                "kernel_dtn_gap": gap},
        primary="cim",
        methods={"cim": TAG_DIRECT, "wstar_div": TAG_DIRECT,
                 "cim_relation": TAG_ENERGY, "wstar_div_relation": TAG_ENERGY,
                 "kernel_dtn_gap": TAG_DIRECT},
        residuals={
            "cim_vs_div": abs(direct - stencil),
            "cim_vs_relation": abs(direct - relation),
            "div_vs_relation": abs(stencil - div_relation),
        },
        flags=tuple(dict.fromkeys(flags)),
    )


# --------------------------------------------------- weak-kernel control


def weak_kernel_negative_result(op: SchrodingerOperator, x,
                                fields: ProbeFields | None = None) -> IndicatorResult:
    """Control functional built on the kernel itself, not its gradient.

    Same algebra as the probe indicator with the scalar kernel in place
    of the kernel gradient.  This one stays bounded on approach to the
    obstacle, which is exactly why it is kept: scans pair it with the
    probe indicator to show the gradient is what carries the blow-up.
    """
    f = _fields(op, x, fields)
    ksq = _v_integral(op, f.kernel_scalar ** 2)
    wk = f.weak_solution
    direct = ksq + _v_integral(op, wk.values * f.kernel_scalar)
    energy = ksq - energy_form(op, wk, wk)
    return IndicatorResult(
        x=f.x, y=None,
        values={"weak": direct, "weak_energy": energy},
        primary="weak",
        methods={"weak": TAG_DIRECT, "weak_energy": TAG_ENERGY},
        residuals={"weak_route_gap": abs(direct - energy)},
        flags=tuple(_near_flags(op, f.x, "x")),
    )


# ---------------------------------------------------------------- panel


def indicator_panel(op: SchrodingerOperator, x,
                    fields: ProbeFields | None = None,
                    include_cim: bool = True,
                    include_ips: bool = True,
                    include_weak: bool = True) -> IndicatorResult:
    """All canonical point values at x in one result.

    Runs the individual operations over one shared solve cache and
    merges their values, tags, residuals, and flags; the decomposition
    residual is always included.  This is the row producer for scans.
    """
    f = _fields(op, x, fields)
    parts = [probe_indicator_direct(op, x, fields=f),
             i1_indicator(op, x, fields_x=f),
             ssm_indicator(op, x, fields_x=f),
             w1_divergence_decomposition(op, x, fields=f),
             ips_decomposition(op, x, fields_x=f)]
    if include_ips:
        parts.append(ips_function(op, x, fields=f))
    if include_cim:
        parts.append(cim_indicator(op, x, fields=f))
    if include_weak:
        parts.append(weak_kernel_negative_result(op, x, fields=f))

    values: dict[str, float] = {}
    methods: dict[str, str] = {}
    residuals: dict[str, float] = {}
    flags: list[str] = []
    for part in parts:
        for k, v in part.values.items():
            values.setdefault(k, v)
            methods.setdefault(k, part.methods[k])
        for k, v in part.residuals.items():
            residuals.setdefault(k, v)
        flags.extend(part.flags)
    return IndicatorResult(
        x=f.x, y=None, values=values, primary="probe",
        methods=methods, residuals=residuals,
        flags=tuple(dict.fromkeys(flags)),
    )


# ----------------------------------------------------------- harmonicity


@dataclass(frozen=True)
class HarmonicityReport:
    """Cancellation of axis curvatures of a point function.

    `cancellation` is the seven-point Laplacian magnitude over the sum of
    the individual axis curvature magnitudes, a dimensionless measure of
    how harmonic the sampled function is at the stencil scale.
    """

    point: tuple[float, float, float]
    step: float
    values: tuple[float, ...]
    axis_curvatures: tuple[float, float, float]
    laplacian: float
    cancellation: float


def harmonicity_defect(fn: Callable, point, step: float) -> HarmonicityReport:
    """Seven-point Laplacian of a scalar point function.

    `fn` maps a 3-point to a float and is evaluated at the center and at
    plus and minus `step` along each axis.
    """
    p = np.asarray(point, dtype=float)
    if step <= 0:
        raise IndicatorError(f"stencil step must be positive, got {step}")
    center = float(fn(tuple(p)))
    vals = [center]
    curvs = []
    for axis in range(3):
        e = np.zeros(3)
        e[axis] = step
        up = float(fn(tuple(p + e)))
        dn = float(fn(tuple(p - e)))
        vals += [up, dn]
        curvs.append((up + dn - 2.0 * center) / step ** 2)
    lap = pairwise_sum(curvs)
    denom = max(pairwise_sum([abs(c) for c in curvs]), 1e-300)
    return HarmonicityReport(
        point=tuple(float(c) for c in p), step=float(step),
        values=tuple(vals), axis_curvatures=tuple(curvs),
        laplacian=lap, cancellation=abs(lap) / denom,
    )


# ------------------------------------------------- needle-limit estimator


@dataclass(frozen=True)
class DtnLimitSeries:
    """Per-level pairing sums of a needle-sequence estimator.

    `values[k]` is the level-`levels[k]` component sum of the boundary
    pairing for the chosen mode; `target` is the direct-formula value the
    series is expected to approach, and `errors` the per-level distance.
    """

    mode: str
    x: tuple[float, float, float]
    y: tuple[float, float, float] | None
    levels: tuple[int, ...]
    values: tuple[float, ...]
    per_component: tuple[tuple[float, float, float], ...]
    target: float
    target_key: str
    errors: tuple[float, ...]
    method_tags: tuple[str, ...]

    def __post_init__(self):
        if self.mode not in ESTIMATOR_MODES:
            raise IndicatorError(f"unknown estimator mode {self.mode!r}")
        n = len(self.levels)
        if not (len(self.values) == len(self.per_component) == len(self.errors)
                == len(self.method_tags) == n) or n == 0:
            raise IndicatorError("estimator series fields must share one length")
        if any(b <= a for a, b in zip(self.levels, self.levels[1:])):
            raise IndicatorError("levels must be strictly increasing")
        for v in (*self.values, self.target, *self.errors):
            if not np.isfinite(v):
                raise IndicatorError(f"non-finite estimator entry: {v}")

    @property
    def final_relative_error(self) -> float:
        return self.errors[-1] / max(abs(self.target), 1e-300)


def _check_triple(seq_triple, grid, what: str) -> dict[int, NeedleSequence]:
    try:
        triple = {int(j): seq_triple[j] for j in (0, 1, 2)}
    except (KeyError, TypeError) as exc:
        raise IndicatorError(
            f"{what} must map components 0, 1, 2 to needle sequences") from exc
    tips = set()
    for j, seq in triple.items():
        if not isinstance(seq, NeedleSequence):
            raise IndicatorError(f"{what}[{j}] is not a needle sequence")
        if seq.j != j:
            raise IndicatorError(f"{what}[{j}] was generated for component {seq.j}")
        if seq.grid != grid:
            raise IndicatorError(f"{what}[{j}] lives on a different grid")
        if seq.modified:
            raise IndicatorError(
                f"{what} must be unlifted; the estimator applies its own corrector")
        tips.add(tuple(np.asarray(seq.x, dtype=float)))
    if len(tips) != 1:
        raise IndicatorError(f"{what} components disagree on the tip point")
    return triple


def dtn_limit_estimator(op: SchrodingerOperator, seq_triple, mode: str,
                        y_seq=None, op_free: SchrodingerOperator | None = None,
                        fields: ProbeFields | None = None,
                        y_fields: ProbeFields | None = None) -> DtnLimitSeries:
    """Level-by-level boundary-pairing estimator for one indicator mode.

    modes: "probe" and "cim" are quadratic pairings of the level traces
    (raw, respectively kernel-corrected); "ssm" pairs the level trace
    against its gap to the kernel trace; the "lifting-" variants pair the
    x-side levels against a second sequence anchored at y and only ever
    solve on the x side, mirroring how observation data would be used.
    The direct-formula value of the same indicator is computed as the
    series target.
    """
    if mode not in ESTIMATOR_MODES:
        raise IndicatorError(f"unknown estimator mode {mode!r}; "
                             f"choose one of {ESTIMATOR_MODES}")
    lifted = mode.startswith("lifting-")
    if lifted and y_seq is None:
        raise IndicatorError(f"mode {mode!r} needs the y-side sequence triple")
    if not lifted and y_seq is not None:
        raise IndicatorError(f"mode {mode!r} takes no y-side triple")

    triple = _check_triple(seq_triple, op.grid, "seq_triple")
    x = triple[0].x
    f = _fields(op, x, fields)
    if op_free is None:
        op_free = f.op_free

    y_triple = None
    fy = None
    if lifted:
        y_triple = _check_triple(y_seq, op.grid, "y_seq")
        fy = y_fields if y_fields is not None else ProbeFields(op, y_triple[0].x,
                                                               op_free=op_free)
        if tuple(fy.x) == tuple(f.x):
            raise IndicatorError("lifting modes need two distinct tip points")

    ns = [lv.n for lv in triple[0].levels]
    for j in (1, 2):
        if [lv.n for lv in triple[j].levels] != ns:
            raise IndicatorError("seq_triple components disagree on levels")
    if lifted:
        ns = ns[:min(len(ns), len(y_triple[0].levels))]

    if mode == "probe":
        target_key = "probe"
        target = probe_indicator_direct(op, x, fields=f).value
    elif mode == "ssm":
        target_key = "ssm"
        target = ssm_indicator(op, x, fields_x=f).value
    elif mode == "cim":
        target_key = "cim"
        target = cim_indicator(op, x, fields=f).value
    elif mode == "lifting-probe":
        target_key = "lifting"
        target = probe_lifting(op, x, fy.x, fields_x=f, fields_y=fy).value
    else:
        target_key = "ssm"
        target = ssm_indicator(op, x, fy.x, fields_x=f, fields_y=fy).value

    values = []
    rows = []
    for k, n in enumerate(ns):
        comps = []
        for j in range(3):
            tr_v = level_trace(triple[j], n)
            sol_free = triple[j].level(n).field
            if mode in ("probe", "ssm"):
                sol_v = solve_dirichlet(op, tr_v)
                if mode == "probe":
                    other = tr_v
                    sign = 1.0
                else:
                    other = BoundaryField(
                        op.grid, f.kernel_traces[j].values - tr_v.values)
                    sign = -1.0
                comps.append(sign * (
                    dtn_pairing_from_solution(op, sol_v, other)
                    - dtn_pairing_from_solution(op_free, sol_free, other)))
            elif mode == "cim":
                gap_tr = BoundaryField(
                    op.grid, f.kernel_traces[j].values - tr_v.values)
                sol_gap_v = solve_dirichlet(op, gap_tr)
                sol_gap_free = ScalarField(
                    op.grid, -f.H[j].values - sol_free.values)
                comps.append(
                    dtn_pairing_from_solution(op, sol_gap_v, gap_tr)
                    - dtn_pairing_from_solution(op_free, sol_gap_free, gap_tr))
            else:
                tr_vy = level_trace(y_triple[j], y_triple[j].levels[k].n)
                if mode == "lifting-probe":
                    other = tr_vy
                    sign = 1.0
                else:
                    other = BoundaryField(
                        op.grid, fy.kernel_traces[j].values - tr_vy.values)
                    sign = -1.0
                sol_v = solve_dirichlet(op, tr_v)
                comps.append(sign * (
                    dtn_pairing_from_solution(op, sol_v, other)
                    - dtn_pairing_from_solution(op_free, sol_free, other)))
        values.append(pairwise_sum(comps))
        rows.append(tuple(comps))

    return DtnLimitSeries(
        mode=mode, x=tuple(f.x), y=None if fy is None else tuple(fy.x),
        levels=tuple(ns), values=tuple(values), per_component=tuple(rows),
        target=float(target), target_key=target_key,
        errors=tuple(abs(v - target) for v in values),
        method_tags=tuple(level_tag(n) for n in ns),
    )


# -------------------------------------------------- jump magnitude readout


@dataclass(frozen=True)
class JumpMagnitudeEstimate:
    """Extrapolated ratio of probe indicator to bare kernel energy.

    The ratio along an approach line tends to the potential value just
    inside the contact point; `alpha_hat` extrapolates the last three
    samples linearly in distance.
    """

    contact: tuple[float, float, float]
    points: tuple[tuple[float, float, float], ...]
    distances: tuple[float, ...]
    ratios: tuple[float, ...]
    alpha_hat: float
    flags: tuple[str, ...] = ()


def _kernel_energy_on_obstacle(op: SchrodingerOperator, x) -> float:
    """Bare squared-kernel-gradient integral over the known obstacle.

    Exact closed form for a single-ball obstacle, nodal quadrature
    otherwise.
    """
    shapes = op.potential.obstacle.shapes
    if len(shapes) == 1 and isinstance(shapes[0].geometry, Ball):
        ball = shapes[0].geometry
        return ball_grad_sq_integral(ball.center, ball.radius, x)
    gk = grad_kernel_lattice(op.grid, x)
    w = op.grid.volume_weights
    mask = op.potential.support_mask
    return pairwise_sum(np.where(mask, _vdot(gk, gk) * w, 0.0).ravel())


def jump_magnitude_estimate(op: SchrodingerOperator, a, x_line,
                            op_free: SchrodingerOperator | None = None
                            ) -> JumpMagnitudeEstimate:
    """Jump magnitude readout along an approach line to a contact point.

    `a` must lie on the obstacle boundary and `x_line` must approach it
    from outside with strictly decreasing distances.  The probe indicator
    is divided by the bare kernel energy at each sample and the ratio is
    extrapolated to zero distance through the last three samples.
    """
    contact = _as_point(a, "contact point")
    pts = [np.asarray(_as_point(p, "line point")) for p in x_line]
    if len(pts) < 3:
        raise IndicatorError("the approach line needs at least three points")

    pot = op.potential
    if pot is None or pot.is_zero:
        dists = tuple(float(np.linalg.norm(p - contact)) for p in pts)
        return JumpMagnitudeEstimate(
            contact=tuple(map(float, contact)),
            points=tuple(tuple(map(float, p)) for p in pts),
            distances=dists, ratios=(0.0,) * len(pts), alpha_hat=0.0)

    sd = distance_to_obstacle_boundary(pot.obstacle, contact)
    if abs(sd) > 1e-3:
        raise IndicatorError(
            f"contact point is {sd:+.3g} away from the obstacle boundary")

    dists = []
    ratios = []
    for p in pts:
        d = float(np.linalg.norm(p - contact))
        if dists and d >= dists[-1]:
            raise IndicatorError("line distances must decrease strictly")
        dists.append(d)
        probe = probe_indicator_direct(op, tuple(p)).value
        ratios.append(probe / _kernel_energy_on_obstacle(op, p))

    # linear-in-distance extrapolation through the last three samples
    dtail = np.asarray(dists[-3:])
    rtail = np.asarray(ratios[-3:])
    design = np.stack([np.ones(3), dtail], axis=1)
    coef, *_ = np.linalg.lstsq(design, rtail, rcond=None)
    alpha_hat = float(coef[0])

    flags = []
    steps = np.abs(np.diff(rtail))
    if steps[-1] > steps[0]:
        flags.append("ratio-series-not-settling")
    return JumpMagnitudeEstimate(
        contact=tuple(map(float, contact)),
        points=tuple(tuple(map(float, p)) for p in pts),
        distances=tuple(dists), ratios=tuple(map(float, ratios)),
        alpha_hat=alpha_hat, flags=tuple(flags))


def scan_line(target, direction, distances) -> list[tuple[float, float, float]]:
    """Points target + d * unit(direction) for each d, nearest last."""
    t = _as_point(target, "scan target")
    d = np.asarray(direction, dtype=float)
    nrm = float(np.linalg.norm(d))
    if nrm == 0.0:
        raise IndicatorError("scan direction must be nonzero")
    u = d / nrm
    ds = sorted(float(v) for v in distances)
    if not ds or ds[0] <= 0:
        raise IndicatorError("scan distances must be positive")
    return [tuple(t + dist * u) for dist in reversed(ds)]


# ------------------------------------------------------------- reporting


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_indicator_csv(results: Sequence[IndicatorResult], path: str) -> None:
    """One row per result; columns are the sorted union of value and
    residual keys so heterogeneous results share a stable schema."""
    value_keys = sorted({k for r in results for k in r.values})
    resid_keys = sorted({k for r in results for k in r.residuals})
    cols = ["x0", "x1", "x2", "y0", "y1", "y2", "primary"]
    cols += [f"value_{k}" for k in value_keys]
    cols += [f"method_{k}" for k in value_keys]
    cols += [f"residual_{k}" for k in resid_keys]
    cols.append("flags")
    lines = [",".join(cols)]
    for r in results:
        row = [_fmt(c) for c in r.x]
        row += [_fmt(c) for c in r.y] if r.y is not None else ["", "", ""]
        row.append(r.primary)
        row += [_fmt(r.values[k]) if k in r.values else "" for k in value_keys]
        row += [r.methods.get(k, "") for k in value_keys]
        row += [_fmt(r.residuals[k]) if k in r.residuals else "" for k in resid_keys]
        row.append(";".join(r.flags))
        lines.append(",".join(row))
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _shape_summary(shape) -> dict:
    geom = shape.geometry
    if isinstance(geom, Ball):
        body = {"kind": "ball", "center": list(geom.center), "radius": geom.radius}
    else:
        body = {"kind": "box", "lo": list(geom.lo), "hi": list(geom.hi)}
    body.update(sign=shape.sign, amplitude=shape.amplitude,
                variation=shape.variation)
    return body


def write_indicator_metadata(op: SchrodingerOperator, path: str,
                             extra: Mapping | None = None) -> None:
    """JSON sidecar tying a CSV to its grid, potential, and tolerances."""
    grid = op.grid
    pot = op.potential
    doc = {
        "grid": {
            "extents": list(grid.extents),
            "interior": list(grid.n),
            "h": list(grid.h),
        },
        "potential": None if pot is None or pot.is_zero else {
            "shapes": [_shape_summary(s) for s in pot.obstacle.shapes],
            "collar": pot.obstacle.collar,
            "jump_floor": pot.jump_floor,
        },
        "tolerances": {
            "solve_rtol": SOLVE_RTOL,
            "residual_required": RESIDUAL_REQUIRED,
            "exterior_rtol": EXTERIOR_RTOL,
            "flux_rtol": FLUX_RTOL,
        },
        "hashes": {
            "grid": _grid_hash(grid).hex(),
            "potential": _potential_hash(op.v_values).hex(),
        },
    }
    if extra:
        doc.update(dict(extra))
    with open(path, "w", newline="\n") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
