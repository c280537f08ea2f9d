"""Membership tests driven by needle-borne approximating sequences.

Three boundary pairings per lattice direction decide whether a probe tip
sits in the closed obstacle.  With v the level trace and g the wall trace
of the tip kernel derivative, the pairings are the quadratic form of v
("probe"), minus the cross form of v against g - v ("ssm"), and the
quadratic form of g - v ("cim").  All three diverge along needles that
meet the obstacle and settle along needles that stay clear, so a verdict
needs only the level series of any one of them.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import SideBError
from .grid import BoundaryField, GridSpec
from .needles import (Needle, NeedleSequence, NormPoint, SequenceParams,
                      generate_needle_sequence, level_trace, make_needle,
                      needle_norm_series)
from .numutil import pairwise_sum
from .solver import (SchrodingerOperator, build_operator, dtn_pairing_from_solution,
                     grad_kernel_traces, solve_dirichlet)

METHODS = ("probe", "ssm", "cim")

#: growth factor over the trusted three-level window that counts as divergence
DIVERGE_FACTOR = 4.0
#: a diverging series must also escape this far past the direct-data value
ANCHOR_ESCAPE = 20.0
#: settled levels stay within this factor of one another
WOBBLE_RATIO = 2.5
#: levels are trusted while the fit lands within this factor of its target
TRUST_SLACK = 2.0


@dataclass(frozen=True)
class IndicatorSequence:
    """Per-level values of one membership pairing along one needle."""

    x: np.ndarray
    needle: Needle
    j: int
    method: str
    levels: tuple
    values: tuple
    deltas: tuple
    trusted: tuple               # per level: fit achieved within slack of target
    anchor: float | None = None  # probe only: pairing of the raw tip-kernel data
    norms: tuple | None = None   # per-level obstacle-region norms, when known
    residuals: tuple | None = None   # ssm only: direct minus recombined
    scales: tuple | None = None      # ssm only: largest raw pairing magnitude

    def __post_init__(self):
        if self.method not in METHODS:
            raise SideBError(f"unknown method {self.method!r}")
        lv = np.asarray(self.levels)
        if lv.size == 0 or np.any(np.diff(lv) <= 0):
            raise SideBError("levels must be strictly increasing")
        if not np.all(np.isfinite(self.values)):
            raise SideBError("indicator values must be finite")


def _as_sequence(seq_bundle, j=None) -> NeedleSequence:
    if isinstance(seq_bundle, NeedleSequence):
        seq = seq_bundle
    elif isinstance(seq_bundle, dict):
        if j is None:
            raise SideBError("a bundle needs an explicit component index")
        seq = seq_bundle[j]
    else:
        raise SideBError("expected a needle sequence or a bundle of them")
    if seq.modified:
        raise SideBError("membership pairings act on raw, unlifted sequences")
    return seq


def indicator_table(op: SchrodingerOperator, seq_bundle, j=None,
                    op_free: SchrodingerOperator | None = None,
                    methods=METHODS) -> dict:
    """All requested pairing series for one sequence, sharing solves.

    Every trace is solved independently under both operators; the ssm row
    is additionally recombined from the three quadratic forms, and the
    disagreement is recorded against the raw pairing scale.
    """
    seq = _as_sequence(seq_bundle, j)
    if op_free is None:
        op_free = build_operator(op.grid)
    g = grad_kernel_traces(op.grid, seq.x)[seq.j]
    need_g = "ssm" in methods or "cim" in methods
    ugV = solve_dirichlet(op, g)
    ug0 = solve_dirichlet(op_free, g)
    qgg = (dtn_pairing_from_solution(op, ugV, g)
           - dtn_pairing_from_solution(op_free, ug0, g))
    rows = {m: [] for m in methods}
    resid, scales = [], []
    trusted = []
    for lv in seq.levels:
        v = level_trace(seq, lv.n)
        trusted.append(bool(lv.achieved <= TRUST_SLACK * lv.target_tol))
        uvV = solve_dirichlet(op, v)
        uv0 = solve_dirichlet(op_free, v)
        raw = [dtn_pairing_from_solution(op, uvV, v),
               dtn_pairing_from_solution(op_free, uv0, v)]
        probe = raw[0] - raw[1]
        if need_g:
            G = BoundaryField(op.grid, g.values - v.values)
            uGV = solve_dirichlet(op, G)
            uG0 = solve_dirichlet(op_free, G)
            raw += [dtn_pairing_from_solution(op, uGV, G),
                    dtn_pairing_from_solution(op_free, uG0, G),
                    dtn_pairing_from_solution(op, ugV, g),
                    dtn_pairing_from_solution(op_free, ug0, g)]
            cim = raw[2] - raw[3]
            ssm = -(dtn_pairing_from_solution(op, uvV, G)
                    - dtn_pairing_from_solution(op_free, uv0, G))
            recombined = 0.5 * (probe + cim - qgg)
            resid.append(abs(ssm - recombined))
            scales.append(max(abs(r) for r in raw))
        if "probe" in methods:
            rows["probe"].append(probe)
        if "cim" in methods:
            rows["cim"].append(cim)
        if "ssm" in methods:
            rows["ssm"].append(ssm)
    norms = None
    if op.potential is not None and not op.potential.is_zero:
        norms = tuple(needle_norm_series(seq, op.potential.support_mask))
    out = {}
    for m in methods:
        out[m] = IndicatorSequence(
            x=seq.x, needle=seq.needle, j=seq.j, method=m,
            levels=tuple(lv.n for lv in seq.levels),
            values=tuple(rows[m]),
            deltas=tuple(lv.delta for lv in seq.levels),
            trusted=tuple(trusted),
            anchor=qgg if m == "probe" else None,
            norms=norms,
            residuals=tuple(resid) if m == "ssm" else None,
            scales=tuple(scales) if m == "ssm" else None,
        )
    return out


def indicator_sequence(op: SchrodingerOperator, seq_bundle, method: str = "probe",
                       j=None, op_free: SchrodingerOperator | None = None
                       ) -> IndicatorSequence:
    """One membership pairing series; see indicator_table."""
    if method not in METHODS:
        raise SideBError(f"unknown method {method!r}")
    methods = (method,) if method == "probe" else METHODS
    return indicator_table(op, seq_bundle, j, op_free, methods)[method]


def lower_bound_certificate(op: SchrodingerOperator, seq_bundle, n: int,
                            j=None, op_free: SchrodingerOperator | None = None,
                            margin: float = 1.2):
    """Signed probe pairing at level n against its obstacle-norm bound.

    The bound keeps the square of the region L2 norm, at the strength of
    the potential floor, minus a mixed L2 * L1 term whose constant is
    measured from the solves themselves (the worst observed ratio of the
    perturbation to the L1 norm, padded by ``margin``).  Returns the pair
    (lhs, rhs); a faithful run has lhs >= rhs at every level.
    """
    seq = _as_sequence(seq_bundle, j)
    pot = op.potential
    if pot is None or pot.is_zero:
        raise SideBError("the certificate needs a nonempty obstacle")
    signs = {s.sign for s in pot.obstacle.shapes}
    if len(signs) != 1:
        raise SideBError("the certificate needs a uniform jump sign")
    sign = signs.pop()
    if op_free is None:
        op_free = build_operator(op.grid)
    mask = pot.support_mask
    w = op.grid.volume_weights[mask]
    vmax = float(np.max(np.abs(pot.V.values[mask])))
    ratio = 0.0
    lhs = rhs = None
    for lv in seq.levels:
        if lv.n > n:
            break
        f = level_trace(seq, lv.n)
        u = solve_dirichlet(op, f)
        pert = (u.values - lv.field.values)[mask]
        vals = lv.field.values[mask]
        l2 = float(np.sqrt(pairwise_sum(w * vals * vals)))
        l1 = float(pairwise_sum(w * np.abs(vals)))
        p2 = float(np.sqrt(pairwise_sum(w * pert * pert)))
        if l1 > 0:
            ratio = max(ratio, p2 / l1)
        if lv.n == n:
            u0 = solve_dirichlet(op_free, f)
            lhs = sign * (dtn_pairing_from_solution(op, u, f)
                          - dtn_pairing_from_solution(op_free, u0, f))
            rhs_parts = (pot.jump_floor * l2 * l2, l2, l1)
    if lhs is None:
        raise SideBError(f"no level {n} in sequence")
    rhs = rhs_parts[0] - margin * ratio * vmax * rhs_parts[1] * rhs_parts[2]
    return lhs, rhs


# ------------------------------------------------------------- verdict rules


def diverging_tail(values, trusted=None, anchor=None,
                   factor: float = DIVERGE_FACTOR) -> bool:
    """Growth by `factor` with one sign and rising magnitudes, over the
    last three trusted levels.

    A rough early level can climb toward a perfectly finite limit and
    mimic growth, so when the direct-data value is known the final level
    must also land well past it.
    """
    a = np.asarray(values, dtype=float)
    if trusted is not None:
        a = a[np.asarray(trusted, dtype=bool)]
    if a.size < 3:
        return False
    a = a[-3:]
    if np.any(a == 0.0) or np.any(np.sign(a) != np.sign(a[-1])):
        return False
    mag = np.abs(a)
    if not (np.all(np.diff(mag) > 0) and mag[-1] >= factor * mag[0]):
        return False
    if anchor is not None and mag[-1] < ANCHOR_ESCAPE * abs(anchor):
        return False
    return True


def settling_tail(values, wobble: float = WOBBLE_RATIO) -> bool:
    """Final three levels share a sign and agree to a modest factor.

    Membership only needs bounded-versus-divergent, so no accuracy claim
    is made about the settled value: along clear needles with a small
    true pairing, the series can hover above it on a floor set by the
    fitting error over the obstacle, and that still reads as bounded.
    """
    a = np.asarray(values, dtype=float)
    if a.size < 3:
        return False
    t = a[-3:]
    mag = np.abs(t)
    if np.any(mag == 0.0) or np.any(np.sign(t) != np.sign(t[-1])):
        return False
    return bool(mag.max() <= wobble * mag.min())


@dataclass(frozen=True)
class NeedleEvidence:
    needle: Needle
    diverges: bool
    settles: bool
    trusted_count: int
    sequence: IndicatorSequence


@dataclass(frozen=True)
class MembershipVerdict:
    """Outcome of probing one point with a family of needles."""

    x: np.ndarray
    verdict: str                 # inside_Dbar | outside | inconclusive
    method: str
    j: int
    evidence: tuple

    def __post_init__(self):
        if self.verdict not in ("inside_Dbar", "outside", "inconclusive"):
            raise SideBError(f"unknown verdict {self.verdict!r}")


def default_needles(grid: GridSpec, x, count: int = 3, slant: float = 0.35):
    """Straight entry from the nearest wall plus slanted companions.

    The slanted bases shift along the two in-face axes by `slant` times
    the tip depth, clamped to the face, so the needles fan out while all
    ending at the same tip.
    """
    x = np.asarray(x, dtype=float)
    ext = np.asarray(grid.extents, dtype=float)
    gaps = np.concatenate([x, ext - x])
    face = int(np.argmin(gaps))
    axis, hi = face % 3, face >= 3
    depth = float(gaps[face])
    base = x.copy()
    base[axis] = ext[axis] if hi else 0.0
    others = [k for k in range(3) if k != axis]
    offsets = [np.zeros(3)]
    for k, sgn in ((others[0], 1.0), (others[1], -1.0)):
        off = np.zeros(3)
        off[k] = sgn * slant * max(depth, 0.05 * ext[k])
        offsets.append(off)
    needles = []
    for off in offsets[:count]:
        b = np.clip(base + off, 0.02 * ext, 0.98 * ext)
        b[axis] = base[axis]
        needles.append(make_needle(b, [], x, extents=tuple(ext)))
    return needles


def classify_point(op: SchrodingerOperator, x, needle_set=None,
                   method: str = "probe", j: int = 2,
                   params: SequenceParams | None = None,
                   op_free: SchrodingerOperator | None = None,
                   stop_on_settle: bool = True) -> MembershipVerdict:
    """Decide membership of the closed obstacle for one probe tip.

    Inside needs every tried needle to diverge; outside needs some needle
    to settle (needles that diverge alongside are consistent with a hit
    on the way past, so they do not veto).  Anything else, including too
    few trusted levels to judge growth, stays inconclusive.
    """
    if op_free is None:
        op_free = build_operator(op.grid)
    if params is None:
        params = SequenceParams(levels=5, delta0=1.6, tau0=0.12)
    if needle_set is None:
        needle_set = default_needles(op.grid, x)
    evidence = []
    for nd in needle_set:
        seq = generate_needle_sequence(op.grid, nd, j, params, op_free)
        ind = indicator_sequence(op, seq, method, op_free=op_free)
        ev = NeedleEvidence(
            needle=nd,
            diverges=diverging_tail(ind.values, ind.trusted, ind.anchor),
            settles=settling_tail(ind.values),
            trusted_count=int(sum(ind.trusted)),
            sequence=ind,
        )
        evidence.append(ev)
        if stop_on_settle and ev.settles:
            break
    if any(ev.settles for ev in evidence):
        verdict = "outside"
    elif evidence and all(ev.diverges for ev in evidence):
        verdict = "inside_Dbar"
    else:
        verdict = "inconclusive"
    return MembershipVerdict(x=np.asarray(x, dtype=float), verdict=verdict,
                             method=method, j=j, evidence=tuple(evidence))


def run_battery(op: SchrodingerOperator, points, method: str = "probe",
                j: int = 2, params: SequenceParams | None = None,
                threads: int = 1, needle_sets=None):
    """Classify many points; results keep the input order at any thread count."""
    op_free = build_operator(op.grid)
    if needle_sets is None:
        needle_sets = [None] * len(points)

    def one(i):
        return classify_point(op, points[i], needle_sets[i], method, j,
                              params, op_free)

    idx = range(len(points))
    if threads <= 1:
        return [one(i) for i in idx]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, idx))


# ---------------------------------------------------------------- reporting


def write_membership_csv(verdicts, path) -> None:
    cols = ["x0", "x1", "x2", "verdict", "method", "component",
            "needles_tried", "needles_diverging", "needles_settling"]
    with open(path, "w", newline="") as fh:
        fh.write(",".join(cols) + "\n")
        for v in verdicts:
            row = ["%.17g" % c for c in v.x]
            row += [v.verdict, v.method, str(v.j), str(len(v.evidence)),
                    str(sum(ev.diverges for ev in v.evidence)),
                    str(sum(ev.settles for ev in v.evidence))]
            fh.write(",".join(row) + "\n")


def write_evidence_json(verdicts, path) -> None:
    doc = []
    for v in verdicts:
        entry = {
            "x": ["%.17g" % c for c in v.x],
            "verdict": v.verdict,
            "method": v.method,
            "component": v.j,
            "needles": [],
        }
        for ev in v.evidence:
            entry["needles"].append({
                "base": ["%.17g" % c for c in ev.needle.base],
                "tip": ["%.17g" % c for c in ev.needle.tip],
                "diverges": ev.diverges,
                "settles": ev.settles,
                "trusted_levels": ev.trusted_count,
                "levels": list(ev.sequence.levels),
                "values": ["%.17g" % c for c in ev.sequence.values],
            })
        doc.append(entry)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
