"""Carleman weight construction and admissible parameter planning.

The weight is ``phi = exp(lam * psi)`` with

    psi(x', x_n, t) = d(x') - alpha * x_n**2 - beta * t**2,

where ``d`` vanishes at the endpoint of the cross-section opposite the data
side and grows toward the data side.  The planner picks ``beta`` inside its
admissible open interval, scales ``alpha`` so the axial ends of the cylinder
are dominated, and tabulates the weight levels ``sigma0`` (floor on the
observation region) and ``sigma1`` (ceiling on the uncontrolled boundary),
whose gap drives the Hoelder stability exponent.

All extrema are taken over grid nodes.  Configurations should place nodes on
the region corners; the planner warns when a one-step refinement moves a
tabulated level by more than 1 percent.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from .errors import ValidationError
from .geometry import (
    CylinderGeometry,
    FieldKind,
    GammaSide,
    ScalarField,
    axis_weights,
)

__all__ = [
    "DMode",
    "DBuildReport",
    "build_d",
    "WeightPlan",
    "plan_parameters",
    "compute_sigmas",
    "RegionFamily",
    "region_family",
    "DecayResult",
    "decay_integral",
    "holder_exponent",
    "psi_values",
    "phi_field",
    "plan_report",
    "load_plan_record",
]


class DMode(Enum):
    EXPLICIT_INTERVAL = "EXPLICIT_INTERVAL"
    USER_SUPPLIED = "USER_SUPPLIED"


@dataclass(frozen=True)
class DBuildReport:
    """Outcome of the discrete admissibility checks on the weight base."""

    clauses: tuple[tuple[str, bool, str], ...]

    @property
    def ok(self) -> bool:
        return all(passed for _, passed, _ in self.clauses)


def _validate_d_nodes(geometry: CylinderGeometry, vals: np.ndarray):
    """Check the four discrete admissibility clauses for a weight base."""
    xp = geometry.axis_nodes("xp")
    far = 0 if geometry.gamma_side is GammaSide.HI else len(xp) - 1
    scale = float(np.max(np.abs(vals)))
    if scale == 0.0:
        raise ValidationError("weight base is identically zero")
    clauses = []

    neg = np.nonzero(vals < -1e-12 * scale)[0]
    clauses.append(
        (
            "nonnegative on the closed cross-section",
            neg.size == 0,
            "" if neg.size == 0 else f"d({xp[neg[0]]!r}) = {vals[neg[0]]!r}",
        )
    )

    far_ok = abs(vals[far]) <= 1e-12 * scale
    clauses.append(
        (
            "vanishes at the endpoint opposite the data side",
            far_ok,
            "" if far_ok else f"d({xp[far]!r}) = {vals[far]!r}",
        )
    )

    # positivity away from that endpoint is implied by the remaining clauses
    # (a strictly monotone nonnegative profile vanishing at one end), so it
    # is not checked separately; the planner re-checks positivity on the
    # observation subdomain once that subdomain is known.
    h = geometry.spacing("xp")
    slope = np.empty_like(vals)
    slope[1:-1] = (vals[2:] - vals[:-2]) / (2.0 * h)
    slope[0] = (-3.0 * vals[0] + 4.0 * vals[1] - vals[2]) / (2.0 * h)
    slope[-1] = (3.0 * vals[-1] - 4.0 * vals[-2] + vals[-3]) / (2.0 * h)
    flat = np.nonzero(np.abs(slope) <= 1e-12 * scale / h)[0]
    clauses.append(
        (
            "slope bounded away from zero at every node",
            flat.size == 0,
            "" if flat.size == 0 else f"|grad d| = {abs(slope[flat[0]])!r} at x' = {xp[flat[0]]!r}",
        )
    )
    return DBuildReport(tuple(clauses))


def build_d(
    geometry: CylinderGeometry, mode: DMode, values=None
) -> tuple[ScalarField, DBuildReport]:
    """Build the cross-section weight base ``d`` and validate it.

    EXPLICIT_INTERVAL uses the distance to the endpoint opposite the data
    side, which satisfies every admissibility clause by construction.
    USER_SUPPLIED values are validated discretely; the first violated clause
    raises with the offending node.
    """
    if geometry.extended:
        raise ValidationError("weight base is planned on the physical geometry, not the extension")
    xp = geometry.axis_nodes("xp")
    if mode is DMode.EXPLICIT_INTERVAL:
        if values is not None:
            raise ValidationError("EXPLICIT_INTERVAL mode does not take user values")
        if geometry.gamma_side is GammaSide.HI:
            vals = xp - geometry.d_lo
        else:
            vals = geometry.d_hi - xp
    elif mode is DMode.USER_SUPPLIED:
        if values is None:
            raise ValidationError("USER_SUPPLIED mode requires nodal values for d")
        vals = np.asarray(values, dtype=np.float64)
        if vals.shape != (geometry.nx_prime,):
            raise ValidationError(
                f"user weight base has shape {vals.shape}, expected ({geometry.nx_prime},)"
            )
    else:
        raise ValidationError(f"unknown weight-base mode {mode!r}")

    report = _validate_d_nodes(geometry, vals)
    if not report.ok:
        name, _, detail = next(c for c in report.clauses if not c[1])
        raise ValidationError(f"weight base rejected: {name} fails ({detail})")
    return ScalarField(geometry, vals, FieldKind.CROSS_SECTION), report


@dataclass(frozen=True)
class WeightPlan:
    """Admissible Carleman parameters together with their tabulated levels.

    ``domain_lo/hi`` is the cross-section window the plan controls (the full
    cross-section for ordinary plans, a collar near the data side for region
    plans).  ``D0_lo/hi`` is the observation subdomain, touching the data
    side of the window.  ``include_far_face`` records whether the window's
    far face entered the ``sigma1`` maximization; region plans exclude it
    because that face is interior to the physical cross-section.
    """

    geometry: CylinderGeometry
    d_values: ScalarField
    domain_lo: float
    domain_hi: float
    D0_lo: float
    D0_hi: float
    lam: float
    margin: float
    delta0: float
    beta: float
    alpha: float
    d0: float
    d1: float
    sigma0: float
    sigma1: float
    c0: float
    include_far_face: bool = True


def _interp_d(plan_d: ScalarField, xp: np.ndarray) -> np.ndarray:
    src = plan_d.geometry.axis_nodes("xp")
    return np.interp(xp, src, plan_d.values)


def _mask(nodes: np.ndarray, lo: float, hi: float, tol: float) -> np.ndarray:
    return (nodes >= lo - tol) & (nodes <= hi + tol)


def compute_sigmas(
    plan: WeightPlan, geometry: CylinderGeometry | None = None, lam: float | None = None
) -> tuple[float, float, float]:
    """Recompute (sigma0, sigma1, c0) on a given grid.

    sigma0 is the minimum of the weight on the observation block
    ``D0 x {x_n = 0} x [-delta0, delta0]``, sigma1 the maximum over the
    terminal faces, the axial ends, and (unless excluded) the window's far
    lateral face, and c0 the minimum of ``exp(lam * (d - beta t^2))`` over
    the whole window.  Extrema are over grid nodes.
    """
    g = geometry if geometry is not None else plan.geometry
    lm = plan.lam if lam is None else lam
    xp = g.axis_nodes("xp")
    d = _interp_d(plan.d_values, xp)
    t = g.axis_nodes("t")
    xn = (g if g.extended else g.extend()).axis_nodes("xn")
    tol = 1e-9 * max(1.0, g.d_hi - g.d_lo, 2.0 * g.delta)

    mwin = _mask(xp, plan.domain_lo, plan.domain_hi, tol)
    md0 = _mask(xp, plan.D0_lo, plan.D0_hi, tol)
    mt0 = np.abs(t) <= plan.delta0 + tol
    if not mwin.any() or not md0.any() or not mt0.any():
        raise ValidationError("sigma evaluation: a node set of the plan is empty on this grid")

    tsq = t * t
    xnsq = xn * xn
    psi0 = float(np.min(d[md0][:, None] - plan.beta * tsq[None, mt0]))
    c0_psi = float(np.min(d[mwin][:, None] - plan.beta * tsq[None, :]))

    dwin = d[mwin]
    cand = [
        # terminal faces t = +-delta
        float(np.max(dwin[:, None] - plan.alpha * xnsq[None, :] - plan.beta * g.delta**2)),
        # axial ends x_n = +-ell
        float(np.max(dwin[:, None] - plan.alpha * g.ell**2 - plan.beta * tsq[None, :])),
    ]
    if plan.include_far_face:
        far = plan.domain_lo if g.gamma_side is GammaSide.HI else plan.domain_hi
        d_far = float(np.interp(far, xp, d))
        cand.append(float(np.max(d_far - plan.alpha * xnsq[:, None] - plan.beta * tsq[None, :])))
    psi1 = max(cand)
    return math.exp(lm * psi0), math.exp(lm * psi1), math.exp(lm * c0_psi)


def plan_parameters(
    d: ScalarField,
    D0: tuple[float, float],
    *,
    delta0: float | None = None,
    lam: float = 1.0,
    margin: float = 1.1,
    domain: tuple[float, float] | None = None,
    include_far_face: bool = True,
    warn_on_drift: bool = True,
) -> WeightPlan:
    """Select admissible Carleman parameters over a cross-section window.

    The steps, each guarded by an explicit check:

    1. ``d0`` = min of d on the observation block, ``d1`` = max on the window.
    2. ``delta0`` must satisfy ``delta0 < sqrt(d0/d1) * delta`` strictly;
       the default takes 99 percent of that bound.
    3. ``beta`` is the midpoint of its admissible open interval
       ``((d1 - d0) / (delta^2 - delta0^2), d0 / delta0^2)``.
    4. ``alpha = margin * (d1 - d0 + beta * delta0^2) / ell^2`` with
       ``margin > 1``.
    5. The three strict domination inequalities implied by these choices are
       re-verified numerically.
    6. ``sigma0 > sigma1`` must hold on the grid, and a one-step refinement
       must not move either level by more than 1 percent (else a warning).
    """
    if d.kind is not FieldKind.CROSS_SECTION:
        raise ValidationError(f"weight base must be a CROSS_SECTION field, got {d.kind.name}")
    g = d.geometry
    xp = g.axis_nodes("xp")
    tol = 1e-9 * max(1.0, g.d_hi - g.d_lo)

    if domain is None:
        domain = (g.d_lo, g.d_hi)
    dom_lo, dom_hi = float(domain[0]), float(domain[1])
    if not (g.d_lo - tol <= dom_lo < dom_hi <= g.d_hi + tol):
        raise ValidationError(f"planning window {domain!r} is not inside the cross-section")

    lo0, hi0 = float(D0[0]), float(D0[1])
    if not lo0 < hi0:
        raise ValidationError(f"observation subdomain {D0!r} is degenerate")
    hi_is_gamma = g.gamma_side is GammaSide.HI
    near = dom_hi if hi_is_gamma else dom_lo
    far = dom_lo if hi_is_gamma else dom_hi
    touch = hi0 if hi_is_gamma else lo0
    inner = lo0 if hi_is_gamma else hi0
    if abs(touch - near) > tol:
        raise ValidationError(
            "observation subdomain must touch the data side of the window "
            f"(got {touch!r}, data side at {near!r})"
        )
    if abs(inner - far) <= tol or (hi_is_gamma and inner < far) or (not hi_is_gamma and inner > far):
        raise ValidationError(
            "observation subdomain must stay strictly away from the far end "
            f"of the window at {far!r}"
        )

    if not (lam > 0 and math.isfinite(lam)):
        raise ValidationError(f"lam must be positive and finite, got {lam!r}")
    if not (margin > 1.0 and math.isfinite(margin)):
        raise ValidationError(f"margin must exceed 1, got {margin!r}")

    mwin = _mask(xp, dom_lo, dom_hi, tol)
    md0 = _mask(xp, lo0, hi0, tol)
    if mwin.sum() < 2 or md0.sum() < 2:
        raise ValidationError("planning window or observation subdomain holds fewer than two nodes")

    d0 = float(np.min(d.values[md0]))
    d1 = float(np.max(d.values[mwin]))
    if d0 <= 0:
        i = int(np.nonzero(md0)[0][np.argmin(d.values[md0])])
        raise ValidationError(
            f"weight base is not positive on the observation subdomain: d({xp[i]!r}) = {d.values[i]!r}"
        )

    delta = g.delta
    delta0_max = math.sqrt(d0 / d1) * delta
    if delta0 is None:
        delta0 = 0.99 * delta0_max
    delta0 = float(delta0)
    if not 0 < delta0 < delta0_max:
        raise ValidationError(
            f"observation half-width delta0 = {delta0!r} must lie strictly inside "
            f"(0, sqrt(d0/d1) * delta) = (0, {delta0_max!r})"
        )

    beta_lo = (d1 - d0) / (delta**2 - delta0**2)
    beta_hi = d0 / delta0**2
    if not beta_lo < beta_hi:
        raise ValidationError(
            f"admissible beta interval is empty: ({beta_lo!r}, {beta_hi!r})"
        )
    beta = 0.5 * (beta_lo + beta_hi)
    alpha = margin * (d1 - d0 + beta * delta0**2) / g.ell**2

    checks = (
        ("terminal faces dominated", d1 - beta * delta**2 < d0 - beta * delta0**2),
        ("observation level positive", d0 - beta * delta0**2 > 0),
        ("axial ends dominated", d1 - alpha * g.ell**2 < d0 - beta * delta0**2),
    )
    for name, ok in checks:
        if not ok:
            raise ValidationError(f"derived parameter check failed: {name}")

    plan = WeightPlan(
        geometry=g,
        d_values=d,
        domain_lo=dom_lo,
        domain_hi=dom_hi,
        D0_lo=lo0,
        D0_hi=hi0,
        lam=lam,
        margin=margin,
        delta0=delta0,
        beta=beta,
        alpha=alpha,
        d0=d0,
        d1=d1,
        sigma0=math.nan,
        sigma1=math.nan,
        c0=math.nan,
        include_far_face=include_far_face,
    )
    sigma0, sigma1, c0 = compute_sigmas(plan)
    if not sigma1 < sigma0:
        raise ValidationError(
            f"weight levels do not separate on this grid: sigma0 = {sigma0!r} <= sigma1 = {sigma1!r}"
        )
    plan = replace(plan, sigma0=sigma0, sigma1=sigma1, c0=c0)

    if warn_on_drift:
        s0r, s1r, _ = compute_sigmas(plan, plan.geometry.refine())
        for name, base, ref in (("sigma0", sigma0, s0r), ("sigma1", sigma1, s1r)):
            if abs(ref - base) > 0.01 * abs(base):
                warnings.warn(
                    f"{name} moves by {abs(ref - base) / abs(base):.2%} under one refinement; "
                    "refine the grid or align region corners with grid nodes",
                    stacklevel=2,
                )
    return plan


# ---- family of shrinking observation regions --------------------------------


@dataclass(frozen=True)
class RegionFamily:
    """A collar window near the data side admissible for a given time level."""

    d_tilde: tuple[float, float]
    d1: tuple[float, float]
    epsilon: float
    plan: WeightPlan


def region_family(
    geometry: CylinderGeometry,
    delta1: float,
    x0_prime: float,
    epsilon0: float | None = None,
    *,
    lam: float = 1.0,
    margin: float = 1.1,
) -> RegionFamily:
    """Find the widest admissible collar for recovery up to time level delta1.

    Starting from ``epsilon0`` and halving, accept the first half-width
    ``eps`` whose collar ``D_tilde`` (width ``2 eps``) and inner block ``D1``
    (width ``eps``) satisfy ``(delta1/delta)^2 < d0/d1 < 1`` on grid nodes,
    then delegate parameter selection to :func:`plan_parameters` on that
    window.  The window's far face is excluded from the ``sigma1`` sets since
    it lies inside the physical cross-section.
    """
    span = geometry.d_hi - geometry.d_lo
    tol = 1e-9 * max(1.0, span)
    if not 0 < delta1 < geometry.delta:
        raise ValidationError(
            f"recovery time level delta1 = {delta1!r} must lie strictly inside (0, {geometry.delta!r})"
        )
    gamma = geometry.gamma_coord
    if abs(x0_prime - gamma) > tol:
        raise ValidationError(
            f"x0_prime = {x0_prime!r} must be the data-side endpoint at {gamma!r}"
        )
    h = geometry.spacing("xp")
    eps = 0.25 * span if epsilon0 is None else float(epsilon0)
    if not 0 < eps <= span:
        raise ValidationError(f"epsilon0 = {eps!r} must lie in (0, {span!r}]")

    d_field, _ = build_d(geometry, DMode.EXPLICIT_INTERVAL)
    xp = geometry.axis_nodes("xp")
    ratio_floor = (delta1 / geometry.delta) ** 2
    hi_side = geometry.gamma_side is GammaSide.HI

    while True:
        if eps < 4.0 * h:
            raise ValidationError(
                f"no admissible collar: epsilon fell below four grid cells ({4.0 * h!r}) "
                f"before satisfying (delta1/delta)^2 = {ratio_floor!r} < d0/d1"
            )
        if hi_side:
            window = (gamma - 2.0 * eps, gamma)
            block = (gamma - eps, gamma)
        else:
            window = (gamma, gamma + 2.0 * eps)
            block = (gamma, gamma + eps)
        inside = geometry.d_lo + tol < window[0] if hi_side else window[1] < geometry.d_hi - tol
        if inside:
            mwin = _mask(xp, window[0], window[1], tol)
            mblk = _mask(xp, block[0], block[1], tol)
            if mwin.sum() >= 2 and mblk.sum() >= 2:
                dt0 = float(np.min(d_field.values[mblk]))
                dt1 = float(np.max(d_field.values[mwin]))
                if ratio_floor < dt0 / dt1 < 1.0:
                    plan = plan_parameters(
                        d_field,
                        block,
                        delta0=delta1,
                        lam=lam,
                        margin=margin,
                        domain=window,
                        include_far_face=False,
                        warn_on_drift=False,
                    )
                    return RegionFamily(d_tilde=window, d1=block, epsilon=eps, plan=plan)
        eps *= 0.5


# ---- weight sampling and derived quantities ---------------------------------


def _check_same_extents(plan: WeightPlan, geometry: CylinderGeometry):
    p = plan.geometry
    same = (
        p.d_lo == geometry.d_lo
        and p.d_hi == geometry.d_hi
        and p.ell == geometry.ell
        and p.delta == geometry.delta
        and p.gamma_side is geometry.gamma_side
    )
    if not same:
        raise ValidationError("geometry extents do not match the plan's geometry")


def psi_values(plan: WeightPlan, geometry: CylinderGeometry) -> np.ndarray:
    """Sample ``psi = d - alpha x_n^2 - beta t^2`` on a grid (SPACE_TIME shape)."""
    _check_same_extents(plan, geometry)
    d = _interp_d(plan.d_values, geometry.axis_nodes("xp"))
    xn = geometry.axis_nodes("xn")
    t = geometry.axis_nodes("t")
    return (
        d[:, None, None]
        - plan.alpha * (xn * xn)[None, :, None]
        - plan.beta * (t * t)[None, None, :]
    )


def phi_field(plan: WeightPlan, geometry: CylinderGeometry) -> ScalarField:
    """The weight ``phi = exp(lam * psi)`` sampled on a grid."""
    vals = np.exp(plan.lam * psi_values(plan, geometry))
    return ScalarField(geometry, vals, FieldKind.SPACE_TIME)


@dataclass(frozen=True)
class DecayResult:
    s: float
    value: float
    bound: float


def decay_integral(plan: WeightPlan, s: float, geometry: CylinderGeometry | None = None) -> DecayResult:
    """Worst-case axial integral of the normalized weight, with its envelope.

    Returns the maximum over window and time nodes of the trapezoidal
    integral over ``x_n`` of ``exp(2 s (phi(x', x_n, t) - phi(x', 0, t)))``
    together with the trapezoidal integral of the dominating envelope
    ``exp(-2 s c0 (1 - exp(-lam alpha x_n^2)))`` on the same nodes.  Both use
    the same quadrature, so the value never exceeds the bound.
    """
    if not (s >= 0 and math.isfinite(s)):
        raise ValidationError(f"weight strength s must be finite and nonnegative, got {s!r}")
    g = geometry if geometry is not None else plan.geometry
    _check_same_extents(plan, g)
    gx = g if g.extended else g.extend()
    xn = gx.axis_nodes("xn")
    w = axis_weights(gx.nx_n, gx.spacing("xn"))

    xp = g.axis_nodes("xp")
    tol = 1e-9 * max(1.0, g.d_hi - g.d_lo)
    mwin = _mask(xp, plan.domain_lo, plan.domain_hi, tol)
    d = _interp_d(plan.d_values, xp)[mwin]
    t = g.axis_nodes("t")

    base = np.exp(plan.lam * (d[:, None] - plan.beta * (t * t)[None, :]))
    drop = np.exp(-plan.lam * plan.alpha * xn * xn) - 1.0  # <= 0
    integrand = np.exp(2.0 * s * base[:, None, :] * drop[None, :, None])
    value = float(np.max(np.tensordot(w, integrand, axes=([0], [1]))))

    env = np.exp(-2.0 * s * plan.c0 * (1.0 - np.exp(-plan.lam * plan.alpha * xn * xn)))
    bound = float(np.sum(w * env))
    if value > bound + 1e-8:
        raise RuntimeError(
            f"decay integral {value!r} exceeds its envelope {bound!r}; quadrature inconsistency"
        )
    return DecayResult(s=float(s), value=value, bound=bound)


def holder_exponent(sigma0: float, sigma1: float, c1: float) -> float:
    """Stability exponent ``(sigma0 - sigma1) / (c1 + sigma0 - sigma1)``."""
    if not (sigma0 > sigma1 > 0):
        raise ValidationError(
            f"weight levels must satisfy sigma0 > sigma1 > 0, got {sigma0!r}, {sigma1!r}"
        )
    if not (c1 > 0 and math.isfinite(c1)):
        raise ValidationError(f"comparison constant c1 must be positive, got {c1!r}")
    gap = sigma0 - sigma1
    return gap / (c1 + gap)


# ---- serialization -----------------------------------------------------------

_REPORT_HEADER = "carleman weight plan v1"


def plan_report(plan: WeightPlan) -> str:
    """Serialize a plan as a key = value report; floats use repr round-trips."""
    g = plan.geometry
    rows = [
        ("geometry", g.fingerprint()),
        ("gamma_side", g.gamma_side.value),
        ("d_lo", g.d_lo),
        ("d_hi", g.d_hi),
        ("ell", g.ell),
        ("delta", g.delta),
        ("nx_prime", g.nx_prime),
        ("nx_n", g.nx_n),
        ("nt", g.nt),
        ("domain_lo", plan.domain_lo),
        ("domain_hi", plan.domain_hi),
        ("D0_lo", plan.D0_lo),
        ("D0_hi", plan.D0_hi),
        ("lam", plan.lam),
        ("margin", plan.margin),
        ("delta0", plan.delta0),
        ("beta", plan.beta),
        ("alpha", plan.alpha),
        ("d0", plan.d0),
        ("d1", plan.d1),
        ("sigma0", plan.sigma0),
        ("sigma1", plan.sigma1),
        ("c0", plan.c0),
        ("include_far_face", plan.include_far_face),
    ]
    lines = [_REPORT_HEADER]
    for key, val in rows:
        lines.append(f"{key} = {val!r}" if isinstance(val, float) else f"{key} = {val}")
    return "\n".join(lines) + "\n"


def load_plan_record(text: str) -> dict:
    """Parse a plan report back into a dict of scalars (inverse of plan_report).

    Values that are not numeric stay strings, so callers may append extra
    bookkeeping lines (hashes, version tags) without breaking the round trip.
    """
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != _REPORT_HEADER:
        raise ValidationError("not a weight plan report (bad header line)")
    out: dict = {}
    for ln in lines[1:]:
        if " = " not in ln:
            raise ValidationError(f"malformed plan report line: {ln!r}")
        key, _, raw = ln.partition(" = ")
        if key in ("geometry", "gamma_side"):
            out[key] = raw
        elif key in ("nx_prime", "nx_n", "nt"):
            out[key] = int(raw)
        elif key == "include_far_face":
            out[key] = raw == "True"
        else:
            try:
                out[key] = float(raw)
            except ValueError:
                out[key] = raw
    return out
