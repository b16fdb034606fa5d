"""Discrete checks of the weighted energy inequalities behind the theory.

Two families of checks run on corpora of smooth random fields sampled from
closed-form mode combinations (so the same field can be evaluated on any
grid and truncation errors can be measured by grid doubling):

* an integration-by-parts identity equating the squared Laplacian energy to
  the full Hessian energy plus a boundary correction, whose discrete
  residual must shrink at second order;

* the weighted inequality relating interior energies of a field to its
  boundary and residual energies, with the weight ``exp(2 s phi)``.  The
  empirical constant is the worst ratio of the two sides over the corpus.

All weighted integrals are evaluated in shifted form: the weight is
normalized by its maximum, so integrands stay inside (0, 1] and only the
reported logarithms carry the (possibly huge) factor ``exp(2 s max phi)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .geometry import (
    CylinderGeometry,
    Face,
    FieldKind,
    NormKind,
    ScalarField,
    axis_weights,
    discrete_norm,
    dt,
    dxn,
    dxn2,
    dxp,
    dxp2,
    laplacian,
    quadrature_weights,
    trace,
)
from .weight import WeightPlan, compute_sigmas, phi_field

__all__ = [
    "CorpusField",
    "smooth_corpus",
    "Lemma1Result",
    "lemma1_residual",
    "CarlemanSides",
    "carleman_sides",
    "StandardSides",
    "standard_estimate_sides",
    "CarlemanReport",
    "verify_carleman",
    "carleman_table",
    "SigmaGapReport",
    "sigma_gap_check",
]


# ---- resampleable smooth corpus -------------------------------------------------

_N_MODES = 5


def _mode_matrix(nodes: np.ndarray) -> np.ndarray:
    """Evaluate the five per-axis modes on normalized coordinates in [-1, 1]."""
    lo, hi = nodes[0], nodes[-1]
    xi = 2.0 * (nodes - lo) / (hi - lo) - 1.0
    return np.stack(
        [np.ones_like(xi), xi, xi * xi, np.sin(np.pi * xi), np.cos(np.pi * xi)]
    )


@dataclass(frozen=True)
class CorpusField:
    """Closed-form smooth field: tensor modes with fixed coefficients.

    ``sample`` evaluates the same function on any geometry with matching
    extents, which is what makes two-grid truncation studies meaningful.
    """

    kind: FieldKind
    coeffs: np.ndarray

    def sample(self, geometry: CylinderGeometry) -> ScalarField:
        mats = [_mode_matrix(geometry.axis_nodes(a)) for a in self.kind.axes]
        vals = self.coeffs
        for m in mats:
            # contract the leading mode index against each axis in turn
            vals = np.tensordot(vals, m, axes=([0], [0]))
        return ScalarField(geometry, vals, self.kind)


def smooth_corpus(
    size: int, seed: int, kind: FieldKind = FieldKind.SPACE_TIME
) -> list[CorpusField]:
    """Seeded corpus of mode combinations with decaying random coefficients."""
    if size < 1:
        raise ValidationError(f"corpus size must be at least 1, got {size}")
    rng = np.random.default_rng(seed)
    naxes = len(kind.axes)
    grids = np.indices((_N_MODES,) * naxes).sum(axis=0)
    # mild decay keeps the trigonometric modes strong enough that discrete
    # truncation errors have a robust leading-order term on every member
    decay = 1.0 / (1.0 + grids)
    out = []
    for _ in range(size):
        coeffs = rng.standard_normal((_N_MODES,) * naxes) * decay
        out.append(CorpusField(kind=kind, coeffs=coeffs))
    return out


# ---- integration-by-parts identity ----------------------------------------------


@dataclass(frozen=True)
class Lemma1Result:
    hessian_sq: float
    boundary: float
    laplacian_sq: float
    residual: float
    normalized: float
    harmonic_branch: bool


def _face_weights_1d(geometry: CylinderGeometry, axis: str) -> np.ndarray:
    return axis_weights(geometry.axis_count(axis), geometry.spacing(axis))


def _d1_sharp(arr: np.ndarray, h: float, axis: int) -> np.ndarray:
    """Central first derivative with fourth-order one-sided end rows.

    The identity residual is itself a second-order quantity; the standard
    second-order end rows would leak third-order boundary-strip errors into
    it and blur the measured convergence rate, so the end rows here are two
    orders better than the interior.
    """
    b = np.moveaxis(arr, axis, 0)
    out = np.empty_like(b)
    out[1:-1] = (b[2:] - b[:-2]) / (2.0 * h)
    out[0] = (-25.0 / 12.0 * b[0] + 4.0 * b[1] - 3.0 * b[2] + 4.0 / 3.0 * b[3] - 0.25 * b[4]) / h
    out[-1] = (25.0 / 12.0 * b[-1] - 4.0 * b[-2] + 3.0 * b[-3] - 4.0 / 3.0 * b[-4] + 0.25 * b[-5]) / h
    return np.moveaxis(out, 0, axis)


def _d2_sharp(arr: np.ndarray, h: float, axis: int) -> np.ndarray:
    """Central second derivative with fourth-order one-sided end rows."""
    b = np.moveaxis(arr, axis, 0)
    out = np.empty_like(b)
    h2 = h * h
    out[1:-1] = ((b[2:] + b[:-2]) - 2.0 * b[1:-1]) / h2
    out[0] = (
        15.0 / 4.0 * b[0] - 77.0 / 6.0 * b[1] + 107.0 / 6.0 * b[2]
        - 13.0 * b[3] + 61.0 / 12.0 * b[4] - 5.0 / 6.0 * b[5]
    ) / h2
    out[-1] = (
        15.0 / 4.0 * b[-1] - 77.0 / 6.0 * b[-2] + 107.0 / 6.0 * b[-3]
        - 13.0 * b[-4] + 61.0 / 12.0 * b[-5] - 5.0 / 6.0 * b[-6]
    ) / h2
    return np.moveaxis(out, 0, axis)


def lemma1_residual(w: ScalarField) -> Lemma1Result:
    """Residual of the Hessian/Laplacian boundary identity on the extension.

    For smooth w the full Hessian energy plus the boundary correction equals
    the Laplacian energy exactly; discretely the residual is pure truncation
    error.  The residual is reported relative to the Laplacian energy, or in
    absolute form (flagged) when the field is discretely harmonic.  Needs at
    least six nodes per axis for the sharpened end stencils.
    """
    if w.kind is not FieldKind.SPACE_ONLY:
        raise ValidationError(f"identity check expects a SPACE_ONLY field, got {w.kind.name}")
    g = w.geometry
    if not g.extended:
        raise ValidationError("identity check runs on the extended cylinder")
    if g.nx_prime < 6 or g.axis_count("xn") < 6:
        raise ValidationError("identity check needs at least six nodes per spatial axis")

    h_xp = g.spacing("xp")
    h_xn = g.spacing("xn")
    wx = _d1_sharp(w.values, h_xp, 0)
    wy = _d1_sharp(w.values, h_xn, 1)
    wxx = _d2_sharp(w.values, h_xp, 0)
    wyy = _d2_sharp(w.values, h_xn, 1)
    wxy = _d1_sharp(wx, h_xn, 1)
    lap = wxx + wyy

    wq = quadrature_weights(g, FieldKind.SPACE_ONLY)
    hessian_sq = float(np.sum(wq * (wxx * wxx + 2.0 * wxy * wxy + wyy * wyy)))
    laplacian_sq = float(np.sum(wq * lap * lap))

    # boundary term: for outward normal nu along axis k,
    #   integrand = nu * ( w_k * lap(w) - (w_x * w_xk + w_y * w_yk) )
    w_xn_faces = _face_weights_1d(g, "xn")
    w_xp_faces = _face_weights_1d(g, "xp")
    boundary = 0.0
    for idx, nu in ((0, -1.0), (-1, 1.0)):  # faces x' = lo, hi
        val = nu * (wx[idx] * lap[idx] - (wx[idx] * wxx[idx] + wy[idx] * wxy[idx]))
        boundary += float(np.sum(w_xn_faces * val))
    for idx, nu in ((0, -1.0), (-1, 1.0)):  # faces x_n = -ell, +ell
        val = nu * (
            wy[:, idx] * lap[:, idx]
            - (wx[:, idx] * wxy[:, idx] + wy[:, idx] * wyy[:, idx])
        )
        boundary += float(np.sum(w_xp_faces * val))

    residual = hessian_sq + boundary - laplacian_sq
    # a second-derivative energy scale of the field itself, so that fields
    # with negligible curvature (affine ones included) take the absolute
    # branch instead of dividing roundoff by roundoff
    spans = (g.d_hi - g.d_lo, 2.0 * g.ell)
    char = (w.max_abs() / min(spans) ** 2) ** 2 * spans[0] * spans[1]
    harmonic = laplacian_sq <= 1e-12 * max(hessian_sq, char, 1e-300)
    normalized = abs(residual) if harmonic else abs(residual) / laplacian_sq
    return Lemma1Result(
        hessian_sq=hessian_sq,
        boundary=boundary,
        laplacian_sq=laplacian_sq,
        residual=residual,
        normalized=normalized,
        harmonic_branch=harmonic,
    )


# ---- weighted inequality sides ---------------------------------------------------

_LATERAL_FACES = (Face.GAMMA_SIDE, Face.OPPOSITE_SIDE, Face.XN_ELL, Face.XN_NEG_ELL)


def _check_weighted_args(u: ScalarField, s: float):
    if u.kind is not FieldKind.SPACE_TIME:
        raise ValidationError(f"inequality sides expect a SPACE_TIME field, got {u.kind.name}")
    if not u.geometry.extended:
        raise ValidationError("inequality sides are evaluated on the extended cylinder")
    if not (s > 0 and math.isfinite(s)):
        raise ValidationError(f"weight strength s must be positive and finite, got {s!r}")


def _p0_volume(p0: ScalarField | None, g: CylinderGeometry) -> np.ndarray:
    if p0 is None:
        return np.zeros((1, 1, 1))
    if p0.kind is not FieldKind.CROSS_SECTION_TIME:
        raise ValidationError(f"p0 must be CROSS_SECTION_TIME, got {p0.kind.name}")
    if p0.values.shape != (g.nx_prime, g.nt):
        raise ValidationError("p0 grid does not match the evaluation geometry")
    return p0.values[:, None, :]


def _surface_integral(g: CylinderGeometry, field2d: ScalarField) -> float:
    w = quadrature_weights(g, field2d.kind)
    return float(np.sum(w * field2d.values * field2d.values))


@dataclass(frozen=True)
class CarlemanSides:
    """Both sides of the weighted inequality for one field at one strength.

    Values are shifted by the weight maximum; ``log_scale`` holds
    ``2 s max(phi)`` so raw logarithms are ``log(value) + log_scale``.
    """

    s: float
    lhs: float
    residual: float
    lateral_grad: float
    lateral_val: float
    trace_h2: float
    terminal_grad: float
    terminal_val: float
    log_scale: float

    @property
    def rhs(self) -> float:
        return (
            self.residual
            + self.lateral_grad
            + self.lateral_val
            + self.trace_h2
            + self.terminal_grad
            + self.terminal_val
        )

    @property
    def ratio(self) -> float:
        if self.rhs > 0:
            return self.lhs / self.rhs
        return 0.0 if self.lhs == 0.0 else math.inf


def carleman_sides(
    u: ScalarField, plan: WeightPlan, s: float, p0: ScalarField | None = None
) -> CarlemanSides:
    """Evaluate the full weighted inequality (Hessian form) for one field.

    Left side: (1/s) Hessian + s gradient + s^3 value energies over the
    extended space-time cylinder.  Right side: heat residual energy, s^3
    lateral boundary value and gradient energies, (1/s) surface H2 energy of
    the weighted field on the lateral faces, and s^3 terminal energies.
    """
    _check_weighted_args(u, s)
    g = u.geometry
    phi = phi_field(plan, g).values
    phi_max = float(np.max(phi))
    E = np.exp(2.0 * s * (phi - phi_max))
    Eh = np.exp(s * (phi - phi_max))
    wq = quadrature_weights(g, FieldKind.SPACE_TIME)

    ux = dxp(u).values
    un = dxn(u).values
    ut = dt(u).values
    uxx = dxp2(u).values
    unn = dxn2(u).values
    uxn = dxn(dxp(u)).values

    hess = uxx * uxx + 2.0 * uxn * uxn + unn * unn
    grad = ux * ux + un * un
    lhs = float(np.sum(wq * ((hess / s) + s * grad + s**3 * u.values**2) * E))

    heat = ut - (uxx + unn) - _p0_volume(p0, g) * u.values
    residual = float(np.sum(wq * heat * heat * E))

    grad_xt_sq = grad + ut * ut
    gsq_field = ScalarField(g, grad_xt_sq, FieldKind.SPACE_TIME)
    usq_field = ScalarField(g, u.values * u.values, FieldKind.SPACE_TIME)
    e_field = ScalarField(g, E, FieldKind.SPACE_TIME)
    lateral_grad = 0.0
    lateral_val = 0.0
    for face in _LATERAL_FACES:
        ef = trace(e_field, face).values
        wf = quadrature_weights(g, trace(e_field, face).kind)
        lateral_grad += float(np.sum(wf * trace(gsq_field, face).values * ef))
        lateral_val += float(np.sum(wf * trace(usq_field, face).values * ef))
    lateral_grad *= s**3
    lateral_val *= s**3

    v = u.with_values(u.values * Eh)
    trace_h2 = sum(
        discrete_norm(trace(v, face), kind=NormKind.H2_SURFACE) ** 2 for face in _LATERAL_FACES
    ) / s

    w_sp = quadrature_weights(g, FieldKind.SPACE_ONLY)
    terminal_grad = 0.0
    terminal_val = 0.0
    for it in (0, g.nt - 1):
        terminal_grad += float(np.sum(w_sp * grad[:, :, it] * E[:, :, it]))
        terminal_val += float(np.sum(w_sp * u.values[:, :, it] ** 2 * E[:, :, it]))
    terminal_grad *= s**3
    terminal_val *= s**3

    return CarlemanSides(
        s=float(s),
        lhs=lhs,
        residual=residual,
        lateral_grad=lateral_grad,
        lateral_val=lateral_val,
        trace_h2=trace_h2,
        terminal_grad=terminal_grad,
        terminal_val=terminal_val,
        log_scale=2.0 * s * phi_max,
    )


@dataclass(frozen=True)
class StandardSides:
    """Sides of the reduced inequality (Laplacian form, no surface H2 term)."""

    s: float
    lhs: float
    rhs: float
    log_scale: float

    @property
    def ratio(self) -> float:
        if self.rhs > 0:
            return self.lhs / self.rhs
        return 0.0 if self.lhs == 0.0 else math.inf


def standard_estimate_sides(
    u: ScalarField, plan: WeightPlan, s: float, p0: ScalarField | None = None
) -> StandardSides:
    """Reduced form: Laplacian energy on the left, no surface H2 term on the right."""
    _check_weighted_args(u, s)
    g = u.geometry
    full = carleman_sides(u, plan, s, p0)
    phi = phi_field(plan, g).values
    E = np.exp(2.0 * s * (phi - np.max(phi)))
    wq = quadrature_weights(g, FieldKind.SPACE_TIME)
    lap = laplacian(u).values
    ux = dxp(u).values
    un = dxn(u).values
    lhs = float(
        np.sum(
            wq
            * ((lap * lap) / s + s * (ux * ux + un * un) + s**3 * u.values**2)
            * E
        )
    )
    rhs = full.rhs - full.trace_h2
    return StandardSides(s=float(s), lhs=lhs, rhs=rhs, log_scale=full.log_scale)


# ---- corpus-level verification ----------------------------------------------------


@dataclass(frozen=True)
class CarlemanReport:
    s_grid: tuple
    rows: tuple  # (member index, CarlemanSides)
    c_emp: float
    s_min_emp: float | None
    c_cap: float
    corpus_size: int
    geometry_fingerprint: str


def verify_carleman(
    plan: WeightPlan,
    corpus: list[CorpusField],
    s_values,
    p0: ScalarField | None = None,
    c_cap: float = 10.0,
    geometry: CylinderGeometry | None = None,
) -> CarlemanReport:
    """Tabulate both sides over a corpus and record the worst ratio.

    ``s_min_emp`` is the smallest strength at which every corpus member's
    ratio is at or below ``c_cap`` (None when no strength qualifies).
    """
    g = geometry if geometry is not None else plan.geometry.extend()
    if not g.extended:
        raise ValidationError("verification geometry must be extended")
    s_values = [float(s) for s in s_values]
    if not s_values or sorted(s_values) != s_values:
        raise ValidationError("s_values must be a nonempty increasing sequence")
    fields = [c.sample(g) for c in corpus]
    rows = []
    by_s: dict[float, list[float]] = {s: [] for s in s_values}
    for i, u in enumerate(fields):
        for s in s_values:
            sides = carleman_sides(u, plan, s, p0)
            rows.append((i, sides))
            by_s[s].append(sides.ratio)
    c_emp = max(sides.ratio for _, sides in rows)
    s_min_emp = next(
        (s for s in s_values if all(r <= c_cap for r in by_s[s])), None
    )
    return CarlemanReport(
        s_grid=tuple(s_values),
        rows=tuple(rows),
        c_emp=c_emp,
        s_min_emp=s_min_emp,
        c_cap=c_cap,
        corpus_size=len(corpus),
        geometry_fingerprint=g.fingerprint(),
    )


def carleman_table(report: CarlemanReport) -> str:
    """Plain-text table of the verification rows plus the summary line."""
    lines = [
        f"weighted inequality over {report.corpus_size} fields "
        f"(geometry {report.geometry_fingerprint})",
        f"{'member':>6} {'s':>8} {'log lhs':>14} {'log rhs':>14} {'ratio':>12}",
    ]
    for i, sides in report.rows:
        log_lhs = math.log(sides.lhs) + sides.log_scale if sides.lhs > 0 else -math.inf
        log_rhs = math.log(sides.rhs) + sides.log_scale if sides.rhs > 0 else -math.inf
        lines.append(
            f"{i:>6} {sides.s:>8.3g} {log_lhs:>14.6f} {log_rhs:>14.6f} {sides.ratio:>12.6f}"
        )
    smin = "none" if report.s_min_emp is None else f"{report.s_min_emp:g}"
    lines.append(
        f"C_emp = {report.c_emp:.6f}; smallest s with all ratios <= {report.c_cap:g}: {smin}"
    )
    return "\n".join(lines) + "\n"


# ---- sigma gap sanity --------------------------------------------------------------


@dataclass(frozen=True)
class SigmaGapReport:
    sigma0: float
    sigma1: float
    sigma0_refined: float
    sigma1_refined: float
    ratio: float
    ratio_refined: float
    ratio_double_lam: float


def sigma_gap_check(plan: WeightPlan) -> SigmaGapReport:
    """Confirm the weight-level gap survives refinement and grows with lam."""
    s0r, s1r, _ = compute_sigmas(plan, plan.geometry.refine())
    if not s1r < s0r:
        raise ValidationError(
            f"weight-level gap closes under refinement: sigma0 = {s0r!r} <= sigma1 = {s1r!r}"
        )
    s0d, s1d, _ = compute_sigmas(plan, lam=2.0 * plan.lam)
    ratio = plan.sigma0 / plan.sigma1
    ratio_refined = s0r / s1r
    ratio_double = s0d / s1d
    if not ratio_double > ratio:
        raise ValidationError(
            f"weight-level gap does not grow with lam: {ratio_double!r} <= {ratio!r}"
        )
    return SigmaGapReport(
        sigma0=plan.sigma0,
        sigma1=plan.sigma1,
        sigma0_refined=s0r,
        sigma1_refined=s1r,
        ratio=ratio,
        ratio_refined=ratio_refined,
        ratio_double_lam=ratio_double,
    )
