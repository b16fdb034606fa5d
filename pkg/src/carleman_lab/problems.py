"""Manufactured inverse-source instances with known ground truth.

An instance packages a solution ``u`` of

    du/dt = Lap(u) + p0(x', t) u + R(x', x_n, t) f(x', t)

on the cylinder, with zero value and zero axial derivative on ``x_n = 0``,
together with the one-sided lateral data bundle (the axial derivative of
``u`` and its tangential derivatives on the data-side face) and the two
scalar summaries used by the stability analysis: the data functional of the
bundle and the a-priori bound of the solution.

Manufactured solutions are separated products ``u = a(x_n) b(x', t)`` whose
factors come from a small registry of profiles with analytic derivatives, so
``R`` is computed in closed form and the PDE holds up to discretization only.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ValidationError
from .geometry import (
    CylinderGeometry,
    Face,
    FieldKind,
    GammaSide,
    NormKind,
    ScalarField,
    discrete_norm,
    dt,
    dt2,
    dxn,
    dxn2,
    dxp,
    laplacian,
    trace,
)

__all__ = [
    "AxialProfile",
    "CrossTimeProfile",
    "axial_profile",
    "cross_time_profile",
    "AXIAL_PROFILES",
    "CROSS_TIME_PROFILES",
    "Recipe",
    "BoundaryBundle",
    "BUNDLE_CHANNELS",
    "ProblemInstance",
    "make_bundle",
    "make_instance",
    "add_noise",
    "coefficient_reduction",
    "compute_data_functional",
    "compute_apriori_bound",
    "residual_field",
    "save_instance",
    "load_instance",
]


# ---- profile registry ---------------------------------------------------------


@dataclass(frozen=True)
class AxialProfile:
    """Axial factor a(x_n) with analytic first and second derivatives."""

    name: str
    params: tuple
    fn: callable
    d1: callable
    d2: callable


@dataclass(frozen=True)
class CrossTimeProfile:
    """Cross-section/time factor g(x', t) with analytic d/dt and d2/dx'2."""

    name: str
    params: tuple
    fn: callable
    dt_fn: callable
    dxx_fn: callable


def _ax_quadratic():
    return (lambda x: x * x, lambda x: 2.0 * x, lambda x: 2.0 * np.ones_like(x))


def _ax_quadratic_plus_quartic():
    return (
        lambda x: x * x + x**4,
        lambda x: 2.0 * x + 4.0 * x**3,
        lambda x: 2.0 + 12.0 * x * x,
    )


def _ax_quadratic_times_linear(c=0.5):
    return (
        lambda x: x * x * (1.0 + c * x),
        lambda x: 2.0 * x + 3.0 * c * x * x,
        lambda x: 2.0 + 6.0 * c * x,
    )


AXIAL_PROFILES = {
    "quadratic": _ax_quadratic,
    "quadratic_plus_quartic": _ax_quadratic_plus_quartic,
    "quadratic_times_linear": _ax_quadratic_times_linear,
}


def _ct_constant(value=1.0):
    return (
        lambda xp, t: np.full(np.broadcast(xp, t).shape, float(value)),
        lambda xp, t: np.zeros(np.broadcast(xp, t).shape),
        lambda xp, t: np.zeros(np.broadcast(xp, t).shape),
    )


def _ct_exp_cos():
    return (
        lambda xp, t: np.exp(-t) * np.cos(xp),
        lambda xp, t: -np.exp(-t) * np.cos(xp),
        lambda xp, t: -np.exp(-t) * np.cos(xp),
    )


def _ct_two_plus_sin():
    return (
        lambda xp, t: 2.0 + np.sin(xp) + 0.0 * t,
        lambda xp, t: np.zeros(np.broadcast(xp, t).shape),
        lambda xp, t: -np.sin(xp) + 0.0 * t,
    )


def _ct_cos_cos(omega=1.0):
    return (
        lambda xp, t: np.cos(xp) * np.cos(omega * t),
        lambda xp, t: -omega * np.cos(xp) * np.sin(omega * t),
        lambda xp, t: -np.cos(xp) * np.cos(omega * t),
    )


CROSS_TIME_PROFILES = {
    "one": _ct_constant,
    "constant": _ct_constant,
    "exp_cos": _ct_exp_cos,
    "two_plus_sin": _ct_two_plus_sin,
    "cos_cos": _ct_cos_cos,
}


def axial_profile(name: str, **params) -> AxialProfile:
    if name not in AXIAL_PROFILES:
        raise ValidationError(
            f"unknown axial profile {name!r}; available: {sorted(AXIAL_PROFILES)}"
        )
    fn, d1, d2 = AXIAL_PROFILES[name](**params)
    return AxialProfile(name, tuple(sorted(params.items())), fn, d1, d2)


def cross_time_profile(name: str, **params) -> CrossTimeProfile:
    if name not in CROSS_TIME_PROFILES:
        raise ValidationError(
            f"unknown cross-time profile {name!r}; available: {sorted(CROSS_TIME_PROFILES)}"
        )
    fn, dt_fn, dxx_fn = CROSS_TIME_PROFILES[name](**params)
    return CrossTimeProfile(name, tuple(sorted(params.items())), fn, dt_fn, dxx_fn)


@dataclass(frozen=True)
class Recipe:
    """Factors of a manufactured instance: u = a * b, source factor f, zero-order p0."""

    a: AxialProfile
    b: CrossTimeProfile
    f: CrossTimeProfile
    p0: CrossTimeProfile

    def provenance(self) -> dict:
        return {
            "kind": "manufactured",
            "a": {"name": self.a.name, "params": dict(self.a.params)},
            "b": {"name": self.b.name, "params": dict(self.b.params)},
            "f": {"name": self.f.name, "params": dict(self.f.params)},
            "p0": {"name": self.p0.name, "params": dict(self.p0.params)},
        }


# ---- instances -----------------------------------------------------------------

BUNDLE_CHANNELS = ("y", "y_xp", "y_xn", "y_t", "y_xnxn", "y_xnt", "y_tt")


@dataclass(frozen=True)
class BoundaryBundle:
    """Data-side lateral traces of the axial derivative y = du/dx_n.

    ``y_xp`` is the derivative normal to the face; the remaining channels are
    tangential derivatives on the face (axial and time, up to second order).
    Channels live on the face, so their kind is AXIAL_TIME.
    """

    y: ScalarField
    y_xp: ScalarField
    y_xn: ScalarField
    y_t: ScalarField
    y_xnxn: ScalarField
    y_xnt: ScalarField
    y_tt: ScalarField
    noise_level: float = 0.0
    seed: int | None = None

    def channels(self) -> dict[str, ScalarField]:
        return {name: getattr(self, name) for name in BUNDLE_CHANNELS}


@dataclass(frozen=True)
class ProblemInstance:
    geometry: CylinderGeometry
    u: ScalarField
    f: ScalarField
    R: ScalarField
    p0: ScalarField
    data: BoundaryBundle
    d_of_u: float
    apriori_bound: float
    provenance: dict


def _ct_to_volume(field: ScalarField) -> np.ndarray:
    """View a CROSS_SECTION_TIME array as broadcastable over the volume."""
    return field.values[:, None, :]


def make_bundle(u: ScalarField, noise_level: float = 0.0, seed: int | None = None) -> BoundaryBundle:
    """Lateral data bundle of a solution field, by finite differences."""
    y = dxn(u)
    ch = {
        "y": trace(y, Face.GAMMA_SIDE),
        "y_xp": trace(dxp(y), Face.GAMMA_SIDE),
        "y_xn": trace(dxn(y), Face.GAMMA_SIDE),
        "y_t": trace(dt(y), Face.GAMMA_SIDE),
        "y_xnxn": trace(dxn2(y), Face.GAMMA_SIDE),
        "y_xnt": trace(dt(dxn(y)), Face.GAMMA_SIDE),
        "y_tt": trace(dt2(y), Face.GAMMA_SIDE),
    }
    return BoundaryBundle(noise_level=noise_level, seed=seed, **ch)


def residual_field(inst: ProblemInstance) -> ScalarField:
    """PDE residual of the stored solution (zero up to discretization)."""
    vals = (
        dt(inst.u).values
        - laplacian(inst.u).values
        - _ct_to_volume(inst.p0) * inst.u.values
        - inst.R.values * _ct_to_volume(inst.f)
    )
    return ScalarField(inst.geometry, vals, FieldKind.SPACE_TIME)


def _validate_instance(inst: ProblemInstance, trace_tol: float):
    g = inst.geometry
    scale = max(
        np.max(np.abs(dt(inst.u).values)),
        np.max(np.abs(laplacian(inst.u).values)),
        np.max(np.abs(_ct_to_volume(inst.p0) * inst.u.values)),
        np.max(np.abs(inst.R.values * _ct_to_volume(inst.f))),
        1e-30,
    )
    h = max(g.spacing("xp"), g.spacing("xn"), g.spacing("t"))
    res = np.max(np.abs(residual_field(inst).values))
    if res > 10.0 * h * h * scale:
        raise ValidationError(
            f"PDE residual {res:.3e} exceeds 10 h^2 times the term scale {scale:.3e}"
        )
    u_face = trace(inst.u, Face.XN_ZERO).max_abs()
    u_scale = max(inst.u.max_abs(), 1e-30)
    if u_face > trace_tol * u_scale:
        raise ValidationError(
            f"solution trace at x_n = 0 is {u_face:.3e}, above {trace_tol:g} of scale {u_scale:.3e}"
        )
    # The discrete axial derivative at the face carries the one-sided
    # truncation error of the stencil, so it only vanishes to O(h^2) even
    # though the recipe enforces a'(0) = 0 analytically.
    y_face = trace(dxn(inst.u), Face.XN_ZERO).max_abs()
    y_scale = max(dxn(inst.u).max_abs(), 1e-30)
    if y_face > 10.0 * h * h * y_scale:
        raise ValidationError(
            f"axial derivative trace at x_n = 0 is {y_face:.3e}, above 10 h^2 of scale {y_scale:.3e}"
        )
    r_face = np.min(np.abs(trace(inst.R, Face.XN_ZERO).values))
    if r_face <= 1e-12 * max(inst.R.max_abs(), 1e-30):
        raise ValidationError(
            f"source profile R vanishes somewhere on x_n = 0 (min |R| = {r_face:.3e})"
        )


def make_instance(geometry: CylinderGeometry, recipe: Recipe) -> ProblemInstance:
    """Build a manufactured instance on the physical (non-extended) cylinder.

    The axial factor must satisfy a(0) = a'(0) = 0 with a''(0) != 0 so the
    Cauchy data on ``x_n = 0`` vanish while the source profile stays active
    there; the factors b and f must be bounded away from zero.  The closed
    form of the source profile is

        R = (a db/dt - a'' b - a d2b/dx'2 - p0 a b) / f.
    """
    if geometry.extended:
        raise ValidationError("instances live on the physical cylinder, not the extension")
    xp = geometry.axis_nodes("xp")
    xn = geometry.axis_nodes("xn")
    t = geometry.axis_nodes("t")

    a = recipe.a.fn(xn)
    a2 = recipe.a.d2(xn)
    a_scale = max(float(np.max(np.abs(a))), 1e-30)
    if abs(float(recipe.a.fn(np.zeros(1))[0])) > 1e-12 * a_scale:
        raise ValidationError(f"axial profile {recipe.a.name!r} must vanish at x_n = 0")
    if abs(float(recipe.a.d1(np.zeros(1))[0])) > 1e-12 * a_scale:
        raise ValidationError(
            f"axial profile {recipe.a.name!r} must have zero slope at x_n = 0"
        )
    curv0 = float(recipe.a.d2(np.zeros(1))[0])
    if abs(curv0) <= 1e-12 * max(float(np.max(np.abs(a2))), 1e-30):
        raise ValidationError(
            f"axial profile {recipe.a.name!r} must have nonzero curvature at x_n = 0"
        )

    XP, T = np.meshgrid(xp, t, indexing="ij")
    b = recipe.b.fn(XP, T)
    bt = recipe.b.dt_fn(XP, T)
    bxx = recipe.b.dxx_fn(XP, T)
    fv = recipe.f.fn(XP, T)
    p0v = recipe.p0.fn(XP, T)
    if np.min(np.abs(b)) <= 0.0:
        raise ValidationError(
            f"cross-time factor {recipe.b.name!r} reaches zero (min |b| = {np.min(np.abs(b)):.3e})"
        )
    if np.min(np.abs(fv)) <= 0.0:
        raise ValidationError(
            f"source factor {recipe.f.name!r} reaches zero (min |f| = {np.min(np.abs(fv)):.3e})"
        )

    u_vals = b[:, None, :] * a[None, :, None]
    r_vals = (
        a[None, :, None] * (bt - bxx - p0v * b)[:, None, :]
        - a2[None, :, None] * b[:, None, :]
    ) / fv[:, None, :]

    u = ScalarField(geometry, u_vals, FieldKind.SPACE_TIME)
    R = ScalarField(geometry, r_vals, FieldKind.SPACE_TIME)
    f = ScalarField(geometry, fv, FieldKind.CROSS_SECTION_TIME)
    p0 = ScalarField(geometry, p0v, FieldKind.CROSS_SECTION_TIME)

    bundle = make_bundle(u)
    inst = ProblemInstance(
        geometry=geometry,
        u=u,
        f=f,
        R=R,
        p0=p0,
        data=bundle,
        d_of_u=math.nan,
        apriori_bound=math.nan,
        provenance=recipe.provenance(),
    )
    _validate_instance(inst, trace_tol=1e-12)
    return replace(
        inst,
        d_of_u=compute_data_functional(inst),
        apriori_bound=compute_apriori_bound(inst),
    )


def add_noise(inst: ProblemInstance, level: float, seed: int) -> ProblemInstance:
    """Perturb every bundle channel by level * max|channel| * standard normals.

    Channels are perturbed in their fixed declaration order from a single
    generator seeded with ``seed``, so results are reproducible; level 0
    returns a bundle bit-identical to the clean one.  The data functional is
    recomputed from the noisy bundle, the a-priori bound is left alone (it
    describes the true solution).
    """
    if not (level >= 0.0 and math.isfinite(level)):
        raise ValidationError(f"noise level must be finite and nonnegative, got {level!r}")
    clean = inst.data
    if level == 0.0:
        bundle = replace(clean, noise_level=0.0, seed=seed)
    else:
        rng = np.random.default_rng(seed)
        noisy = {}
        for name in BUNDLE_CHANNELS:
            ch = getattr(clean, name)
            g = rng.standard_normal(ch.values.shape)
            noisy[name] = ch.with_values(ch.values + level * ch.max_abs() * g)
        bundle = BoundaryBundle(noise_level=level, seed=seed, **noisy)
    out = replace(inst, data=bundle)
    return replace(out, d_of_u=compute_data_functional(out))


def coefficient_reduction(
    v_p: ScalarField,
    v_q: ScalarField,
    p: ScalarField,
    q: ScalarField,
    alpha0: float = 1e-8,
) -> ProblemInstance:
    """Reduce a zero-order coefficient pair to a source instance.

    Two solutions of the same problem under coefficients ``p`` and ``q``
    that share Cauchy data on ``x_n = 0`` yield an instance with

        u = v_p - v_q,  p0 = p,  R = v_q,  f = p - q,

    so recovering the source factor recovers the coefficient difference.
    Preconditions: the shared Cauchy data must agree to 1e-10 relative, and
    ``|v_q|`` must stay at or above ``alpha0`` on the face ``x_n = 0``.
    """
    for name, fld, kind in (
        ("v_p", v_p, FieldKind.SPACE_TIME),
        ("v_q", v_q, FieldKind.SPACE_TIME),
        ("p", p, FieldKind.CROSS_SECTION_TIME),
        ("q", q, FieldKind.CROSS_SECTION_TIME),
    ):
        if fld.kind is not kind:
            raise ValidationError(f"{name} must have kind {kind.name}, got {fld.kind.name}")
        if fld.geometry != v_p.geometry:
            raise ValidationError(f"{name} lives on a different geometry than v_p")
    g = v_p.geometry
    if g.extended:
        raise ValidationError("coefficient reduction runs on the physical cylinder")

    scale = max(v_p.max_abs(), v_q.max_abs(), 1e-30)
    val_gap = trace(v_p - v_q, Face.XN_ZERO).max_abs()
    if val_gap > 1e-10 * scale:
        raise ValidationError(
            f"Cauchy values of v_p and v_q differ by {val_gap:.3e} at x_n = 0 "
            f"(allowed 1e-10 of scale {scale:.3e})"
        )
    dscale = max(dxn(v_p).max_abs(), dxn(v_q).max_abs(), 1e-30)
    der_gap = trace(dxn(v_p) - dxn(v_q), Face.XN_ZERO).max_abs()
    if der_gap > 1e-10 * dscale:
        raise ValidationError(
            f"Cauchy derivatives of v_p and v_q differ by {der_gap:.3e} at x_n = 0"
        )
    face_min = float(np.min(np.abs(trace(v_q, Face.XN_ZERO).values)))
    if face_min < alpha0:
        raise ValidationError(
            f"|v_q| drops to {face_min:.3e} on x_n = 0, below the floor alpha0 = {alpha0:g}"
        )

    u = v_p - v_q
    f = p - q
    inst = ProblemInstance(
        geometry=g,
        u=u,
        f=f,
        R=v_q,
        p0=p,
        data=make_bundle(u),
        d_of_u=math.nan,
        apriori_bound=math.nan,
        provenance={"kind": "coefficient_reduction", "alpha0": alpha0},
    )
    _validate_instance(inst, trace_tol=1e-10)
    return replace(
        inst,
        d_of_u=compute_data_functional(inst),
        apriori_bound=compute_apriori_bound(inst),
    )


# ---- scalar summaries -----------------------------------------------------------


def compute_data_functional(inst: ProblemInstance) -> float:
    """Size of the lateral data: face gradient content plus face H2 content.

    Both groups integrate over the data-side face and are formed from the
    recorded traces themselves: the first is the squared value of y plus its
    full space-time gradient, where the two tangential components come from
    the face stencils applied to the recorded y and only the cross-section
    component (which no face stencil can reach) comes from its own channel;
    the second is the surface H2 energy of the recorded y.  Differentiating
    the recorded values means measurement noise enters the functional with
    the same stencil amplification it has in any downstream use of the data.
    Degree-1 homogeneous in the bundle and zero exactly when the recorded
    y and y_xp vanish, which for bundles of an actual field means all
    channels vanish.
    """
    ch = inst.data.channels()
    grad_sq = (
        discrete_norm(ch["y_xp"]) ** 2
        + discrete_norm(ch["y"], kind=NormKind.H1_SURFACE) ** 2
    )
    h2_sq = discrete_norm(ch["y"], kind=NormKind.H2_SURFACE) ** 2
    return math.sqrt(grad_sq + h2_sq)


def compute_apriori_bound(inst: ProblemInstance) -> float:
    """Sum of the solution norms that bound the stability estimate.

    Terminal H1 energies, lateral value and gradient energies on both
    cross-section sides, surface H2 energies on all four lateral faces, and
    the value and gradient energies on the top face.  Each summand is a
    norm, so the bound is degree-1 homogeneous in u, and the data functional
    of a clean instance never exceeds it.
    """
    y = dxn(inst.u)
    grads = [dxp(y), dxn(y), dt(y)]

    terminal = sum(
        discrete_norm(trace(y, face), kind=NormKind.H1_SURFACE)
        for face in (Face.T_PLUS_DELTA, Face.T_MINUS_DELTA)
    )

    sides = (Face.GAMMA_SIDE, Face.OPPOSITE_SIDE)
    side_val = math.sqrt(sum(discrete_norm(trace(y, fc)) ** 2 for fc in sides))
    side_grad = math.sqrt(
        sum(discrete_norm(trace(gcomp, fc)) ** 2 for fc in sides for gcomp in grads)
    )

    h2_faces = (Face.GAMMA_SIDE, Face.OPPOSITE_SIDE, Face.XN_ZERO, Face.XN_ELL)
    surf_h2 = math.sqrt(
        sum(discrete_norm(trace(y, fc), kind=NormKind.H2_SURFACE) ** 2 for fc in h2_faces)
    )

    top_val = discrete_norm(trace(y, Face.XN_ELL))
    top_grad = math.sqrt(sum(discrete_norm(trace(gcomp, Face.XN_ELL)) ** 2 for gcomp in grads))

    return terminal + side_val + side_grad + surf_h2 + top_val + top_grad


# ---- serialization ----------------------------------------------------------------


def save_instance(inst: ProblemInstance, path) -> None:
    """Write an instance to a single .npz archive (little-endian doubles)."""
    g = inst.geometry
    geometry_meta = {
        "d_lo": g.d_lo,
        "d_hi": g.d_hi,
        "ell": g.ell,
        "delta": g.delta,
        "gamma_side": g.gamma_side.value,
        "nx_prime": g.nx_prime,
        "nx_n": g.nx_n,
        "nt": g.nt,
        "extended": g.extended,
    }
    meta = {
        "geometry": geometry_meta,
        "provenance": inst.provenance,
        "noise_level": inst.data.noise_level,
        "seed": inst.data.seed,
        "d_of_u": inst.d_of_u,
        "apriori_bound": inst.apriori_bound,
    }
    arrays = {
        "u": inst.u.values,
        "f": inst.f.values,
        "R": inst.R.values,
        "p0": inst.p0.values,
    }
    for name, ch in inst.data.channels().items():
        arrays[f"bundle_{name}"] = ch.values
    arrays = {k: np.ascontiguousarray(v, dtype="<f8") for k, v in arrays.items()}
    np.savez(path, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_instance(path) -> ProblemInstance:
    """Inverse of save_instance; revalidates shapes via field construction."""
    with np.load(path, allow_pickle=False) as z:
        try:
            meta = json.loads(bytes(z["meta"]).decode())
        except (KeyError, ValueError) as e:
            raise ValidationError(f"not an instance archive: {e}") from e
        gm = meta["geometry"]
        geometry = CylinderGeometry(
            d_lo=gm["d_lo"],
            d_hi=gm["d_hi"],
            ell=gm["ell"],
            delta=gm["delta"],
            gamma_side=GammaSide(gm["gamma_side"]),
            nx_prime=gm["nx_prime"],
            nx_n=gm["nx_n"],
            nt=gm["nt"],
            extended=gm["extended"],
        )
        u = ScalarField(geometry, z["u"], FieldKind.SPACE_TIME)
        f = ScalarField(geometry, z["f"], FieldKind.CROSS_SECTION_TIME)
        R = ScalarField(geometry, z["R"], FieldKind.SPACE_TIME)
        p0 = ScalarField(geometry, z["p0"], FieldKind.CROSS_SECTION_TIME)
        channels = {
            name: ScalarField(geometry, z[f"bundle_{name}"], FieldKind.AXIAL_TIME)
            for name in BUNDLE_CHANNELS
        }
    bundle = BoundaryBundle(
        noise_level=meta["noise_level"], seed=meta["seed"], **channels
    )
    return ProblemInstance(
        geometry=geometry,
        u=u,
        f=f,
        R=R,
        p0=p0,
        data=bundle,
        d_of_u=meta["d_of_u"],
        apriori_bound=meta["apriori_bound"],
        provenance=meta["provenance"],
    )
