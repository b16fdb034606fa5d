"""Cylindrical space-time grids, scalar fields, and finite-difference calculus.

The domain is a cylinder ``Omega = D x (0, ell)`` with interval cross-section
``D = (d_lo, d_hi)``, crossed with the time window ``(-delta, delta)``.  One
endpoint of ``D`` is the data-carrying side (``gamma_side``).  Fields may also
live on the reflected cylinder ``Omega x (-ell, ell)`` (``extended=True``),
which is how the even/odd reflections across ``x_n = 0`` are represented.

All derivatives are second-order finite differences: central stencils in the
interior, one-sided second-order stencils on the first and last node of the
differentiation axis.  All integrals are trapezoidal on the uniform grid.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Callable

import numpy as np

from .errors import ValidationError

__all__ = [
    "GammaSide",
    "FieldKind",
    "CylinderGeometry",
    "Grid",
    "build_grid",
    "ScalarField",
    "Face",
    "NormKind",
    "Region",
    "diff",
    "dxp",
    "dxn",
    "dt",
    "dxp2",
    "dxn2",
    "dt2",
    "laplacian",
    "grad_xt",
    "even_extend",
    "odd_extend",
    "restrict_to_upper",
    "trace",
    "time_slice",
    "axis_weights",
    "quadrature_weights",
    "discrete_norm",
]

_MIN_NODES = 4  # the widest one-sided stencil spans four nodes


class GammaSide(Enum):
    """Which endpoint of the cross-section carries the lateral data."""

    LO = "LO"
    HI = "HI"


class FieldKind(Enum):
    """Axis signature of a scalar field, as a tuple of axis names."""

    SPACE_TIME = ("xp", "xn", "t")
    SPACE_ONLY = ("xp", "xn")
    CROSS_SECTION_TIME = ("xp", "t")
    CROSS_SECTION = ("xp",)
    AXIAL_TIME = ("xn", "t")

    @property
    def axes(self) -> tuple[str, ...]:
        return self.value


@dataclass(frozen=True)
class CylinderGeometry:
    """Uniform tensor grid on the cylinder and its time window.

    ``nx_n`` counts nodes on the axial interval: ``[0, ell]`` normally,
    ``[-ell, ell]`` when ``extended`` is set.  Extended geometries need an
    odd ``nx_n`` so that ``x_n = 0`` is a node.
    """

    d_lo: float
    d_hi: float
    ell: float
    delta: float
    gamma_side: GammaSide
    nx_prime: int
    nx_n: int
    nt: int
    extended: bool = False

    def __post_init__(self):
        for name in ("d_lo", "d_hi", "ell", "delta"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v)):
                raise ValidationError(f"geometry extent {name} must be finite, got {v!r}")
        if not self.d_lo < self.d_hi:
            raise ValidationError(
                f"cross-section is degenerate: d_lo={self.d_lo} must be < d_hi={self.d_hi}"
            )
        if self.ell <= 0:
            raise ValidationError(f"axial half-length ell must be positive, got {self.ell}")
        if self.delta <= 0:
            raise ValidationError(f"time half-width delta must be positive, got {self.delta}")
        if not isinstance(self.gamma_side, GammaSide):
            raise ValidationError(f"gamma_side must be a GammaSide, got {self.gamma_side!r}")
        for name in ("nx_prime", "nx_n", "nt"):
            n = getattr(self, name)
            if not isinstance(n, int) or isinstance(n, bool):
                raise ValidationError(f"grid count {name} must be an int, got {n!r}")
            if n < _MIN_NODES:
                raise ValidationError(
                    f"grid too coarse: {name}={n} is below the minimum of {_MIN_NODES} nodes"
                )
        if self.extended and self.nx_n % 2 == 0:
            raise ValidationError(
                f"extended geometry needs an odd axial node count so x_n=0 is a node, got nx_n={self.nx_n}"
            )

    # ---- coordinates ----------------------------------------------------

    def axis_nodes(self, axis: str) -> np.ndarray:
        if axis == "xp":
            return np.linspace(self.d_lo, self.d_hi, self.nx_prime)
        if axis == "xn":
            lo = -self.ell if self.extended else 0.0
            return np.linspace(lo, self.ell, self.nx_n)
        if axis == "t":
            return np.linspace(-self.delta, self.delta, self.nt)
        raise ValidationError(f"unknown axis {axis!r}")

    def axis_count(self, axis: str) -> int:
        return {"xp": self.nx_prime, "xn": self.nx_n, "t": self.nt}[axis]

    def spacing(self, axis: str) -> float:
        nodes = self.axis_nodes(axis)
        return float((nodes[-1] - nodes[0]) / (len(nodes) - 1))

    def shape(self, kind: FieldKind) -> tuple[int, ...]:
        return tuple(self.axis_count(a) for a in kind.axes)

    @property
    def xn_zero_index(self) -> int:
        return (self.nx_n - 1) // 2 if self.extended else 0

    @property
    def gamma_coord(self) -> float:
        return self.d_hi if self.gamma_side is GammaSide.HI else self.d_lo

    @property
    def opposite_coord(self) -> float:
        return self.d_lo if self.gamma_side is GammaSide.HI else self.d_hi

    # ---- derived geometries ---------------------------------------------

    def extend(self) -> "CylinderGeometry":
        """Geometry of the reflected cylinder ``Omega x (-ell, ell)``."""
        if self.extended:
            raise ValidationError("geometry is already extended across x_n = 0")
        return replace(self, nx_n=2 * self.nx_n - 1, extended=True)

    def refine(self) -> "CylinderGeometry":
        """Halve every spacing by node-doubling (n -> 2n - 1 per axis)."""
        return replace(
            self,
            nx_prime=2 * self.nx_prime - 1,
            nx_n=2 * self.nx_n - 1,
            nt=2 * self.nt - 1,
        )

    def fingerprint(self) -> str:
        """Stable hash identifying the grid, used in serialized reports."""
        key = "|".join(
            repr(v)
            for v in (
                self.d_lo,
                self.d_hi,
                self.ell,
                self.delta,
                self.gamma_side.value,
                self.nx_prime,
                self.nx_n,
                self.nt,
                self.extended,
            )
        )
        return hashlib.sha256(key.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class Grid:
    """Node coordinates and spacings of a geometry, materialized as arrays."""

    xp: np.ndarray
    xn: np.ndarray
    t: np.ndarray
    h_xp: float
    h_xn: float
    h_t: float


def build_grid(geometry: CylinderGeometry) -> Grid:
    """Materialize the node coordinates of ``geometry``.

    Node counts and extents were validated by the geometry constructor, so
    this cannot produce degenerate axes.
    """
    return Grid(
        xp=geometry.axis_nodes("xp"),
        xn=geometry.axis_nodes("xn"),
        t=geometry.axis_nodes("t"),
        h_xp=geometry.spacing("xp"),
        h_xn=geometry.spacing("xn"),
        h_t=geometry.spacing("t"),
    )


class ScalarField:
    """Array of nodal values tied to a geometry and an axis signature.

    Values are stored read-only; operations return new fields.
    """

    __slots__ = ("geometry", "values", "kind")

    def __init__(self, geometry: CylinderGeometry, values, kind: FieldKind):
        values = np.asarray(values, dtype=np.float64)
        expected = geometry.shape(kind)
        if values.shape != expected:
            raise ValidationError(
                f"field shape {values.shape} does not match geometry shape {expected} for {kind.name}"
            )
        if not np.all(np.isfinite(values)):
            raise ValidationError("field contains non-finite values")
        values = values.copy() if not values.flags.owndata else values
        values.flags.writeable = False
        object.__setattr__(self, "geometry", geometry)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "kind", kind)

    def __setattr__(self, name, value):
        raise AttributeError("ScalarField is immutable")

    @property
    def axes(self) -> tuple[str, ...]:
        return self.kind.axes

    def axis_index(self, axis: str) -> int:
        try:
            return self.axes.index(axis)
        except ValueError:
            raise ValidationError(
                f"field of kind {self.kind.name} has no {axis!r} axis"
            ) from None

    @classmethod
    def from_function(
        cls, geometry: CylinderGeometry, kind: FieldKind, fn: Callable[..., np.ndarray]
    ) -> "ScalarField":
        """Sample ``fn(*axis_arrays)`` on the tensor grid (ij indexing)."""
        coords = [geometry.axis_nodes(a) for a in kind.axes]
        mesh = np.meshgrid(*coords, indexing="ij")
        vals = np.asarray(fn(*mesh), dtype=np.float64)
        vals = np.broadcast_to(vals, geometry.shape(kind)).copy()
        return cls(geometry, vals, kind)

    @classmethod
    def zeros(cls, geometry: CylinderGeometry, kind: FieldKind) -> "ScalarField":
        return cls(geometry, np.zeros(geometry.shape(kind)), kind)

    @classmethod
    def constant(cls, geometry: CylinderGeometry, kind: FieldKind, value: float) -> "ScalarField":
        return cls(geometry, np.full(geometry.shape(kind), float(value)), kind)

    def with_values(self, values) -> "ScalarField":
        return ScalarField(self.geometry, values, self.kind)

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.values)))

    # Small arithmetic surface so tests and callers can form differences
    # and scalings without unwrapping the arrays.

    def _coerce(self, other):
        if isinstance(other, ScalarField):
            if other.kind is not self.kind or other.geometry != self.geometry:
                raise ValidationError("field arithmetic requires matching geometry and kind")
            return other.values
        return other

    def __add__(self, other):
        return self.with_values(self.values + self._coerce(other))

    __radd__ = __add__

    def __sub__(self, other):
        return self.with_values(self.values - self._coerce(other))

    def __rsub__(self, other):
        return self.with_values(self._coerce(other) - self.values)

    def __mul__(self, other):
        return self.with_values(self.values * self._coerce(other))

    __rmul__ = __mul__

    def __neg__(self):
        return self.with_values(-self.values)

    def __repr__(self):
        return f"ScalarField({self.kind.name}, shape={self.values.shape})"


# ---- finite differences ---------------------------------------------------


def _diff1_array(a: np.ndarray, axis: int, h: float) -> np.ndarray:
    """Second-order first derivative along ``axis``."""
    b = np.moveaxis(a, axis, 0)
    out = np.empty_like(b)
    out[1:-1] = (b[2:] - b[:-2]) / (2.0 * h)
    out[0] = (-3.0 * b[0] + 4.0 * b[1] - b[2]) / (2.0 * h)
    out[-1] = (3.0 * b[-1] - 4.0 * b[-2] + b[-3]) / (2.0 * h)
    return np.moveaxis(out, 0, axis)


def _diff2_array(a: np.ndarray, axis: int, h: float) -> np.ndarray:
    """Second-order second derivative along ``axis``."""
    b = np.moveaxis(a, axis, 0)
    out = np.empty_like(b)
    h2 = h * h
    # (left + right) first, so the stencil is bitwise symmetric under mirroring
    out[1:-1] = ((b[2:] + b[:-2]) - 2.0 * b[1:-1]) / h2
    out[0] = (2.0 * b[0] - 5.0 * b[1] + 4.0 * b[2] - b[3]) / h2
    out[-1] = (2.0 * b[-1] - 5.0 * b[-2] + 4.0 * b[-3] - b[-4]) / h2
    return np.moveaxis(out, 0, axis)


def diff(u: ScalarField, axis: str, order: int = 1) -> ScalarField:
    """Finite-difference derivative of ``u`` along a named axis."""
    idx = u.axis_index(axis)
    h = u.geometry.spacing(axis)
    if order == 1:
        return u.with_values(_diff1_array(u.values, idx, h))
    if order == 2:
        return u.with_values(_diff2_array(u.values, idx, h))
    raise ValidationError(f"derivative order must be 1 or 2, got {order}")


def dxp(u: ScalarField) -> ScalarField:
    return diff(u, "xp", 1)


def dxn(u: ScalarField) -> ScalarField:
    return diff(u, "xn", 1)


def dt(u: ScalarField) -> ScalarField:
    return diff(u, "t", 1)


def dxp2(u: ScalarField) -> ScalarField:
    return diff(u, "xp", 2)


def dxn2(u: ScalarField) -> ScalarField:
    return diff(u, "xn", 2)


def dt2(u: ScalarField) -> ScalarField:
    return diff(u, "t", 2)


def laplacian(u: ScalarField) -> ScalarField:
    """Spatial Laplacian (cross-section plus axial second derivatives)."""
    if "xp" not in u.axes or "xn" not in u.axes:
        raise ValidationError(f"laplacian needs both spatial axes, got kind {u.kind.name}")
    return u.with_values(dxp2(u).values + dxn2(u).values)


def grad_xt(u: ScalarField) -> tuple[ScalarField, ...]:
    """First derivatives along every axis of the field, in axis order."""
    return tuple(diff(u, a, 1) for a in u.axes)


# ---- reflections across x_n = 0 --------------------------------------------

_EXTENDABLE = (FieldKind.SPACE_TIME, FieldKind.SPACE_ONLY)


def _check_extendable(u: ScalarField, op: str) -> int:
    if u.kind not in _EXTENDABLE:
        raise ValidationError(f"{op} needs an axial axis, got kind {u.kind.name}")
    if u.geometry.extended:
        raise ValidationError(f"{op}: field is already on the extended cylinder")
    return u.axis_index("xn")


def even_extend(u: ScalarField) -> ScalarField:
    """Reflect evenly across ``x_n = 0`` onto the extended cylinder.

    The mirrored block reuses the stored values, so matching nodes agree
    bit for bit.
    """
    ax = _check_extendable(u, "even_extend")
    mirror = np.flip(u.values, axis=ax)
    sl = [slice(None)] * u.values.ndim
    sl[ax] = slice(0, -1)
    vals = np.concatenate([mirror[tuple(sl)], u.values], axis=ax)
    return ScalarField(u.geometry.extend(), vals, u.kind)


def odd_extend(u: ScalarField) -> ScalarField:
    """Reflect oddly across ``x_n = 0``; requires a vanishing trace there.

    The trace must vanish to 1e-12 relative to the field's max-abs.  The
    reflected field carries an exact zero on the ``x_n = 0`` slice so that
    antisymmetry holds node for node.
    """
    ax = _check_extendable(u, "odd_extend")
    face = np.take(u.values, 0, axis=ax)
    scale = u.max_abs()
    if scale > 0 and np.max(np.abs(face)) > 1e-12 * scale:
        worst = np.unravel_index(np.argmax(np.abs(face)), face.shape)
        raise ValidationError(
            "odd_extend: trace at x_n = 0 is nonzero "
            f"(max {np.max(np.abs(face)):.3e} vs scale {scale:.3e} at node {worst})"
        )
    mirror = -np.flip(u.values, axis=ax)
    sl = [slice(None)] * u.values.ndim
    sl[ax] = slice(0, -1)
    vals = np.concatenate([mirror[tuple(sl)], u.values], axis=ax)
    center = [slice(None)] * vals.ndim
    center[ax] = (vals.shape[ax] - 1) // 2
    vals[tuple(center)] = 0.0
    return ScalarField(u.geometry.extend(), vals, u.kind)


def restrict_to_upper(u: ScalarField) -> ScalarField:
    """Restriction of an extended field to ``x_n >= 0``."""
    if u.kind not in _EXTENDABLE:
        raise ValidationError(f"restrict_to_upper needs an axial axis, got {u.kind.name}")
    if not u.geometry.extended:
        raise ValidationError("restrict_to_upper: field is not on the extended cylinder")
    ax = u.axis_index("xn")
    sl = [slice(None)] * u.values.ndim
    sl[ax] = slice(u.geometry.xn_zero_index, None)
    base = replace(u.geometry, nx_n=(u.geometry.nx_n + 1) // 2, extended=False)
    return ScalarField(base, u.values[tuple(sl)].copy(), u.kind)


# ---- traces -----------------------------------------------------------------


class Face(Enum):
    XN_ZERO = "XN_ZERO"
    XN_ELL = "XN_ELL"
    XN_NEG_ELL = "XN_NEG_ELL"
    GAMMA_SIDE = "GAMMA_SIDE"
    OPPOSITE_SIDE = "OPPOSITE_SIDE"
    T_PLUS_DELTA = "T_PLUS_DELTA"
    T_MINUS_DELTA = "T_MINUS_DELTA"


_DROP_KIND = {
    # (input kind, dropped axis) -> output kind
    (FieldKind.SPACE_TIME, "xn"): FieldKind.CROSS_SECTION_TIME,
    (FieldKind.SPACE_TIME, "xp"): FieldKind.AXIAL_TIME,
    (FieldKind.SPACE_TIME, "t"): FieldKind.SPACE_ONLY,
    (FieldKind.SPACE_ONLY, "xn"): FieldKind.CROSS_SECTION,
    (FieldKind.CROSS_SECTION_TIME, "t"): FieldKind.CROSS_SECTION,
    (FieldKind.AXIAL_TIME, "xn"): None,  # no 1-d axial kind; rejected below
}


def _slice_axis(u: ScalarField, axis: str, index: int) -> ScalarField:
    out_kind = _DROP_KIND.get((u.kind, axis))
    if out_kind is None:
        raise ValidationError(
            f"trace along {axis!r} is not defined for fields of kind {u.kind.name}"
        )
    vals = np.take(u.values, index, axis=u.axis_index(axis))
    return ScalarField(u.geometry, vals.copy(), out_kind)


def trace(u: ScalarField, face: Face) -> ScalarField:
    """Restrict a field to one face of its domain.

    Axial faces drop the ``xn`` axis, lateral faces drop ``xp``, terminal
    faces drop ``t``.  ``XN_NEG_ELL`` exists only on extended geometries.
    """
    g = u.geometry
    if face is Face.XN_ZERO:
        return _slice_axis(u, "xn", g.xn_zero_index)
    if face is Face.XN_ELL:
        return _slice_axis(u, "xn", g.nx_n - 1)
    if face is Face.XN_NEG_ELL:
        if not g.extended:
            raise ValidationError("face XN_NEG_ELL requires an extended geometry")
        return _slice_axis(u, "xn", 0)
    if face is Face.GAMMA_SIDE:
        idx = g.nx_prime - 1 if g.gamma_side is GammaSide.HI else 0
        return _slice_axis(u, "xp", idx)
    if face is Face.OPPOSITE_SIDE:
        idx = 0 if g.gamma_side is GammaSide.HI else g.nx_prime - 1
        return _slice_axis(u, "xp", idx)
    if face is Face.T_PLUS_DELTA:
        return _slice_axis(u, "t", g.nt - 1)
    if face is Face.T_MINUS_DELTA:
        return _slice_axis(u, "t", 0)
    raise ValidationError(f"unknown face {face!r}")


def time_slice(u: ScalarField, t_value: float) -> ScalarField:
    """Restrict to the time node nearest ``t_value`` (must hit a node)."""
    nodes = u.geometry.axis_nodes("t")
    idx = int(np.argmin(np.abs(nodes - t_value)))
    tol = 1e-9 * max(1.0, float(nodes[-1] - nodes[0]))
    if abs(nodes[idx] - t_value) > tol:
        raise ValidationError(
            f"t = {t_value!r} is not a grid node (nearest node {nodes[idx]!r})"
        )
    return _slice_axis(u, "t", idx)


# ---- quadrature and norms ---------------------------------------------------


def axis_weights(n: int, h: float) -> np.ndarray:
    """Trapezoidal weights on a uniform axis: h at interior, h/2 at ends."""
    w = np.full(n, h)
    w[0] = 0.5 * h
    w[-1] = 0.5 * h
    return w


def quadrature_weights(geometry: CylinderGeometry, kind: FieldKind) -> np.ndarray:
    """Outer-product trapezoidal weight array over the field's full domain."""
    w = None
    for a in kind.axes:
        wa = axis_weights(geometry.axis_count(a), geometry.spacing(a))
        w = wa if w is None else np.multiply.outer(w, wa)
    return w


class NormKind(Enum):
    L2 = "L2"
    H1_SURFACE = "H1_SURFACE"
    H2_SURFACE = "H2_SURFACE"


@dataclass(frozen=True)
class Region:
    """Axis-aligned box selecting a sub-range per axis; None keeps the axis whole."""

    xp: tuple[float, float] | None = None
    xn: tuple[float, float] | None = None
    t: tuple[float, float] | None = None

    def bounds(self, axis: str):
        return getattr(self, axis)


def _axis_selection(geometry: CylinderGeometry, axis: str, bounds) -> slice:
    nodes = geometry.axis_nodes(axis)
    if bounds is None:
        return slice(0, len(nodes))
    lo, hi = bounds
    if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
        raise ValidationError(f"bad region bounds for axis {axis!r}: {bounds!r}")
    tol = 1e-9 * max(1.0, float(nodes[-1] - nodes[0]))
    inside = np.nonzero((nodes >= lo - tol) & (nodes <= hi + tol))[0]
    if inside.size < 2:
        raise ValidationError(
            f"empty region: fewer than two grid nodes fall in {bounds!r} along {axis!r}"
        )
    return slice(int(inside[0]), int(inside[-1]) + 1)


def _region_weights(
    geometry: CylinderGeometry, kind: FieldKind, region: Region | None
) -> tuple[tuple[slice, ...], np.ndarray]:
    sels = []
    w = None
    for a in kind.axes:
        bounds = None if region is None else region.bounds(a)
        sel = _axis_selection(geometry, a, bounds)
        sels.append(sel)
        n = sel.stop - sel.start
        wa = axis_weights(n, geometry.spacing(a))
        w = wa if w is None else np.multiply.outer(w, wa)
    return tuple(sels), w


def _surface_derivative_stack(u: ScalarField, second: bool) -> list[np.ndarray]:
    a0, a1 = u.axes
    d0 = diff(u, a0, 1).values
    d1 = diff(u, a1, 1).values
    out = [d0, d1]
    if second:
        d00 = diff(u, a0, 2).values
        d11 = diff(u, a1, 2).values
        d01 = _diff1_array(d0, u.axis_index(a1), u.geometry.spacing(a1))
        out += [d00, d01, d11]
    return out


def discrete_norm(
    u: ScalarField, region: Region | None = None, kind: NormKind = NormKind.L2
) -> float:
    """Trapezoidal L2 / H1 / H2 norm of a field over an axis-aligned box.

    Sobolev variants are defined for two-axis fields and include derivatives
    along both of the field's own axes (multi-index convention, so the mixed
    second derivative enters once).  Derivatives are formed on the full grid
    first, then restricted, so one-sided stencils only ever sit on true
    domain boundaries.
    """
    sels, w = _region_weights(u.geometry, u.kind, region)
    pieces = [u.values]
    if kind is not NormKind.L2:
        if len(u.axes) != 2:
            raise ValidationError(
                f"{kind.name} norm is defined for two-axis fields, got {u.kind.name}"
            )
        pieces += _surface_derivative_stack(u, second=(kind is NormKind.H2_SURFACE))
    total = 0.0
    for p in pieces:
        q = p[sels]
        total += float(np.sum(w * q * q))
    return math.sqrt(total)
