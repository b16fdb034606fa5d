"""Source-factor recovery from full fields and from lateral data only.

Two reconstructors live here.  The oracle one applies the face identity
f * R = -dnn(u) at x_n = 0 and needs the full field, so it mainly serves as
a convergence reference.  The lateral one sees only the boundary bundle and
solves a regularized least-squares problem for the pair (u, f) jointly:
PDE residual rows (optionally Carleman-weighted), Cauchy mismatch rows on
the data side, zero-trace rows at x_n = 0, and Tikhonov rows.  The normal
equations are solved by preconditioned conjugate gradients after Jacobi
column scaling; the preconditioner is a sparse factorization of the normal
matrix, which the squared conditioning of the sideways problem makes
necessary (unpreconditioned iterations stall).

The matrix depends on the data bundle in no way, so ``LateralOperator``
factors it once and solves any number of bundles against it; the stability
sweep leans on that to rerun the solver across noise levels and fit an
empirical Holder exponent from the decreasing part of the error curve.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import IO, Mapping

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import SolverError, ValidationError
from .geometry import (
    CylinderGeometry,
    Face,
    FieldKind,
    NormKind,
    Region,
    ScalarField,
    discrete_norm,
    dxn2,
    quadrature_weights,
    time_slice,
    trace,
)
from .problems import (
    BUNDLE_CHANNELS,
    BoundaryBundle,
    ProblemInstance,
    add_noise,
    compute_data_functional,
)
from .weight import WeightPlan, phi_field

__all__ = [
    "oracle_trace_reconstruct",
    "Regularization",
    "LateralSolution",
    "LateralOperator",
    "assemble_lateral_system",
    "lateral_reconstruct",
    "SweepRow",
    "SweepReport",
    "stability_sweep",
    "CorollaryReport",
    "corollary_check",
    "write_sweep_csv",
    "load_sweep_csv",
]


# ---- oracle reconstruction --------------------------------------------------------


def oracle_trace_reconstruct(
    u: ScalarField, R: ScalarField, r_min: float = 1e-8
) -> ScalarField:
    """Recover f from the full field via the face identity f*R = -dnn(u).

    Uses the one-sided second-derivative stencil at x_n = 0, so the result
    is exact whenever the axial profile of u is cubic or lower there.
    """
    if u.kind is not FieldKind.SPACE_TIME or R.kind is not FieldKind.SPACE_TIME:
        raise ValidationError("oracle reconstruction expects SPACE_TIME fields")
    if u.geometry != R.geometry:
        raise ValidationError("u and R live on different grids")
    if u.geometry.extended:
        raise ValidationError("oracle reconstruction runs on the physical half-cylinder")
    r_face = trace(R, Face.XN_ZERO)
    floor = float(np.min(np.abs(r_face.values)))
    if floor < r_min:
        raise ValidationError(
            f"|R| drops to {floor:.3e} at the x_n = 0 face, below the floor {r_min:.3e}"
        )
    unn_face = trace(dxn2(u), Face.XN_ZERO)
    return unn_face.with_values(-unn_face.values / r_face.values)


# ---- lateral least squares --------------------------------------------------------


@dataclass(frozen=True)
class Regularization:
    """Parameters of the lateral least-squares solve.

    ``tikhonov_weight`` is the classical penalty on f and on grad(u);
    ``carleman_s`` switches the PDE rows to the weighted misfit (0 keeps the
    plain Tikhonov formulation); ``cauchy_weight`` and ``face_weight`` scale
    the data-side and zero-trace row blocks.
    """

    tikhonov_weight: float
    carleman_s: float = 0.0
    cg_tol: float = 1e-8
    cg_maxit: int = 10000
    cauchy_weight: float = 100.0
    face_weight: float = 100.0

    def __post_init__(self):
        if not (self.tikhonov_weight > 0 and math.isfinite(self.tikhonov_weight)):
            raise ValidationError(
                f"tikhonov_weight must be positive, got {self.tikhonov_weight!r}"
            )
        if not (self.carleman_s >= 0 and math.isfinite(self.carleman_s)):
            raise ValidationError(f"carleman_s must be nonnegative, got {self.carleman_s!r}")
        if not (0 < self.cg_tol < 1):
            raise ValidationError(f"cg_tol must lie in (0, 1), got {self.cg_tol!r}")
        if self.cg_maxit < 1:
            raise ValidationError(f"cg_maxit must be at least 1, got {self.cg_maxit!r}")
        if not (self.cauchy_weight > 0 and self.face_weight > 0):
            raise ValidationError("cauchy_weight and face_weight must be positive")


def _d1_matrix(n: int, h: float) -> sp.csr_matrix:
    """Sparse first-derivative matrix matching the grid module's stencils."""
    m = sp.lil_matrix((n, n))
    inv = 1.0 / (2.0 * h)
    for i in range(1, n - 1):
        m[i, i - 1] = -inv
        m[i, i + 1] = inv
    m[0, 0], m[0, 1], m[0, 2] = -3.0 * inv, 4.0 * inv, -inv
    m[n - 1, n - 1], m[n - 1, n - 2], m[n - 1, n - 3] = 3.0 * inv, -4.0 * inv, inv
    return m.tocsr()


def _d2_matrix(n: int, h: float) -> sp.csr_matrix:
    """Sparse second-derivative matrix matching the grid module's stencils."""
    m = sp.lil_matrix((n, n))
    inv = 1.0 / (h * h)
    for i in range(1, n - 1):
        m[i, i - 1] = inv
        m[i, i] = -2.0 * inv
        m[i, i + 1] = inv
    m[0, 0], m[0, 1], m[0, 2], m[0, 3] = 2.0 * inv, -5.0 * inv, 4.0 * inv, -inv
    m[n - 1, n - 1], m[n - 1, n - 2], m[n - 1, n - 3], m[n - 1, n - 4] = (
        2.0 * inv,
        -5.0 * inv,
        4.0 * inv,
        -inv,
    )
    return m.tocsr()


def _unit_row(n: int, idx: int) -> sp.csr_matrix:
    row = sp.lil_matrix((1, n))
    row[0, idx] = 1.0
    return row.tocsr()


def _check_lateral_inputs(
    bundle: BoundaryBundle,
    geometry: CylinderGeometry,
    p0: ScalarField,
    R: ScalarField,
):
    if geometry.extended:
        raise ValidationError("lateral reconstruction runs on the physical half-cylinder")
    if bundle.y.geometry != geometry:
        raise ValidationError("bundle grid does not match the reconstruction grid")
    if p0.kind is not FieldKind.CROSS_SECTION_TIME or p0.geometry != geometry:
        raise ValidationError("p0 must be a CROSS_SECTION_TIME field on the same grid")
    if R.kind is not FieldKind.SPACE_TIME or R.geometry != geometry:
        raise ValidationError("R must be a SPACE_TIME field on the same grid")


def _lateral_matrix(
    geometry: CylinderGeometry,
    plan: WeightPlan,
    p0: ScalarField,
    R: ScalarField,
    reg: Regularization,
) -> sp.csr_matrix:
    """Matrix of the joint least-squares system over z = (u, f).

    Row blocks, each carrying the square root of its trapezoid weights:

    * PDE residual dt(u) - lap(u) - p0*u - R*f on the whole cylinder,
      multiplied by the shifted Carleman factor e^(s(phi - max phi));
    * Cauchy mismatch of every bundle channel on the data side;
    * value and normal-derivative rows at the x_n = 0 face;
    * Tikhonov rows sqrt(mu)*f and sqrt(mu)*grad(u).

    Nothing here reads the data bundle; it only fixes the rhs layout.
    """
    g = geometry
    nxp, nxn, nt = g.nx_prime, g.nx_n, g.nt
    nq = nxp * nxn * nt
    nf = nxp * nt

    d1p = _d1_matrix(nxp, g.spacing("xp"))
    d1n = _d1_matrix(nxn, g.spacing("xn"))
    d1t = _d1_matrix(nt, g.spacing("t"))
    d2p = _d2_matrix(nxp, g.spacing("xp"))
    d2n = _d2_matrix(nxn, g.spacing("xn"))
    d2t = _d2_matrix(nt, g.spacing("t"))
    i_p, i_n, i_t = sp.identity(nxp), sp.identity(nxn), sp.identity(nt)

    dxp_v = sp.kron(d1p, sp.kron(i_n, i_t), format="csr")
    dxn_v = sp.kron(i_p, sp.kron(d1n, i_t), format="csr")
    dt_v = sp.kron(i_p, sp.kron(i_n, d1t), format="csr")
    dxp2_v = sp.kron(d2p, sp.kron(i_n, i_t), format="csr")
    dxn2_v = sp.kron(i_p, sp.kron(d2n, i_t), format="csr")
    dt2_v = sp.kron(i_p, sp.kron(i_n, d2t), format="csr")

    gamma_idx = 0 if g.gamma_side.name == "LO" else nxp - 1
    t_gamma = sp.kron(_unit_row(nxp, gamma_idx), sp.kron(i_n, i_t), format="csr")
    t_zero = sp.kron(i_p, sp.kron(_unit_row(nxn, g.xn_zero_index), i_t), format="csr")

    # PDE block with the shifted exponential weight (identically 1 at s = 0)
    phi = phi_field(plan, g).values
    eh = np.exp(reg.carleman_s * (phi - np.max(phi))).ravel()
    wq = np.sqrt(quadrature_weights(g, FieldKind.SPACE_TIME).ravel())
    p0_vol = np.broadcast_to(p0.values[:, None, :], (nxp, nxn, nt)).ravel()
    heat = dt_v - dxp2_v - dxn2_v - sp.diags(p0_vol)
    idx = np.indices((nxp, nxn, nt))
    f_cols = (idx[0] * nt + idx[2]).ravel()
    r_map = sp.csr_matrix(
        (R.values.ravel(), (np.arange(nq), f_cols)), shape=(nq, nf)
    )
    pde_w = sp.diags(wq * eh)
    blocks = [[pde_w @ heat, -(pde_w @ r_map)]]

    # Cauchy mismatch rows, one block per recorded channel
    y_op = dxn_v
    channel_ops = {
        "y": t_gamma @ y_op,
        "y_xp": t_gamma @ (dxp_v @ y_op),
        "y_xn": t_gamma @ (dxn_v @ y_op),
        "y_t": t_gamma @ (dt_v @ y_op),
        "y_xnxn": t_gamma @ (dxn2_v @ y_op),
        "y_xnt": t_gamma @ (dt_v @ (dxn_v @ y_op)),
        "y_tt": t_gamma @ (dt2_v @ y_op),
    }
    w_face = np.sqrt(quadrature_weights(g, FieldKind.AXIAL_TIME).ravel())
    cauchy_scale = sp.diags(math.sqrt(reg.cauchy_weight) * w_face)
    for name in BUNDLE_CHANNELS:
        blocks.append([cauchy_scale @ channel_ops[name], None])

    # zero Cauchy data at the x_n = 0 face
    w0 = np.sqrt(quadrature_weights(g, FieldKind.CROSS_SECTION_TIME).ravel())
    face_scale = sp.diags(math.sqrt(reg.face_weight) * w0)
    blocks.append([face_scale @ t_zero, None])
    blocks.append([face_scale @ (t_zero @ dxn_v), None])

    # Tikhonov rows
    sqrt_mu = math.sqrt(reg.tikhonov_weight)
    blocks.append([None, sp.diags(sqrt_mu * w0)])
    blocks.append([sp.diags(sqrt_mu * wq) @ dxp_v, None])
    blocks.append([sp.diags(sqrt_mu * wq) @ dxn_v, None])

    return sp.bmat(blocks, format="csr")


def _lateral_rhs(
    bundle: BoundaryBundle, geometry: CylinderGeometry, reg: Regularization
) -> np.ndarray:
    """Right-hand side matching the row layout of ``_lateral_matrix``."""
    g = geometry
    nq = g.nx_prime * g.nx_n * g.nt
    nf = g.nx_prime * g.nt
    w_face = np.sqrt(quadrature_weights(g, FieldKind.AXIAL_TIME).ravel())
    sqrt_wc = math.sqrt(reg.cauchy_weight)
    rhs = [np.zeros(nq)]
    for name in BUNDLE_CHANNELS:
        rhs.append(sqrt_wc * w_face * getattr(bundle, name).values.ravel())
    rhs.extend([np.zeros(nf)] * 3)
    rhs.extend([np.zeros(nq)] * 2)
    return np.concatenate(rhs)


def assemble_lateral_system(
    bundle: BoundaryBundle,
    geometry: CylinderGeometry,
    plan: WeightPlan,
    p0: ScalarField,
    R: ScalarField,
    reg: Regularization,
) -> tuple[sp.csr_matrix, np.ndarray]:
    """Build the least-squares system min ||A z - b|| over z = (u, f)."""
    _check_lateral_inputs(bundle, geometry, p0, R)
    a = _lateral_matrix(geometry, plan, p0, R, reg)
    b = _lateral_rhs(bundle, geometry, reg)
    return a, b


@dataclass(frozen=True)
class LateralSolution:
    """Joint least-squares solution; iterates like the pair (u_hat, f_hat)."""

    u_hat: ScalarField
    f_hat: ScalarField
    iterations: int
    residual_history: tuple

    def __iter__(self):
        yield self.u_hat
        yield self.f_hat


class LateralOperator:
    """The lateral system bound to one (geometry, plan, p0, R, reg) tuple.

    The matrix never sees the data bundle, so the normal equations are formed
    and factored once here and any number of bundles can be solved against
    the same factorization; a stability sweep reuses one operator for every
    noise level.  The factorization serves as the preconditioner of conjugate
    gradients on the normal equations: the sideways problem squares badly
    enough that unpreconditioned iterations make no headway, while CG on top
    of the factorization still enforces ``cg_tol`` in exact arithmetic terms.
    """

    def __init__(
        self,
        geometry: CylinderGeometry,
        plan: WeightPlan,
        p0: ScalarField,
        R: ScalarField,
        reg: Regularization,
    ):
        if geometry.extended:
            raise ValidationError(
                "lateral reconstruction runs on the physical half-cylinder"
            )
        if p0.kind is not FieldKind.CROSS_SECTION_TIME or p0.geometry != geometry:
            raise ValidationError("p0 must be a CROSS_SECTION_TIME field on the same grid")
        if R.kind is not FieldKind.SPACE_TIME or R.geometry != geometry:
            raise ValidationError("R must be a SPACE_TIME field on the same grid")
        self.geometry = geometry
        self.reg = reg
        a = _lateral_matrix(geometry, plan, p0, R, reg)
        col_norms = np.sqrt(np.asarray(a.multiply(a).sum(axis=0)).ravel())
        col_norms[col_norms == 0.0] = 1.0
        self._col_norms = col_norms
        self._a_scaled = (a @ sp.diags(1.0 / col_norms)).tocsr()
        normal = (self._a_scaled.T @ self._a_scaled).tocsc()
        self._normal = normal
        self._factor = splu(
            normal,
            permc_spec="COLAMD",
            diag_pivot_thresh=0.0,
            options={"SymmetricMode": True},
        )

    def _pcg(self, rhs: np.ndarray) -> tuple[np.ndarray, int, list[float]]:
        """Preconditioned CG on the normal equations; residual norms recorded."""
        tol, maxit = self.reg.cg_tol, self.reg.cg_maxit
        norm0 = float(np.linalg.norm(rhs))
        if norm0 == 0.0:
            return np.zeros(len(rhs)), 0, [0.0]
        y = np.zeros(len(rhs))
        r = rhs.copy()
        z = self._factor.solve(r)
        p = z.copy()
        rho = float(r @ z)
        history = [norm0]
        for it in range(1, maxit + 1):
            q = self._normal @ p
            alpha = rho / float(p @ q)
            y += alpha * p
            r -= alpha * q
            res = float(np.linalg.norm(r))
            history.append(res)
            if res <= tol * norm0:
                return y, it, history
            z = self._factor.solve(r)
            rho_new = float(r @ z)
            p = z + (rho_new / rho) * p
            rho = rho_new
        raise SolverError(
            f"conjugate gradients did not converge in {maxit} iterations; "
            f"final relative normal residual {history[-1] / norm0:.3e}"
        )

    def solve(self, bundle: BoundaryBundle) -> LateralSolution:
        """Solve the joint least-squares problem for one data bundle."""
        if bundle.y.geometry != self.geometry:
            raise ValidationError("bundle grid does not match the reconstruction grid")
        b = _lateral_rhs(bundle, self.geometry, self.reg)
        y, iters, history = self._pcg(self._a_scaled.T @ b)
        z = y / self._col_norms
        g = self.geometry
        nq = g.nx_prime * g.nx_n * g.nt
        u_hat = ScalarField(
            g, z[:nq].reshape(g.nx_prime, g.nx_n, g.nt), FieldKind.SPACE_TIME
        )
        f_hat = ScalarField(
            g, z[nq:].reshape(g.nx_prime, g.nt), FieldKind.CROSS_SECTION_TIME
        )
        return LateralSolution(
            u_hat=u_hat, f_hat=f_hat, iterations=iters, residual_history=tuple(history)
        )


def lateral_reconstruct(
    bundle: BoundaryBundle,
    geometry: CylinderGeometry,
    plan: WeightPlan,
    p0: ScalarField,
    R: ScalarField,
    reg: Regularization,
) -> LateralSolution:
    """Recover (u, f) from the lateral bundle alone.

    Deterministic for fixed inputs: the system is assembled in a fixed row
    order, Jacobi column scaling uses exact column norms, the factorization
    is deterministic, and CG starts from zero.
    """
    return LateralOperator(geometry, plan, p0, R, reg).solve(bundle)


# ---- stability sweep --------------------------------------------------------------


@dataclass(frozen=True)
class SweepRow:
    noise: float
    d_of_u: float
    err_region: float
    err_global: float


@dataclass(frozen=True)
class SweepReport:
    rows: tuple
    theta_emp: float
    theta_formula_inputs: tuple
    plan: WeightPlan
    noiseless_f_hat: ScalarField | None


def stability_region(plan: WeightPlan) -> Region:
    """The box D0 x (-delta0, delta0) on which stability is claimed."""
    return Region(xp=(plan.D0_lo, plan.D0_hi), t=(-plan.delta0, plan.delta0))


def _sweep_errors(
    f_hat: ScalarField, f_true: ScalarField, plan: WeightPlan
) -> tuple[float, float]:
    diff = f_hat.with_values(f_hat.values - f_true.values)
    err_region = discrete_norm(diff, region=stability_region(plan))
    err_global = discrete_norm(diff)
    return err_region, err_global


def stability_sweep(
    instance: ProblemInstance,
    noise_levels,
    plan: WeightPlan,
    reg: Regularization,
    seed: int = 0,
) -> SweepReport:
    """Rerun the lateral solver across noise levels and fit the error slope.

    Levels are processed in decreasing order (a single 0.0 level is allowed
    and lands last).  The empirical exponent is the least-squares slope of
    log err_region against log D(u) over the rows where err_region dropped
    relative to the previous row; fewer than three such rows leave the fit
    degenerate and raise.  Noise draws derive from ``seed`` plus the row
    index, so a sweep is reproducible end to end.
    """
    levels = [float(x) for x in noise_levels]
    if len(levels) < 4:
        raise ValidationError(f"need at least 4 noise levels, got {len(levels)}")
    if any(x < 0 for x in levels):
        raise ValidationError("noise levels must be nonnegative")
    if len(set(levels)) != len(levels):
        raise ValidationError("noise levels must be distinct")
    positive = [x for x in levels if x > 0]
    if len(positive) < 2 or max(positive) / min(positive) < 99.99:
        raise ValidationError("positive noise levels must span at least two decades")
    levels.sort(reverse=True)

    operator = LateralOperator(instance.geometry, plan, instance.p0, instance.R, reg)
    rows = []
    noiseless_f_hat = None
    for i, level in enumerate(levels):
        noisy = add_noise(instance, level, seed=seed + i)
        sol = operator.solve(noisy.data)
        err_region, err_global = _sweep_errors(sol.f_hat, instance.f, plan)
        if err_region > err_global:
            raise SolverError(
                f"region error {err_region!r} exceeds global error {err_global!r} "
                f"at noise level {level!r}"
            )
        rows.append(
            SweepRow(
                noise=level,
                d_of_u=compute_data_functional(noisy),
                err_region=err_region,
                err_global=err_global,
            )
        )
        if level == 0.0:
            noiseless_f_hat = sol.f_hat

    decreasing = [
        i for i in range(1, len(rows)) if rows[i].err_region < rows[i - 1].err_region
    ]
    if len(decreasing) < 3:
        raise SolverError(
            f"degenerate fit: only {len(decreasing)} rows show decreasing region error"
        )
    log_d = np.log([rows[i].d_of_u for i in decreasing])
    log_e = np.log([rows[i].err_region for i in decreasing])
    theta_emp = float(np.polyfit(log_d, log_e, 1)[0])
    return SweepReport(
        rows=tuple(rows),
        theta_emp=theta_emp,
        theta_formula_inputs=(plan.sigma0, plan.sigma1),
        plan=plan,
        noiseless_f_hat=noiseless_f_hat,
    )


# ---- corollary slice check --------------------------------------------------------


@dataclass(frozen=True)
class CorollaryReport:
    slice_error: float
    slice_error_rel: float
    region_error: float
    region_error_rel: float

    @property
    def ok(self) -> bool:
        return self.slice_error_rel <= 2.0 * self.region_error_rel


def corollary_check(sweep: SweepReport, instance: ProblemInstance) -> CorollaryReport:
    """Compare the t = 0 slice error of the noiseless row to the region error.

    The slice sits at the center of the stability window, so its relative
    error should not exceed twice the relative error over the whole region.
    Relative errors are used because the two norms live on domains of
    different dimension.
    """
    if sweep.noiseless_f_hat is None:
        raise ValidationError("sweep carries no noiseless row; rerun with level 0.0")
    plan = sweep.plan
    region = stability_region(plan)
    xp_only = Region(xp=(plan.D0_lo, plan.D0_hi))
    diff = sweep.noiseless_f_hat.with_values(
        sweep.noiseless_f_hat.values - instance.f.values
    )
    slice_error = discrete_norm(time_slice(diff, 0.0), region=xp_only)
    slice_scale = discrete_norm(time_slice(instance.f, 0.0), region=xp_only)
    noiseless_row = next(r for r in sweep.rows if r.noise == 0.0)
    region_scale = discrete_norm(instance.f, region=region)
    return CorollaryReport(
        slice_error=slice_error,
        slice_error_rel=slice_error / slice_scale,
        region_error=noiseless_row.err_region,
        region_error_rel=noiseless_row.err_region / region_scale,
    )


# ---- CSV round trip ---------------------------------------------------------------

_CSV_HEADER = "noise,D_u,err_region,err_global"


def write_sweep_csv(
    report: SweepReport, stream: IO[str], footer: Mapping[str, str] | None = None
) -> None:
    """Emit the sweep as CSV with a key=value footer block.

    Floats are written with repr so rereading reproduces them bit for bit;
    line endings are plain newlines regardless of platform.
    """
    stream.write(_CSV_HEADER + "\n")
    for row in report.rows:
        stream.write(
            f"{row.noise!r},{row.d_of_u!r},{row.err_region!r},{row.err_global!r}\n"
        )
    stream.write(f"theta_emp={report.theta_emp!r}\n")
    for key, value in (footer or {}).items():
        stream.write(f"{key}={value}\n")


def load_sweep_csv(stream: IO[str]) -> tuple[list[SweepRow], dict]:
    """Parse a sweep CSV back into rows plus the footer mapping."""
    header = stream.readline().strip()
    if header != _CSV_HEADER:
        raise ValidationError(f"unexpected CSV header {header!r}")
    rows = []
    footer: dict = {}
    for line in stream:
        line = line.strip()
        if not line:
            continue
        if "=" in line and "," not in line:
            key, _, value = line.partition("=")
            footer[key] = value
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise ValidationError(f"malformed CSV row {line!r}")
        noise, d_of_u, err_region, err_global = map(float, parts)
        rows.append(SweepRow(noise, d_of_u, err_region, err_global))
    if "theta_emp" in footer:
        footer["theta_emp"] = float(footer["theta_emp"])
    return rows, footer
