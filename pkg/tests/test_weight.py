"""Planner tests against hand-derived values.

The worked configuration (unit cross-section, data side HI, ell = delta = 1,
observation block [0.5, 1] x [-0.7, 0.7], lam = 1, margin = 1.1) was solved
by hand with exact rational arithmetic:

    beta  = 2500/2499,  alpha = 1111/1020,
    sigma0 = exp(1/102), sigma1 = 1,  c0 = exp(-2500/2499).
"""

import math

import numpy as np
import pytest

from carleman_lab.errors import ValidationError
from carleman_lab.geometry import CylinderGeometry, GammaSide
from carleman_lab.weight import (
    DMode,
    build_d,
    compute_sigmas,
    decay_integral,
    holder_exponent,
    load_plan_record,
    phi_field,
    plan_parameters,
    plan_report,
    region_family,
)

BETA = 2500.0 / 2499.0
ALPHA = 1111.0 / 1020.0
SIGMA0 = math.exp(1.0 / 102.0)
SIGMA1 = 1.0
C0 = math.exp(-2500.0 / 2499.0)
DELTA0_MAX = math.sqrt(0.5)


def rel(a, b):
    return abs(a - b) / max(abs(b), 1e-300)


# ---- weight base -------------------------------------------------------------


def test_explicit_interval_base_both_sides():
    g_hi = CylinderGeometry(0.0, 1.0, 1.0, 1.0, GammaSide.HI, 21, 9, 11)
    d, report = build_d(g_hi, DMode.EXPLICIT_INTERVAL)
    assert report.ok
    assert d.values[0] == 0.0 and d.values[-1] == 1.0
    g_lo = CylinderGeometry(0.0, 1.0, 1.0, 1.0, GammaSide.LO, 21, 9, 11)
    d2, _ = build_d(g_lo, DMode.EXPLICIT_INTERVAL)
    assert d2.values[0] == 1.0 and d2.values[-1] == 0.0


def test_user_supplied_base_matching_explicit_passes():
    g = CylinderGeometry(0.0, 1.0, 1.0, 1.0, GammaSide.HI, 21, 9, 11)
    d, _ = build_d(g, DMode.USER_SUPPLIED, values=np.linspace(0.0, 1.0, 21))
    assert np.array_equal(d.values, np.linspace(0.0, 1.0, 21))


def test_user_supplied_base_with_flat_spot_is_rejected():
    g = CylinderGeometry(0.0, 1.0, 1.0, 1.0, GammaSide.HI, 21, 9, 11)
    xp = np.linspace(0.0, 1.0, 21)
    with pytest.raises(ValidationError, match="slope") as e:
        build_d(g, DMode.USER_SUPPLIED, values=xp * (1.0 - xp))
    assert "0.5" in str(e.value)


def test_user_supplied_base_must_vanish_opposite_the_data_side():
    g = CylinderGeometry(0.0, 1.0, 1.0, 1.0, GammaSide.HI, 21, 9, 11)
    with pytest.raises(ValidationError, match="vanishes at the endpoint"):
        build_d(g, DMode.USER_SUPPLIED, values=np.linspace(0.5, 1.0, 21))


def test_user_supplied_base_rejects_negative_values():
    g = CylinderGeometry(0.0, 1.0, 1.0, 1.0, GammaSide.HI, 21, 9, 11)
    with pytest.raises(ValidationError, match="nonnegative"):
        build_d(g, DMode.USER_SUPPLIED, values=np.linspace(-0.2, 1.0, 21))


# ---- parameter selection ------------------------------------------------------


def test_plan_matches_hand_derived_values(worked_plan):
    assert rel(worked_plan.beta, BETA) < 1e-12
    assert rel(worked_plan.alpha, ALPHA) < 1e-12
    assert rel(worked_plan.sigma0, SIGMA0) < 1e-12
    assert worked_plan.sigma1 == SIGMA1
    assert rel(worked_plan.c0, C0) < 1e-12
    assert worked_plan.d0 == 0.5 and worked_plan.d1 == 1.0


def test_plan_mirrors_exactly_on_the_other_data_side():
    g = CylinderGeometry(0.0, 1.0, 1.0, 1.0, GammaSide.LO, 21, 17, 21)
    d, _ = build_d(g, DMode.EXPLICIT_INTERVAL)
    plan = plan_parameters(d, (0.0, 0.5), delta0=0.7, lam=1.0, margin=1.1)
    assert rel(plan.beta, BETA) < 1e-12
    assert rel(plan.sigma0, SIGMA0) < 1e-12
    assert plan.sigma1 == SIGMA1


def test_beta_sits_inside_its_open_interval(worked_plan):
    lo = 0.5 / 0.51
    hi = 0.5 / 0.49
    assert lo < worked_plan.beta < hi


def test_alpha_formula(worked_plan):
    want = 1.1 * (1.0 - 0.5 + worked_plan.beta * 0.49) / 1.0
    assert rel(worked_plan.alpha, want) < 1e-14


def test_derived_inequalities_hold_strictly(worked_plan):
    p = worked_plan
    level = p.d0 - p.beta * p.delta0**2
    assert p.d1 - p.beta * p.geometry.delta**2 < level
    assert level > 0
    assert p.d1 - p.alpha * p.geometry.ell**2 < level


def test_delta0_default_takes_most_of_the_bound(worked_geometry):
    d, _ = build_d(worked_geometry, DMode.EXPLICIT_INTERVAL)
    plan = plan_parameters(d, (0.5, 1.0))
    assert rel(plan.delta0, 0.99 * DELTA0_MAX) < 1e-14


def test_delta0_at_or_above_the_bound_is_rejected(worked_geometry):
    d, _ = build_d(worked_geometry, DMode.EXPLICIT_INTERVAL)
    with pytest.raises(ValidationError, match="delta0") as e:
        plan_parameters(d, (0.5, 1.0), delta0=0.75)
    assert repr(DELTA0_MAX) in str(e.value)
    with pytest.raises(ValidationError, match="delta0"):
        plan_parameters(d, (0.5, 1.0), delta0=DELTA0_MAX)


def test_observation_block_must_touch_the_data_side(worked_geometry):
    d, _ = build_d(worked_geometry, DMode.EXPLICIT_INTERVAL)
    with pytest.raises(ValidationError, match="touch the data side"):
        plan_parameters(d, (0.5, 0.9), delta0=0.7)
    with pytest.raises(ValidationError, match="strictly away from the far end"):
        plan_parameters(d, (0.0, 1.0), delta0=0.5)


def test_margin_and_lam_are_validated(worked_geometry):
    d, _ = build_d(worked_geometry, DMode.EXPLICIT_INTERVAL)
    with pytest.raises(ValidationError, match="margin"):
        plan_parameters(d, (0.5, 1.0), delta0=0.7, margin=1.0)
    with pytest.raises(ValidationError, match="lam"):
        plan_parameters(d, (0.5, 1.0), delta0=0.7, lam=0.0)


def test_weight_positivity_failure_names_the_node():
    from carleman_lab.geometry import FieldKind, ScalarField

    g = CylinderGeometry(0.0, 1.0, 1.0, 1.0, GammaSide.HI, 21, 9, 11)
    vals = np.linspace(0.0, 1.0, 21).copy()
    vals[10] = 0.0
    # bypass build_d on purpose: the planner must catch this on its own
    d = ScalarField(g, vals, FieldKind.CROSS_SECTION)
    with pytest.raises(ValidationError, match="not positive on the observation") as e:
        plan_parameters(d, (0.4, 1.0), delta0=0.1)
    assert "0.5" in str(e.value)


def test_aligned_plan_is_stable_under_refinement(worked_plan):
    s0, s1, c0 = compute_sigmas(worked_plan, worked_plan.geometry.refine())
    assert rel(s0, worked_plan.sigma0) < 1e-13
    assert rel(s1, worked_plan.sigma1) < 1e-13
    assert rel(c0, worked_plan.c0) < 1e-13


def test_misaligned_observation_corner_warns(worked_geometry):
    d, _ = build_d(worked_geometry, DMode.EXPLICIT_INTERVAL)
    with pytest.warns(UserWarning, match="refine the grid or align"):
        plan_parameters(d, (0.5231, 1.0), delta0=0.7)


def test_sigma_levels_scale_as_expected_with_lam(worked_plan):
    s0, s1, _ = compute_sigmas(worked_plan, lam=2.0)
    assert rel(s0, worked_plan.sigma0**2) < 1e-12
    assert rel(s1, worked_plan.sigma1**2) < 1e-12
    assert s0 / s1 > worked_plan.sigma0 / worked_plan.sigma1


# ---- region family -------------------------------------------------------------


def test_region_family_accepts_large_collar_for_small_delta1(worked_geometry):
    fam = region_family(worked_geometry, 0.1, 1.0)
    assert fam.epsilon == 0.25
    assert fam.d_tilde == (0.5, 1.0)
    assert fam.d1 == (0.75, 1.0)
    assert fam.plan.sigma1 < fam.plan.sigma0
    assert fam.plan.delta0 == 0.1
    assert not fam.plan.include_far_face


def test_region_family_epsilon_monotone_in_delta1():
    g = CylinderGeometry(0.0, 1.0, 1.0, 1.0, GammaSide.HI, 81, 9, 11)
    eps = [region_family(g, f * g.delta, 1.0).epsilon for f in (0.5, 0.8, 0.95)]
    assert eps[0] >= eps[1] >= eps[2]
    assert eps[2] < eps[0]


def test_region_family_rejects_bad_time_level(worked_geometry):
    with pytest.raises(ValidationError, match="delta1"):
        region_family(worked_geometry, 1.0, 1.0)
    with pytest.raises(ValidationError, match="delta1"):
        region_family(worked_geometry, -0.1, 1.0)


def test_region_family_requires_the_data_side_endpoint(worked_geometry):
    with pytest.raises(ValidationError, match="data-side endpoint"):
        region_family(worked_geometry, 0.5, 0.25)


def test_region_family_fails_when_grid_cannot_resolve_the_collar(worked_geometry):
    # delta1 = 0.95 needs a collar thinner than four cells of this grid
    with pytest.raises(ValidationError, match="no admissible collar"):
        region_family(worked_geometry, 0.95, 1.0)


# ---- decay integral -------------------------------------------------------------


def test_decay_integral_at_zero_strength_is_the_full_length(worked_plan):
    res = decay_integral(worked_plan, 0.0)
    assert res.value == 2.0 * worked_plan.geometry.ell


def test_decay_integral_is_strictly_decreasing_and_dominated(worked_plan):
    prev = None
    for k in range(9):
        res = decay_integral(worked_plan, float(2**k))
        assert res.value <= res.bound + 1e-8
        if prev is not None:
            assert res.value < prev
        prev = res.value


def test_decay_integral_rejects_negative_strength(worked_plan):
    with pytest.raises(ValidationError, match="nonnegative"):
        decay_integral(worked_plan, -1.0)


# ---- exponent and sampling ------------------------------------------------------


def test_holder_exponent_hand_value(worked_plan):
    theta = holder_exponent(worked_plan.sigma0, worked_plan.sigma1, 1.0)
    gap = SIGMA0 - 1.0
    assert rel(theta, gap / (1.0 + gap)) < 1e-12
    assert 0.0 < theta < 1.0


def test_holder_exponent_decreases_with_larger_constant(worked_plan):
    t1 = holder_exponent(worked_plan.sigma0, worked_plan.sigma1, 1.0)
    t2 = holder_exponent(worked_plan.sigma0, worked_plan.sigma1, 10.0)
    assert t2 < t1


def test_holder_exponent_validates_inputs():
    with pytest.raises(ValidationError, match="sigma0 > sigma1"):
        holder_exponent(1.0, 1.0, 1.0)
    with pytest.raises(ValidationError, match="c1"):
        holder_exponent(2.0, 1.0, 0.0)


def test_phi_field_matches_closed_form(worked_plan):
    g = worked_plan.geometry.extend()
    phi = phi_field(worked_plan, g)
    xp = g.axis_nodes("xp")
    xn = g.axis_nodes("xn")
    t = g.axis_nodes("t")
    i, j, k = 5, 3, 14
    want = math.exp(xp[i] - worked_plan.alpha * xn[j] ** 2 - worked_plan.beta * t[k] ** 2)
    assert rel(phi.values[i, j, k], want) < 1e-14


def test_phi_field_rejects_mismatched_extents(worked_plan):
    other = CylinderGeometry(0.0, 2.0, 1.0, 1.0, GammaSide.HI, 21, 17, 21)
    with pytest.raises(ValidationError, match="extents"):
        phi_field(worked_plan, other)


# ---- serialization ----------------------------------------------------------------


def test_plan_report_roundtrips_all_scalars(worked_plan):
    rec = load_plan_record(plan_report(worked_plan))
    for key in ("beta", "alpha", "delta0", "sigma0", "sigma1", "c0", "d0", "d1",
                "lam", "margin", "domain_lo", "domain_hi", "D0_lo", "D0_hi"):
        assert rec[key] == getattr(worked_plan, key)
    assert rec["geometry"] == worked_plan.geometry.fingerprint()
    assert rec["include_far_face"] is True


def test_plan_report_rejects_foreign_text():
    with pytest.raises(ValidationError, match="header"):
        load_plan_record("something else\nbeta = 1.0\n")
