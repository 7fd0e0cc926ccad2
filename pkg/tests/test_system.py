"""Tests for system definitions, time constants, and matrix-class checks."""

import numpy as np
import pytest
from scipy.integrate import quad

from hyperctrl import (
    ConfigurationError,
    PreconditionError,
    SystemSpec,
    augment_system,
    load_system,
    optimal_time,
    time_reversal_dual_system,
)
from hyperctrl.system import (
    BoundaryMatrix,
    CouplingField,
    Speed,
    SpeedProfile,
    check_assumption_B,
    check_B_class,
)


def two_by_two(coupling_kind="zero"):
    profile = SpeedProfile((Speed.constant(1.0), Speed.constant(1.0)), k=1, m=1)
    return SystemSpec.build(profile, CouplingField.zero(profile), [[1.0]])


# ---------------------------------------------------------------------------
# travel times
# ---------------------------------------------------------------------------

def test_travel_time_constant_speeds():
    assert Speed.constant(1.0).travel_time() == pytest.approx(1.0, abs=1e-15)
    assert Speed.constant(2.0).travel_time() == pytest.approx(0.5, abs=1e-15)


def test_travel_time_affine_against_quadrature_oracle():
    oracle, err = quad(lambda x: 1.0 / (1.0 + x), 0.0, 1.0, epsabs=1e-14)
    assert err < 1e-12
    got = Speed.affine(1.0, 1.0).travel_time()
    assert got == pytest.approx(oracle, abs=1e-12)
    assert got == pytest.approx(np.log(2.0), abs=1e-12)


def test_travel_time_grid_matches_closed_form():
    xs = np.linspace(0.0, 1.0, 81)
    grid = Speed.from_grid(xs, 1.0 + xs)
    assert grid.travel_time() == pytest.approx(np.log(2.0), abs=1e-9)


def test_travel_time_reparametrization_invariance():
    # Algebraically equal profiles must agree to 1e-12.
    a = Speed.affine(2.0, 0.0)
    b = Speed.constant(2.0)
    assert a.travel_time() == pytest.approx(b.travel_time(), abs=1e-12)


# ---------------------------------------------------------------------------
# optimal time
# ---------------------------------------------------------------------------

def test_optimal_time_worked_values():
    assert optimal_time([1.0, 1.0], 1, 1) == pytest.approx(2.0, abs=1e-15)
    assert optimal_time([1.0, 1.0, 0.5], 1, 2) == pytest.approx(1.5, abs=1e-15)
    assert optimal_time([1.0, 0.8, 0.5], 2, 1) == pytest.approx(1.3, abs=1e-15)


def test_optimal_time_on_spec_and_russell_time():
    profile = SpeedProfile(
        (Speed.constant(1.0), Speed.constant(1.0), Speed.constant(2.0)), k=1, m=2
    )
    spec = SystemSpec.build(profile, CouplingField.zero(profile), [[1.0, 1.0]])
    assert spec.taus == pytest.approx((1.0, 1.0, 0.5))
    assert spec.t_opt == pytest.approx(1.5)
    assert spec.t_russell == pytest.approx(2.0)


# ---------------------------------------------------------------------------
# speed profile validation
# ---------------------------------------------------------------------------

def test_minus_family_must_decrease():
    with pytest.raises(ConfigurationError):
        SpeedProfile((Speed.constant(1.0), Speed.constant(2.0), Speed.constant(1.0)), k=2, m=1)


def test_plus_family_must_increase():
    with pytest.raises(ConfigurationError):
        SpeedProfile((Speed.constant(1.0), Speed.constant(2.0), Speed.constant(1.5)), k=1, m=2)


def test_pointwise_ordering_checked_inside_interval():
    # The two minus-family profiles cross at x = 2/3 even though the order
    # is correct at x = 0.
    with pytest.raises(ConfigurationError):
        SpeedProfile(
            (Speed.affine(2.0, -1.5), Speed.affine(1.0, 0.5), Speed.constant(3.0)),
            k=2, m=1,
        )


def test_speeds_must_be_positive():
    with pytest.raises(ConfigurationError):
        Speed.constant(-1.0)
    with pytest.raises(ConfigurationError):
        Speed.affine(1.0, -1.0)  # hits zero at x = 1


def test_derivative_vanishes_outside_interval():
    s = Speed.affine(1.0, 1.0)
    assert s.derivative(np.array([-0.5, 0.5, 1.5])) == pytest.approx([0.0, 1.0, 0.0])
    assert s(np.array([-0.5, 1.5])) == pytest.approx([1.0, 2.0])  # constant extension


# ---------------------------------------------------------------------------
# boundary-matrix classes
# ---------------------------------------------------------------------------

def test_b_class_scalar_generic_vacuous():
    assert check_B_class([[5.0]], 1, 1, "generic") is True
    assert check_B_class([[0.0]], 1, 1, "generic") is True  # empty index range


def test_b_class_row_condition_reads_trailing_entry():
    assert check_B_class([[1.0, 0.0]], 1, 2, "row-condition", i=1) is False
    assert check_B_class([[0.0, 1.0]], 1, 2, "row-condition", i=1) is True


def test_b_class_extended_two_by_two():
    assert check_B_class([[1.0, 2.0], [3.0, 4.0]], 2, 2, "extended") is True
    # Trailing 1x1 block vanishes.
    assert check_B_class([[1.0, 2.0], [3.0, 0.0]], 2, 2, "extended") is False
    # Full determinant vanishes.
    assert check_B_class([[2.0, 4.0], [1.0, 2.0]], 2, 2, "extended") is False


def test_b_class_extended_requires_wide_matrix():
    with pytest.raises(PreconditionError):
        check_B_class([[1.0], [1.0]], 2, 1, "extended")


def test_b_class_extended_implies_generic():
    rng = np.random.default_rng(7)
    for _ in range(50):
        k = int(rng.integers(1, 4))
        m = int(rng.integers(k, 5))
        B = rng.standard_normal((k, m))
        if check_B_class(B, k, m, "extended"):
            assert check_B_class(B, k, m, "generic")


def test_assumption_b():
    assert check_assumption_B([[1.0, 1.0]], 1, 2, ell=2) is True
    assert check_assumption_B([[1.0, 1.0, 0.5]], 1, 3, ell=2) is False
    assert check_assumption_B([[2.0, 0.0, 5.0]], 1, 3, ell=3) is True
    with pytest.raises(PreconditionError):
        check_assumption_B([[1.0, 1.0]], 1, 2, ell=3)


# ---------------------------------------------------------------------------
# time reversal
# ---------------------------------------------------------------------------

def test_time_reversal_scalar():
    profile = SpeedProfile((Speed.constant(1.0), Speed.constant(1.0)), k=1, m=1)
    spec = SystemSpec.build(profile, CouplingField.zero(profile), [[2.0]])
    rev = time_reversal_dual_system(spec, T=2.0)
    assert rev.B == pytest.approx(np.array([[0.5]]))


def test_time_reversal_identity_and_involution():
    profile = SpeedProfile(
        (Speed.constant(3.0), Speed.constant(2.0), Speed.constant(2.0), Speed.constant(3.0)),
        k=2, m=2,
    )
    B = np.array([[2.0, 1.0], [1.0, 1.0]])
    spec = SystemSpec.build(profile, CouplingField.zero(profile), B)
    rev = time_reversal_dual_system(spec, T=1.0)
    P = np.eye(2)[::-1]
    assert rev.B == pytest.approx(np.linalg.inv(P @ B @ P))
    back = time_reversal_dual_system(rev, T=1.0)
    assert back.B == pytest.approx(B, abs=1e-12)


def test_time_reversal_flips_speed_families():
    profile = SpeedProfile(
        (Speed.constant(3.0), Speed.constant(1.0), Speed.constant(2.0), Speed.constant(4.0)),
        k=2, m=2,
    )
    spec = SystemSpec.build(profile, CouplingField.zero(profile), np.eye(2))
    rev = time_reversal_dual_system(spec, T=1.0)
    assert [s.value for s in rev.speeds.speeds] == [4.0, 2.0, 1.0, 3.0]


def test_time_reversal_transforms_coupling():
    profile = SpeedProfile((Speed.constant(1.0), Speed.constant(1.0)), k=1, m=1)
    C0 = np.array([[0.0, 1.0], [2.0, 0.0]])

    field = CouplingField.closed_form(
        profile, lambda t, x: np.broadcast_to(t * C0, (x.size, 2, 2)).copy()
    )
    spec = SystemSpec.build(profile, field, [[1.0]])
    rev = time_reversal_dual_system(spec, T=2.0)
    got = rev.coupling.C(0.5, 0.3)
    want = -(1.5 * C0)[::-1, ::-1]
    assert got == pytest.approx(want, abs=1e-14)


def test_time_reversal_requires_square_invertible():
    profile = SpeedProfile(
        (Speed.constant(1.0), Speed.constant(1.0), Speed.constant(2.0)), k=1, m=2
    )
    spec = SystemSpec.build(profile, CouplingField.zero(profile), [[1.0, 1.0]])
    with pytest.raises(PreconditionError):
        time_reversal_dual_system(spec, T=2.0)
    profile2 = SpeedProfile((Speed.constant(1.0), Speed.constant(1.0)), k=1, m=1)
    spec2 = SystemSpec.build(profile2, CouplingField.zero(profile2), [[0.0]])
    with pytest.raises(PreconditionError):
        time_reversal_dual_system(spec2, T=2.0)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def test_augment_basic_shape_and_speed():
    profile = SpeedProfile(
        (Speed.constant(1.0), Speed.constant(1.0), Speed.constant(2.0)), k=1, m=2
    )
    spec = SystemSpec.build(profile, CouplingField.zero(profile), [[0.7, 1.3]])
    out = augment_system(spec, eps=0.01)
    assert (out.k, out.m) == (2, 2)
    assert out.speeds.speeds[0].value == pytest.approx(100.0)
    assert out.B == pytest.approx(np.array([[1.0, 0.0], [0.7, 1.3]]))


def test_augment_optimal_time_bracket():
    profile = SpeedProfile(
        (Speed.constant(1.0), Speed.constant(1.0), Speed.constant(2.0)), k=1, m=2
    )
    spec = SystemSpec.build(profile, CouplingField.zero(profile), [[1.0, 1.0]])
    assert spec.t_opt == pytest.approx(1.5)
    gaps = []
    for eps in (1e-2, 1e-3):
        out = augment_system(spec, eps)
        gap = out.t_opt - spec.t_opt
        assert 0.0 <= gap <= (spec.m - spec.k) * eps + 1e-15
        gaps.append(gap)
    assert gaps[1] <= gaps[0] + 1e-15  # approach is monotone in eps


def test_augment_guards():
    spec = two_by_two()
    with pytest.raises(PreconditionError):
        augment_system(spec, eps=0.01)  # m = k
    profile = SpeedProfile(
        (Speed.constant(1.0), Speed.constant(1.0), Speed.constant(2.0)), k=1, m=2
    )
    wide = SystemSpec.build(profile, CouplingField.zero(profile), [[1.0, 1.0]])
    with pytest.raises(PreconditionError):
        augment_system(wide, eps=2.0)  # artificial speed 0.5 slower than lambda_1


def test_augment_pads_coupling_with_zero_blocks():
    profile = SpeedProfile(
        (Speed.constant(1.0), Speed.constant(1.0), Speed.constant(2.0)), k=1, m=2
    )
    C0 = np.arange(9.0).reshape(3, 3) + 1.0
    field = CouplingField.closed_form(
        profile, lambda t, x: np.broadcast_to(C0, (x.size, 3, 3)).copy()
    )
    spec = SystemSpec.build(profile, field, [[1.0, 1.0]])
    out = augment_system(spec, eps=0.01)
    got = out.coupling.C(0.3, 0.4)
    assert got.shape == (4, 4)
    assert got[1:, 1:] == pytest.approx(C0)
    assert np.all(got[0, :] == 0.0) and np.all(got[:, 0] == 0.0)


# ---------------------------------------------------------------------------
# coupling fields
# ---------------------------------------------------------------------------

def test_cbold_combines_sigma_prime_and_transpose():
    profile = SpeedProfile((Speed.affine(2.0, -0.5), Speed.affine(1.0, 1.0)), k=1, m=1)
    C0 = np.array([[0.1, 0.2], [0.3, 0.4]])
    field = CouplingField.closed_form(
        profile, lambda t, x: np.broadcast_to(C0, (x.size, 2, 2)).copy()
    )
    got = field.cbold(0.0, 0.5)
    # Sigma = diag(-lambda_1, lambda_2), so Sigma' = diag(0.5, 1.0) here.
    want = np.diag([0.5, 1.0]) - C0.T
    assert got == pytest.approx(want, abs=1e-14)


def test_poly_coupling_horner():
    profile = SpeedProfile((Speed.constant(1.0), Speed.constant(1.0)), k=1, m=1)
    coeffs = np.zeros((2, 2, 2))
    coeffs[0, 0, 1] = 0.4
    coeffs[1, 0, 1] = -0.15
    field = CouplingField.poly_t(profile, coeffs)
    assert field.C(2.0, 0.3)[0, 1] == pytest.approx(0.4 - 0.15 * 2.0)
    assert field.C(2.0, 0.3)[1, 0] == 0.0


def test_grid_coupling_interpolates_bilinearly():
    profile = SpeedProfile((Speed.constant(1.0), Speed.constant(1.0)), k=1, m=1)
    tg = np.array([0.0, 1.0])
    xg = np.array([0.0, 1.0])
    vals = np.zeros((2, 2, 2, 2))
    vals[:, :, 0, 1] = [[0.0, 1.0], [2.0, 3.0]]  # value = 2t + x at corners
    field = CouplingField.from_grid(profile, tg, xg, vals)
    assert field.C(0.5, 0.25)[0, 1] == pytest.approx(2 * 0.5 + 0.25)
    # Constant extension outside the box.
    assert field.C(5.0, 0.0)[0, 1] == pytest.approx(2.0)


def test_bound_samples_sup_norm():
    profile = SpeedProfile((Speed.constant(1.0), Speed.constant(1.0)), k=1, m=1)
    field = CouplingField.zero(profile)
    assert field.bound(0.0, 1.0, which="C") == 0.0
    assert field.bound(0.0, 1.0, which="cbold") == 0.0


# ---------------------------------------------------------------------------
# JSON loading
# ---------------------------------------------------------------------------

def test_load_system_roundtrip(tmp_path):
    cfg = {
        "k": 1,
        "m": 2,
        "speeds": [
            {"kind": "affine", "a": 1.0, "b": 1.0},
            {"kind": "const", "value": 1.0},
            {"kind": "const", "value": 2.0},
        ],
        "B": [[1.0, 1.0]],
        "coupling": {"kind": "zero"},
    }
    path = tmp_path / "sys.json"
    path.write_text(__import__("json").dumps(cfg))
    spec = load_system(path)
    assert (spec.k, spec.m) == (1, 2)
    assert spec.taus[0] == pytest.approx(np.log(2.0), abs=1e-12)
    assert spec.coupling.is_zero


def test_load_system_validates(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigurationError):
        load_system(bad)
    with pytest.raises(ConfigurationError):
        load_system({"k": 1, "m": 1, "speeds": [{"kind": "const", "value": 1.0}],
                     "B": [[1.0]]})  # wrong speed count
    with pytest.raises(ConfigurationError):
        load_system({"k": 1, "m": 1,
                     "speeds": [{"kind": "const", "value": 1.0},
                                {"kind": "warp", "value": 1.0}],
                     "B": [[1.0]]})


def test_load_system_poly_coupling():
    spec = load_system({
        "k": 1, "m": 1,
        "speeds": [{"kind": "const", "value": 1.0}, {"kind": "const", "value": 1.0}],
        "B": [[1.0]],
        "coupling": {"kind": "closed-form", "id": "poly-t",
                     "entries": [{"i": 1, "j": 2, "coeffs": [0.4, -0.15]},
                                 {"i": 2, "j": 1, "coeffs": [0.3, 0.1]}]},
    })
    assert spec.coupling.C(1.0, 0.5)[0, 1] == pytest.approx(0.25)
    assert spec.coupling.C(1.0, 0.5)[1, 0] == pytest.approx(0.4)
