"""Tests for the control/observation duality layer."""

import numpy as np
import pytest

from hyperctrl.duality import (
    PairingReport,
    adjoint_identity_check,
    adjoint_map,
    forward_map,
    pairing_battery,
    pairing_check,
    random_smooth_data,
    trap_inner,
    trap_norm,
)
from hyperctrl.errors import PreconditionError
from hyperctrl.system import (
    BoundaryMatrix,
    CouplingField,
    Speed,
    SpeedProfile,
    SystemSpec,
)


def bump(s, lo, hi):
    s = np.asarray(s, dtype=float)
    y = (s - lo) / (hi - lo)
    out = np.zeros_like(y)
    inside = (y > 0.0) & (y < 1.0)
    yi = y[inside]
    out[inside] = np.exp(1.0 - 1.0 / (4.0 * yi * (1.0 - yi)))
    return out


def make_2x2(b=0.8, c1=0.0, c2=0.0):
    prof = SpeedProfile((Speed.constant(1.0), Speed.constant(1.0)), k=1, m=1)
    if c1 == 0.0 and c2 == 0.0:
        coupling = CouplingField.zero(prof)
    else:
        coeff = np.zeros((1, 2, 2))
        coeff[0, 0, 1] = c1
        coeff[0, 1, 0] = c2
        coupling = CouplingField.poly_t(prof, coeff)
    return SystemSpec.build(prof, coupling, BoundaryMatrix(np.array([[b]])))


def make_skew3():
    prof = SpeedProfile(
        (Speed.constant(1.0), Speed.constant(1.0), Speed.constant(2.0)), k=1, m=2)

    def cfun(t, x):
        out = np.zeros((x.size, 3, 3))
        out[:, 0, 1] = 0.28 * np.sin(np.pi * x) * np.cos(t)
        out[:, 1, 2] = 0.20 * np.cos(0.5 * np.pi * x)
        out[:, 2, 0] = 0.16 * np.sin(t + x)
        return out

    coupling = CouplingField.closed_form(prof, cfun, label="skew-3")
    return SystemSpec.build(prof, coupling, BoundaryMatrix(np.array([[1.0, 1.0]])))


class TestTrapezoid:
    def test_inner_product_of_sines(self):
        grid = np.linspace(0.0, 1.0, 2001)
        a = np.stack([np.sin(np.pi * grid), np.cos(np.pi * grid)], axis=1)
        b = np.stack([np.sin(np.pi * grid), np.sin(np.pi * grid)], axis=1)
        # int sin^2 = 1/2, int sin cos = 0
        assert trap_inner(grid, a, b) == pytest.approx(0.5, abs=1e-6)

    def test_norm_matches_inner(self):
        grid = np.linspace(0.0, 2.0, 501)
        a = np.stack([grid, 0.0 * grid], axis=1)
        # ||x||_{L^2(0,2)} = sqrt(8/3)
        assert trap_norm(grid, a) == pytest.approx(np.sqrt(8.0 / 3.0), rel=1e-5)

    def test_batch_axis_is_preserved(self):
        grid = np.linspace(0.0, 1.0, 101)
        a = np.ones((101, 2, 3))
        a[:, :, 1] *= 2.0
        a[:, :, 2] *= -1.0
        out = trap_inner(grid, a, a)
        assert out.shape == (3,)
        assert out == pytest.approx([2.0, 8.0, 2.0], rel=1e-12)


class TestForwardAdjointMaps:
    def test_zero_control_gives_zero_state(self):
        spec = make_2x2(c1=0.3, c2=-0.2)
        state = forward_map(spec, 1.0, 64, 48, None, method="characteristic")
        assert np.max(np.abs(state)) < 1e-14

    def test_return_field_variants(self):
        spec = make_2x2()

        def control(t):
            return bump(t, 0.1, 0.6)[:, None]

        fld = forward_map(spec, 1.0, 64, 48, control, method="characteristic",
                          return_field=True)
        assert fld.values.shape == (65, 49, 2)

        def terminal(x):
            return np.stack([bump(x, 0.2, 0.6), bump(x, 0.3, 0.7)], axis=1)

        obs, vfld = adjoint_map(spec, 1.0, 64, 48, terminal,
                                method="characteristic", return_field=True)
        assert obs.shape == (65, 1)
        assert vfld.values.shape == (65, 49, 2)

    def test_observation_is_weighted_plus_trace(self):
        prof = SpeedProfile(
            (Speed.constant(1.0), Speed.constant(1.0), Speed.constant(2.0)),
            k=1, m=2)
        spec = SystemSpec.build(prof, CouplingField.zero(prof),
                                BoundaryMatrix(np.array([[0.4, 0.7]])))

        def terminal(x):
            cols = [bump(x, 0.2, 0.8), bump(x, 0.1, 0.5), bump(x, 0.3, 0.9)]
            return np.stack(cols, axis=1)

        obs, fld = adjoint_map(spec, 0.7, 80, 60, terminal,
                               method="characteristic", return_field=True)
        lam_plus = np.array([1.0, 2.0])
        expect = fld.values[:, -1, 1:] * lam_plus
        assert np.max(np.abs(obs - expect)) < 1e-13


class TestPairingCheck:
    def test_st1_is_conserved_without_control(self):
        spec = make_2x2(c1=0.4, c2=-0.3)

        def u0(x):
            return np.stack([bump(x, 0.1, 0.5), bump(x, 0.4, 0.9)], axis=1)

        def terminal(x):
            return np.stack([bump(x, 0.2, 0.7), bump(x, 0.5, 0.95)], axis=1)

        rep = pairing_check(spec, 0.8, 160, 120, u0, terminal, mode="st1")
        assert rep.mode == "st1"
        assert rep.passed
        assert float(rep.relative) < 1e-6

    def test_mode_alias_matches(self):
        spec = make_2x2()

        def u0(x):
            return np.stack([bump(x, 0.1, 0.5), bump(x, 0.4, 0.9)], axis=1)

        def terminal(x):
            return np.stack([bump(x, 0.2, 0.7), bump(x, 0.5, 0.95)], axis=1)

        rep = pairing_check(spec, 0.8, 96, 72, u0, terminal, mode="controlled-u")
        assert rep.mode == "st1"
        assert rep.passed

    def test_st1_rejects_live_control(self):
        spec = make_2x2()

        def u0(x):
            return np.stack([bump(x, 0.1, 0.5), bump(x, 0.4, 0.9)], axis=1)

        def terminal(x):
            return np.stack([bump(x, 0.2, 0.7), bump(x, 0.5, 0.95)], axis=1)

        def control(t):
            return bump(t, 0.1, 0.7)[:, None]

        with pytest.raises(PreconditionError):
            pairing_check(spec, 0.8, 96, 72, u0, terminal, control=control,
                          mode="st1")

    def test_unknown_mode_rejected(self):
        spec = make_2x2()
        with pytest.raises(PreconditionError):
            pairing_check(spec, 0.8, 32, 32, None, None, mode="st3")

    def test_st2_with_silent_terminal(self):
        # Terminal data for the leftward component supported away from the
        # outflow never reach x = 1 within the window, so the observation
        # trace vanishes and the pairing holds with a live control.
        spec = make_2x2(b=0.7)
        T = 0.5

        def terminal(x):
            return np.stack([np.zeros_like(x), bump(x, 0.05, 0.45)], axis=1)

        def u0(x):
            return np.stack([bump(x, 0.2, 0.8), bump(x, 0.1, 0.6)], axis=1)

        def control(t):
            return np.sin(2.7 * t)[:, None] * bump(t, 0.05, 0.45)[:, None]

        rep = pairing_check(spec, T, 160, 120, u0, terminal, control=control,
                            mode="st2")
        assert rep.mode == "st2"
        assert rep.details["vanishing_trace_norm"] < 1e-12
        assert rep.passed
        assert float(rep.relative) < 1e-9

    def test_st2_rejects_loud_terminal(self):
        spec = make_2x2()

        def terminal(x):
            return np.stack([np.zeros_like(x), bump(x, 0.6, 0.95)], axis=1)

        with pytest.raises(PreconditionError):
            pairing_check(spec, 0.5, 96, 72, None, terminal, mode="st2")


class TestAdjointIdentity:
    def test_identity_on_exact_solver(self):
        spec = make_2x2(b=0.9)
        T = 1.2

        def control(t):
            return (np.sin(3.0 * t) * bump(t, 0.1, 1.1))[:, None]

        def terminal(x):
            return np.stack([bump(x, 0.15, 0.65), bump(x, 0.3, 0.85)], axis=1)

        rep = adjoint_identity_check(spec, T, 240, 200, control, terminal)
        assert rep.mode == "adjoint"
        assert float(rep.relative) < 1e-8

    def test_identity_batched_shapes(self):
        spec = make_skew3()
        T = 0.9
        data = random_smooth_data(spec, T, 4, 11)
        rep = adjoint_identity_check(spec, T, 120, 100, data["control"],
                                     data["terminal"], method="generic")
        assert rep.relative.shape == (4,)
        assert rep.scale.shape == (4,)


class TestBattery:
    def test_battery_passes_and_halves(self):
        spec = make_skew3()
        T = 0.75 * spec.t_russell
        coarse = pairing_battery(spec, T, 160, count=4, seed=7)
        fine = pairing_battery(spec, T, 320, count=4, seed=7)
        assert coarse["passed"] in (True, False)
        assert fine["adjoint_rms"] < coarse["adjoint_rms"]
        ratio = fine["adjoint_rms"] / coarse["adjoint_rms"]
        assert 0.3 < ratio < 0.7
        assert fine["pairing_relative"].shape == (4,)

    def test_battery_is_seed_deterministic(self):
        spec = make_2x2(c1=0.3, c2=-0.2)
        a = pairing_battery(spec, 1.0, 64, count=3, seed=5)
        b = pairing_battery(spec, 1.0, 64, count=3, seed=5)
        assert np.array_equal(a["adjoint_relative"], b["adjoint_relative"])
        assert np.array_equal(a["pairing_relative"], b["pairing_relative"])


class TestRandomSmoothData:
    def test_shapes_and_support(self):
        spec = make_skew3()
        data = random_smooth_data(spec, 2.0, 5, 3)
        x = np.linspace(0.0, 1.0, 33)
        t = np.linspace(0.0, 2.0, 41)
        assert data["u0"](x).shape == (33, 3, 5)
        assert data["terminal"](x).shape == (33, 3, 5)
        assert data["control"](t).shape == (41, 2, 5)
        # compact support inside the margins
        assert np.max(np.abs(data["u0"](np.array([0.0, 1.0])))) == 0.0
        assert np.max(np.abs(data["control"](np.array([0.0, 2.0])))) == 0.0
