"""Tests for Gramian assembly, observability constants, and HUM controls."""

import numpy as np
import pytest

from hyperctrl.controllability import (
    _cg,
    _mass_matrix,
    _mass_roots,
    assemble_gramian,
    default_steps,
    gramian_apply,
    gramian_apply_composition,
    hum_control,
    low_mode_projector,
    null_controllability_verdict,
    observability_constant,
    observability_scan,
)
from hyperctrl.duality import trap_norm
from hyperctrl.errors import PreconditionError
from hyperctrl.system import (
    BoundaryMatrix,
    CouplingField,
    Speed,
    SpeedProfile,
    SystemSpec,
)


def make_russell(b=0.8):
    prof = SpeedProfile((Speed.constant(1.0), Speed.constant(1.0)), k=1, m=1)
    return SystemSpec.build(prof, CouplingField.zero(prof),
                            BoundaryMatrix(np.array([[b]])))


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


@pytest.fixture(scope="module")
def russell_gram():
    return assemble_gramian(make_russell(), 2.0, Nx=100)


@pytest.fixture(scope="module")
def skew3_gram():
    return assemble_gramian(make_skew3(), 2.2, Nx=50)


def smooth_state(xgrid, n, seed=0):
    rng = np.random.default_rng(seed)
    out = np.zeros((xgrid.size, n))
    for i in range(n):
        for j in range(1, 4):
            out[:, i] += rng.normal() * np.sin(j * np.pi * xgrid)
            out[:, i] += rng.normal() * np.cos(j * np.pi * xgrid)
    return out


class TestMassMatrix:
    def test_row_sums_are_cell_averages(self):
        mass = _mass_matrix(40)
        sums = mass.sum(axis=1)
        assert sums[0] == pytest.approx(0.5 / 40)
        assert sums[-1] == pytest.approx(0.5 / 40)
        np.testing.assert_allclose(sums[1:-1], 1.0 / 40, rtol=1e-13)

    def test_total_mass_is_one(self):
        assert _mass_matrix(33).sum() == pytest.approx(1.0)

    def test_roots_invert_each_other(self):
        half, invhalf = _mass_roots(_mass_matrix(25))
        np.testing.assert_allclose(half @ invhalf, np.eye(26), atol=1e-11)
        np.testing.assert_allclose(half @ half, _mass_matrix(25), atol=1e-13)

    def test_norm_of_linear_interpolant_is_exact(self):
        # the interpolant of x is x itself: squared L^2 norm 1/3
        mass = _mass_matrix(17)
        xg = np.linspace(0.0, 1.0, 18)
        assert xg @ mass @ xg == pytest.approx(1.0 / 3.0, rel=1e-12)


class TestDefaultSteps:
    def test_scales_with_fastest_speed(self):
        rus, sk = make_russell(), make_skew3()
        base = default_steps(1.0, 100, rus)
        fast = default_steps(1.0, 100, sk)
        assert fast == pytest.approx(2 * base, rel=0.02)

    def test_floor_and_oddness(self):
        assert default_steps(1e-4, 10) == 17
        for T in (0.7, 1.3, 2.0):
            assert default_steps(T, 100) % 2 == 1


class TestAssembly:
    def test_matrix_is_symmetric(self, russell_gram):
        assert russell_gram.symmetry_defect < 1e-12
        m = russell_gram.matrix
        assert np.array_equal(m, m.T)

    def test_spectrum_is_nonnegative(self, russell_gram):
        evals = russell_gram.eigenvalues
        assert evals[0] > -1e-8 * evals[-1]
        assert np.all(np.diff(evals) >= 0.0)

    def test_rayleigh_matches_matrix_form(self, russell_gram):
        g = russell_gram
        phi = smooth_state(g.xgrid, 2, seed=3)
        psi = g.to_coords(phi)
        quad = float(psi @ g.matrix @ psi) / float(psi @ psi)
        assert g.rayleigh(phi) == pytest.approx(quad, rel=1e-10)

    def test_coordinate_roundtrip(self, russell_gram):
        g = russell_gram
        phi = smooth_state(g.xgrid, 2, seed=5)
        back = g.from_coords(g.to_coords(phi)).reshape(g.Nx + 1, 2)
        np.testing.assert_allclose(back, phi, atol=1e-11)

    def test_rejects_bad_shapes(self, russell_gram):
        with pytest.raises(PreconditionError):
            russell_gram.flatten(np.zeros((7, 3)))
        with pytest.raises(PreconditionError):
            assemble_gramian(make_russell(), -1.0, Nx=20)


class TestTransportOracle:
    """For uncoupled unit-speed 2x2 dynamics with reflection b at the far
    wall, every state component is observed once after T >= 2: the
    backward trace reads the plus part directly and the minus part through
    one reflection, so the observability constant is exactly b**2."""

    def test_reflection_squared_constant(self, russell_gram):
        proj = low_mode_projector(russell_gram, 12)
        const = observability_constant(russell_gram, proj)
        assert const == pytest.approx(0.64, rel=2e-3)

    def test_constant_tracks_reflection_strength(self):
        gram = assemble_gramian(make_russell(b=0.5), 2.0, Nx=60)
        proj = low_mode_projector(gram, 10)
        assert observability_constant(gram, proj) == pytest.approx(
            0.25, rel=5e-3)

    def test_raw_minimum_underestimates_but_stays_close(self, russell_gram):
        raw = observability_constant(russell_gram)
        assert 0.3 < raw <= 0.65

    def test_top_direction_is_fully_observed(self, russell_gram):
        # plus-component data is observed with unit gain
        g = russell_gram
        phi = np.zeros((g.Nx + 1, 2))
        phi[:, 1] = np.sin(np.pi * g.xgrid)
        assert g.rayleigh(phi) == pytest.approx(1.0, rel=1e-3)


class TestVerdicts:
    def test_russell_window_is_controllable(self, russell_gram):
        verdict = null_controllability_verdict(russell_gram)
        assert verdict["verdict"] == "controllable"
        assert verdict["constant"] > verdict["thresholds"]["controllable"]
        assert np.isfinite(verdict["condition_number"])

    def test_short_window_is_degenerate(self):
        gram = assemble_gramian(make_russell(), 0.5, Nx=60)
        verdict = null_controllability_verdict(gram)
        assert verdict["verdict"] == "degenerate"
        assert abs(verdict["constant"]) < verdict["thresholds"]["degenerate"]

    def test_coupled_system_split(self, skew3_gram):
        assert null_controllability_verdict(skew3_gram)["verdict"] == \
            "controllable"
        short = assemble_gramian(make_skew3(), 1.2, Nx=50)
        assert null_controllability_verdict(short)["verdict"] == "degenerate"


class TestProjectedConstants:
    def test_projection_can_only_increase(self, russell_gram):
        wide = low_mode_projector(russell_gram, 20)
        narrow = wide[:, :20]
        c_full = observability_constant(russell_gram)
        c_wide = observability_constant(russell_gram, wide)
        c_narrow = observability_constant(russell_gram, narrow)
        assert c_wide >= c_full - 1e-12
        assert c_narrow >= c_wide - 1e-12

    def test_rejects_nonorthonormal_projector(self, russell_gram):
        bad = np.ones((russell_gram.dim, 2))
        with pytest.raises(PreconditionError):
            observability_constant(russell_gram, bad)

    def test_rejects_misshapen_projector(self, russell_gram):
        with pytest.raises(PreconditionError):
            observability_constant(russell_gram, np.eye(7))


class TestScan:
    def test_threshold_located_and_monotone(self):
        Ts = np.array([0.6, 1.0, 1.4, 1.8, 2.05, 2.3, 2.6])
        rows = observability_scan(make_russell(), Ts, Nx=60)
        consts = rows[:, 1]
        assert np.all(np.diff(consts) >= -1e-12)
        assert np.all(np.abs(consts[rows[:, 0] < 1.95]) < 1e-10)
        assert np.all(consts[rows[:, 0] > 2.04] > 1e-2)

    def test_rejects_nonpositive_window(self):
        with pytest.raises(PreconditionError):
            observability_scan(make_russell(), [0.0, 1.0], Nx=20)


class TestHum:
    def test_zero_state_needs_zero_control(self, skew3_gram):
        sol = hum_control(skew3_gram, None)
        assert sol.converged
        assert np.max(np.abs(sol.U)) == 0.0
        assert sol.residual == 0.0

    def test_steers_coupled_system(self, skew3_gram):
        def u0(x):
            out = np.zeros((x.size, 3))
            out[:, 0] = np.sin(np.pi * x)
            out[:, 1] = 0.5 * np.sin(2 * np.pi * x)
            out[:, 2] = 0.25 * (1.0 - np.cos(2 * np.pi * x))
            return out

        sol = hum_control(skew3_gram, u0)
        assert sol.converged
        assert sol.relative_residual < 1e-2
        assert sol.U.shape == (skew3_gram.Nt + 1, 2)
        assert sol.residual >= 0.99 * sol.floor

    def test_control_improves_on_free_evolution(self, skew3_gram):
        # past the annihilation time the free dynamics alone empty most
        # of the state; the synthesized control still beats them clearly
        def u0(x):
            out = np.zeros((x.size, 3))
            out[:, 0] = np.sin(np.pi * x)
            return out

        sol = hum_control(skew3_gram, u0)
        from hyperctrl.rectangle_solver import solve_forward
        free = solve_forward(skew3_gram.spec, skew3_gram.T, skew3_gram.Nt,
                             skew3_gram.Nx, u0, None)
        free_miss = trap_norm(skew3_gram.xgrid, free.values[-1])
        assert sol.residual < 0.5 * free_miss
        assert sol.relative_residual < 2e-3


class TestCompositionCrossCheck:
    """The dense route pairs traces with quadrature weights; the explicit
    route runs the two solves.  They agree on resolved content, with the
    gap dominated by first-order control-interpolation error."""

    @pytest.mark.parametrize("maker,T", [(make_russell, 2.0),
                                         (make_skew3, 1.2)])
    def test_projected_agreement(self, maker, T):
        spec = maker()
        gram = assemble_gramian(spec, T, Nx=80)
        phi = smooth_state(gram.xgrid, spec.n, seed=11)
        a = gramian_apply(gram, phi)
        b = gramian_apply_composition(gram, phi)
        proj = low_mode_projector(gram, 10)
        ca = proj.T @ gram.to_coords(a)
        cb = proj.T @ gram.to_coords(b)
        rel = np.linalg.norm(ca - cb) / np.linalg.norm(ca)
        assert rel < 4e-2

    def test_gap_shrinks_under_refinement(self):
        spec = make_russell()
        rels = []
        for Nx in (40, 80):
            gram = assemble_gramian(spec, 2.0, Nx=Nx)
            phi = smooth_state(gram.xgrid, 2, seed=11)
            a = gramian_apply(gram, phi)
            b = gramian_apply_composition(gram, phi)
            proj = low_mode_projector(gram, 8)
            ca = proj.T @ gram.to_coords(a)
            cb = proj.T @ gram.to_coords(b)
            rels.append(np.linalg.norm(ca - cb) / np.linalg.norm(ca))
        assert rels[1] < 0.7 * rels[0]


class TestConjugateGradient:
    def test_solves_spd_system(self):
        rng = np.random.default_rng(1)
        A = rng.normal(size=(30, 30))
        A = A @ A.T + 30.0 * np.eye(30)
        b = rng.normal(size=30)
        x, iters, converged, rel = _cg(lambda v: A @ v, b, 1e-12, 200)
        assert converged
        np.testing.assert_allclose(A @ x, b, atol=1e-9 * np.linalg.norm(b))

    def test_zero_rhs_short_circuits(self):
        x, iters, converged, rel = _cg(lambda v: v, np.zeros(5), 1e-10, 50)
        assert converged and iters == 0 and np.all(x == 0.0)

    def test_reports_stall_on_singular_system(self):
        # rank-deficient matvec with an inconsistent right-hand side
        P = np.zeros((4, 4))
        P[0, 0] = 1.0
        b = np.array([0.0, 1.0, 0.0, 0.0])
        x, iters, converged, rel = _cg(lambda v: P @ v, b, 1e-12, 400)
        assert not converged
