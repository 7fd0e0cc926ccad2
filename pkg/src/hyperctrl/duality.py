"""Duality between boundary control and boundary observation.

The control-to-state map sends a boundary control U to the state reached
from zero initial data; its adjoint is the observation trace of the
backward system.  Two transport pairings tie them together: with the
control trace removed the inner product <u, v> is conserved between the
ends of the window, and symmetrically when the observation trace of v
vanishes.  These discrete checks converge to the exact identities under
grid refinement.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import PreconditionError
from .rectangle_solver import boundary_observation, solve_adjoint, solve_forward

_MODES = {
    "st1": "st1",
    "controlled-u": "st1",
    "st2": "st2",
    "zero-observation-v": "st2",
}


def _trap_weights(grid):
    w = np.full(grid.size, grid[1] - grid[0])
    w[0] *= 0.5
    w[-1] *= 0.5
    return w


def trap_inner(grid, a, b):
    """L^2 inner product of component-valued samples on a uniform grid.

    `a`, `b` are shaped (len(grid), c[, p]); sums over grid and components,
    keeps the batch axis."""
    w = _trap_weights(grid)
    prod = a * b
    wexp = w.reshape((grid.size,) + (1,) * (prod.ndim - 1))
    return (wexp * prod).sum(axis=(0, 1))


def trap_norm(grid, a):
    return np.sqrt(np.maximum(trap_inner(grid, a, a), 0.0))


@dataclass
class PairingReport:
    """Outcome of one duality check."""

    mode: str
    defect: np.ndarray
    scale: np.ndarray
    relative: np.ndarray
    tolerance: float
    passed: bool
    details: dict = field(default_factory=dict)


def forward_map(spec, T, Nt, Nx, control, *, tau=0.0, method="characteristic",
                return_field=False):
    """State at the end of the window reached from zero initial data."""
    sys = spec.time_shifted(tau)
    fld = solve_forward(sys, T, Nt, Nx, None, control, method=method)
    return fld if return_field else fld.values[-1]


def adjoint_map(spec, T, Nt, Nx, terminal, *, tau=0.0, method="characteristic",
                return_field=False):
    """Observation trace lam_+(1) v_+(. , 1) of the backward solve from
    `terminal`."""
    sys = spec.time_shifted(tau)
    fld = solve_adjoint(sys, T, Nt, Nx, terminal, method=method)
    obs = boundary_observation(sys, fld)
    return (obs, fld) if return_field else obs


def pairing_check(spec, T, Nt, Nx, u0, terminal, *, control=None, mode="st1",
                  tau=0.0, method="characteristic", tolerance=1e-3,
                  trace_tol=1e-6):
    """Defect of <u(T), v(T)> = <u(0), v(0)> in the mode's vanishing-trace
    regime.

    mode "st1" (alias "controlled-u"): the control trace of u must vanish,
    so `control` must be None/zero.  mode "st2" (alias
    "zero-observation-v"): the observation trace of v must vanish, which is
    a property of `terminal`; it is measured and enforced up to
    `trace_tol` relative.
    """
    try:
        mode = _MODES[mode]
    except KeyError:
        raise PreconditionError(
            f"unknown pairing mode {mode!r}; expected one of {sorted(_MODES)}")
    sys = spec.time_shifted(tau)
    tgrid = np.linspace(0.0, T, Nt + 1)
    xgrid = np.linspace(0.0, 1.0, Nx + 1)

    vfld = solve_adjoint(sys, T, Nt, Nx, terminal, method=method)
    if mode == "st1":
        if control is not None:
            ctrl_vals = control(tgrid) if callable(control) else np.asarray(control)
            if np.max(np.abs(ctrl_vals)) > trace_tol:
                raise PreconditionError(
                    "mode st1 pairs an uncontrolled state: control trace "
                    f"has magnitude {np.max(np.abs(ctrl_vals)):.3e}")
        ufld = solve_forward(sys, T, Nt, Nx, u0, None, method=method)
        trace_norm = 0.0
    else:
        obs = boundary_observation(sys, vfld)
        obs_rel = trap_norm(tgrid, obs) / (trap_norm(xgrid, vfld.values[-1]) + 1e-300)
        trace_norm = float(np.max(obs_rel))
        if trace_norm > trace_tol:
            raise PreconditionError(
                "mode st2 needs a vanishing observation trace; terminal data "
                f"give a relative trace norm {trace_norm:.3e} > {trace_tol:g}")
        ufld = solve_forward(sys, T, Nt, Nx, u0, control, method=method)

    end = trap_inner(xgrid, ufld.values[-1], vfld.values[-1])
    start = trap_inner(xgrid, ufld.values[0], vfld.values[0])
    defect = np.abs(end - start)
    scale = (trap_norm(xgrid, ufld.values[-1]) * trap_norm(xgrid, vfld.values[-1])
             + trap_norm(xgrid, ufld.values[0]) * trap_norm(xgrid, vfld.values[0])
             + 1e-300)
    relative = defect / scale
    return PairingReport(
        mode=mode,
        defect=defect,
        scale=scale,
        relative=relative,
        tolerance=tolerance,
        passed=bool(np.all(relative < tolerance)),
        details={"vanishing_trace_norm": trace_norm},
    )


def adjoint_identity_check(spec, T, Nt, Nx, control, terminal, *, tau=0.0,
                           method="characteristic", tolerance=1e-3):
    """Defect of <FU, phi> = <U, F* phi> on the discrete inner products."""
    sys = spec.time_shifted(tau)
    tgrid = np.linspace(0.0, T, Nt + 1)
    xgrid = np.linspace(0.0, 1.0, Nx + 1)
    state = forward_map(sys, T, Nt, Nx, control, method=method)
    obs = adjoint_map(sys, T, Nt, Nx, terminal, method=method)
    phi_vals = terminal(xgrid) if callable(terminal) else np.asarray(terminal, dtype=float)
    ctrl_vals = control(tgrid) if callable(control) else np.asarray(control, dtype=float)
    lhs = trap_inner(xgrid, state, phi_vals)
    rhs = trap_inner(tgrid, ctrl_vals, obs)
    defect = np.abs(lhs - rhs)
    scale = trap_norm(tgrid, ctrl_vals) * trap_norm(xgrid, phi_vals) + 1e-300
    relative = defect / scale
    return PairingReport(
        mode="adjoint",
        defect=defect,
        scale=scale,
        relative=relative,
        tolerance=tolerance,
        passed=bool(np.all(relative < tolerance)),
    )


def _window(s):
    """Smooth bump on (0,1), peak value 1 at the midpoint, zero outside."""
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    inside = (s > 0.0) & (s < 1.0)
    si = s[inside]
    out[inside] = np.exp(1.0 - 1.0 / (4.0 * si * (1.0 - si)))
    return out


def random_smooth_data(spec, T, count, seed, *, modes=2, margin=0.2):
    """Seeded batch of smooth compactly supported data sets.

    Returns callables u0(x) -> (len, n, count), control(t) -> (len, m,
    count), terminal(x) -> (len, n, count).  Compact support keeps the
    data compatible with the boundary conditions at the window corners, so
    solutions stay smooth and defect convergence is clean.
    """
    rng = np.random.default_rng(seed)
    n, m = spec.n, spec.m
    a_prof = rng.standard_normal((n, count, modes))
    a_term = rng.standard_normal((n, count, modes))
    a_ctrl = rng.standard_normal((m, count, modes))
    js = np.arange(1, modes + 1)

    def _series(s, coeff, width):
        # s normalized to [0, 1] inside the support window
        s = np.asarray(s, dtype=float)
        y = (s - margin) / max(width - 2.0 * margin, 1e-12)
        win = _window(y)
        phases = np.sin(np.pi * np.outer(y, js))  # (len, modes)
        out = np.einsum("lj,cqj->lcq", phases, coeff)
        return out * win[:, None, None] / np.sqrt(modes)

    def u0(x):
        return _series(np.asarray(x, dtype=float), a_prof, 1.0)

    def terminal(x):
        return _series(np.asarray(x, dtype=float), a_term, 1.0)

    def control(t):
        return _series(np.asarray(t, dtype=float), a_ctrl, T)

    return {"u0": u0, "control": control, "terminal": terminal}


def pairing_battery(spec, T, N, count=10, seed=2024, *, method="generic",
                    tolerance=1e-3):
    """Relative st1-pairing and adjoint-identity defects on `count` seeded
    data sets at time resolution N (space resolution chosen non-aligned so
    the stepper's first-order error is actually exercised).

    Returns a dict with per-data-set relative defects and their root mean
    square, the convergence diagnostic used by the battery consumers.
    """
    Nt = max(int(round(0.7 * N)), 16)
    Nx = max(int(round(1.2 * N)), 16)
    data = random_smooth_data(spec, T, count, seed)
    st1 = pairing_check(spec, T, Nt, Nx, data["u0"], data["terminal"],
                        mode="st1", method=method, tolerance=tolerance)
    adj = adjoint_identity_check(spec, T, Nt, Nx, data["control"],
                                 data["terminal"], method=method,
                                 tolerance=tolerance)
    return {
        "N": N,
        "pairing_relative": np.atleast_1d(st1.relative),
        "adjoint_relative": np.atleast_1d(adj.relative),
        "pairing_rms": float(np.sqrt(np.mean(np.square(st1.relative)))),
        "adjoint_rms": float(np.sqrt(np.mean(np.square(adj.relative)))),
        "passed": st1.passed and adj.passed,
        "tolerance": tolerance,
    }
