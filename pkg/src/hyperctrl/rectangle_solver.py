"""Characteristic-march solver for the coupled transport system.

Values are reconstructed along characteristics.  For each component the
value at a grid node splits into three parts: the datum carried from the
node's anchor (a data line or an inflow boundary, traced through at most
one reflection), the coupling integral accumulated along the
characteristic path, and the reflected image of the coupling integrals
of the components feeding the boundary condition.  The coupling makes
this a fixed-point problem in the whole space-time field, solved by a
weighted Picard iteration.

Within one sweep the integrand field G = C(t,x) V is known on the whole
grid, so path integrals are accumulated level by level with a 4-point
interpolatory cell rule (fourth order in the level spacing), switching
to one-sided stencils next to anchors and adding an exact partial cell
where a path is born strictly between two levels.  Path feet between
nodes are interpolated cubically for the accumulated integral and
linearly for integrand samples; feet that land on nodes (resonant
speed/grid combinations) are snapped and gathered exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .characteristics import CharacteristicFlow
from .errors import PreconditionError, SolverConvergenceError
from .fields import PicardReport, SolutionField, lagrange_time_interp
from .system import SystemSpec

_SNAP = 1e-12  # absolute position tolerance for treating a foot as on-node


# ---------------------------------------------------------------------------
# gather stencils along one grid level
# ---------------------------------------------------------------------------

@dataclass
class _LinStencil:
    lo: np.ndarray
    w: np.ndarray
    inside: np.ndarray

    def gather(self, level: np.ndarray) -> np.ndarray:
        ex = (slice(None),) + (None,) * (level.ndim - 1)
        return (1.0 - self.w)[ex] * level[self.lo] + self.w[ex] * level[self.lo + 1]


@dataclass
class _CubStencil:
    base: np.ndarray
    w: np.ndarray  # (4, Nx+1)

    def gather(self, level: np.ndarray) -> np.ndarray:
        ex = (slice(None),) + (None,) * (level.ndim - 1)
        out = self.w[0][ex] * level[self.base]
        for q in range(1, 4):
            out = out + self.w[q][ex] * level[self.base + q]
        return out


def _cubic_weights(u: np.ndarray) -> np.ndarray:
    """Lagrange weights on 4 consecutive unit-spaced nodes at offset u."""
    return np.stack([
        -(u - 1.0) * (u - 2.0) * (u - 3.0) / 6.0,
        u * (u - 2.0) * (u - 3.0) / 2.0,
        -u * (u - 1.0) * (u - 3.0) / 2.0,
        u * (u - 1.0) * (u - 2.0) / 6.0,
    ])


def _snap_positions(pos: np.ndarray, dx: float) -> np.ndarray:
    s = pos / dx
    near = np.rint(s)
    return np.where(np.abs(s - near) * dx < _SNAP, near * dx, pos)


def _lin_stencil(pos: np.ndarray, dx: float, nx: int) -> _LinStencil:
    inside = (pos >= -_SNAP) & (pos <= nx * dx + _SNAP)
    s = np.clip(_snap_positions(pos, dx), 0.0, nx * dx) / dx
    lo = np.minimum(s.astype(int), nx - 1)
    return _LinStencil(lo=lo, w=s - lo, inside=inside)


def _cub_stencil(pos: np.ndarray, dx: float, nx: int) -> _CubStencil:
    s = np.clip(_snap_positions(pos, dx), 0.0, nx * dx) / dx
    base = np.clip(np.floor(s).astype(int) - 1, 0, nx - 3)
    return _CubStencil(base=base, w=_cubic_weights(s - base))


def _apron_weights(delta: float, h: float) -> np.ndarray:
    """Weights integrating the cubic through path samples at offsets
    (-delta, 0, h, 2h) over the partial cell [-delta, 0]."""
    nodes = np.array([-delta, 0.0, h, 2.0 * h])
    vand = np.vander(nodes, 4, increasing=True)  # rows [1, xi, xi^2, xi^3]
    powers = np.arange(1, 5)
    moments = np.where(powers % 2 == 1, 1.0, -1.0) * delta ** powers / powers
    return np.linalg.solve(vand.T, moments)


# ---------------------------------------------------------------------------
# per-component march geometry
# ---------------------------------------------------------------------------

@dataclass
class _Apron:
    """Nodes whose characteristic is born a fractional cell below/above the
    current level (boundary anchor strictly between two levels)."""
    idx: np.ndarray
    delta: np.ndarray
    weights: np.ndarray       # (len(idx), 4) cubic partial-cell weights
    ok2: np.ndarray           # path continues >= 2h on the far side
    edge_col: int             # boundary column holding the anchor


@dataclass
class _CompPlan:
    comp: int                 # 0-based component index
    rightward: bool
    tau: float
    Tx: np.ndarray            # (Nx+1,) travel coordinate of each node
    E_past: np.ndarray        # time from the node back to its inflow edge
    E_fut: np.ndarray         # time from the node forward to its outflow edge
    lin: dict                 # level offset (signed int) -> _LinStencil
    cub: dict                 # offset in {-1, +1} -> _CubStencil
    # a node at level l is future-anchored iff t_l <= future_cut[j]
    future_cut: np.ndarray
    apron: dict               # "up"/"down" -> _Apron

    def sig_mode(self, T: float) -> str:
        if np.all(self.future_cut < 0.0):
            return "past"
        if np.all(self.future_cut >= T):
            return "future"
        return "mixed"


# ---------------------------------------------------------------------------
# the march engine
# ---------------------------------------------------------------------------

class _March:
    """Shared machinery: grid, per-component geometry, Picard loop.

    Concrete subclasses wire the data side: which time line carries data,
    which boundary of each component reflects, and how the pure datum
    composition D is assembled.
    """

    orientation = "initial"

    def __init__(self, spec: SystemSpec, T: float, Nt: int, Nx: int):
        if Nt < 8 or Nx < 8:
            raise PreconditionError(f"grid too coarse: Nt={Nt}, Nx={Nx} (need >= 8)")
        if T <= 0.0:
            raise PreconditionError(f"horizon must be positive, got {T}")
        self.spec = spec
        self.T = float(T)
        self.Nt = int(Nt)
        self.Nx = int(Nx)
        self.tgrid = np.linspace(0.0, self.T, self.Nt + 1)
        self.xgrid = np.linspace(0.0, 1.0, self.Nx + 1)
        self.h = self.T / self.Nt
        self.dx = 1.0 / self.Nx
        self.flow = CharacteristicFlow(spec)
        self.n = spec.n
        self.p = 1
        self.had_batch = False
        self.plans = [self._build_plan(i) for i in range(self.n)]
        self._finalize_anchoring()
        for plan in self.plans:
            plan.apron["up"] = self._build_apron(plan, up=True)
            plan.apron["down"] = self._build_apron(plan, up=False)
        self._refl = {}
        self._build_reflections()
        self._c_stack = None
        self._dist = self._weight_distance()

    # -- geometry ---------------------------------------------------------

    def _build_plan(self, i: int) -> _CompPlan:
        coord = self.flow.coords[i]
        rightward = i < self.spec.k
        Tx = np.asarray(coord.value(self.xgrid), dtype=float)
        tau = coord.tau
        sgn = 1.0 if rightward else -1.0
        lin, cub = {}, {}
        for q in (-3, -2, -1, 1, 2, 3):
            pos = np.asarray(coord.inverse(Tx + sgn * q * self.h), dtype=float)
            lin[q] = _lin_stencil(pos, self.dx, self.Nx)
            if q in (-1, 1):
                cub[q] = _cub_stencil(pos, self.dx, self.Nx)
        E_past = Tx.copy() if rightward else tau - Tx
        E_fut = tau - Tx if rightward else Tx.copy()
        E_past[0 if rightward else -1] = 0.0   # exact zero on the inflow edge
        E_fut[-1 if rightward else 0] = 0.0
        return _CompPlan(
            comp=i, rightward=rightward, tau=tau, Tx=Tx,
            E_past=np.maximum(E_past, 0.0), E_fut=np.maximum(E_fut, 0.0),
            lin=lin, cub=cub,
            future_cut=np.full(self.Nx + 1, -np.inf), apron={},
        )

    def _finalize_anchoring(self):
        """Set per-node anchor sides (past/future) for every component."""
        raise NotImplementedError

    def _build_apron(self, plan: _CompPlan, up: bool) -> _Apron:
        E = plan.E_past if up else plan.E_fut
        idx = np.nonzero((E > 0.0) & (E < self.h))[0]
        delta = E[idx]
        weights = np.stack([_apron_weights(d, self.h) for d in delta]) \
            if idx.size else np.zeros((0, 4))
        E_away = (plan.E_fut if up else plan.E_past)[idx]
        ok2 = E_away >= 2.0 * self.h - _SNAP
        if up:
            edge_col = 0 if plan.rightward else self.Nx
        else:
            edge_col = self.Nx if plan.rightward else 0
        return _Apron(idx=idx, delta=delta, weights=weights, ok2=ok2,
                      edge_col=edge_col)

    def _build_reflections(self):
        """Populate self._refl for components with a reflecting edge."""
        return

    def _make_refl_entry(self, plan: _CompPlan, *, past_edge: bool) -> dict:
        """Static bookkeeping for reflection-anchored nodes of one component:
        node coordinates, anchor time on the boundary column, and the cubic
        time-interpolation stencil into column traces."""
        L = self.Nt
        tl = self.tgrid[:, None]
        if past_edge:
            mask = (tl > plan.E_past[None, :] + _SNAP) & (tl > plan.future_cut[None, :])
            t0 = tl - plan.E_past[None, :]
        else:
            mask = ((self.T - tl) > plan.E_fut[None, :] + _SNAP) \
                & (tl <= plan.future_cut[None, :])
            t0 = tl + plan.E_fut[None, :]
        li, ji = np.nonzero(mask)
        t0v = t0[mask]
        s = np.clip(t0v / self.h, 0.0, float(L))
        base = np.clip(np.floor(s).astype(int) - 1, 0, max(L - 3, 0))
        return {"li": li, "ji": ji, "t0": t0v, "base": base,
                "w": _cubic_weights(s - base)}

    def _weight_distance(self) -> np.ndarray:
        raise NotImplementedError

    # -- coupling ---------------------------------------------------------

    def _coupling_matrix(self, t: float, x) -> np.ndarray:
        """(len(x), n, n) zero-order matrix seen by this march at time t."""
        raise NotImplementedError

    def _coupling_rate(self) -> float:
        raise NotImplementedError

    def _capped_rate(self, rho: float, which: str) -> float:
        if self.spec.coupling.is_zero:
            return 1.0
        cbound = self.spec.coupling.bound(0.0, self.T, which=which, samples=161)
        rate = 2.0 * (1.0 + rho) * max(cbound, 1e-6)
        # keep exp(-rate * T) representable
        return min(rate, 690.0 / max(self.T, 1e-6))

    def _ensure_c_stack(self, budget_bytes: float = 1.5e8):
        if self._c_stack is not None:
            return
        size = (self.Nt + 1) * (self.Nx + 1) * self.n * self.n * 8
        if size <= budget_bytes:
            stack = np.empty((self.Nt + 1, self.Nx + 1, self.n, self.n))
            for l, t in enumerate(self.tgrid):
                stack[l] = self._coupling_matrix(t, self.xgrid)
            self._c_stack = stack
        else:
            self._c_stack = False  # too large: evaluate per level each sweep

    def _c_level(self, l: int) -> np.ndarray:
        if isinstance(self._c_stack, np.ndarray):
            return self._c_stack[l]
        return self._coupling_matrix(self.tgrid[l], self.xgrid)

    def _compute_G(self, V: np.ndarray) -> np.ndarray:
        G = np.empty_like(V)
        for l in range(self.Nt + 1):
            G[l] = np.einsum("xab,xbp->xap", self._c_level(l), V[l])
        return G

    # -- path-integral accumulation --------------------------------------

    def _accumulate(self, Gi: np.ndarray, Vprev: np.ndarray, plan: _CompPlan,
                    up: bool) -> np.ndarray:
        """Path integral of Gi from each node's anchor on one side,
        accumulated level by level away from that side's data line.
        Returns the raw (positive-orientation) integral; the caller negates
        future-side accumulations."""
        L, h = self.Nt, self.h
        nxp = self.Nx + 1
        p = Gi.shape[-1]
        J = np.zeros((L + 1, nxp, p))
        d = 1 if up else -1
        E = plan.E_past if up else plan.E_fut
        E_away = plan.E_fut if up else plan.E_past
        apron = plan.apron["up" if up else "down"]
        foot_cub = plan.cub[-d]
        lin = plan.lin
        away1_pos = lin[d].inside & (E_away >= h - _SNAP)
        away2_pos = lin[2 * d].inside & (E_away >= 2.0 * h - _SNAP)
        anchor_G = self._apron_anchor_eval(plan, apron, Vprev, up) \
            if apron.idx.size else None
        levels = range(1, L + 1) if up else range(L - 1, -1, -1)

        for l in levels:
            dist = l * h if up else (L - l) * h
            A = np.minimum(dist, E)
            Jn = foot_cub.gather(J[l - d])
            lv1 = 0 <= l + d <= L
            lv2 = 0 <= l + 2 * d <= L
            away1 = away1_pos & lv1
            away2 = away2_pos & lv2
            g0 = Gi[l]
            gm1 = lin[-d].gather(Gi[l - d])
            rec = A >= h
            first = rec & (A < 2.0 * h)
            deep = rec & ~first
            central = deep & away1
            nolook = deep & ~away1
            last = nolook & (A >= 3.0 * h - _SNAP)
            trap_first = first & ~(away1 & away2)
            first = first & away1 & away2
            fallback = (nolook & ~last) | trap_first
            CI = np.zeros((nxp, p))
            if np.any(central):
                gm2 = lin[-2 * d].gather(Gi[l - 2 * d])
                gp1 = lin[d].gather(Gi[l + d])
                CI = np.where(central[:, None],
                              (h / 24.0) * (-gm2 + 13.0 * gm1 + 13.0 * g0 - gp1), CI)
            if np.any(first):
                gp1 = lin[d].gather(Gi[l + d])
                gp2 = lin[2 * d].gather(Gi[l + 2 * d])
                CI = np.where(first[:, None],
                              (h / 24.0) * (9.0 * gm1 + 19.0 * g0 - 5.0 * gp1 + gp2), CI)
            if np.any(last):
                gm2 = lin[-2 * d].gather(Gi[l - 2 * d])
                gm3 = lin[-3 * d].gather(Gi[l - 3 * d])
                CI = np.where(last[:, None],
                              (h / 24.0) * (gm3 - 5.0 * gm2 + 19.0 * gm1 + 9.0 * g0), CI)
            if np.any(fallback):
                CI = np.where(fallback[:, None], (h / 2.0) * (gm1 + g0), CI)
            J[l] = np.where(rec[:, None], Jn + CI, 0.0)
            if apron.idx.size:
                live = apron.idx[dist > E[apron.idx]]
                if live.size:
                    J[l, live] = self._apron_values(plan, apron, anchor_G,
                                                    Gi, l, d, live)
        return J

    def _apron_anchor_eval(self, plan: _CompPlan, apron: _Apron,
                           Vprev: np.ndarray, up: bool) -> Callable:
        """Closure giving G at the apron anchor points for one level: the
        coupling row at the exact boundary point applied to the
        time-interpolated boundary trace of the previous iterate."""
        col = Vprev[:, apron.edge_col]  # (L+1, n, p)
        x_edge = self.xgrid[apron.edge_col]
        sign = -1.0 if up else 1.0

        def anchor_G(l: int) -> np.ndarray:
            ta = self.tgrid[l] + sign * apron.delta
            Vb = lagrange_time_interp(col, self.tgrid, ta)
            out = np.empty((ta.size, Vprev.shape[-1]))
            for q, t in enumerate(ta):
                row = self._coupling_matrix(float(t), x_edge)[0, plan.comp]
                out[q] = row @ Vb[q]
            return out

        return anchor_G

    def _apron_values(self, plan: _CompPlan, apron: _Apron, anchor_G, Gi,
                      l: int, d: int, live: np.ndarray) -> np.ndarray:
        sel = np.searchsorted(apron.idx, live)
        ga = anchor_G(l)[sel]
        g0 = Gi[l, live]
        lv2 = 0 <= l + 2 * d <= self.Nt
        use4 = apron.ok2[sel] & lv2
        out = np.empty_like(g0)
        if np.any(use4):
            rows = live[use4]
            srows = sel[use4]
            g1 = plan.lin[d].gather(Gi[l + d])[rows]
            g2 = plan.lin[2 * d].gather(Gi[l + 2 * d])[rows]
            w = apron.weights[srows]
            out[use4] = (w[:, 0:1] * ga[use4] + w[:, 1:2] * g0[use4]
                         + w[:, 2:3] * g1 + w[:, 3:4] * g2)
        if np.any(~use4):
            dl = apron.delta[sel[~use4]][:, None]
            out[~use4] = 0.5 * dl * (ga[~use4] + g0[~use4])
        return out

    # -- datum and reflection composition --------------------------------

    def _assemble_D(self) -> np.ndarray:
        raise NotImplementedError

    def _reflection_sources(self, comp: int):
        """(row weights, source components) for the reflecting edge of
        `comp`; sources are read at their column-0 coupling integrals."""
        raise NotImplementedError

    def _compose_reflections(self, Vnew: np.ndarray, Jsig: np.ndarray):
        for i in range(self.n):
            entry = self._refl.get(i)
            if entry is None or entry["li"].size == 0:
                continue
            rows, sources = self._reflection_sources(i)
            base, w = entry["base"], entry["w"]
            acc = None
            for weight, src in zip(rows, sources):
                if weight == 0.0:
                    continue
                colJ = Jsig[:, 0, src]  # (L+1, p)
                vals = (w[0][:, None] * colJ[base] + w[1][:, None] * colJ[base + 1]
                        + w[2][:, None] * colJ[base + 2]
                        + w[3][:, None] * colJ[base + 3])
                acc = weight * vals if acc is None else acc + weight * vals
            if acc is not None:
                Vnew[entry["li"], entry["ji"], i] += acc

    # -- Picard loop ------------------------------------------------------

    def solve(self, *, maxit: int = 200, rtol: float = 1e-11) -> tuple:
        """Run the fixed-point iteration; returns (values, report)."""
        D = self._assemble_D()
        report = PicardReport(tolerance=rtol)
        if self.spec.coupling.is_zero:
            report.converged = True
            report.iterations = 1
            report.message = "uncoupled system: datum composition is exact"
            return D, report
        self._ensure_c_stack()
        rate = self._coupling_rate()
        report.weight_rate = rate
        wts = np.exp(-rate * self._dist)[:, None, None, None]
        V = D.copy()
        Jsig = np.zeros_like(V)
        prev_res = None
        stall = 0
        for it in range(1, maxit + 1):
            G = self._compute_G(V)
            for i, plan in enumerate(self.plans):
                mode = plan.sig_mode(self.T)
                Gi = np.ascontiguousarray(G[:, :, i])
                if mode == "past":
                    Jsig[:, :, i] = self._accumulate(Gi, V, plan, up=True)
                elif mode == "future":
                    Jsig[:, :, i] = -self._accumulate(Gi, V, plan, up=False)
                else:
                    ju = self._accumulate(Gi, V, plan, up=True)
                    jd = -self._accumulate(Gi, V, plan, up=False)
                    past = self.tgrid[:, None] > plan.future_cut[None, :]
                    Jsig[:, :, i] = np.where(past[:, :, None], ju, jd)
            Vnew = D + Jsig
            self._compose_reflections(Vnew, Jsig)
            num = float(np.max(wts * np.abs(Vnew - V)))
            den = float(np.max(wts * np.abs(Vnew))) + 1e-300
            res = num / den
            report.iterations = it
            report.residuals.append(res)
            if prev_res is not None and prev_res > 0.0:
                ratio = res / prev_res
                report.ratios.append(ratio)
                stall = stall + 1 if ratio >= 1.0 else 0
            V = Vnew
            if res < rtol:
                report.converged = True
                break
            if stall >= 5:
                report.message = "five consecutive non-contracting sweeps"
                err = SolverConvergenceError(
                    f"fixed-point iteration diverging after {it} sweeps "
                    f"(last residuals {report.residuals[-3:]})")
                err.report = report
                raise err
            prev_res = res
        else:
            report.message = f"tolerance {rtol} not reached in {maxit} sweeps"
            err = SolverConvergenceError(report.message)
            err.report = report
            raise err
        return V, report


# ---------------------------------------------------------------------------
# data normalization
# ---------------------------------------------------------------------------

def _as_profile_data(data, grid: np.ndarray, n: int):
    """Normalize profile data (initial or terminal) to an evaluator
    f(comp, pts) -> (len(pts), p) plus the batch width p (0 when the input
    carried no batch axis).  Accepts None (zero data), a callable of a
    position array returning (len, n[, p]), or an array sampled on `grid`."""
    if data is None:
        def ev(comp, pts):
            return np.zeros((np.asarray(pts).size, 1))
        return ev, 0
    if callable(data):
        probe = np.asarray(data(grid), dtype=float)
        if probe.shape[:2] != (grid.size, n):
            raise PreconditionError(
                f"data callable returned shape {probe.shape}, expected "
                f"({grid.size}, {n}[, p])")
        p = probe.shape[2] if probe.ndim == 3 else 0

        def ev(comp, pts):
            vals = np.asarray(data(np.asarray(pts, dtype=float)), dtype=float)
            out = vals[:, comp]
            return out if out.ndim == 2 else out[:, None]

        return ev, p
    arr = np.asarray(data, dtype=float)
    if arr.shape[:2] != (grid.size, n):
        raise PreconditionError(
            f"data array has shape {arr.shape}, expected ({grid.size}, {n}[, p])")
    p = arr.shape[2] if arr.ndim == 3 else 0
    flat = arr if arr.ndim == 3 else arr[:, :, None]

    def ev(comp, pts):
        pts = np.asarray(pts, dtype=float)
        out = np.empty((pts.size, flat.shape[2]))
        for q in range(flat.shape[2]):
            out[:, q] = np.interp(pts, grid, flat[:, comp, q])
        return out

    return ev, p


def _as_boundary_data(data, tgrid: np.ndarray, m: int):
    """Normalize control traces to f(j, times) -> (len, p), j in 0..m-1."""
    if data is None:
        def ev(j, ts):
            return np.zeros((np.asarray(ts).size, 1))
        return ev, 0
    if callable(data):
        probe = np.asarray(data(tgrid), dtype=float)
        if probe.shape[:2] != (tgrid.size, m):
            raise PreconditionError(
                f"control callable returned shape {probe.shape}, expected "
                f"({tgrid.size}, {m}[, p])")
        p = probe.shape[2] if probe.ndim == 3 else 0

        def ev(j, ts):
            vals = np.asarray(data(np.asarray(ts, dtype=float)), dtype=float)
            out = vals[:, j]
            return out if out.ndim == 2 else out[:, None]

        return ev, p
    arr = np.asarray(data, dtype=float)
    if arr.shape[:2] != (tgrid.size, m):
        raise PreconditionError(
            f"control array has shape {arr.shape}, expected ({tgrid.size}, {m}[, p])")
    p = arr.shape[2] if arr.ndim == 3 else 0
    flat = arr if arr.ndim == 3 else arr[:, :, None]

    def ev(j, ts):
        ts = np.asarray(ts, dtype=float)
        out = np.empty((ts.size, flat.shape[2]))
        for q in range(flat.shape[2]):
            out[:, q] = np.interp(ts, tgrid, flat[:, j, q])
        return out

    return ev, p


# ---------------------------------------------------------------------------
# forward march (data at t = 0)
# ---------------------------------------------------------------------------

class ForwardMarch(_March):
    """March for the controlled system: u(0,.) = u0, boundary control
    u_+(t,1) = U(t), reflection u_-(t,0) = B u_+(t,0)."""

    orientation = "initial"

    def _finalize_anchoring(self):
        for plan in self.plans:
            plan.future_cut = np.full(self.Nx + 1, -np.inf)

    def _weight_distance(self):
        return self.tgrid.copy()

    def _coupling_matrix(self, t, x):
        return self.spec.coupling.C(t, np.atleast_1d(np.asarray(x, dtype=float)))

    def _coupling_rate(self):
        rho = float(np.max(np.sum(np.abs(self.spec.B), axis=1)))
        return self._capped_rate(rho, "C")

    def _build_reflections(self):
        for i in range(self.spec.k):
            self._refl[i] = self._make_refl_entry(self.plans[i], past_edge=True)

    def _reflection_sources(self, comp):
        return self.spec.B[comp], list(range(self.spec.k, self.n))

    def set_data(self, u0, control=None):
        self._u0, p0 = _as_profile_data(u0, self.xgrid, self.n)
        self._U, pU = _as_boundary_data(control, self.tgrid, self.spec.m)
        if p0 and pU and p0 != pU:
            raise PreconditionError(
                f"batch widths differ: initial data {p0}, control {pU}")
        self.p = max(p0, pU, 1)
        self.had_batch = bool(p0 or pU)

    def _tile(self, vals: np.ndarray) -> np.ndarray:
        if vals.shape[1] == self.p:
            return vals
        return np.broadcast_to(vals, (vals.shape[0], self.p)).copy()

    def _plus_datum(self, j: int, t0: np.ndarray) -> np.ndarray:
        """Pure datum of left-moving component k+j at boundary points
        (t0, x=0): the control if the trace reaches x=1 after t=0, else the
        initial profile."""
        plan = self.plans[self.spec.k + j]
        coord = self.flow.coords[self.spec.k + j]
        from_ctrl = t0 > plan.tau + _SNAP
        out = np.empty((t0.size, self.p))
        if np.any(from_ctrl):
            out[from_ctrl] = self._tile(self._U(j, t0[from_ctrl] - plan.tau))
        if np.any(~from_ctrl):
            pos = coord.inverse(np.clip(t0[~from_ctrl], 0.0, plan.tau))
            out[~from_ctrl] = self._tile(self._u0(self.spec.k + j, pos))
        return out

    def _assemble_D(self) -> np.ndarray:
        k = self.spec.k
        L, nxp = self.Nt, self.Nx + 1
        D = np.empty((L + 1, nxp, self.n, self.p))
        tl = self.tgrid[:, None]
        for i, plan in enumerate(self.plans):
            coord = self.flow.coords[i]
            sgn = 1.0 if plan.rightward else -1.0
            pos0 = coord.inverse(plan.Tx[None, :] - sgn * tl)
            Di = self._tile(self._u0(i, np.clip(pos0.ravel(), 0.0, 1.0))) \
                .reshape(L + 1, nxp, self.p)
            li, ji = np.nonzero(tl > plan.E_past[None, :] + _SNAP)
            if li.size:
                t0 = self.tgrid[li] - plan.E_past[ji]
                if i < k:
                    acc = np.zeros((li.size, self.p))
                    for j in range(self.spec.m):
                        b = self.spec.B[i, j]
                        if b != 0.0:
                            acc += b * self._plus_datum(j, t0)
                else:
                    acc = self._tile(self._U(i - k, t0))
                Di[li, ji] = acc
            D[:, :, i] = Di
        return D

    def run(self, u0, control=None, *, maxit=200, rtol=1e-11) -> SolutionField:
        self.set_data(u0, control)
        V, report = self.solve(maxit=maxit, rtol=rtol)
        vals = V if self.had_batch else V[..., 0]
        return SolutionField(self.tgrid, self.xgrid, vals, "initial", report)


# ---------------------------------------------------------------------------
# adjoint march (data at t = T)
# ---------------------------------------------------------------------------

class AdjointMarch(_March):
    """March for the observation system run backward from t = T: terminal
    data v(T,.), right-movers vanish entering x = 1, left-movers reflect at
    x = 0 through M = diag(lam_+(0))^-1 B^T diag(lam_-(0)), and the
    zero-order term is Sigma'(x) - C(t,x)^T."""

    orientation = "terminal"

    def __init__(self, spec, T, Nt, Nx):
        lam0 = np.array([spec.speeds.lam(i, 0.0) for i in range(1, spec.n + 1)])
        self.M = (spec.B.T * lam0[None, :spec.k]) / lam0[spec.k:, None]
        super().__init__(spec, T, Nt, Nx)

    def _finalize_anchoring(self):
        for plan in self.plans:
            plan.future_cut = np.full(self.Nx + 1, np.inf)

    def _weight_distance(self):
        return self.T - self.tgrid

    def _coupling_matrix(self, t, x):
        return self.spec.coupling.cbold(t, np.atleast_1d(np.asarray(x, dtype=float)))

    def _coupling_rate(self):
        rho = float(np.max(np.sum(np.abs(self.M), axis=1))) if self.M.size else 0.0
        return self._capped_rate(rho, "cbold")

    def _build_reflections(self):
        for i in range(self.spec.k, self.n):
            self._refl[i] = self._make_refl_entry(self.plans[i], past_edge=False)

    def _reflection_sources(self, comp):
        return self.M[comp - self.spec.k], list(range(self.spec.k))

    def set_data(self, terminal):
        self._vT, p = _as_profile_data(terminal, self.xgrid, self.n)
        self.p = max(p, 1)
        self.had_batch = bool(p)

    def _tile(self, vals):
        if vals.shape[1] == self.p:
            return vals
        return np.broadcast_to(vals, (vals.shape[0], self.p)).copy()

    def _minus_datum(self, jp: int, t0: np.ndarray) -> np.ndarray:
        """Pure datum of right-moving component jp at boundary points
        (t0, x=0): the terminal profile if the forward trace stays inside
        until t=T, else zero (the x = 1 outflow datum)."""
        plan = self.plans[jp]
        coord = self.flow.coords[jp]
        term = (self.T - t0) <= plan.tau + _SNAP
        out = np.zeros((t0.size, self.p))
        if np.any(term):
            pos = coord.inverse(np.clip(self.T - t0[term], 0.0, plan.tau))
            out[term] = self._tile(self._vT(jp, pos))
        return out

    def _assemble_D(self) -> np.ndarray:
        k = self.spec.k
        L, nxp = self.Nt, self.Nx + 1
        D = np.empty((L + 1, nxp, self.n, self.p))
        tl = self.tgrid[:, None]
        for i, plan in enumerate(self.plans):
            coord = self.flow.coords[i]
            sgn = 1.0 if plan.rightward else -1.0
            posT = coord.inverse(plan.Tx[None, :] + sgn * (self.T - tl))
            Di = self._tile(self._vT(i, np.clip(posT.ravel(), 0.0, 1.0))) \
                .reshape(L + 1, nxp, self.p)
            li, ji = np.nonzero((self.T - tl) > plan.E_fut[None, :] + _SNAP)
            if li.size:
                if i < k:
                    acc = np.zeros((li.size, self.p))
                else:
                    t0 = self.tgrid[li] + plan.E_fut[ji]
                    acc = np.zeros((li.size, self.p))
                    for jp in range(k):
                        mij = self.M[i - k, jp]
                        if mij != 0.0:
                            acc += mij * self._minus_datum(jp, t0)
                Di[li, ji] = acc
            D[:, :, i] = Di
        return D

    def run(self, terminal, *, maxit=200, rtol=1e-11) -> SolutionField:
        self.set_data(terminal)
        V, report = self.solve(maxit=maxit, rtol=rtol)
        vals = V if self.had_batch else V[..., 0]
        return SolutionField(self.tgrid, self.xgrid, vals, "terminal", report)


# ---------------------------------------------------------------------------
# semi-Lagrangian time stepper (independent cross-check path)
# ---------------------------------------------------------------------------

def _generic_march(spec, T, Nt, Nx, data_eval, forward: bool, bdry, cmat):
    """Explicit interpolation/Heun stepping shared by both orientations.

    `bdry(tnew, Vn)` fills the inflow columns of the new level after the
    interior update; nodes whose foot leaves the strip are filled from the
    inflow-column trace interpolated at the exact crossing time."""
    tgrid = np.linspace(0.0, T, Nt + 1)
    xgrid = np.linspace(0.0, 1.0, Nx + 1)
    h = tgrid[1] - tgrid[0]
    k, n = spec.k, spec.n
    coords = CharacteristicFlow(spec).coords
    # per component: crossing offset from the new level to the inflow edge
    # seen by the trace, and the column holding that edge
    cross, cols = [], []
    for i in range(n):
        Tx = np.asarray(coords[i].value(xgrid), dtype=float)
        if i < k:
            cross.append(Tx if forward else coords[i].tau - Tx)
            cols.append(0 if forward else Nx)
        else:
            cross.append(coords[i].tau - Tx if forward else Tx)
            cols.append(Nx if forward else 0)
    V = data_eval(tgrid, xgrid)
    step = h if forward else -h
    lev = range(Nt) if forward else range(Nt, 0, -1)
    for l in lev:
        told = tgrid[l]
        tnew = told + step
        Vl = V[l]
        Vn = np.empty_like(Vl)
        C_new = cmat(tnew, xgrid)
        for i in range(n):
            speed = spec.speeds.speeds[i]
            sgn = 1.0 if i < k else -1.0
            hh = -step  # trace from the new level back to the old one
            x = xgrid
            k1 = sgn * speed(x)
            k2 = sgn * speed(x + 0.5 * hh * k1)
            k3 = sgn * speed(x + 0.5 * hh * k2)
            k4 = sgn * speed(x + hh * k3)
            feet = x + (hh / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            feet_c = np.clip(feet, 0.0, 1.0)
            uf = np.empty_like(Vl)
            for c in range(n):
                comp = Vl[:, c]
                if comp.ndim == 1:
                    uf[:, c] = np.interp(feet_c, xgrid, comp)
                else:
                    for q in range(comp.shape[1]):
                        uf[:, c, q] = np.interp(feet_c, xgrid, comp[:, q])
            k1c = np.einsum("xab,xb...->xa...", cmat(told, feet_c), uf)
            k2c = np.einsum("xab,xb...->xa...", C_new, uf + step * k1c)
            Vn[:, i] = (uf + 0.5 * step * (k1c + k2c))[:, i]
        bdry(tnew, Vn)
        for i in range(n):
            out = cross[i] < h - _SNAP
            out[cols[i]] = False
            if np.any(out):
                th = np.clip(cross[i][out] / h, 0.0, 1.0)
                ex = (slice(None),) + (None,) * (Vn.ndim - 2)
                Vn[out, i] = (1.0 - th)[ex] * Vn[cols[i], i] + th[ex] * Vl[cols[i], i]
        V[l + (1 if forward else -1)] = Vn
    return SolutionField(tgrid, xgrid, V, "initial" if forward else "terminal",
                         PicardReport(converged=True, iterations=Nt,
                                      message="explicit stepping"))


def _generic_forward(spec, T, Nt, Nx, u0, control):
    tg = np.linspace(0.0, T, Nt + 1)
    xg = np.linspace(0.0, 1.0, Nx + 1)
    ev0, p0 = _as_profile_data(u0, xg, spec.n)
    evU, pU = _as_boundary_data(control, tg, spec.m)
    had = bool(p0 or pU)
    p = max(p0, pU, 1)
    k = spec.k

    def data_eval(tgrid, xgrid):
        tail = (spec.n, p) if had else (spec.n,)
        V = np.zeros((Nt + 1, Nx + 1) + tail)
        init = np.stack([ev0(i, xgrid) for i in range(spec.n)], axis=1)
        V[0] = init if had else init[..., 0]
        return V

    def bdry(tnew, Vn):
        ts = np.array([tnew])
        ctrl = np.stack([evU(j, ts)[0] for j in range(spec.m)])
        Vn[-1, k:] = ctrl if had else ctrl[:, 0]
        Vn[0, :k] = np.einsum("ij,j...->i...", spec.B, Vn[0, k:])

    def cmat(t, x):
        return spec.coupling.C(t, np.atleast_1d(x))

    return _generic_march(spec, T, Nt, Nx, data_eval, True, bdry, cmat)


def _generic_adjoint(spec, T, Nt, Nx, terminal):
    xg = np.linspace(0.0, 1.0, Nx + 1)
    evT, pT = _as_profile_data(terminal, xg, spec.n)
    had = bool(pT)
    k = spec.k
    lam0 = np.array([spec.speeds.lam(i, 0.0) for i in range(1, spec.n + 1)])
    M = (spec.B.T * lam0[None, :k]) / lam0[k:, None]

    def data_eval(tgrid, xgrid):
        tail = (spec.n, max(pT, 1)) if had else (spec.n,)
        V = np.zeros((Nt + 1, Nx + 1) + tail)
        term = np.stack([evT(i, xgrid) for i in range(spec.n)], axis=1)
        V[Nt] = term if had else term[..., 0]
        return V

    def bdry(tnew, Vn):
        Vn[-1, :k] = 0.0
        Vn[0, k:] = np.einsum("ij,j...->i...", M, Vn[0, :k])

    def cmat(t, x):
        return spec.coupling.cbold(t, np.atleast_1d(x))

    return _generic_march(spec, T, Nt, Nx, data_eval, False, bdry, cmat)


# ---------------------------------------------------------------------------
# public entry points
# ---------------------------------------------------------------------------

def solve_forward(spec: SystemSpec, T: float, Nt: int, Nx: int, u0,
                  control=None, *, method: str = "characteristic",
                  maxit: int = 200, rtol: float = 1e-11) -> SolutionField:
    """Solve the controlled system on [0,T] from initial data u0 with
    boundary control U (callable, array, or None for zero)."""
    if method == "generic":
        return _generic_forward(spec, T, Nt, Nx, u0, control)
    if method != "characteristic":
        raise PreconditionError(f"unknown method {method!r}")
    return ForwardMarch(spec, T, Nt, Nx).run(u0, control, maxit=maxit, rtol=rtol)


def solve_adjoint(spec: SystemSpec, T: float, Nt: int, Nx: int, terminal,
                  *, method: str = "characteristic", maxit: int = 200,
                  rtol: float = 1e-11) -> SolutionField:
    """Solve the observation system backward from data at t = T."""
    if method == "generic":
        return _generic_adjoint(spec, T, Nt, Nx, terminal)
    if method != "characteristic":
        raise PreconditionError(f"unknown method {method!r}")
    return AdjointMarch(spec, T, Nt, Nx).run(terminal, maxit=maxit, rtol=rtol)


def boundary_observation(spec: SystemSpec, field: SolutionField) -> np.ndarray:
    """Observation trace lam_+(1) v_+(t, 1) of an adjoint solution, shaped
    (Nt+1, m[, p])."""
    lam1 = np.array([spec.speeds.lam(i, 1.0) for i in range(spec.k + 1, spec.n + 1)])
    vals = field.values[:, -1, spec.k:]
    shape = (1, spec.m) + (1,) * (vals.ndim - 2)
    return vals * lam1.reshape(shape)
