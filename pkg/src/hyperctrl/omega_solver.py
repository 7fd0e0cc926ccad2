"""Broad solutions with right-edge data and staged left-boundary windows.

This module solves the companion transport problem of
:mod:`.rectangle_solver` in which data are prescribed on the *outflow*
side of every rightward component: a full n-component trace ``f`` on the
right edge x = 1, the leftward part ``g`` of the bottom edge t = 0, and
-- on staggered time windows (T - tau_l, T - tau_{l-1}) of the left edge
-- reduced reflection conditions

    w_{l..k}(t, 0) = Q_l (w_1, .., w_{l-1}, w_{l+m}, .., w_{k+m})(t, 0),

obtained by solving the last rows of the left boundary condition for the
trailing rightward components (:func:`q_matrix`).  Every rightward
characteristic through the region below the component-(k-m+1) curve
reaches x = 1 before time T, so on that influence region the solution is
determined by (f, g) alone; :func:`solve_omega` computes it there.
:func:`solve_rectangle_hat` extends the problem to the full rectangle by
adding terminal data ``q`` for components 1..k-m and the final window
(T - tau_{k-m+1}, T); its restriction to the influence region reproduces
:func:`solve_omega`.

Both solvers iterate the characteristic integral equations of the broad
solution: each component value equals its anchor datum plus the integral
of (F w + gamma)_j along the component flow between anchor and node,
with F(t, x) = Sigma'(x) - C(t + tau, x)^T.  The fixed point is computed
region by region -- the triangle below the component-k curve first, then
the bands between consecutive characteristic curves, finally (on the
full rectangle) the complement above -- so each sweep reads
already-converged values along path portions that dip into deeper
regions.  Contraction is reported in weighted sup norms: exp(L x) on the
deepest region and exp(L (-t + Phi(x))) on the bands, where Phi is the
slowness integral of the band's bounding speed.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from .characteristics import CharacteristicFlow
from .errors import PreconditionError, SolverConvergenceError
from .fields import PicardReport, SolutionField
from .rectangle_solver import _as_boundary_data, _as_profile_data
from .system import SystemSpec, check_B_class

__all__ = [
    "q_matrix",
    "solve_omega",
    "solve_rectangle_hat",
    "stability_constant",
]

_SNAP = 1e-9  # level-fraction tolerance for seam classification


# ---------------------------------------------------------------------------
# reduced left-boundary reflection matrices
# ---------------------------------------------------------------------------

def q_matrix(spec: SystemSpec, l: int) -> np.ndarray:
    """Solve the trailing left-boundary rows for components l..k.

    The left boundary condition reads, row by row (j = 1..m),

        lam_{k+j}(0) w_{k+j}(t, 0) = sum_q B[q, j] lam_q(0) w_q(t, 0).

    Taking the last ``i = k - l + 1`` rows and solving them for
    (w_l, .., w_k) in terms of the remaining k boundary values
    z = (w_1, .., w_{l-1}, w_{l+m}, .., w_{k+m}) yields the i x k matrix
    Q_l with w_{l..k}(t, 0) = Q_l z(t, 0).  Requires the trailing i x i
    block of B to be invertible.
    """
    k, m, n = spec.k, spec.m, spec.n
    i = k - l + 1
    if not 1 <= i <= min(k, m):
        raise PreconditionError(
            f"reduced reflection index l={l} needs k-m+1 <= l <= k "
            f"(k={k}, m={m})"
        )
    if not check_B_class(spec.boundary, k, m, "row-condition", i=i):
        raise PreconditionError(
            f"trailing {i}x{i} block of the boundary matrix is singular; "
            f"the left boundary rows cannot be solved for components "
            f"{l}..{k}"
        )
    B = spec.boundary.matrix
    lam0 = np.array([spec.speeds.lam(c, 0.0) for c in range(1, n + 1)])
    G = B[l - 1:, m - i:].T * lam0[l - 1:k]
    rhs = np.zeros((i, k))
    if l > 1:
        rhs[:, :l - 1] = -(B[:l - 1, m - i:].T * lam0[:l - 1])
    rhs[:, l - 1:] = np.diag(lam0[k + m - i:])
    return np.linalg.solve(G, rhs)


def _q_inputs(k: int, m: int, l: int) -> list:
    """0-based component indices feeding Q_l: (w_1..w_{l-1}, w_{l+m}..w_n)."""
    return list(range(l - 1)) + list(range(l + m - 1, k + m))


# ---------------------------------------------------------------------------
# per-component path geometry
# ---------------------------------------------------------------------------

class _Geom:
    """Flow-sampled path tables for one component on the solver grid.

    ``P1[d, q]`` is the position, ``d`` time levels toward x = 1 along
    the component characteristic through grid column q (toward the
    future for rightward components, toward the past for leftward
    ones); ``P0`` is the analogous table toward x = 0 (rightward
    components only).  ``D*`` counts whole steps to the boundary and
    ``r*`` the fractional remainder in steps.
    """

    def __init__(self, engine: "_BroadEngine", comp: int):
        coord = engine.flow.coords[comp - 1]
        dt, Nt = engine.dt, engine.Nt
        Tx = coord.value(engine.xgrid)
        self.comp = comp
        self.rightward = comp <= engine.k
        c1 = coord.tau - Tx
        self.c1 = c1
        self.D1 = np.minimum(np.floor(c1 / dt + _SNAP).astype(int), Nt)
        self.r1 = np.clip(c1 / dt - self.D1, 0.0, None)
        steps = np.arange(int(self.D1.max()) + 2)[:, None] * dt
        self.P1 = np.clip(coord.inverse(Tx[None, :] + steps), 0.0, 1.0)
        self.idx1, self.fr1 = engine._stencil(self.P1)
        if self.rightward:
            self.i_star = np.floor((engine.T - c1) / dt + _SNAP).astype(int)
            if comp >= engine.k - engine.m + 1:
                b0 = Tx
                self.b0 = b0
                self.D0 = np.minimum(np.floor(b0 / dt + _SNAP).astype(int), Nt)
                self.r0 = np.clip(b0 / dt - self.D0, 0.0, None)
                down = np.arange(int(self.D0.max()) + 2)[:, None] * dt
                self.P0 = np.clip(coord.inverse(Tx[None, :] - down), 0.0, 1.0)
                self.idx0, self.fr0 = engine._stencil(self.P0)
        else:
            self.i_first = np.clip(
                np.ceil(c1 / dt - _SNAP).astype(int), 0, Nt + 1
            )


class _Static:
    """Sweep-independent anchor data for one component."""

    __slots__ = ("fmask", "f_static", "topmask", "top_static", "Qmask",
                 "t_hat", "wl", "gmask", "g_static", "dmax_up")

    def __init__(self):
        self.fmask = None
        self.f_static = None
        self.topmask = None
        self.top_static = None
        self.Qmask = None
        self.t_hat = None
        self.wl = None
        self.gmask = None
        self.g_static = None
        self.dmax_up = 0


class _Stage:
    """One region of the staged solve: node set, weight, fill curve."""

    __slots__ = ("label", "mask", "weight", "gam")

    def __init__(self, label, mask, weight, gam):
        self.label = label
        self.mask = mask
        self.weight = weight
        self.gam = gam


# ---------------------------------------------------------------------------
# the staged Picard engine
# ---------------------------------------------------------------------------

class _BroadEngine:
    def __init__(self, sys: SystemSpec, T: float, Nt: int, Nx: int, *,
                 hat: bool, f=None, g=None, q=None, gamma=None):
        self.sys = sys
        self.k, self.m, self.n = sys.k, sys.m, sys.n
        if self.k < self.m:
            raise PreconditionError(
                f"staged-window solves need k >= m, got k={self.k}, "
                f"m={self.m} (augment the system first)"
            )
        self.T = float(T)
        self.Nt, self.Nx = int(Nt), int(Nx)
        self.hat = bool(hat)
        self.tgrid = np.linspace(0.0, self.T, self.Nt + 1)
        self.xgrid = np.linspace(0.0, 1.0, self.Nx + 1)
        self.dt = self.T / self.Nt
        self.dx = 1.0 / self.Nx
        self.snap_t = _SNAP * max(1.0, self.T)
        self.flow = CharacteristicFlow(sys)

        # Every staged window (T - tau_l, T - tau_{l-1}) must lie in t >= 0,
        # otherwise backward characteristics of the fastest rightward
        # components exit through the bottom edge where no data live.
        if self.T < sys.taus[self.k - 1] - 1e-12:
            raise PreconditionError(
                f"horizon T={self.T} is below the slowest rightward "
                f"crossing time tau_{self.k}={sys.taus[self.k - 1]:.6g}; "
                f"the staged left-boundary windows would leak through t=0"
            )

        self._init_data(f, g, q, gamma)
        self._init_regions()
        self.geoms = [_Geom(self, j) for j in range(1, self.n + 1)]
        self._init_static()
        self._init_coupling()
        self._init_weights()
        self._qcache = {}

    # -- setup pieces ------------------------------------------------------

    def _init_data(self, f, g, q, gamma):
        k, m, n = self.k, self.m, self.n
        self.f_ev, pf = _as_boundary_data(f, self.tgrid, n)
        self.g_ev, pg = _as_profile_data(g, self.xgrid, m)
        if self.hat and k > m:
            self.q_ev, pq = _as_profile_data(q, self.xgrid, k - m)
        else:
            if q is not None and not self.hat:
                raise PreconditionError(
                    "terminal data q belong to the full-rectangle solve")
            self.q_ev, pq = None, 0
        widths = {p for p in (pf, pg, pq) if p}
        gamma_grid = None
        if gamma is not None:
            if callable(gamma):
                rows = [np.asarray(gamma(t, self.xgrid), dtype=float)
                        for t in self.tgrid]
                gamma_grid = np.stack(rows)
            else:
                gamma_grid = np.asarray(gamma, dtype=float)
            if gamma_grid.shape[:3] != (self.Nt + 1, self.Nx + 1, n):
                raise PreconditionError(
                    f"source term has shape {gamma_grid.shape}, expected "
                    f"({self.Nt + 1}, {self.Nx + 1}, {n}[, p])")
            if gamma_grid.ndim == 4:
                widths.add(gamma_grid.shape[3])
            else:
                gamma_grid = gamma_grid[..., None]
        if len(widths) > 1:
            raise PreconditionError(
                f"batched data have inconsistent widths {sorted(widths)}")
        self.p = widths.pop() if widths else 0
        self.P = max(1, self.p)
        self.gg = None
        if gamma_grid is not None:
            self.gg = np.broadcast_to(
                gamma_grid, gamma_grid.shape[:3] + (self.P,)).copy()

    def _init_regions(self):
        k, m = self.k, self.m
        self.gam = {}
        for ell in range(k - m + 1, k + 1):
            curve = self.flow.boundary_curve(ell, self.T)
            self.gam[ell] = curve.gamma(self.xgrid)
        region = np.full((self.Nt + 1, self.Nx + 1), k - m, dtype=int)
        for ell in range(k - m + 1, k + 1):
            below = self.tgrid[:, None] <= self.gam[ell][None, :] + self.snap_t
            region[below] = ell
        self.region = region
        self.inmask = region >= k - m + 1

    def _init_static(self):
        k, m, Nt = self.k, self.m, self.Nt
        rows = np.arange(Nt + 1)
        edges = np.array([self.T - self.sys.taus[l - 1]
                          for l in range(k, k - m, -1)])
        valid = self.inmask if not self.hat else np.ones_like(self.inmask)
        self.static = []
        for j in range(1, self.n + 1):
            geo = self.geoms[j - 1]
            st = _Static()
            if geo.rightward:
                ffull = rows[:, None] <= geo.i_star[None, :]
                if not self.hat and j <= k - m + 1:
                    # inside the influence region these components always
                    # reach x = 1; stray nodes are curve-snap roundoff
                    ffull = np.ones_like(ffull)
                st.fmask = ffull & valid
                rest = valid & ~ffull
                t_a = np.clip(self.tgrid[:, None] + geo.c1[None, :],
                              0.0, self.T)
                st.f_static = self._eval_full(self.f_ev, j - 1, t_a)
                st.dmax_up = int(geo.D1[st.fmask.any(axis=0)].max()) \
                    if st.fmask.any() else 0
                if self.hat and j <= k - m and rest.any():
                    st.topmask = rest
                    ridx = np.clip(Nt - rows, 0, geo.P1.shape[0] - 1)
                    xtop = geo.P1[ridx[:, None], np.arange(self.Nx + 1)[None, :]]
                    st.top_static = self._eval_full(self.q_ev, j - 1, xtop)
                    st.dmax_up = max(
                        st.dmax_up,
                        int(Nt - rows[st.topmask.any(axis=1)].min()))
                elif j >= k - m + 1 and rest.any():
                    st.Qmask = rest
                    st.t_hat = np.clip(
                        self.tgrid[:, None] - geo.b0[None, :], 0.0, self.T)
                    widx = np.searchsorted(edges, st.t_hat, side="right")
                    wl = k - widx + 1
                    if not self.hat:
                        wl = np.maximum(wl, k - m + 2)
                    st.wl = wl
                elif rest.any():
                    # rightward components 1..k-m+1 always reach x=1 inside
                    # the influence region; leftover nodes are outside it.
                    st.Qmask = None
            else:
                ffull = rows[:, None] >= geo.i_first[None, :]
                st.fmask = ffull & valid
                st.gmask = valid & ~ffull
                t_p = np.clip(self.tgrid[:, None] - geo.c1[None, :],
                              0.0, self.T)
                st.f_static = self._eval_full(self.f_ev, j - 1, t_p)
                ridx = np.clip(rows, 0, geo.P1.shape[0] - 1)
                eta = geo.P1[ridx[:, None], np.arange(self.Nx + 1)[None, :]]
                st.g_static = self._eval_full(
                    self.g_ev, j - self.k - 1, eta)
            self.static.append(st)

    def _eval_full(self, ev, comp0: int, args: np.ndarray) -> np.ndarray:
        vals = ev(comp0, args.ravel())
        out = vals.reshape(args.shape + (vals.shape[-1],))
        if out.shape[-1] != self.P:
            out = np.broadcast_to(out, args.shape + (self.P,))
        return out

    def _init_coupling(self):
        n = self.n
        Fg = np.empty((self.Nt + 1, self.Nx + 1, n, n))
        for li, t in enumerate(self.tgrid):
            Fg[li] = self.sys.coupling.cbold(t, self.xgrid)
        self.Fg = Fg if float(np.max(np.abs(Fg))) > 0.0 else None
        fbound = self.sys.coupling.bound(0.0, self.T, "cbold")
        jbound = max(
            float(np.max(1.0 / s(self.xgrid)))
            for s in self.sys.speeds.speeds
        )
        self.L = 2.0 * fbound * jbound

    def _init_weights(self):
        k, m = self.k, self.m
        order = list(range(k, k - m, -1))
        if self.hat:
            order.append(k - m)
        self.stages = []
        for ell in order:
            mask = self.region == ell
            if ell == k:
                wfield = np.broadcast_to(
                    self.xgrid[None, :], mask.shape).astype(float)
            else:
                chi = self.sys.speeds.speeds[max(ell, 1) - 1]
                vals = chi(self.xgrid)
                eps = float(np.min(vals)) / 4.0
                slow = 1.0 / (vals + eps)
                phi = np.concatenate((
                    [0.0],
                    np.cumsum(0.5 * (slow[1:] + slow[:-1]) * self.dx),
                ))
                wfield = -self.tgrid[:, None] + phi[None, :]
            if mask.any():
                shift = float(wfield[mask].max())
                weight = np.exp(
                    np.clip(self.L * (wfield - shift), -700.0, 0.0))
            else:
                weight = np.ones_like(wfield)
            gam = self.gam[ell] if ell >= k - m + 1 else None
            self.stages.append(_Stage(ell, mask, weight, gam))

    # -- small numerics ----------------------------------------------------

    def _stencil(self, P: np.ndarray):
        pos = P / self.dx
        idx = np.minimum(pos.astype(int), self.Nx - 1)
        return idx, pos - idx

    def _samp(self, Gj: np.ndarray, idx_row: np.ndarray,
              fr_row: np.ndarray) -> np.ndarray:
        w = fr_row[None, :, None]
        return Gj[:, idx_row] * (1.0 - w) + Gj[:, idx_row + 1] * w

    def _tinterp(self, col: np.ndarray, tq: np.ndarray) -> np.ndarray:
        s = np.clip(np.asarray(tq, dtype=float) / self.dt, 0.0,
                    float(self.Nt))
        lo = np.minimum(s.astype(int), self.Nt - 1)
        fr = (s - lo)[..., None]
        return col[lo] * (1.0 - fr) + col[lo + 1] * fr

    def _q_matrix(self, l: int) -> np.ndarray:
        if l not in self._qcache:
            self._qcache[l] = q_matrix(self.sys, l)
        return self._qcache[l]

    # -- characteristic integrals ------------------------------------------

    def _acc_up(self, Gj: np.ndarray, geo: _Geom, st: _Static) -> np.ndarray:
        """Integral of G along the rightward flow from each node toward
        x = 1 (future), with per-node extent: D1[q] whole steps for
        f-anchored nodes, up to the top edge for terminal-anchored
        ones."""
        L1 = self.Nt + 1
        I = np.zeros((L1, self.Nx + 1, Gj.shape[-1]))
        half = 0.5 * self.dt
        samp_d = self._samp(Gj, geo.idx1[0], geo.fr1[0])
        for d in range(st.dmax_up):
            R = L1 - (d + 1)
            if R <= 0:
                break
            samp_d1 = self._samp(Gj, geo.idx1[d + 1], geo.fr1[d + 1])
            seg = half * (samp_d[d:d + R] + samp_d1[d + 1:d + 1 + R])
            msk = st.fmask[:R] & (d < geo.D1)[None, :]
            if st.topmask is not None:
                msk = msk | st.topmask[:R]
            I[:R] += np.where(msk[..., None], seg, 0.0)
            samp_d = samp_d1
        return I

    def _partial_up(self, Gj: np.ndarray, geo: _Geom) -> np.ndarray:
        """Fractional last segment of the future-x=1 path: trapezoid
        between the last whole-step sample and the crossing point."""
        L1 = self.Nt + 1
        rows = np.arange(L1)
        cols = np.arange(self.Nx + 1)
        lev = np.minimum(rows[:, None] + geo.D1[None, :], self.Nt)
        ie = geo.idx1[geo.D1, cols]
        fe = geo.fr1[geo.D1, cols]
        start = (Gj[lev, ie[None, :]] * (1.0 - fe)[None, :, None]
                 + Gj[lev, ie[None, :] + 1] * fe[None, :, None])
        t_a = np.clip(self.tgrid[:, None] + geo.c1[None, :], 0.0, self.T)
        end = self._tinterp(Gj[:, -1], t_a)
        return 0.5 * self.dt * geo.r1[None, :, None] * (start + end)

    def _acc_down(self, Gj: np.ndarray, idx: np.ndarray, fr: np.ndarray,
                  caps: np.ndarray, rowmask: np.ndarray,
                  growing: Optional[np.ndarray] = None) -> np.ndarray:
        """Integral of G along a path toward earlier levels; node (i, q)
        collects segments d < caps[q] where ``rowmask`` holds, plus --
        when ``growing`` is given -- segments d < i where it holds
        (paths ending exactly on the bottom edge)."""
        L1 = self.Nt + 1
        I = np.zeros((L1, self.Nx + 1, Gj.shape[-1]))
        half = 0.5 * self.dt
        if growing is not None:
            dmax = idx.shape[0] - 1
        else:
            dmax = int(caps[rowmask.any(axis=0)].max()) \
                if rowmask.any() else 0
        samp_d = self._samp(Gj, idx[0], fr[0])
        for d in range(dmax):
            R = L1 - (d + 1)
            if R <= 0:
                break
            samp_d1 = self._samp(Gj, idx[d + 1], fr[d + 1])
            seg = half * (samp_d[1:1 + R] + samp_d1[:R])
            msk = rowmask[d + 1:] & (d < caps)[None, :]
            if growing is not None:
                msk = msk | growing[d + 1:]
            I[d + 1:] += np.where(msk[..., None], seg, 0.0)
            samp_d = samp_d1
        return I

    def _partial_down(self, Gj: np.ndarray, geo: _Geom, *,
                      to_left: bool) -> np.ndarray:
        """Fractional last segment of a past-directed path ending on
        x = 0 (rightward components) or x = 1 (leftward ones)."""
        L1 = self.Nt + 1
        cols = np.arange(self.Nx + 1)
        if to_left:
            D, r, idx, fr = geo.D0, geo.r0, geo.idx0, geo.fr0
            travel = geo.b0
            edge = Gj[:, 0]
        else:
            D, r, idx, fr = geo.D1, geo.r1, geo.idx1, geo.fr1
            travel = geo.c1
            edge = Gj[:, -1]
        rows = np.arange(L1)
        lev = np.clip(rows[:, None] - D[None, :], 0, self.Nt)
        ie = idx[D, cols]
        fe = fr[D, cols]
        start = (Gj[lev, ie[None, :]] * (1.0 - fe)[None, :, None]
                 + Gj[lev, ie[None, :] + 1] * fe[None, :, None])
        t_end = np.clip(self.tgrid[:, None] - travel[None, :], 0.0, self.T)
        end = self._tinterp(edge, t_end)
        return 0.5 * self.dt * r[None, :, None] * (start + end)

    # -- anchors that depend on the current iterate ------------------------

    def _q_values(self, j: int, V: np.ndarray, st: _Static) -> np.ndarray:
        """Staged left-boundary anchor (Q_l z)(t_hat) for the Q-anchored
        nodes of component j, interpolating the x = 0 trace of the
        current iterate."""
        out = np.zeros((self.Nt + 1, self.Nx + 1, V.shape[-1]))
        sel = st.Qmask
        ts = st.t_hat[sel]
        wls = st.wl[sel]
        vals = np.zeros((ts.size, V.shape[-1]))
        for l in np.unique(wls):
            Ql = self._q_matrix(int(l))
            row = Ql[j - int(l)]
            pick = wls == l
            acc = np.zeros((int(pick.sum()), V.shape[-1]))
            for ci, c in enumerate(_q_inputs(self.k, self.m, int(l))):
                if row[ci] == 0.0:
                    continue
                acc += row[ci] * self._tinterp(V[:, 0, c], ts[pick])
            vals[pick] = acc
        out[sel] = vals
        return out

    # -- one component update ----------------------------------------------

    def _assemble(self, j: int, G: np.ndarray, V: np.ndarray) -> np.ndarray:
        geo = self.geoms[j - 1]
        st = self.static[j - 1]
        Gj = np.ascontiguousarray(G[:, :, j - 1])
        A = np.zeros((self.Nt + 1, self.Nx + 1, V.shape[-1]))
        if geo.rightward:
            if st.fmask.any() or st.topmask is not None:
                I_up = self._acc_up(Gj, geo, st)
                if st.fmask.any():
                    pu = self._partial_up(Gj, geo)
                    np.copyto(A, st.f_static - (I_up + pu),
                              where=st.fmask[..., None])
                if st.topmask is not None:
                    np.copyto(A, st.top_static - I_up,
                              where=st.topmask[..., None])
            if st.Qmask is not None and st.Qmask.any():
                I_dn = self._acc_down(Gj, geo.idx0, geo.fr0, geo.D0,
                                      st.Qmask)
                pd = self._partial_down(Gj, geo, to_left=True)
                qv = self._q_values(j, V, st)
                np.copyto(A, qv + I_dn + pd, where=st.Qmask[..., None])
        else:
            I_dn = self._acc_down(Gj, geo.idx1, geo.fr1, geo.D1,
                                  st.fmask, growing=st.gmask)
            if st.fmask.any():
                pd = self._partial_down(Gj, geo, to_left=False)
                np.copyto(A, st.f_static + I_dn + pd,
                          where=st.fmask[..., None])
            if st.gmask.any():
                np.copyto(A, st.g_static + I_dn,
                          where=st.gmask[..., None])
        return A

    # -- driver ------------------------------------------------------------

    def _G(self, V: np.ndarray) -> np.ndarray:
        if self.Fg is None:
            base = np.zeros(V.shape)
        else:
            base = np.einsum("lxab,lxb...->lxa...", self.Fg, V)
        if self.gg is not None:
            base = base + self.gg
        return base

    def _fill_above(self, G: np.ndarray, gamv: np.ndarray):
        """Constant-extend G leftward across the stage's upper curve so
        interpolation stencils never read unsolved nodes."""
        qcut = np.searchsorted(gamv, self.tgrid - self.snap_t, side="left")
        qcut = np.minimum(qcut, self.Nx)
        for s in range(self.Nt + 1):
            c = qcut[s]
            if c > 0:
                G[s, :c] = G[s, c]

    def _extend_trace(self, V: np.ndarray, stage: _Stage):
        """Extrapolate the x = 0 trace one row above the stage's window
        top, so interpolated staged-boundary anchors near the seam stay
        second-order accurate; later stages overwrite these rows."""
        if stage.label < self.k - self.m + 1:
            return
        top = self.T - self.sys.taus[stage.label - 1]
        r = int(math.floor(top / self.dt + _SNAP))
        if 1 <= r < self.Nt:
            V[r + 1, 0, :] = 2.0 * V[r, 0, :] - V[r - 1, 0, :]
        elif r == 0 and self.Nt >= 1:
            V[1, 0, :] = V[0, 0, :]

    def solve(self, *, maxit: int = 200, rtol: float = 1e-11):
        shape = (self.Nt + 1, self.Nx + 1, self.n, self.P)
        V = np.zeros(shape)
        agg = PicardReport(tolerance=rtol, weight_rate=self.L)
        done = []
        for stage in self.stages:
            if not stage.mask.any():
                continue
            it0 = agg.iterations
            self._run_stage(stage, V, agg, maxit, rtol)
            done.append(f"region {stage.label}: "
                        f"{agg.iterations - it0} sweeps")
        agg.converged = True
        agg.message = "; ".join(done)
        return V, agg

    def _run_stage(self, stage: _Stage, V: np.ndarray, agg: PicardReport,
                   maxit: int, rtol: float):
        wts = stage.weight[..., None, None]
        sel = stage.mask
        sel4 = sel[..., None, None]
        prev = None
        stall = 0
        for _ in range(maxit):
            G = self._G(V)
            if stage.gam is not None:
                self._fill_above(G, stage.gam)
            Vnew = V.copy()
            for j in range(1, self.n + 1):
                A = self._assemble(j, G, V)
                Vnew[:, :, j - 1][sel] = A[sel]
            num = float(np.max(wts * np.abs(Vnew - V),
                               where=sel4, initial=0.0))
            den = float(np.max(wts * np.abs(Vnew),
                               where=sel4, initial=0.0)) + 1e-300
            res = num / den
            agg.iterations += 1
            agg.residuals.append(res)
            if prev is not None and prev > 0.0:
                ratio = res / prev
                agg.ratios.append(ratio)
                stall = stall + 1 if ratio >= 1.0 else 0
            V[:] = Vnew
            self._extend_trace(V, stage)
            if res < rtol:
                return
            if stall >= 5:
                agg.message = (f"five consecutive non-contracting sweeps "
                               f"in region {stage.label}")
                err = SolverConvergenceError(agg.message)
                err.report = agg
                raise err
            prev = res
        agg.message = (f"tolerance {rtol} not reached in {maxit} sweeps "
                       f"(region {stage.label})")
        err = SolverConvergenceError(agg.message)
        err.report = agg
        raise err


# ---------------------------------------------------------------------------
# public entry points
# ---------------------------------------------------------------------------

def _default_steps(sys: SystemSpec, T: float, Nx: int) -> int:
    xs = np.linspace(0.0, 1.0, 65)
    lam_max = max(float(np.max(s(xs))) for s in sys.speeds.speeds)
    return max(64, int(math.ceil(T * Nx * lam_max)))


def _run(spec: SystemSpec, *, hat: bool, f, g, q, gamma, T, Nt, Nx, tau,
         maxit, rtol) -> SolutionField:
    sys = spec.time_shifted(tau)
    if T is None:
        T = sys.t_opt
    if Nt is None:
        Nt = _default_steps(sys, T, Nx)
    eng = _BroadEngine(sys, T, Nt, Nx, hat=hat, f=f, g=g, q=q, gamma=gamma)
    V, report = eng.solve(maxit=maxit, rtol=rtol)
    vals = V if eng.p else V[..., 0]
    if hat:
        return SolutionField(eng.tgrid, eng.xgrid, vals, "initial", report)
    vals = np.where(eng.inmask[(...,) + (None,) * (vals.ndim - 2)],
                    vals, 0.0)
    return SolutionField(eng.tgrid, eng.xgrid, vals, "initial", report,
                         domain="omega-region", mask=eng.inmask)


def solve_omega(spec: SystemSpec, f=None, g=None, gamma=None, *,
                T: Optional[float] = None, Nt: Optional[int] = None,
                Nx: int = 160, tau: float = 0.0, maxit: int = 200,
                rtol: float = 1e-11) -> SolutionField:
    """Solve on the influence region below the component-(k-m+1) curve.

    ``f`` is the full n-component trace on x = 1 over (0, T) (callable
    of a time array or an array on the time grid), ``g`` the leftward
    initial trace on (0, 1), ``gamma`` an optional interior source
    ``gamma(t, xgrid) -> (Nx+1, n[, p])``.  The returned field has
    ``domain="omega-region"``; values outside its ``mask`` are zero.
    """
    return _run(spec, hat=False, f=f, g=g, q=None, gamma=gamma, T=T,
                Nt=Nt, Nx=Nx, tau=tau, maxit=maxit, rtol=rtol)


def solve_rectangle_hat(spec: SystemSpec, f=None, g=None, q=None,
                        gamma=None, *, T: Optional[float] = None,
                        Nt: Optional[int] = None, Nx: int = 160,
                        tau: float = 0.0, maxit: int = 200,
                        rtol: float = 1e-11) -> SolutionField:
    """Solve the extended problem on the full rectangle (0,T) x (0,1).

    Besides the data of :func:`solve_omega`, components 1..k-m take
    terminal traces ``q`` at t = T, and the staged left-boundary windows
    are completed by the final stage (T - tau_{k-m+1}, T), which
    requires the full trailing-minor condition on B.  The restriction of
    the result to the influence region reproduces :func:`solve_omega`.
    """
    return _run(spec, hat=True, f=f, g=g, q=q, gamma=gamma, T=T, Nt=Nt,
                Nx=Nx, tau=tau, maxit=maxit, rtol=rtol)


def stability_constant(spec: SystemSpec, *, T: Optional[float] = None,
                       tau: float = 0.0, Nx: int = 96,
                       Nt: Optional[int] = None, trials: int = 20,
                       seed: int = 0, modes: int = 3) -> float:
    """Empirical bound constant ||w|| / (||f|| + ||g||) on random data.

    Draws ``trials`` random smooth (f, g) pairs, solves them in one
    batched influence-region call, and returns the largest ratio of the
    mixed solution norm to the L2 data norms.
    """
    sys = spec.time_shifted(tau)
    horizon = sys.t_opt if T is None else float(T)
    rng = np.random.default_rng(seed)
    n, m = spec.n, spec.m
    af = rng.standard_normal((modes, n, trials))
    bf = rng.standard_normal((modes, n, trials))
    ag = rng.standard_normal((modes, m, trials))

    def f(t):
        t = np.asarray(t, dtype=float)
        args = [np.pi * (mo + 1) * t / horizon for mo in range(modes)]
        out = sum(np.sin(a)[:, None, None] * af[mo]
                  + np.cos(a)[:, None, None] * bf[mo]
                  for mo, a in enumerate(args))
        return out

    def g(x):
        x = np.asarray(x, dtype=float)
        out = sum(np.sin(np.pi * (mo + 1) * x)[:, None, None] * ag[mo]
                  for mo in range(modes))
        return out

    fld = solve_omega(spec, f, g, T=T, Nt=Nt, Nx=Nx, tau=tau)
    tg, xg = fld.tgrid, fld.xgrid
    dt, dx = tg[1] - tg[0], xg[1] - xg[0]
    vals = np.where(fld.mask[..., None, None], fld.values, 0.0)
    sq = np.sum(vals ** 2, axis=2)
    per_x = np.sqrt(np.trapezoid(sq, dx=dt, axis=0)).max(axis=0)
    per_t = np.sqrt(np.trapezoid(sq, dx=dx, axis=1)).max(axis=0)
    wnorm = np.maximum(per_x, per_t)
    fsq = np.sum(np.asarray(f(tg)) ** 2, axis=1)
    gsq = np.sum(np.asarray(g(xg)) ** 2, axis=1)
    fnorm = np.sqrt(np.trapezoid(fsq, dx=dt, axis=0))
    gnorm = np.sqrt(np.trapezoid(gsq, dx=dx, axis=0))
    return float(np.max(wnorm / (fnorm + gnorm + 1e-300)))
