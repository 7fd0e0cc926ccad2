"""Characteristic flows x_i(t, s, xi) and boundary-crossing solvers.

Every component rides a one-parameter family of curves dx/dt = +lambda_i(x)
(i <= k, rightward) or -lambda_i(x) (i > k, leftward).  The workhorse
representation is the travel-time coordinate

    T_i(x) = int_0^x dxi / lambda_i(xi),

strictly increasing from 0 to tau_i, along which every characteristic is a
unit-slope line: T_i(x_i(t, s, xi)) = T_i(xi) +- (t - s).  Outside [0, 1]
the speeds continue with their boundary values, so T_i extends linearly and
flows are globally defined.

Constant and affine speeds get closed-form coordinates; sampled speeds use a
dense spline antiderivative of 1/lambda with Newton inversion.  A generic
fixed-step RK4 integrator with bisection crossing refinement is kept as an
independent backend (`use_exact=False`); the exact path is tested against it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import PreconditionError
from .system import Speed, SpeedProfile, SystemSpec

_DENSE_NODES = 4097


class _TravelCoord:
    """T_i and its inverse for one speed, with linear extension."""

    def __init__(self, speed: Speed):
        self.speed = speed
        self.lam0 = float(speed(0.0))
        self.lam1 = float(speed(1.0))
        if speed.kind == "grid":
            xs = np.linspace(0.0, 1.0, _DENSE_NODES)
            self._recip = CubicSpline(xs, 1.0 / speed(xs))
            self._F = self._recip.antiderivative()
            self.tau = float(self._F(1.0))
            self._xs = xs
            self._Tvals = self._F(xs)
        else:
            self.tau = speed.travel_time()

    def _inner_value(self, xc):
        s = self.speed
        if s.kind == "const":
            return xc / s.value
        if s.kind == "affine":
            if s.b == 0.0:
                return xc / s.a
            return np.log1p(s.b * xc / s.a) / s.b
        return self._F(xc)

    def _inner_inverse(self, sc):
        s = self.speed
        if s.kind == "const":
            return sc * s.value
        if s.kind == "affine":
            if s.b == 0.0:
                return sc * s.a
            return s.a * np.expm1(s.b * sc) / s.b
        x = np.interp(sc, self._Tvals, self._xs)
        for _ in range(3):
            x = np.clip(x - (self._F(x) - sc) / self._recip(x), 0.0, 1.0)
        return x

    def value(self, x):
        """T(x), linear outside [0, 1]."""
        xa = np.asarray(x, dtype=float)
        inner = self._inner_value(np.clip(xa, 0.0, 1.0))
        out = np.where(
            xa < 0.0, xa / self.lam0,
            np.where(xa > 1.0, self.tau + (xa - 1.0) / self.lam1, inner),
        )
        return float(out) if np.ndim(x) == 0 else out

    def inverse(self, s):
        """x with T(x) = s, linear outside [0, tau]."""
        sa = np.asarray(s, dtype=float)
        inner = self._inner_inverse(np.clip(sa, 0.0, self.tau))
        out = np.where(
            sa < 0.0, sa * self.lam0,
            np.where(sa > self.tau, 1.0 + (sa - self.tau) * self.lam1, inner),
        )
        return float(out) if np.ndim(s) == 0 else out


@dataclass(frozen=True)
class OmegaCurve:
    """The monotone curve t = gamma(x) bounding the influence region from
    above, traced by one rightward component through (x=1, t=T)."""

    component: int
    T: float
    intercept: float
    xs: np.ndarray
    ts: np.ndarray
    gamma: Callable
    x_of_t: Callable


class CharacteristicFlow:
    """Flow maps, crossing times, and boundary curves for one system.

    With use_exact=True (default) queries go through travel-time
    coordinates and are exact up to closed-form/table accuracy; with
    use_exact=False they go through the fixed-step RK4 backend.  Results
    never depend on the advisory scalar-query cache.
    """

    def __init__(self, spec, h: float | None = None, use_exact: bool = True,
                 cache_enabled: bool = True):
        profile = spec.speeds if isinstance(spec, SystemSpec) else spec
        if not isinstance(profile, SpeedProfile):
            raise PreconditionError("spec must be a SystemSpec or SpeedProfile")
        self.spec = spec if isinstance(spec, SystemSpec) else None
        self.profile = profile
        self.use_exact = bool(use_exact)
        self.coords = tuple(_TravelCoord(s) for s in profile.speeds)
        self.taus = tuple(c.tau for c in self.coords)
        if h is None:
            grid = np.linspace(0.0, 1.0, 201)
            slope = max(
                (float(np.max(np.abs(s.derivative(grid)))) for s in profile.speeds),
                default=0.0,
            )
            h = 0.1 / (profile.n * max(slope, 1.0))
        self.h = float(h)
        self._cache = {} if cache_enabled else None

    # -- helpers ----------------------------------------------------------

    def _check_index(self, i: int):
        if not 1 <= i <= self.profile.n:
            raise PreconditionError(
                f"component index {i} out of range 1..{self.profile.n}"
            )

    def direction(self, i: int) -> int:
        """+1 if component i moves toward x = 1, else -1."""
        return 1 if i <= self.profile.k else -1

    def travel_coord(self, i: int, x):
        """T_i(x) with linear extension (i 1-based)."""
        self._check_index(i)
        return self.coords[i - 1].value(x)

    def inverse_travel_coord(self, i: int, s):
        self._check_index(i)
        return self.coords[i - 1].inverse(s)

    # -- flow -------------------------------------------------------------

    def flow(self, i: int, t: float, s: float, xi):
        """Position at time t of the component-i characteristic through
        (s, xi); xi may be an array."""
        self._check_index(i)
        if t == s:
            out = np.array(xi, dtype=float, copy=True)
            return float(out) if np.ndim(xi) == 0 else out
        if self.use_exact:
            c = self.coords[i - 1]
            return c.inverse(c.value(xi) + self.direction(i) * (t - s))
        if np.ndim(xi) == 0 and self._cache is not None:
            key = (i, round(float(t), 12), round(float(s), 12), round(float(xi), 12))
            hit = self._cache.get(key)
            if hit is None:
                hit = float(self._rk4(i, t, s, np.asarray(float(xi))))
                if len(self._cache) < 1_000_000:
                    self._cache[key] = hit
            return hit
        out = self._rk4(i, float(t), float(s), np.asarray(xi, dtype=float))
        return float(out) if np.ndim(xi) == 0 else out

    def _rk4(self, i: int, t: float, s: float, xi: np.ndarray) -> np.ndarray:
        speed = self.profile.speeds[i - 1]
        sgn = float(self.direction(i))
        span = t - s
        x = np.array(xi, dtype=float, copy=True)
        if span == 0.0:
            return x
        nsteps = max(1, math.ceil(abs(span) / self.h))
        hstep = span / nsteps
        for _ in range(nsteps):
            k1 = sgn * speed(x)
            k2 = sgn * speed(x + 0.5 * hstep * k1)
            k3 = sgn * speed(x + 0.5 * hstep * k2)
            k4 = sgn * speed(x + hstep * k3)
            x = x + (hstep / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        return x

    # -- crossing times ---------------------------------------------------

    def crossing_time(self, j: int, x):
        """Time tau(j, x) >= 0 for the component-j characteristic started at
        (t=0, x) to reach its outflow boundary: x = 1 for j <= k, x = 0 for
        j > k.  Vectorized over x."""
        self._check_index(j)
        if self.use_exact:
            c = self.coords[j - 1]
            if j <= self.profile.k:
                return c.tau - c.value(x)
            return c.value(x)
        if np.ndim(x) == 0:
            return self._crossing_bisect(j, float(x))
        return np.array([self._crossing_bisect(j, float(xx)) for xx in np.ravel(x)]) \
            .reshape(np.shape(x))

    def _crossing_bisect(self, j: int, x: float) -> float:
        target = 1.0 if j <= self.profile.k else 0.0
        sgn = 1.0 if j <= self.profile.k else -1.0
        lo, hi = 0.0, self.taus[j - 1] * 1.0001 + 1e-9
        for _ in range(8):
            if sgn * (float(self._rk4(j, hi, 0.0, np.asarray(x))) - target) >= 0.0:
                break
            hi *= 1.5
        for _ in range(64):
            mid = 0.5 * (lo + hi)
            if sgn * (float(self._rk4(j, mid, 0.0, np.asarray(x))) - target) < 0.0:
                lo = mid
            else:
                hi = mid
            if hi - lo < 1e-12:
                break
        return 0.5 * (lo + hi)

    # -- boundary curves --------------------------------------------------

    def boundary_curve(self, ell: int, T: float, samples: int = 257) -> OmegaCurve:
        """Characteristic of rightward component ell through (x=1, t=T),
        returned as the monotone curve t = gamma(x) = T - tau_ell + T_ell(x)."""
        if not 1 <= ell <= self.profile.k:
            raise PreconditionError(
                f"boundary curve needs a rightward component, got {ell}"
            )
        c = self.coords[ell - 1]
        intercept = T - c.tau

        def gamma(x):
            return T - c.tau + c.value(x)

        def x_of_t(t):
            return c.inverse(np.asarray(t, dtype=float) - T + c.tau)

        xs = np.linspace(0.0, 1.0, samples)
        return OmegaCurve(
            component=ell, T=float(T), intercept=float(intercept),
            xs=xs, ts=gamma(xs), gamma=gamma, x_of_t=x_of_t,
        )


def omega_boundary(spec: SystemSpec, T: float, samples: int = 257) -> OmegaCurve:
    """Upper boundary of the region determined by boundary data alone: the
    characteristic of component k-m+1 through (x=1, t=T).  Requires k >= m
    (so the component exists) and T >= tau_{k-m+1} (so the curve stays in
    t >= 0)."""
    k, m = spec.k, spec.m
    if k < m:
        raise PreconditionError(
            f"influence-region curve needs k >= m, got k={k}, m={m} "
            "(augment the system first)"
        )
    comp = k - m + 1
    tau = spec.taus[comp - 1]
    if T < tau - 1e-12:
        raise PreconditionError(
            f"horizon T={T} is below the crossing time tau_{comp}={tau:.6g}; "
            "the curve would exit through t < 0"
        )
    return CharacteristicFlow(spec).boundary_curve(comp, T, samples=samples)
