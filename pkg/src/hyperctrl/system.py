"""System definitions: speeds, coupling, boundary matrix, time constants.

A system couples n = k + m transport components on the unit interval.  The
equation is d_t u = Sigma(x) d_x u + C(t,x) u with Sigma = diag(-lambda_1,
..., -lambda_k, lambda_{k+1}, ..., lambda_{k+m}); all lambda_i are positive,
so components 1..k travel toward x = 1 and components k+1..k+m travel toward
x = 0.  Controls act at x = 1 on the left-moving components; at x = 0 the
right-moving components are fed back through the k x m boundary matrix B:
u_i(t,0) = sum_j B_ij u_{k+j}(t,0).

Component indices are 1-based in public signatures and error messages;
storage is 0-based internally.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import ConfigurationError, PreconditionError

_ORDER_SAMPLES = np.linspace(0.0, 1.0, 401)

# Tolerance for "is this small matrix invertible": |det| must beat this
# multiple of the Hadamard bound (product of row norms).
_DET_RTOL = 1e-10


def _adaptive_gauss(f, a: float, b: float, tol: float = 1e-12) -> float:
    """Composite 10-point Gauss-Legendre quadrature of f over [a, b],
    doubling the panel count until two successive estimates agree to tol."""
    nodes, weights = np.polynomial.legendre.leggauss(10)
    panels = 1
    prev = None
    val = 0.0
    for _ in range(22):
        edges = np.linspace(a, b, panels + 1)
        mid = 0.5 * (edges[:-1] + edges[1:])
        half = 0.5 * (edges[1:] - edges[:-1])
        x = (mid[:, None] + half[:, None] * nodes[None, :]).ravel()
        fx = f(x).reshape(panels, nodes.size)
        val = float(np.sum(half[:, None] * weights[None, :] * fx))
        if prev is not None and abs(val - prev) < tol:
            return val
        prev = val
        panels *= 2
    return val


class Speed:
    """One positive speed magnitude lambda(x) on [0, 1].

    Outside [0, 1] the profile continues with its boundary values, so
    characteristics stay defined when a trace point briefly leaves the
    interval; the derivative of the extended profile is zero there.

    Construct through the classmethods `constant`, `affine`, `from_grid`.
    """

    def __init__(self, kind: str, **params):
        self.kind = kind
        if kind == "const":
            self.value = float(params["value"])
            if self.value <= 0.0:
                raise ConfigurationError(f"constant speed must be positive, got {self.value}")
        elif kind == "affine":
            self.a = float(params["a"])
            self.b = float(params["b"])
            if min(self.a, self.a + self.b) <= 0.0:
                raise ConfigurationError(
                    f"affine speed {self.a} + {self.b}*x is not positive on [0,1]"
                )
        elif kind == "grid":
            xs = np.asarray(params["xs"], dtype=float)
            vs = np.asarray(params["vs"], dtype=float)
            if xs.ndim != 1 or xs.shape != vs.shape or xs.size < 4:
                raise ConfigurationError("grid speed needs matching 1-D xs/vs with >= 4 samples")
            if not (np.all(np.diff(xs) > 0) and xs[0] == 0.0 and xs[-1] == 1.0):
                raise ConfigurationError("grid speed nodes must increase strictly from 0 to 1")
            self.xs = xs
            self.vs = vs
            self._spline = CubicSpline(xs, vs)
            probe = self._spline(_ORDER_SAMPLES)
            if np.min(probe) <= 0.0:
                bad = _ORDER_SAMPLES[int(np.argmin(probe))]
                raise ConfigurationError(f"grid speed interpolant is non-positive near x={bad:.4f}")
            self._c2_advisory()
        else:
            raise ConfigurationError(f"unknown speed kind {kind!r}")

    @classmethod
    def constant(cls, value: float) -> "Speed":
        return cls("const", value=value)

    @classmethod
    def affine(cls, a: float, b: float) -> "Speed":
        """lambda(x) = a + b*x."""
        return cls("affine", a=a, b=b)

    @classmethod
    def from_grid(cls, xs: Sequence[float], vs: Sequence[float]) -> "Speed":
        """Cubic-spline interpolant through samples (xs, vs) on [0, 1]."""
        return cls("grid", xs=xs, vs=vs)

    def _c2_advisory(self):
        # Advisory smoothness check for sampled data: second differences of
        # the samples should stay bounded relative to the data scale.
        h = np.diff(self.xs)
        d2 = np.diff(np.diff(self.vs) / h) / h[1:]
        scale = max(1.0, float(np.max(np.abs(self.vs))))
        if d2.size and float(np.max(np.abs(d2))) > 1e4 * scale:
            warnings.warn(
                "grid speed samples look rough (large second differences); "
                "downstream error estimates assume a twice-differentiable profile",
                stacklevel=3,
            )

    def __call__(self, x):
        xc = np.clip(x, 0.0, 1.0)
        if self.kind == "const":
            return np.full_like(np.asarray(xc, dtype=float), self.value) if np.ndim(xc) else self.value
        if self.kind == "affine":
            return self.a + self.b * xc
        return self._spline(xc) if np.ndim(xc) else float(self._spline(xc))

    def derivative(self, x):
        """Derivative of the extended profile (zero outside [0, 1])."""
        x = np.asarray(x, dtype=float)
        inside = (x >= 0.0) & (x <= 1.0)
        if self.kind == "const":
            return np.zeros_like(x)
        if self.kind == "affine":
            return np.where(inside, self.b, 0.0)
        out = np.where(inside, self._spline(np.clip(x, 0.0, 1.0), 1), 0.0)
        return out

    def travel_time(self) -> float:
        """Integral of 1/lambda over [0, 1] (exact for const/affine)."""
        if self.kind == "const":
            return 1.0 / self.value
        if self.kind == "affine":
            if self.b == 0.0:
                return 1.0 / self.a
            return float(np.log((self.a + self.b) / self.a) / self.b)
        return _adaptive_gauss(lambda x: 1.0 / self._spline(x), 0.0, 1.0)

    def __repr__(self):
        if self.kind == "const":
            return f"Speed.constant({self.value})"
        if self.kind == "affine":
            return f"Speed.affine({self.a}, {self.b})"
        return f"Speed.from_grid(<{self.xs.size} samples>)"


@dataclass(frozen=True)
class SpeedProfile:
    """All n = k + m speed magnitudes with the family ordering enforced:
    lambda_1 > ... > lambda_k > 0 and 0 < lambda_{k+1} < ... < lambda_{k+m}
    pointwise on [0, 1]."""

    speeds: tuple
    k: int
    m: int

    def __post_init__(self):
        object.__setattr__(self, "speeds", tuple(self.speeds))
        if self.k < 1 or self.m < 1:
            raise ConfigurationError(f"need k >= 1 and m >= 1, got k={self.k}, m={self.m}")
        if len(self.speeds) != self.k + self.m:
            raise ConfigurationError(
                f"expected {self.k + self.m} speeds, got {len(self.speeds)}"
            )
        table = np.stack([np.atleast_1d(s(_ORDER_SAMPLES)) for s in self.speeds])
        for i in range(self.k - 1):
            self._require_ordering(table, i, i + 1, "minus", descending=True)
        for i in range(self.k, self.k + self.m - 1):
            self._require_ordering(table, i, i + 1, "plus", descending=False)

    @staticmethod
    def _require_ordering(table, i, j, family, descending):
        gap = table[i] - table[j] if descending else table[j] - table[i]
        if np.min(gap) <= 0.0:
            x = _ORDER_SAMPLES[int(np.argmin(gap))]
            rel = ">" if descending else "<"
            raise ConfigurationError(
                f"{family}-family ordering lambda_{i + 1} {rel} lambda_{j + 1} "
                f"fails near x={x:.4f}"
            )

    @property
    def n(self) -> int:
        return self.k + self.m

    def lam(self, i: int, x):
        """Magnitude lambda_i(x), i 1-based."""
        return self.speeds[i - 1](x)

    def char_speed(self, i: int, x):
        """dx/dt along the characteristic of component i: +lambda_i for
        i <= k (rightward), -lambda_i for i > k (leftward)."""
        v = self.speeds[i - 1](x)
        return v if i <= self.k else -v

    def sigma_prime(self, i: int, x):
        """Derivative of the i-th diagonal entry of Sigma:
        -lambda_i' for i <= k, +lambda_i' for i > k (zero outside [0,1])."""
        d = self.speeds[i - 1].derivative(x)
        return -d if i <= self.k else d

    def travel_time(self, i: int) -> float:
        """tau_i = integral of 1/lambda_i over [0, 1], i 1-based."""
        if not 1 <= i <= self.n:
            raise PreconditionError(f"component index {i} out of range 1..{self.n}")
        return self.speeds[i - 1].travel_time()

    def taus(self) -> tuple:
        return tuple(self.travel_time(i) for i in range(1, self.n + 1))


def travel_time(profile, i: int | None = None) -> float:
    """Travel time across [0, 1]: accepts a single Speed, or a SpeedProfile
    plus a 1-based component index."""
    if isinstance(profile, Speed):
        return profile.travel_time()
    if i is None:
        raise PreconditionError("travel_time(profile, i) needs a component index")
    return profile.travel_time(i)


def optimal_time(taus: Sequence[float], k: int, m: int) -> float:
    """Smallest horizon at which one-side null controllability can hold for
    generic boundary couplings.

    m >= k: max{tau_1 + tau_{m+1}, ..., tau_k + tau_{m+k}, tau_{k+1}};
    m <  k: max{tau_{k+1-m} + tau_{k+1}, ..., tau_k + tau_{k+m}}.
    """
    taus = [float(t) for t in taus]
    if len(taus) != k + m:
        raise PreconditionError(f"expected {k + m} travel times, got {len(taus)}")
    if m >= k:
        cands = [taus[j - 1] + taus[m + j - 1] for j in range(1, k + 1)]
        cands.append(taus[k])
    else:
        cands = [taus[k - m + i - 1] + taus[k + i - 1] for i in range(1, m + 1)]
    return max(cands)


@dataclass(frozen=True)
class BoundaryMatrix:
    """The k x m feedback matrix B in u_-(t,0) = B u_+(t,0)."""

    matrix: np.ndarray

    def __post_init__(self):
        mat = np.array(self.matrix, dtype=float)
        if mat.ndim != 2:
            raise ConfigurationError(f"boundary matrix must be 2-D, got shape {mat.shape}")
        mat.setflags(write=False)
        object.__setattr__(self, "matrix", mat)

    @property
    def shape(self):
        return self.matrix.shape


def _block_invertible(block: np.ndarray) -> bool:
    det = float(np.linalg.det(block))
    hadamard = float(np.prod(np.linalg.norm(block, axis=1)))
    return abs(det) > _DET_RTOL * hadamard


def check_B_class(B, k: int, m: int, which: str = "generic", i: int | None = None) -> bool:
    """Trailing-minor conditions on the boundary matrix.

    row-condition(i): the i x i matrix formed by the last i rows and last i
    columns of B is invertible.  "generic" requires that for 1 <= i <=
    min(k, m-1); "extended" for 1 <= i <= k (only defined when m >= k).
    """
    mat = B.matrix if isinstance(B, BoundaryMatrix) else np.asarray(B, dtype=float)
    if mat.shape != (k, m):
        raise PreconditionError(f"boundary matrix shape {mat.shape} != ({k}, {m})")
    if which == "row-condition":
        if i is None or not 1 <= i <= min(k, m):
            raise PreconditionError(
                f"row-condition index must lie in 1..{min(k, m)}, got {i}"
            )
        return _block_invertible(mat[-i:, -i:])
    if which == "generic":
        top = min(k, m - 1)
    elif which == "extended":
        if m < k:
            raise PreconditionError("extended class membership needs m >= k")
        top = k
    else:
        raise PreconditionError(f"unknown class query {which!r}")
    return all(_block_invertible(mat[-p:, -p:]) for p in range(1, top + 1))


def check_assumption_B(B, k: int, m: int, ell: int) -> bool:
    """Structure needed by the degenerate-coupling construction: row k of B
    couples only through columns 1 and ell, and both of those are nonzero."""
    if not 2 <= ell <= m:
        raise PreconditionError(f"ell must lie in 2..{m}, got {ell}")
    mat = B.matrix if isinstance(B, BoundaryMatrix) else np.asarray(B, dtype=float)
    if mat.shape != (k, m):
        raise PreconditionError(f"boundary matrix shape {mat.shape} != ({k}, {m})")
    row = mat[k - 1]
    tol = 1e-12 * max(1.0, float(np.max(np.abs(mat))))
    if abs(row[0]) <= tol or abs(row[ell - 1]) <= tol:
        return False
    return all(abs(row[j - 1]) <= tol for j in range(2, m + 1) if j != ell)


class CouplingField:
    """Zero-order coupling C(t, x) together with the adjoint-side field
    Cbold(t, x) = Sigma'(x) - C(t, x)^T.

    `C(t, x)` accepts scalar x (returns (n, n)) or an array of positions
    (returns (len(x), n, n)).  Construct through the classmethods.
    """

    def __init__(self, profile: SpeedProfile, kind: str, fn, label: str = ""):
        self.profile = profile
        self.n = profile.n
        self.kind = kind
        self._fn = fn  # fn(t, x_array) -> (len(x), n, n)
        self.label = label or kind

    # -- constructors -----------------------------------------------------

    @classmethod
    def zero(cls, profile: SpeedProfile) -> "CouplingField":
        n = profile.n

        def fn(t, x):
            return np.zeros((x.size, n, n))

        return cls(profile, "zero", fn)

    @classmethod
    def closed_form(cls, profile: SpeedProfile, f: Callable, label: str = "closed-form",
                    vectorized: bool = True) -> "CouplingField":
        """Wrap f(t, x) -> (n, n); with vectorized=True, f must accept an
        array of positions and return (len(x), n, n)."""
        n = profile.n
        if vectorized:
            fn = f
        else:
            def fn(t, x):
                return np.stack([np.asarray(f(t, float(xi)), dtype=float) for xi in x]) \
                    if x.size else np.zeros((0, n, n))
        return cls(profile, "closed-form", fn, label)

    @classmethod
    def poly_t(cls, profile: SpeedProfile, coeffs: np.ndarray) -> "CouplingField":
        """Polynomial in time, constant in space: C(t) = sum_d coeffs[d] t^d,
        coeffs shaped (degree+1, n, n)."""
        coeffs = np.asarray(coeffs, dtype=float)
        if coeffs.ndim != 3 or coeffs.shape[1:] != (profile.n, profile.n):
            raise ConfigurationError(
                f"poly coefficients must be (D, {profile.n}, {profile.n}), got {coeffs.shape}"
            )

        def fn(t, x):
            mat = np.zeros((profile.n, profile.n))
            for d in range(coeffs.shape[0] - 1, -1, -1):
                mat = mat * t + coeffs[d]
            return np.broadcast_to(mat, (x.size, profile.n, profile.n)).copy()

        return cls(profile, "closed-form", fn, "poly-t")

    @classmethod
    def from_grid(cls, profile: SpeedProfile, tgrid, xgrid, values) -> "CouplingField":
        """Bilinear interpolation of samples shaped (nt, nx, n, n); constant
        extension outside the sampled box."""
        tg = np.asarray(tgrid, dtype=float)
        xg = np.asarray(xgrid, dtype=float)
        vals = np.asarray(values, dtype=float)
        n = profile.n
        if vals.shape != (tg.size, xg.size, n, n):
            raise ConfigurationError(
                f"coupling samples must be shaped {(tg.size, xg.size, n, n)}, got {vals.shape}"
            )
        if tg.size < 2 or xg.size < 2 or np.any(np.diff(tg) <= 0) or np.any(np.diff(xg) <= 0):
            raise ConfigurationError("coupling grids must be strictly increasing with >= 2 nodes")

        def fn(t, x):
            it = int(np.clip(np.searchsorted(tg, t) - 1, 0, tg.size - 2))
            wt = np.clip((t - tg[it]) / (tg[it + 1] - tg[it]), 0.0, 1.0)
            ix = np.clip(np.searchsorted(xg, x) - 1, 0, xg.size - 2)
            wx = np.clip((x - xg[ix]) / (xg[ix + 1] - xg[ix]), 0.0, 1.0)[:, None, None]
            low = (1.0 - wx) * vals[it, ix] + wx * vals[it, ix + 1]
            high = (1.0 - wx) * vals[it + 1, ix] + wx * vals[it + 1, ix + 1]
            return (1.0 - wt) * low + wt * high

        return cls(profile, "grid", fn)

    def shifted(self, tau: float) -> "CouplingField":
        """Coupling seen through the time window starting at `tau`:
        C_tau(t, x) = C(t + tau, x)."""
        if tau == 0.0 or self.is_zero:
            return self
        base = self._fn

        def fn(t, x):
            return base(t + tau, x)

        return CouplingField(self.profile, self.kind, fn,
                             f"{self.label}@t+{tau:g}")

    # -- evaluation -------------------------------------------------------

    @property
    def is_zero(self) -> bool:
        return self.kind == "zero"

    def C(self, t: float, x):
        if np.ndim(x) == 0:
            return self._fn(float(t), np.array([float(x)]))[0]
        return self._fn(float(t), np.asarray(x, dtype=float))

    def cbold(self, t: float, x):
        """Sigma'(x) - C(t,x)^T at one time, vectorized over positions."""
        scalar = np.ndim(x) == 0
        xa = np.array([float(x)]) if scalar else np.asarray(x, dtype=float)
        out = -np.swapaxes(self._fn(float(t), xa), -1, -2)
        for i in range(1, self.n + 1):
            out[:, i - 1, i - 1] += self.profile.sigma_prime(i, xa)
        return out[0] if scalar else out

    def bound(self, t0: float, t1: float, which: str = "cbold", samples: int = 41) -> float:
        """Sampled sup over [t0,t1] x [0,1] of the max row sum (infinity
        operator norm)."""
        ts = np.linspace(t0, t1, samples)
        xs = np.linspace(0.0, 1.0, samples)
        best = 0.0
        for t in ts:
            mats = self.cbold(t, xs) if which == "cbold" else self.C(t, xs)
            best = max(best, float(np.max(np.sum(np.abs(mats), axis=-1))))
        return best


@dataclass(frozen=True)
class SystemSpec:
    """Complete description of one control system plus its time constants."""

    speeds: SpeedProfile
    coupling: CouplingField
    boundary: BoundaryMatrix
    taus: tuple
    t_opt: float
    t_russell: float

    @classmethod
    def build(cls, speeds: SpeedProfile, coupling: CouplingField,
              boundary) -> "SystemSpec":
        if not isinstance(boundary, BoundaryMatrix):
            boundary = BoundaryMatrix(np.asarray(boundary, dtype=float))
        if boundary.shape != (speeds.k, speeds.m):
            raise ConfigurationError(
                f"boundary matrix shape {boundary.shape} does not match "
                f"(k, m) = ({speeds.k}, {speeds.m})"
            )
        if coupling.n != speeds.n:
            raise ConfigurationError(
                f"coupling is {coupling.n}x{coupling.n} but the system has "
                f"{speeds.n} components"
            )
        taus = speeds.taus()
        t_opt = optimal_time(taus, speeds.k, speeds.m)
        t_russell = taus[speeds.k - 1] + taus[speeds.k]
        return cls(speeds, coupling, boundary, taus, t_opt, t_russell)

    @property
    def k(self) -> int:
        return self.speeds.k

    @property
    def m(self) -> int:
        return self.speeds.m

    @property
    def n(self) -> int:
        return self.speeds.n

    @property
    def B(self) -> np.ndarray:
        return self.boundary.matrix

    def time_shifted(self, tau: float) -> "SystemSpec":
        """Same system observed through a window starting at time tau."""
        if tau == 0.0:
            return self
        return SystemSpec.build(self.speeds, self.coupling.shifted(tau),
                                self.boundary)

    def describe(self) -> dict:
        """Summary used by the CLI `info` command."""
        return {
            "k": self.k,
            "m": self.m,
            "taus": list(self.taus),
            "t_opt": self.t_opt,
            "t_russell": self.t_russell,
            "coupling": self.coupling.label,
            "B_class_generic": check_B_class(self.boundary, self.k, self.m, "generic"),
        }


def time_reversal_dual_system(spec: SystemSpec, T: float) -> SystemSpec:
    """Reverse time over the horizon [0, T] for a square system (m = k).

    Component order flips end-to-end, so with the reversal permutation P the
    new boundary matrix is (P B P)^{-1} and the new coupling is
    -P C(T-t, x) P (entrywise: both matrix axes flipped).
    """
    k, m = spec.k, spec.m
    if m != k:
        raise PreconditionError(f"time reversal needs m = k, got k={k}, m={m}")
    flipped = spec.B[::-1, ::-1]
    if not _block_invertible(flipped):
        raise PreconditionError("boundary matrix is singular; reversed system undefined")
    new_B = np.linalg.inv(flipped)
    new_profile = SpeedProfile(tuple(reversed(spec.speeds.speeds)), k=m, m=k)
    if spec.coupling.is_zero:
        new_coupling = CouplingField.zero(new_profile)
    else:
        orig = spec.coupling

        def fn(t, x):
            return -orig.C(T - t, x)[..., ::-1, ::-1]

        new_coupling = CouplingField.closed_form(
            new_profile, fn, label=f"reversed({orig.label})"
        )
    if not check_B_class(new_B, m, k, "generic"):
        raise PreconditionError("reversed boundary matrix leaves the generic class")
    return SystemSpec.build(new_profile, new_coupling, new_B)


def augment_system(spec: SystemSpec, eps: float) -> SystemSpec:
    """Embed a system with m > k into a square (m, m)-system by prepending
    m - k artificial fast right-moving components of speed (1+m-k-j)/eps.

    The artificial components carry copies of boundary traces and are not
    coupled back, so the original dynamics are preserved exactly; the
    augmented optimal time exceeds the original by at most an O(eps) margin.
    """
    k, m = spec.k, spec.m
    if m <= k:
        raise PreconditionError(f"augmentation needs m > k, got k={k}, m={m}")
    if eps <= 0.0:
        raise PreconditionError(f"eps must be positive, got {eps}")
    d = m - k
    fastest_orig = float(np.max(np.atleast_1d(spec.speeds.lam(1, _ORDER_SAMPLES))))
    if 1.0 / eps <= fastest_orig:
        raise PreconditionError(
            f"eps={eps} too large: artificial speeds (slowest 1/eps = {1.0 / eps:g}) "
            f"must exceed the fastest original speed {fastest_orig:g}"
        )
    artificial = tuple(Speed.constant((1 + d - j) / eps) for j in range(1, d + 1))
    new_profile = SpeedProfile(artificial + spec.speeds.speeds, k=m, m=m)
    new_B = np.zeros((m, m))
    new_B[:d, :d] = np.eye(d)
    new_B[d:, :] = spec.B
    if spec.coupling.is_zero:
        new_coupling = CouplingField.zero(new_profile)
    else:
        orig = spec.coupling

        def fn(t, x):
            base = orig.C(t, x)
            out = np.zeros((x.size, d + k + m, d + k + m))
            out[..., d:, d:] = base
            return out

        new_coupling = CouplingField.closed_form(
            new_profile, fn, label=f"augmented({orig.label})"
        )
    return SystemSpec.build(new_profile, new_coupling, new_B)


# ---------------------------------------------------------------------------
# JSON configuration
# ---------------------------------------------------------------------------

def _speed_from_config(entry: dict, pos: int) -> Speed:
    kind = entry.get("kind")
    try:
        if kind == "const":
            return Speed.constant(entry["value"])
        if kind == "affine":
            return Speed.affine(entry["a"], entry["b"])
        if kind == "grid":
            return Speed.from_grid(entry["x"], entry["v"])
    except KeyError as exc:
        raise ConfigurationError(f"speed #{pos}: missing field {exc}") from exc
    raise ConfigurationError(f"speed #{pos}: unknown kind {kind!r}")


def _coupling_from_config(entry: dict, profile: SpeedProfile,
                          B: np.ndarray) -> CouplingField:
    kind = entry.get("kind", "zero")
    if kind == "zero":
        return CouplingField.zero(profile)
    if kind == "grid":
        try:
            return CouplingField.from_grid(profile, entry["t"], entry["x"], entry["values"])
        except KeyError as exc:
            raise ConfigurationError(f"grid coupling: missing field {exc}") from exc
    if kind in ("closed-form", "closed-form-id"):
        ident = entry.get("id")
        if ident == "poly-t":
            coeffs = np.zeros((1, profile.n, profile.n))
            for item in entry.get("entries", []):
                i, j = int(item["i"]), int(item["j"])
                cs = np.asarray(item["coeffs"], dtype=float)
                if cs.size > coeffs.shape[0]:
                    grown = np.zeros((cs.size, profile.n, profile.n))
                    grown[: coeffs.shape[0]] = coeffs
                    coeffs = grown
                coeffs[: cs.size, i - 1, j - 1] = cs
            return CouplingField.poly_t(profile, coeffs)
        if ident == "thm1":
            from .counterexample import coupling_from_config
            return coupling_from_config(profile, B, entry)
        raise ConfigurationError(f"unknown closed-form coupling id {ident!r}")
    raise ConfigurationError(f"unknown coupling kind {kind!r}")


def load_system(source) -> SystemSpec:
    """Build a SystemSpec from a JSON file path or an already-parsed dict.

    Schema: {"k", "m", "speeds": [{"kind": "const"|"affine"|"grid", ...}],
    "B": [[...]], "coupling": {"kind": "zero"|"closed-form"|"grid", ...}}.
    """
    if isinstance(source, (str, Path)):
        text = Path(source).read_text()
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"invalid JSON in {source}: {exc}") from exc
    else:
        data = source
    try:
        k = int(data["k"])
        m = int(data["m"])
        speed_entries = data["speeds"]
        B = np.asarray(data["B"], dtype=float)
    except KeyError as exc:
        raise ConfigurationError(f"system config missing field {exc}") from exc
    if len(speed_entries) != k + m:
        raise ConfigurationError(
            f"system config lists {len(speed_entries)} speeds for k+m={k + m} components"
        )
    speeds = SpeedProfile(
        tuple(_speed_from_config(e, i + 1) for i, e in enumerate(speed_entries)), k=k, m=m
    )
    if B.shape != (k, m):
        raise ConfigurationError(f"B has shape {B.shape}, expected ({k}, {m})")
    coupling = _coupling_from_config(data.get("coupling", {"kind": "zero"}), speeds, B)
    return SystemSpec.build(speeds, coupling, B)
