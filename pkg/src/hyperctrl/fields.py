"""Containers for space-time solution data on rectangular grids."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np


@dataclass
class PicardReport:
    """Convergence record of one fixed-point sweep sequence.

    ``residuals[i]`` is the weighted relative update size after sweep
    ``i + 1``; ``ratios`` are successive residual quotients (the first
    entry, when present, is the contraction factor after iteration 1).
    """

    iterations: int = 0
    residuals: list = field(default_factory=list)
    ratios: list = field(default_factory=list)
    converged: bool = False
    weight_rate: float = 0.0
    tolerance: float = 0.0
    message: str = ""

    @property
    def contraction_after_1(self) -> Optional[float]:
        return self.ratios[0] if self.ratios else None


def lagrange_time_interp(column: np.ndarray, tgrid: np.ndarray, t) -> np.ndarray:
    """Interpolate ``column`` (levels first) at times ``t``.

    Uses cubic Lagrange interpolation on the uniform level grid, falling
    back to the available stencil near the ends.  ``t`` may be a scalar
    or an array; values outside the grid are clamped to the end levels.
    """
    t = np.atleast_1d(np.asarray(t, dtype=float))
    L = len(tgrid) - 1
    h = tgrid[1] - tgrid[0] if L > 0 else 1.0
    s = np.clip((t - tgrid[0]) / h, 0.0, float(L))
    if L < 3:
        lo = np.clip(s.astype(int), 0, max(L - 1, 0))
        frac = s - lo
        out = (1.0 - frac)[(...,) + (None,) * (column.ndim - 1)] * column[lo]
        if L >= 1:
            out = out + frac[(...,) + (None,) * (column.ndim - 1)] * column[lo + 1]
        return out
    base = np.clip(np.floor(s).astype(int) - 1, 0, L - 3)
    u = s - base  # in [0, 3] over the 4-point stencil
    w0 = -(u - 1) * (u - 2) * (u - 3) / 6.0
    w1 = u * (u - 2) * (u - 3) / 2.0
    w2 = -u * (u - 1) * (u - 3) / 2.0
    w3 = u * (u - 1) * (u - 2) / 6.0
    expand = (...,) + (None,) * (column.ndim - 1)
    return (
        w0[expand] * column[base]
        + w1[expand] * column[base + 1]
        + w2[expand] * column[base + 2]
        + w3[expand] * column[base + 3]
    )


@dataclass
class SolutionField:
    """Grid samples of an n-component solution on [0, T] x [0, 1].

    ``values`` has shape (Nt+1, Nx+1, n) or (Nt+1, Nx+1, n, p) for
    batched right-hand sides.  ``orientation`` records which time edge
    carries the prescribed data ("initial" or "terminal").  ``domain``
    is "rectangle" for full-rectangle solves, or "omega-region" /
    "omega-complement" for fields supported on one side of a
    characteristic boundary curve; ``mask`` then flags the supported
    grid nodes (values are zero elsewhere).
    """

    tgrid: np.ndarray
    xgrid: np.ndarray
    values: np.ndarray
    orientation: str = "initial"
    report: Optional[PicardReport] = None
    domain: str = "rectangle"
    mask: Optional[np.ndarray] = None

    @property
    def n_components(self) -> int:
        return self.values.shape[2]

    @property
    def shape(self):
        return self.values.shape

    def time_slice(self, t: float) -> np.ndarray:
        """Solution profile at time ``t`` (linear interpolation in t)."""
        tg = self.tgrid
        if t <= tg[0]:
            return self.values[0]
        if t >= tg[-1]:
            return self.values[-1]
        s = (t - tg[0]) / (tg[1] - tg[0])
        lo = min(int(s), len(tg) - 2)
        frac = s - lo
        return (1.0 - frac) * self.values[lo] + frac * self.values[lo + 1]

    def space_slice(self, x: float) -> np.ndarray:
        """Trace at position ``x`` for all time levels."""
        xg = self.xgrid
        if x <= xg[0]:
            return self.values[:, 0]
        if x >= xg[-1]:
            return self.values[:, -1]
        s = (x - xg[0]) / (xg[1] - xg[0])
        lo = min(int(s), len(xg) - 2)
        frac = s - lo
        return (1.0 - frac) * self.values[:, lo] + frac * self.values[:, lo + 1]

    def boundary_trace(self, side: str) -> np.ndarray:
        """Full-time trace at ``side`` ("left" for x=0, "right" for x=1)."""
        if side == "left":
            return self.values[:, 0]
        if side == "right":
            return self.values[:, -1]
        raise ValueError("side must be 'left' or 'right'")

    def l2_space(self, level: int = 0) -> float:
        """Spatial L2 norm of the profile at a time level (trapezoid)."""
        v = self.values[level]
        dx = self.xgrid[1] - self.xgrid[0]
        sq = np.sum(np.abs(v) ** 2, axis=1)
        while sq.ndim > 1:
            sq = np.sum(sq, axis=-1)
        return float(np.sqrt(np.trapezoid(sq, dx=dx)))

    def l2_trace(self, trace: np.ndarray) -> float:
        """Temporal L2 norm of a trace sampled on the time levels."""
        dt = self.tgrid[1] - self.tgrid[0]
        sq = np.sum(np.abs(np.atleast_2d(trace.T).T) ** 2, axis=tuple(range(1, trace.ndim)))
        return float(np.sqrt(np.trapezoid(sq, dx=dt)))

    def y_norm(self) -> float:
        """Mixed norm max(sup_x ||.||_{L2 in t}, sup_t ||.||_{L2 in x}).

        Values outside ``mask`` (when present) count as zero, so for a
        field supported on a sub-region this is the norm over that
        region only.
        """
        vals = self.values
        if self.mask is not None:
            expand = self.mask[(...,) + (None,) * (vals.ndim - 2)]
            vals = np.where(expand, vals, 0.0)
        sq = np.sum(np.abs(vals) ** 2, axis=tuple(range(2, vals.ndim)))
        dt = self.tgrid[1] - self.tgrid[0]
        dx = self.xgrid[1] - self.xgrid[0]
        per_x = np.sqrt(np.trapezoid(sq, dx=dt, axis=0))
        per_t = np.sqrt(np.trapezoid(sq, dx=dx, axis=1))
        return float(max(per_x.max(), per_t.max()))
