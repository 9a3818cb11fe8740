"""Continuous image model, forward distortion simulator, correction and metrics.

The continuous model of an image is multilinear interpolation of its
cell-centred samples, extended by zero nodes placed on the domain
boundary. It is therefore continuous, vanishes outside the domain, and
reproduces the samples at cell centres. Derivatives are piecewise
constant; at a node the interval to the left is used.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np
from numba import njit

from .geometry import GridSpec, avg_x1, diff_x1


class InfeasibleFieldError(ValueError):
    """The field violates ``-1 <= D1 b <= 1`` where the model requires it."""


@dataclass
class ImageVolume:
    grid: GridSpec
    data: np.ndarray

    def __post_init__(self):
        self.data = self.grid.check_cells(self.data, "image data")

    @property
    def mass(self) -> float:
        return float(self.data.sum() * self.grid.cell_volume)


@dataclass
class VolumePair:
    """Two acquisitions with opposite phase-encoding (``+v`` and ``-v``)."""

    plus: ImageVolume
    minus: ImageVolume

    def __post_init__(self):
        if self.plus.grid != self.minus.grid:
            raise ValueError("both volumes of a pair must share one grid")

    @property
    def grid(self) -> GridSpec:
        return self.plus.grid


# --- 1D stencil shared by all interpolation routines -------------------------

def _stencil(s, m):
    """Locate continuous cell index ``s`` (centres at 0..m-1) in the node table.

    The node table is ``[0, I_0, ..., I_{m-1}, 0]`` with boundary nodes at
    ``s = -0.5`` and ``s = m - 0.5``. Returns the left node index into that
    table, the left node position, the interval width (in index units) and a
    mask of points inside the support.
    """
    inside = (s > -0.5) & (s <= m - 0.5)
    k = np.ceil(s)
    k = np.clip(np.where(inside, k, 0), 0, m).astype(np.intp)
    left = np.where(k >= 1, k - 1.0, -0.5)
    right = np.where(k <= m - 1, k.astype(float), m - 0.5)
    return k, left, right - left, inside


def _axis_weights(s, m):
    k, left, width, inside = _stencil(s, m)
    t = (s - left) / width
    w_hi = np.where(inside, t, 0.0)
    w_lo = np.where(inside, 1.0 - t, 0.0)
    dw = np.where(inside, 1.0 / width, 0.0)
    return k, w_lo, w_hi, dw


def _padded(img: ImageVolume):
    return np.pad(img.data, 1)


def _eval(img: ImageVolume, points, deriv_axis=None):
    grid = img.grid
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[-1] != grid.dim:
        raise ValueError(f"points must have {grid.dim} coordinates")
    pad = _padded(img)
    per_axis = []
    for a in range(grid.dim):
        s = (pts[:, a] - grid.origin[a]) / grid.h[a] - 0.5
        per_axis.append(_axis_weights(s, grid.m[a]))
    out = np.zeros(pts.shape[0])
    for corner in product((0, 1), repeat=grid.dim):
        w = np.ones(pts.shape[0])
        idx = []
        for a, c in enumerate(corner):
            k, w_lo, w_hi, dw = per_axis[a]
            if a == deriv_axis:
                w = w * (dw if c else -dw) / grid.h[a]
            else:
                w = w * (w_hi if c else w_lo)
            idx.append(k + c)
        out += w * pad[tuple(idx)]
    return out


def interp(img: ImageVolume, points) -> np.ndarray:
    """Multilinear model values at ``points`` (shape ``(npts, dim)``)."""
    return _eval(img, points)


def interp_d1(img: ImageVolume, points) -> np.ndarray:
    """Axis-1 derivative of the model at ``points``."""
    return _eval(img, points, deriv_axis=0)


def sample_columns(data: np.ndarray, grid: GridSpec, shift: np.ndarray):
    """Values and axis-1 derivatives at cell centres displaced by ``shift`` along axis 1.

    Only axis 1 is displaced, so the multilinear model collapses to 1D
    interpolation inside every column. ``shift`` is cell-shaped, in length
    units.
    """
    m1, h1 = grid.m[0], grid.h[0]
    shift = np.broadcast_to(np.asarray(shift, dtype=float), data.shape)
    d2 = np.ascontiguousarray(data, dtype=float).reshape(m1, -1)
    s2 = np.ascontiguousarray(shift).reshape(m1, -1)
    val = np.empty_like(d2)
    der = np.empty_like(d2)
    _sample_kernel(d2, s2, float(h1), val, der)
    return val.reshape(data.shape), der.reshape(data.shape)


@njit(cache=True, nogil=True)
def _sample_kernel(data, shift, h1, val, der):
    """Compiled form of the ``_axis_weights`` stencil applied down every column."""
    m1, ncol = data.shape
    for i in range(m1):
        for j in range(ncol):
            s = i + shift[i, j] / h1
            if not (s > -0.5 and s <= m1 - 0.5):
                val[i, j] = 0.0
                der[i, j] = 0.0
                continue
            k = int(np.ceil(s))
            left = k - 1.0 if k >= 1 else -0.5
            right = float(k) if k <= m1 - 1 else m1 - 0.5
            width = right - left
            lo = data[k - 1, j] if k >= 1 else 0.0
            hi = data[k, j] if k <= m1 - 1 else 0.0
            t = (s - left) / width
            val[i, j] = (1.0 - t) * lo + t * hi
            der[i, j] = (hi - lo) / (width * h1)


# --- forward model -----------------------------------------------------------

def _field_along_x1(b_col, grid, x):
    """Piecewise-linear field value and slope at axis-1 coordinates ``x``.

    ``b_col`` is face-shaped; ``x`` is any array whose trailing axes match
    the column axes. Beyond the outermost faces the field is held constant.
    """
    h1 = grid.h[0]
    m1 = grid.m[0]
    t = (x - grid.origin[0]) / h1
    i = np.clip(np.floor(t), 0, m1 - 1).astype(np.intp)
    frac = np.clip(t - i, 0.0, 1.0)
    # i has a leading query axis; gather b along axis 0 per column
    b0 = np.take_along_axis(b_col, i, axis=0)
    b1 = np.take_along_axis(b_col, i + 1, axis=0)
    inside = (t >= 0) & (t <= m1)
    slope = np.where(inside, (b1 - b0) / h1, 0.0)
    return b0 + frac * (b1 - b0), slope


def _invert_columns(b, grid, sign, tol):
    """Solve ``y = x + sign * b(x)`` for x at every cell centre y by bisection."""
    y = grid.cell_centers(0).reshape((grid.m[0],) + (1,) * (grid.dim - 1)) * np.ones(grid.m)
    reach = np.max(np.abs(b)) + grid.h[0]
    lo = y - reach
    hi = y + reach
    while np.max(hi - lo) > tol:
        mid = 0.5 * (lo + hi)
        val, _ = _field_along_x1(b, grid, mid)
        above = mid + sign * val > y
        hi = np.where(above, mid, hi)
        lo = np.where(above, lo, mid)
    return 0.5 * (lo + hi)


def check_feasible(b, grid, margin=0.0):
    g = diff_x1(b, grid)
    worst = float(np.max(np.abs(g))) if g.size else 0.0
    if not worst <= 1.0 - margin:
        raise InfeasibleFieldError(f"max|D1 b| = {worst:.6g} exceeds {1.0 - margin:.6g}")
    return worst


def simulate_pair(truth: ImageVolume, b_true: np.ndarray, delta: float = 0.05) -> VolumePair:
    """Distort ``truth`` by the field in both phase-encoding directions.

    Each column's map ``x -> x +/- b(x)`` is inverted by bisection so the
    distorted images can be sampled exactly at cell centres, then the
    intensity modulation ``1 / (1 +/- d1 b)`` is applied.
    """
    grid = truth.grid
    b_true = grid.check_field(b_true)
    check_feasible(b_true, grid, margin=delta)
    tol = 1e-10 * grid.h[0]
    out = []
    for sign in (1.0, -1.0):
        x = _invert_columns(b_true, grid, sign, tol)
        _, slope = _field_along_x1(b_true, grid, x)
        centers = grid.cell_centers(0).reshape((grid.m[0],) + (1,) * (grid.dim - 1))
        vals, _ = sample_columns(truth.data, grid, x - centers)
        out.append(ImageVolume(grid, vals / (1.0 + sign * slope)))
    return VolumePair(*out)


def correct_pair(pair: VolumePair, b: np.ndarray):
    """Corrected estimates ``I_v(x + Ab)(1 + D1 b)`` and ``I_-v(x - Ab)(1 - D1 b)``."""
    grid = pair.grid
    b = grid.check_field(b)
    check_feasible(b, grid)
    ab = avg_x1(b)
    jac = diff_x1(b, grid)
    ip, _ = sample_columns(pair.plus.data, grid, ab)
    im, _ = sample_columns(pair.minus.data, grid, -ab)
    return ImageVolume(grid, ip * (1.0 + jac)), ImageVolume(grid, im * (1.0 - jac))


# --- metrics -----------------------------------------------------------------

def ssd(a: ImageVolume, b: ImageVolume) -> float:
    """``(V/2) * sum (a - b)^2``."""
    if a.grid != b.grid:
        raise ValueError("images live on different grids")
    return float(0.5 * a.grid.cell_volume * np.sum((a.data - b.data) ** 2))


def ncc(a: ImageVolume, b: ImageVolume) -> float:
    """Squared normalised cross-correlation in [0, 1]."""
    if a.grid != b.grid:
        raise ValueError("images live on different grids")
    x = a.data - a.data.mean()
    y = b.data - b.data.mean()
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0 or ny == 0:
        raise ValueError("NCC undefined for an image with zero variance")
    return float((np.vdot(x, y) / (nx * ny)) ** 2)
