"""Grid descriptors and discrete operators on the x1-face-staggered grid.

Conventions
-----------
A field ``b`` living on x1-faces is stored as an array of shape
``grid.face_shape == (m1 + 1, m2[, m3])``; cell-centred data has shape
``grid.m``. Array axis 0 is the phase-encoding axis. The canonical vector
serialisation is ``arr.ravel(order="F")`` so that the axis-1 index runs
fastest and every image column is a contiguous block, which is the ordering
the Kronecker-product formulas assume.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.fft

from . import parallel


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Raised when a tridiagonal block has a nonpositive pivot."""

    def __init__(self, column, pivot):
        self.column = column
        self.pivot = pivot
        super().__init__(f"nonpositive pivot {pivot:.3e} in tridiagonal block of column {column}")


@dataclass(frozen=True)
class GridSpec:
    """Regular cell grid on a box ``origin + [0, m*h]``.

    Parameters
    ----------
    m : sequence of int
        Cell counts per axis, axis 0 being the distortion direction.
    h : sequence of float
        Cell widths per axis.
    origin : sequence of float, optional
        Lower domain corner, zeros by default.
    """

    m: tuple
    h: tuple
    origin: tuple = field(default=None)

    def __post_init__(self):
        m = tuple(int(v) for v in self.m)
        h = tuple(float(v) for v in np.broadcast_to(np.asarray(self.h, dtype=float), (len(m),)))
        origin = (0.0,) * len(m) if self.origin is None else tuple(float(v) for v in self.origin)
        if len(m) not in (2, 3):
            raise ValueError(f"only 2D and 3D grids are supported, got dim={len(m)}")
        if len(origin) != len(m):
            raise ValueError("origin must have one entry per axis")
        if any(v < 2 for v in m):
            raise ValueError(f"every axis needs at least 2 cells, got m={m}")
        if any(not np.isfinite(v) or v <= 0 for v in h):
            raise ValueError(f"spacing must be positive, got h={h}")
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "origin", origin)

    @classmethod
    def from_extent(cls, m, extent, origin=None):
        m = tuple(int(v) for v in m)
        h = tuple(float(e) / k for e, k in zip(extent, m))
        return cls(m, h, origin)

    @property
    def dim(self) -> int:
        return len(self.m)

    @property
    def face_shape(self) -> tuple:
        return (self.m[0] + 1,) + self.m[1:]

    @property
    def n_faces(self) -> int:
        return int(np.prod(self.face_shape))

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.m))

    @property
    def n_columns(self) -> int:
        return int(np.prod(self.m[1:]))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.h))

    @property
    def extent(self) -> tuple:
        return tuple(k * h for k, h in zip(self.m, self.h))

    def cell_centers(self, axis: int) -> np.ndarray:
        """1D cell-centre coordinates along array axis ``axis`` (0-based)."""
        return self.origin[axis] + (np.arange(self.m[axis]) + 0.5) * self.h[axis]

    def face_coords(self) -> np.ndarray:
        """1D x1-face coordinates along axis 0."""
        return self.origin[0] + np.arange(self.m[0] + 1) * self.h[0]

    def check_field(self, b, name="field") -> np.ndarray:
        b = np.asarray(b, dtype=float)
        if b.shape != self.face_shape:
            raise ValueError(f"{name} has shape {b.shape}, expected face shape {self.face_shape}")
        return b

    def check_cells(self, r, name="cell data") -> np.ndarray:
        r = np.asarray(r, dtype=float)
        if r.shape != self.m:
            raise ValueError(f"{name} has shape {r.shape}, expected cell shape {self.m}")
        return r


def to_vector(arr: np.ndarray) -> np.ndarray:
    """Serialise a grid array with axis 0 fastest."""
    return np.asarray(arr).ravel(order="F")


def from_vector(vec, shape) -> np.ndarray:
    return np.asarray(vec, dtype=float).reshape(shape, order="F")


# --- short differences along an arbitrary array axis -------------------------

def _diff(x, axis, h):
    return np.diff(x, axis=axis) / h


def _diff_adjoint(r, axis, h):
    """Transpose of ``_diff``: maps n-1 entries along ``axis`` back to n."""
    r = np.moveaxis(r, axis, 0)
    out = np.empty((r.shape[0] + 1,) + r.shape[1:])
    out[0] = -r[0]
    out[1:-1] = r[:-1] - r[1:]
    out[-1] = r[-1]
    return np.moveaxis(out / h, 0, axis)


def _neumann_laplacian(x, axis, h):
    """D~^T D~ x along ``axis`` (the 1D Neumann second difference)."""
    return _diff_adjoint(_diff(x, axis, h), axis, h)


def avg_x1(b: np.ndarray) -> np.ndarray:
    """Average face values onto cell centres: ``(b[i] + b[i+1]) / 2``."""
    b = np.asarray(b, dtype=float)
    return 0.5 * (b[1:] + b[:-1])


def avg_x1_adjoint(r: np.ndarray) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    out = np.zeros((r.shape[0] + 1,) + r.shape[1:])
    out[:-1] += 0.5 * r
    out[1:] += 0.5 * r
    return out


def diff_x1(b: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Short x1-differences ``(b[i+1] - b[i]) / h1``, faces -> cells."""
    b = grid.check_field(b)
    return _diff(b, 0, grid.h[0])


def diff_x1_adjoint(r: np.ndarray, grid: GridSpec) -> np.ndarray:
    r = grid.check_cells(r)
    return _diff_adjoint(r, 0, grid.h[0])


def _perp_index(axis, grid):
    if axis not in (2, 3) or axis > grid.dim:
        raise ValueError(f"axis must be 2 or 3 (and <= dim={grid.dim}), got {axis}")
    return axis - 1


def diff_perp(b: np.ndarray, grid: GridSpec, axis: int) -> np.ndarray:
    """Differences of staggered values across columns (``axis=2``) or slices (``axis=3``)."""
    k = _perp_index(axis, grid)
    b = grid.check_field(b)
    return _diff(b, k, grid.h[k])


def diff_perp_adjoint(r: np.ndarray, grid: GridSpec, axis: int) -> np.ndarray:
    k = _perp_index(axis, grid)
    return _diff_adjoint(np.asarray(r, dtype=float), k, grid.h[k])


def perp_laplacian_apply(b: np.ndarray, grid: GridSpec) -> np.ndarray:
    """``(D2^T D2 + D3^T D3) b`` without the volume weight."""
    out = np.zeros_like(b)
    for k in range(1, grid.dim):
        out += _neumann_laplacian(b, k, grid.h[k])
    return out


def perp_laplacian_diagonal(grid: GridSpec) -> np.ndarray:
    """Diagonal of ``D2^T D2 + D3^T D3`` as a face-shaped array."""
    out = np.zeros(grid.face_shape)
    for k in range(1, grid.dim):
        d = np.full(grid.m[k], 2.0)
        d[0] = d[-1] = 1.0
        shape = [1] * grid.dim
        shape[k] = grid.m[k]
        out += d.reshape(shape) / grid.h[k] ** 2
    return out


def smoother_hessian_apply(b: np.ndarray, grid: GridSpec) -> np.ndarray:
    """``V (D1^T D1 + D2^T D2 [+ D3^T D3]) b`` with ``V`` the cell volume."""
    b = grid.check_field(b)
    out = _neumann_laplacian(b, 0, grid.h[0]) + perp_laplacian_apply(b, grid)
    return grid.cell_volume * out


# --- per-column symmetric tridiagonal blocks ---------------------------------

class SymTridiagonal:
    """A batch of symmetric tridiagonal matrices, one per image column.

    ``diag`` has shape ``(n, *cols)`` and ``off`` shape ``(n - 1, *cols)``;
    block ``c`` is formed from ``diag[:, c]`` and ``off[:, c]``.
    """

    def __init__(self, diag, off):
        self.diag = np.asarray(diag, dtype=float)
        self.off = np.asarray(off, dtype=float)
        if self.off.shape != (self.diag.shape[0] - 1,) + self.diag.shape[1:]:
            raise ValueError("off-diagonal must have one entry fewer than the diagonal along axis 0")
        self._factor = None

    @property
    def shape(self):
        return self.diag.shape

    def copy(self):
        return SymTridiagonal(self.diag.copy(), self.off.copy())

    def add_diagonal(self, d):
        self.diag = self.diag + d
        self._factor = None
        return self

    def __add__(self, other):
        return SymTridiagonal(self.diag + other.diag, self.off + other.off)

    def matvec(self, x):
        x = np.asarray(x, dtype=float)
        y = self.diag * x
        y[:-1] += self.off * x[1:]
        y[1:] += self.off * x[:-1]
        return y

    def factor(self):
        """LDL^T factorisation, computed once and cached."""
        if self._factor is None:
            d = self.diag
            n = d.shape[0]
            piv = np.empty_like(d)
            lower = np.empty_like(self.off)
            piv[0] = d[0]
            for i in range(n - 1):
                _check_pivot(piv[i])
                lower[i] = self.off[i] / piv[i]
                piv[i + 1] = d[i + 1] - lower[i] * self.off[i]
            _check_pivot(piv[n - 1])
            self._factor = (piv, lower)
        return self._factor

    def solve(self, rhs):
        piv, lower = self.factor()
        y = np.array(rhs, dtype=float, copy=True)
        if y.shape != self.diag.shape:
            raise ValueError(f"rhs shape {y.shape} does not match blocks {self.diag.shape}")
        n = y.shape[0]
        for i in range(1, n):
            y[i] -= lower[i - 1] * y[i - 1]
        y /= piv
        for i in range(n - 2, -1, -1):
            y[i] -= lower[i] * y[i + 1]
        return y

    def to_sparse(self):
        """Assemble as a scipy sparse matrix in the canonical face ordering."""
        import scipy.sparse as sp

        n = self.diag.shape[0]
        ncol = int(np.prod(self.diag.shape[1:]))
        d = self.diag.reshape(n, ncol, order="F")
        e = self.off.reshape(n - 1, ncol, order="F")
        main = d.ravel(order="F")
        sub = np.zeros(n * ncol - 1)
        # off-diagonal entries between columns stay zero
        idx = (np.arange(n - 1)[:, None] + n * np.arange(ncol)[None, :]).ravel(order="F")
        sub[idx] = e.ravel(order="F")
        return sp.diags([sub, main, sub], [-1, 0, 1], format="csr")


def _check_pivot(p):
    bad = ~(p > 0)
    if np.any(bad):
        flat = np.flatnonzero(np.asarray(bad).ravel(order="F"))[0]
        raise NotPositiveDefiniteError(int(flat), float(np.asarray(p).ravel(order="F")[flat]))


def tridiag_solve_batched(blocks: SymTridiagonal, rhs: np.ndarray) -> np.ndarray:
    """Solve every per-column tridiagonal system exactly (LDL^T / Thomas)."""
    return blocks.solve(rhs)


# --- DCT diagonalisation of the cross-column coupling ------------------------

def neumann_eigenvalues(m: int, h: float) -> np.ndarray:
    """Eigenvalues of ``D~(m,h)^T D~(m,h)`` in orthonormal DCT-II ordering."""
    j = np.arange(m)
    return (4.0 / h**2) * np.sin(np.pi * j / (2 * m)) ** 2


def perp_eigenvalues(grid: GridSpec) -> np.ndarray:
    """Diagonal of the DCT-transformed ``D2^T D2 + D3^T D3`` broadcast over faces."""
    lam = np.zeros((1,) + grid.m[1:])
    for k in range(1, grid.dim):
        shape = [1] * grid.dim
        shape[k] = grid.m[k]
        lam = lam + neumann_eigenvalues(grid.m[k], grid.h[k]).reshape(shape)
    return lam


def coupled_apply(z: np.ndarray, grid: GridSpec, alpha: float, rho: float) -> np.ndarray:
    """Matrix-free ``G~ z = alpha V (D2^T D2 + D3^T D3) z + rho V z``."""
    V = grid.cell_volume
    return alpha * V * perp_laplacian_apply(z, grid) + rho * V * z


def dct_coupled_solve(rhs: np.ndarray, grid: GridSpec, alpha: float, rho: float) -> np.ndarray:
    """Direct solve of ``G~ z = rhs`` by DCT diagonalisation on every face layer."""
    if not alpha > 0 or not rho > 0:
        raise ValueError(f"alpha and rho must be positive, got alpha={alpha}, rho={rho}")
    rhs = grid.check_field(rhs)
    V = grid.cell_volume
    axes = tuple(range(1, grid.dim))
    workers = parallel.get_threads()
    coef = scipy.fft.dctn(rhs, type=2, axes=axes, norm="ortho", workers=workers)
    coef /= alpha * V * perp_eigenvalues(grid) + rho * V
    return scipy.fft.idctn(coef, type=2, axes=axes, norm="ortho", workers=workers)
