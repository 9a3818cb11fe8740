"""Discrete distance, smoother and penalty with gradients and Gauss-Newton Hessians.

Every term that acts only along axis 1 (the distance, ``D1^T D1`` and the
penalty) has an exact per-column tridiagonal Hessian; the blocks are built
analytically from the two-point stencils of the averaging and difference
operators.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from .geometry import GridSpec, SymTridiagonal
from .image_model import InfeasibleFieldError, VolumePair, sample_columns

FEASIBILITY_MARGIN = 1e-10


@dataclass
class ObjectiveParams:
    alpha: float
    beta: float = 10.0
    gamma: float = 1e-3
    box_check: bool = False

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.beta < 0 or self.gamma < 0:
            raise ValueError("beta and gamma must be nonnegative")


def box_radius(grid: GridSpec) -> float:
    """Radius ``2 diam(Omega)`` of the optional L-infinity box on ``b``."""
    return 2.0 * float(np.linalg.norm(grid.extent))


def in_box(b, grid: GridSpec) -> bool:
    return float(np.max(np.abs(b))) <= box_radius(grid)


# --- penalty function --------------------------------------------------------

def phi(x):
    """``x^4 / (1 - x^2)`` on (-1, 1), +inf elsewhere."""
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        val = x**4 / (1.0 - x**2)
    return np.where(np.abs(x) < 1.0, val, np.inf)


def dphi(x):
    x = np.asarray(x, dtype=float)
    return (4 * x**3 - 2 * x**5) / (1 - x**2) ** 2


def d2phi(x):
    x = np.asarray(x, dtype=float)
    x2 = x * x
    return 2 * x2 * (x2 * x2 - 3 * x2 + 6) / (1 - x2) ** 3


# --- distance ----------------------------------------------------------------

@dataclass
class ResidualJacobian:
    """``J_r = diag(w_avg) A1 + diag(w_diff) D1`` for a fixed field."""

    grid: GridSpec
    w_avg: np.ndarray
    w_diff: np.ndarray

    def matvec(self, p):
        return self.w_avg * geo.avg_x1(p) + self.w_diff * geo.diff_x1(p, self.grid)

    def rmatvec(self, q):
        return geo.avg_x1_adjoint(self.w_avg * q) + geo.diff_x1_adjoint(self.w_diff * q, self.grid)

    def gauss_newton_apply(self, p):
        """``H_D p = V J^T J p``."""
        return self.grid.cell_volume * self.rmatvec(self.matvec(p))

    def hessian_blocks(self) -> SymTridiagonal:
        """Exact tridiagonal blocks of ``V J^T J``.

        Row ``c`` of ``J`` touches faces ``c`` and ``c+1`` with coefficients
        ``w_avg/2 -/+ w_diff/h1``.
        """
        h1 = self.grid.h[0]
        V = self.grid.cell_volume
        lo = 0.5 * self.w_avg - self.w_diff / h1
        hi = 0.5 * self.w_avg + self.w_diff / h1
        diag = np.zeros(self.grid.face_shape)
        diag[:-1] += lo * lo
        diag[1:] += hi * hi
        return SymTridiagonal(V * diag, V * lo * hi)


@dataclass
class DistanceEval:
    value: float
    grad: np.ndarray
    residual: np.ndarray
    jacobian: ResidualJacobian


def _shifted_samples(pair: VolumePair, b):
    grid = pair.grid
    ab = geo.avg_x1(b)
    jac = geo.diff_x1(b, grid)
    ip, dip = sample_columns(pair.plus.data, grid, ab)
    im, dim = sample_columns(pair.minus.data, grid, -ab)
    return jac, ip, dip, im, dim


def residual(pair: VolumePair, b) -> np.ndarray:
    """``I_v(x + Ab)(e + D1 b) - I_-v(x - Ab)(e - D1 b)`` on cell centres."""
    b = pair.grid.check_field(b)
    jac, ip, _, im, _ = _shifted_samples(pair, b)
    return ip * (1.0 + jac) - im * (1.0 - jac)


def distance(pair: VolumePair, b) -> DistanceEval:
    grid = pair.grid
    b = grid.check_field(b)
    jac, ip, dip, im, dim = _shifted_samples(pair, b)
    r = ip * (1.0 + jac) - im * (1.0 - jac)
    J = ResidualJacobian(grid, dip * (1.0 + jac) + dim * (1.0 - jac), ip + im)
    V = grid.cell_volume
    return DistanceEval(0.5 * V * float(np.sum(r * r)), V * J.rmatvec(r), r, J)


# --- smoother and penalty ----------------------------------------------------

def smoother(b, grid: GridSpec, alpha: float = 1.0):
    """``alpha * S(b)`` and its gradient; ``S = V/2 (|D1 b|^2 + |D2 b|^2 + |D3 b|^2)``."""
    b = grid.check_field(b)
    grad = geo.smoother_hessian_apply(b, grid)
    return 0.5 * alpha * float(np.vdot(b, grad)), alpha * grad


def axis1_smoother_blocks(grid: GridSpec, weight: float) -> SymTridiagonal:
    """Blocks of ``weight * D1^T D1``."""
    c = weight / grid.h[0] ** 2
    diag = np.full(grid.face_shape, 2.0 * c)
    diag[0] = diag[-1] = c
    off = np.full((grid.m[0],) + grid.m[1:], -c)
    return SymTridiagonal(diag, off)


@dataclass
class PenaltyEval:
    value: float
    grad: np.ndarray | None
    hess_weights: np.ndarray | None

    def hessian_apply(self, p, grid):
        return geo.diff_x1_adjoint(self.hess_weights * geo.diff_x1(p, grid), grid)

    def hessian_blocks(self, grid) -> SymTridiagonal:
        c = self.hess_weights / grid.h[0] ** 2
        diag = np.zeros(grid.face_shape)
        diag[:-1] += c
        diag[1:] += c
        return SymTridiagonal(diag, -c)


def penalty(b, grid: GridSpec, beta: float, derivatives: bool = True) -> PenaltyEval:
    """``beta V sum phi(D1 b)``; +inf for infeasible ``b``.

    Derivatives are only defined for strictly feasible fields and raise
    :class:`InfeasibleFieldError` otherwise.
    """
    b = grid.check_field(b)
    g = geo.diff_x1(b, grid)
    V = grid.cell_volume
    worst = float(np.max(np.abs(g)))
    value = beta * V * float(np.sum(phi(g))) if worst < 1.0 else np.inf
    if not derivatives:
        return PenaltyEval(value, None, None)
    if not worst <= 1.0 - FEASIBILITY_MARGIN:
        raise InfeasibleFieldError(f"penalty derivatives need max|D1 b| < 1, got {worst:.6g}")
    grad = beta * V * geo.diff_x1_adjoint(dphi(g), grid)
    return PenaltyEval(value, grad, beta * V * d2phi(g))


# --- Gauss-Newton objective --------------------------------------------------

@dataclass
class ObjectiveEval:
    """``J_GN`` (or ``J`` without penalty) at one field, with its linearisation."""

    value: float
    grad: np.ndarray | None
    residual: np.ndarray
    parts: dict
    b: np.ndarray = field(repr=False, default=None)
    jacobian: ResidualJacobian | None = field(repr=False, default=None)
    penalty: PenaltyEval | None = field(repr=False, default=None)


def objective_gn(pair: VolumePair, b, params: ObjectiveParams, penalized: bool = True,
                 derivatives: bool = True) -> ObjectiveEval:
    grid = pair.grid
    b = grid.check_field(b)
    pen = None
    p_val = 0.0
    if params.box_check and not in_box(b, grid):
        return ObjectiveEval(np.inf, None, None, {"D": np.nan, "S": np.nan, "P": np.nan}, b)
    if penalized:
        pen = penalty(b, grid, params.beta, derivatives=False)
        p_val = pen.value
        if not np.isfinite(p_val):
            return ObjectiveEval(np.inf, None, None, {"D": np.nan, "S": np.nan, "P": np.inf}, b)
    if not derivatives:
        r = residual(pair, b)
        d_val = 0.5 * grid.cell_volume * float(np.sum(r * r))
        s_val, _ = smoother(b, grid)
        return ObjectiveEval(d_val + params.alpha * s_val + p_val, None, r,
                             {"D": d_val, "S": s_val, "P": p_val}, b)
    dist = distance(pair, b)
    s_val, s_grad = smoother(b, grid)
    grad = dist.grad + params.alpha * s_grad
    if penalized:
        pen = penalty(b, grid, params.beta)
        grad = grad + pen.grad
    return ObjectiveEval(dist.value + params.alpha * s_val + p_val, grad, dist.residual,
                         {"D": dist.value, "S": s_val, "P": p_val}, b, dist.jacobian, pen)


def hessian_gn_apply(ev: ObjectiveEval, params: ObjectiveParams, p) -> np.ndarray:
    """``(H_D + alpha grad^2 S + gamma I + grad^2 P) p`` at the linearisation point of ``ev``."""
    grid = ev.jacobian.grid
    out = ev.jacobian.gauss_newton_apply(p)
    out += params.alpha * geo.smoother_hessian_apply(p, grid)
    out += params.gamma * p
    if ev.penalty is not None:
        out += ev.penalty.hessian_apply(p, grid)
    return out


def hessian_column_blocks(ev: ObjectiveEval, params: ObjectiveParams) -> SymTridiagonal:
    """Tridiagonal blocks of ``H_D + alpha V D1^T D1 + grad^2 P`` (no shifts)."""
    grid = ev.jacobian.grid
    blocks = ev.jacobian.hessian_blocks() + axis1_smoother_blocks(grid, params.alpha * grid.cell_volume)
    if ev.penalty is not None:
        blocks = blocks + ev.penalty.hessian_blocks(grid)
    return blocks


def hessian_diagonal(ev: ObjectiveEval, params: ObjectiveParams) -> np.ndarray:
    grid = ev.jacobian.grid
    V = grid.cell_volume
    return (hessian_column_blocks(ev, params).diag
            + params.alpha * V * geo.perp_laplacian_diagonal(grid) + params.gamma)


def hessian_sparse(ev: ObjectiveEval, params: ObjectiveParams):
    """Explicit sparse ``H_{J_GN}`` in canonical face ordering."""
    import scipy.sparse as sp

    grid = ev.jacobian.grid
    H = hessian_column_blocks(ev, params).to_sparse()
    H = H + params.alpha * grid.cell_volume * perp_laplacian_sparse(grid) + params.gamma * sp.identity(grid.n_faces)
    return H.tocsr()


def perp_laplacian_sparse(grid: GridSpec):
    """``D2^T D2 + D3^T D3`` assembled from Kronecker products."""
    import scipy.sparse as sp

    def dtd(m, h):
        d = sp.diags([-np.ones(m - 1), np.ones(m - 1)], [0, 1], shape=(m - 1, m)) / h
        return (d.T @ d).tocsr()

    n1 = grid.m[0] + 1
    if grid.dim == 2:
        return sp.kron(dtd(grid.m[1], grid.h[1]), sp.identity(n1))
    m2, m3 = grid.m[1], grid.m[2]
    L2 = sp.kron(sp.identity(m3), sp.kron(dtd(m2, grid.h[1]), sp.identity(n1)))
    L3 = sp.kron(dtd(m3, grid.h[2]), sp.identity(n1 * m2))
    return (L2 + L3).tocsr()


# --- ADMM split --------------------------------------------------------------

def f_split(pair: VolumePair, b, alpha: float, derivatives: bool = True):
    """Column-separable part ``f = D + (alpha V / 2) |D1 b|^2``."""
    grid = pair.grid
    V = grid.cell_volume
    g = geo.diff_x1(b, grid)
    if not derivatives:
        r = residual(pair, b)
        return 0.5 * V * float(np.sum(r * r)) + 0.5 * alpha * V * float(np.sum(g * g)), None, None
    dist = distance(pair, b)
    value = dist.value + 0.5 * alpha * V * float(np.sum(g * g))
    grad = dist.grad + alpha * V * geo.diff_x1_adjoint(g, grid)
    return value, grad, dist


def g_split(z, grid: GridSpec, alpha: float):
    """Coupling part ``g = (alpha V / 2)(|D2 z|^2 + |D3 z|^2)`` and its gradient."""
    grad = alpha * grid.cell_volume * geo.perp_laplacian_apply(z, grid)
    return 0.5 * float(np.vdot(z, grad)), grad
