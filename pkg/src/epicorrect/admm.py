"""Non-convex ADMM for the constrained correction problem.

The objective is split into the column-separable part
``f(b) = D(b) + (alpha V / 2)|D1 b|^2`` (with the hard constraint
``-1 <= D1 b <= 1``) and the cross-column coupling
``g(z) = (alpha V / 2)(|D2 z|^2 + |D3 z|^2)``. The b-update is solved per
column by SQP with an active-set QP, the z-update by DCT diagonalisation.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import _qp
from . import geometry as geo
from .geometry import GridSpec, SymTridiagonal
from .image_model import VolumePair
from .objective import ObjectiveParams, axis1_smoother_blocks, f_split, g_split, residual
from .parallel import run_chunked
from .report import IterationRecord, SolveReport

SCHEDULES = ("fixed", "adaptive", "adaptive_bounded")
_ALIASES = {"bounded": "adaptive_bounded"}


class QPError(RuntimeError):
    """Active-set failure in one column (cycling guard or numerical breakdown)."""

    def __init__(self, msg, column=None):
        super().__init__(msg)
        self.column = column


class ADMMError(RuntimeError):
    def __init__(self, msg, report=None):
        super().__init__(msg)
        self.report = report


def canonical_schedule(name: str) -> str:
    name = _ALIASES.get(name, name)
    if name not in SCHEDULES:
        raise ValueError(f"unknown rho schedule {name!r}; choose from {SCHEDULES}")
    return name


@dataclass
class ADMMConfig:
    rho0: float = 1e6
    rho_min: float = 1e2
    schedule: str = "adaptive_bounded"
    eps_abs: float = 0.2
    eps_rel: float = 0.2
    max_iter: int = 50
    tau_incr: float = 2.0
    tau_decr: float = 2.0
    mu: float = 10.0
    sqp_max_iter: int = 20
    sqp_tol: float = 1e-2
    qp_max_iter: int | None = None
    check_lagrangian: bool = False

    def __post_init__(self):
        self.schedule = canonical_schedule(self.schedule)
        if not self.rho_min > 0 or not self.rho0 >= self.rho_min:
            raise ValueError("need rho0 >= rho_min > 0")
        if not (self.eps_abs > 0 and self.eps_rel > 0):
            raise ValueError("eps_abs and eps_rel must be positive")
        if not (self.tau_incr > 1 and self.tau_decr > 1 and self.mu > 1):
            raise ValueError("tau_incr, tau_decr and mu must exceed 1")
        if self.max_iter < 1 or self.sqp_max_iter < 1:
            raise ValueError("iteration caps must be positive")


@dataclass
class ADMMState:
    """Primal pair ``(b, z)`` and scaled dual ``u = y / (rho V)``."""

    b: np.ndarray
    z: np.ndarray
    u: np.ndarray
    rho: float
    iteration: int = 0
    lagrangian: float = np.nan

    def copy(self):
        return ADMMState(self.b.copy(), self.z.copy(), self.u.copy(), self.rho, self.iteration, self.lagrangian)


# --- QP ----------------------------------------------------------------------

@dataclass
class QPResult:
    x: np.ndarray
    lam_lower: np.ndarray
    lam_upper: np.ndarray
    iters: np.ndarray
    state: np.ndarray = field(repr=False, default=None)


def _columns(a):
    """``(n, *cols)`` -> contiguous ``(ncol, n)`` with columns in C order."""
    return np.ascontiguousarray(a.reshape(a.shape[0], -1).T)


def _uncolumns(a, shape):
    return np.ascontiguousarray(a.T).reshape(shape)


def qp_active_set(G: SymTridiagonal, c: np.ndarray, x0: np.ndarray, h1: float = 1.0,
                  max_iter: int | None = None, tol: float = 1e-11) -> QPResult:
    """Solve ``min 1/2 x^T G x + c^T x`` s.t. ``-1 <= D1 x <= 1`` column by column.

    ``G`` holds one tridiagonal block per column, ``c`` and ``x0`` are
    face-shaped (a single column may be passed as a 1D array). ``x0`` must be
    feasible; constraints active at ``x0`` form the initial working set.

    Returns
    -------
    QPResult
        Solution and per-cell multipliers of the lower (``D1 x >= -1``) and
        upper (``D1 x <= 1``) bounds.
    """
    diag, off = np.asarray(G.diag, float), np.asarray(G.off, float)
    c = np.asarray(c, float)
    x0 = np.asarray(x0, float)
    shape = diag.shape
    if c.shape != shape or x0.shape != shape:
        raise ValueError("G, c and x0 must share one shape")
    n = shape[0]
    if n < 2:
        raise ValueError("a column needs at least two faces")
    g0 = np.diff(x0, axis=0) / h1
    if np.max(np.abs(g0)) > 1.0 + 1e-9:
        raise ValueError(f"x0 is infeasible: max|D1 x0| = {np.max(np.abs(g0)):.6g}")
    if max_iter is None:
        max_iter = 10 * n + 50
    dc, oc, qc, xc = _columns(diag), _columns(off), _columns(c), _columns(x0)
    gc = _columns(g0)
    state = np.where(gc <= -1.0 + tol, 1, np.where(gc >= 1.0 - tol, 2, 0)).astype(np.int8)
    lam = np.zeros_like(gc)
    ncol = dc.shape[0]
    iters = np.zeros(ncol, dtype=np.int64)
    status = np.zeros(ncol, dtype=np.int64)

    def work(start, stop):
        _qp.qp_columns(dc, oc, qc, xc, float(h1), state, lam, iters, status, start, stop, max_iter, tol)

    run_chunked(work, ncol)
    bad = np.flatnonzero(status)
    if bad.size:
        j = int(bad[0])
        why = {_qp.MAX_ITER: f"no convergence within {max_iter} active-set iterations",
               _qp.NOT_SPD: "G block is not positive definite",
               _qp.SINGULAR_SCHUR: "singular Schur complement"}[int(status[j])]
        raise QPError(f"QP failed in column {j}: {why}", column=j)
    cell_shape = (n - 1,) + shape[1:]
    lam = _uncolumns(lam, cell_shape)
    st = _uncolumns(state, cell_shape)
    return QPResult(_uncolumns(xc, shape), np.where(st == 1, lam, 0.0), np.where(st == 2, lam, 0.0),
                    iters.reshape(shape[1:]) if len(shape) > 1 else iters[0], st)


def kkt_residual(G: SymTridiagonal, c, h1, res: QPResult) -> float:
    """Largest scaled violation of the KKT conditions of the column QPs.

    Checks stationarity ``G x + c = A^T lambda``, primal and dual
    feasibility and complementary slackness, independently of the solver.
    """
    x = res.x
    Gx = G.matvec(x)
    # A^T lambda with rows +D1 (lower) and -D1 (upper)
    At = geo._diff_adjoint(res.lam_lower - res.lam_upper, 0, h1)
    scale = 1.0 + np.max(np.abs(c)) + np.max(np.abs(Gx))
    stat = np.max(np.abs(Gx + c - At)) / scale
    g = np.diff(x, axis=0) / h1
    primal = max(0.0, float(np.max(np.abs(g))) - 1.0)
    dual = max(0.0, -float(min(res.lam_lower.min(), res.lam_upper.min())))
    lscale = 1.0 + max(np.max(np.abs(res.lam_lower)), np.max(np.abs(res.lam_upper)))
    comp = np.max(np.abs(res.lam_lower * (g + 1.0)) + np.abs(res.lam_upper * (1.0 - g))) / lscale
    return float(max(stat, primal, dual / lscale, comp))


# --- sub-steps ---------------------------------------------------------------

@dataclass
class BUpdateInfo:
    sqp_iters: int
    qp_iters: int
    kkt_residual: float
    subproblem_start: float
    subproblem_end: float


def _column_sum(a):
    return a.sum(axis=0)


def _psi_columns(pair, b, z, u, alpha, rhoV):
    """Per-column values of ``f(b) + (rho V / 2)|b - z + u|^2``."""
    grid = pair.grid
    V = grid.cell_volume
    r = residual(pair, b)
    g = geo.diff_x1(b, grid)
    w = b - z + u
    return 0.5 * V * _column_sum(r * r + alpha * g * g) + 0.5 * rhoV * _column_sum(w * w)


def b_update(pair: VolumePair, state: ADMMState, params: ObjectiveParams, config: ADMMConfig = None):
    """Approximate constrained minimiser of the b-subproblem by per-column SQP.

    Each SQP iteration linearises the residual (Gauss-Newton model), solves
    the column QPs from the current iterate and damps every column's step by
    backtracking until that column's subproblem objective decreases. The
    loop stops once ``|G s|`` over the columns still moving falls below
    ``sqp_tol`` times its first value. A column whose backtracking finds no
    decrease (the model and the piecewise-linear image disagree at a kink)
    is frozen for the rest of the update.
    """
    config = config or ADMMConfig()
    grid = pair.grid
    V = grid.cell_volume
    rhoV = state.rho * V
    alpha = params.alpha
    b = state.b.copy()
    z, u = state.z, state.u
    h1 = grid.h[0]
    psi = _psi_columns(pair, b, z, u, alpha, rhoV)
    psi_start = float(psi.sum())
    active = np.ones(psi.shape, dtype=bool)
    ref = None
    qp_total = 0
    kkt = 0.0
    it = 0
    for it in range(1, config.sqp_max_iter + 1):
        _, fgrad, dist = f_split(pair, b, alpha)
        c = fgrad + rhoV * (b - z + u)
        G = dist.jacobian.hessian_blocks() + axis1_smoother_blocks(grid, alpha * V)
        G.add_diagonal(rhoV)
        q = c - G.matvec(b)
        res = qp_active_set(G, q, b, h1, config.qp_max_iter)
        qp_total += int(np.sum(res.iters[active]))
        kkt = max(kkt, kkt_residual(G, q, h1, res))
        s = res.x - b
        gs = np.sqrt(_column_sum(G.matvec(s) ** 2))
        if ref is None:
            ref = float(np.linalg.norm(gs))
        # columns whose step is lost in roundoff keep their current value
        slope = _column_sum(c * s)
        active &= (gs > 0) & (slope < -1e-12 * (1.0 + np.abs(psi)))
        if not active.any() or (it > 1 and np.linalg.norm(gs[active]) <= config.sqp_tol * ref):
            break
        t = np.where(active, 1.0, 0.0)
        done = ~active
        for _ in range(30):
            trial = _psi_columns(pair, b + t * s, z, u, alpha, rhoV)
            done |= trial <= psi + 1e-4 * t * slope
            if done.all():
                break
            t = np.where(done, t, 0.5 * t)
        t = np.where(done, t, 0.0)
        active &= t > 0
        b = b + t * s
        psi = _psi_columns(pair, b, z, u, alpha, rhoV)
    return b, BUpdateInfo(it, qp_total, kkt, psi_start, float(psi.sum()))


def z_update(state: ADMMState, grid: GridSpec, alpha: float) -> np.ndarray:
    """``z = G~^{-1} rho V (b + u)`` with ``G~ = alpha V (D2^T D2 + D3^T D3) + rho V I``."""
    rhs = state.rho * grid.cell_volume * (state.b + state.u)
    return geo.dct_coupled_solve(rhs, grid, alpha, state.rho)


@dataclass
class Residuals:
    primal: float
    dual: float
    eps_pri: float
    eps_dual: float

    @property
    def converged(self) -> bool:
        return self.primal <= self.eps_pri and self.dual <= self.eps_dual


def tolerances(n: int, b, z, u, rhoV, eps_abs, eps_rel):
    """``(eps_pri, eps_dual)`` from the absolute/relative combination."""
    root = np.sqrt(n) * eps_abs
    eps_pri = root + eps_rel * max(np.linalg.norm(b), np.linalg.norm(z))
    eps_dual = root + eps_rel * rhoV * np.linalg.norm(u)
    return float(eps_pri), float(eps_dual)


def dual_update_and_residuals(b_new, z_old, z_new, u_old, rhoV, eps_abs=0.2, eps_rel=0.2, b_old=None):
    """Scaled dual step ``u + b - z`` with primal/dual residuals and tolerances.

    The tolerances use the iterates at the start of the iteration
    (``b_old``, ``z_old``, ``u_old``); ``b_old`` defaults to ``b_new``.
    """
    u_new = u_old + b_new - z_new
    primal = float(np.linalg.norm(b_new - z_new))
    dual = float(rhoV * np.linalg.norm(z_old - z_new))
    b_ref = b_new if b_old is None else b_old
    eps_pri, eps_dual = tolerances(b_new.size, b_ref, z_old, u_old, rhoV, eps_abs, eps_rel)
    return u_new, Residuals(primal, dual, eps_pri, eps_dual)


def rho_schedule(schedule: str, rho: float, primal_res: float, dual_res: float,
                 config: ADMMConfig = None) -> float:
    """Residual-balancing update of the augmentation parameter."""
    config = config or ADMMConfig()
    schedule = canonical_schedule(schedule)
    if schedule == "fixed":
        return rho
    if primal_res > config.mu * dual_res:
        rho = rho * config.tau_incr
    elif dual_res > config.mu * primal_res:
        rho = rho / config.tau_decr
    if schedule == "adaptive_bounded":
        rho = max(rho, config.rho_min)
    return rho


def lagrangian(pair: VolumePair, state: ADMMState, alpha: float) -> float:
    """``f(b) + g(z) + y^T (b - z) + (rho V / 2)|b - z|^2`` with ``y = rho V u``."""
    grid = pair.grid
    rhoV = state.rho * grid.cell_volume
    f_val, _, _ = f_split(pair, state.b, alpha, derivatives=False)
    g_val, _ = g_split(state.z, grid, alpha)
    diff = state.b - state.z
    return float(f_val + g_val + rhoV * np.vdot(state.u, diff) + 0.5 * rhoV * np.vdot(diff, diff))


def dual_consistency(state: ADMMState, grid: GridSpec, alpha: float) -> float:
    """Relative mismatch between ``y = rho V u`` and ``grad g(z)``."""
    y = state.rho * grid.cell_volume * state.u
    _, gz = g_split(state.z, grid, alpha)
    scale = max(np.linalg.norm(y), np.linalg.norm(gz))
    return float(np.linalg.norm(y - gz) / scale) if scale > 0 else 0.0


# --- driver ------------------------------------------------------------------

def admm_solve(pair: VolumePair, init=None, params: ObjectiveParams = None, config: ADMMConfig = None,
               level: int = 0, report: SolveReport = None, rho: float | None = None):
    """Run ADMM from ``init = (b0, z0, u0)`` (zeros by default).

    Returns ``(b, SolveReport, ADMMState)``; ``b`` is always feasible. When
    ``config.check_lagrangian`` is set and the schedule is fixed, an
    increase of the augmented Lagrangian raises :class:`ADMMError`.
    """
    config = config or ADMMConfig()
    if params is None:
        raise ValueError("params are required")
    report = report or SolveReport("admm")
    grid = pair.grid
    shape = grid.face_shape
    if init is None:
        init = (np.zeros(shape), np.zeros(shape), np.zeros(shape))
    b0, z0, u0 = (grid.check_field(np.asarray(a, float)).copy() for a in init)
    g0 = geo.diff_x1(b0, grid)
    if g0.size and np.max(np.abs(g0)) > 1.0 + 1e-9:
        raise ValueError("b0 violates -1 <= D1 b <= 1")
    state = ADMMState(b0, z0, u0, float(config.rho0 if rho is None else rho))
    alpha = params.alpha
    V = grid.cell_volume
    state.lagrangian = lagrangian(pair, state, alpha)
    report.records.append(IterationRecord(0, level, rho=state.rho, lagrangian=state.lagrangian, time=0.0))
    t0 = time.perf_counter()
    report.termination = "max_iter"
    for k in range(1, config.max_iter + 1):
        rhoV = state.rho * V
        tb = time.perf_counter()
        try:
            b_new, info = b_update(pair, state, params, config)
        except QPError as err:
            raise ADMMError(f"b-update failed at iteration {k}: {err}", report) from err
        tb = time.perf_counter() - tb
        mid = ADMMState(b_new, state.z, state.u, state.rho)
        z_new = z_update(mid, grid, alpha)
        u_new, res = dual_update_and_residuals(b_new, state.z, z_new, state.u, rhoV,
                                               config.eps_abs, config.eps_rel, b_old=state.b)
        new = ADMMState(b_new, z_new, u_new, state.rho, k)
        new.lagrangian = lagrangian(pair, new, alpha)
        consistency = dual_consistency(new, grid, alpha)
        if (config.check_lagrangian and config.schedule == "fixed"
                and new.lagrangian > state.lagrangian + 1e-10 * (1.0 + abs(state.lagrangian))):
            raise ADMMError(f"augmented Lagrangian increased at iteration {k}: "
                            f"{state.lagrangian:.10g} -> {new.lagrangian:.10g}", report)
        report.records.append(IterationRecord(
            k, level, objective=new.lagrangian, primal_res=res.primal, dual_res=res.dual,
            eps_pri=res.eps_pri, eps_dual=res.eps_dual, rho=state.rho, lagrangian=new.lagrangian,
            sqp_iters=info.sqp_iters, qp_iters=info.qp_iters, kkt_residual=info.kkt_residual,
            dual_consistency=consistency, b_update_time=tb, time=time.perf_counter() - t0))
        state = new
        if res.converged:
            report.termination = "converged"
            break
        rho_new = rho_schedule(config.schedule, state.rho, res.primal, res.dual, config)
        if rho_new != state.rho:
            state.u = state.u * (state.rho / rho_new)
            state.rho = rho_new
            state.lagrangian = lagrangian(pair, state, alpha)
    return state.b, report, state
