"""Inexact Gauss-Newton-PCG for the penalised correction problem."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import geometry as geo
from .geometry import to_vector, from_vector
from .image_model import VolumePair
from .objective import (ObjectiveEval, ObjectiveParams, hessian_column_blocks, hessian_diagonal,
                        hessian_gn_apply, hessian_sparse, objective_gn)
from .report import IterationRecord, SolveReport

PRECONDITIONERS = ("none", "jacobi", "block_jacobi", "sgs")
_ALIASES = {"block": "block_jacobi", "jac": "jacobi", "identity": "none"}


class PCGBreakdown(RuntimeError):
    pass


class LineSearchError(RuntimeError):
    def __init__(self, msg, report=None):
        super().__init__(msg)
        self.report = report


@dataclass
class GNConfig:
    eta: float = 0.1
    max_outer: int = 10
    eps_obj: float = 1e-3
    eps_iter: float = 1e-2
    eps_grad: float = 1e-2
    wolfe_c1: float = 1e-4
    wolfe_c2: float = 0.9
    max_pcg: int = 100
    preconditioner: str = "block_jacobi"

    def __post_init__(self):
        self.preconditioner = canonical_preconditioner(self.preconditioner)
        if not 0 < self.eta < 1:
            raise ValueError("eta must lie in (0, 1)")
        if not 0 < self.wolfe_c1 < self.wolfe_c2 < 1:
            raise ValueError("Wolfe constants need 0 < c1 < c2 < 1")
        if self.max_outer < 1 or self.max_pcg < 1:
            raise ValueError("iteration caps must be positive")


def canonical_preconditioner(kind: str) -> str:
    kind = _ALIASES.get(kind, kind)
    if kind not in PRECONDITIONERS:
        raise ValueError(f"unknown preconditioner {kind!r}; choose from {PRECONDITIONERS}")
    return kind


# --- PCG ---------------------------------------------------------------------

@dataclass
class PCGResult:
    d: np.ndarray
    iters: int
    relres: float
    relres_precond: float


def pcg(H, g, M=None, eta=0.1, max_pcg=100) -> PCGResult:
    """Approximately solve ``H d = -g`` until ``|g + H d| <= eta |g|``.

    ``H`` and ``M`` are callables on arrays of ``g``'s shape; ``M`` applies
    the inverse preconditioner. The stopping test uses the unpreconditioned
    residual, the preconditioned one is reported alongside.
    """
    M = M or (lambda r: r)
    g = np.asarray(g, dtype=float)
    d = np.zeros_like(g)
    r = -g
    gnorm = np.linalg.norm(g)
    if gnorm == 0:
        return PCGResult(d, 0, 0.0, 0.0)
    z = M(r)
    rz = float(np.vdot(r, z))
    rz0 = rz
    p = z.copy()
    relres = 1.0
    it = 0
    while it < max_pcg:
        q = H(p)
        curv = float(np.vdot(p, q))
        if not curv > 0:
            raise PCGBreakdown(f"nonpositive curvature {curv:.3e} at PCG iteration {it}")
        a = rz / curv
        d += a * p
        r -= a * q
        it += 1
        relres = np.linalg.norm(r) / gnorm
        z = M(r)
        rz_new = float(np.vdot(r, z))
        if relres <= eta:
            break
        p = z + (rz_new / rz) * p
        rz = rz_new
    return PCGResult(d, it, float(relres), float(np.sqrt(max(rz_new, 0.0) / rz0)))


# --- preconditioners ---------------------------------------------------------

class Preconditioner:
    """Callable applying ``P^{-1}`` to a face-shaped array."""

    def __init__(self, kind, apply):
        self.kind = kind
        self._apply = apply

    def __call__(self, r):
        return self._apply(r)


def make_preconditioner(kind: str, ev: ObjectiveEval, params: ObjectiveParams) -> Preconditioner:
    kind = canonical_preconditioner(kind)
    grid = ev.jacobian.grid
    if kind == "none":
        return Preconditioner(kind, lambda r: r)
    if kind == "jacobi":
        inv = 1.0 / hessian_diagonal(ev, params)
        return Preconditioner(kind, lambda r: inv * r)
    if kind == "block_jacobi":
        blocks = hessian_column_blocks(ev, params)
        blocks.add_diagonal(params.alpha * grid.cell_volume * geo.perp_laplacian_diagonal(grid) + params.gamma)
        blocks.factor()
        return Preconditioner(kind, blocks.solve)
    H = hessian_sparse(ev, params)
    diag = H.diagonal()
    lower = sp.tril(H, format="csr")
    upper = sp.triu(H, format="csr")
    shape = grid.face_shape

    def sgs(r):
        y = spla.spsolve_triangular(lower, to_vector(r), lower=True)
        x = spla.spsolve_triangular(upper, diag * y, lower=False)
        return from_vector(x, shape)

    return Preconditioner(kind, sgs)


def preconditioner_matrix(kind: str, ev: ObjectiveEval, params: ObjectiveParams) -> np.ndarray:
    """Dense ``P`` itself (not its inverse); only for small diagnostic problems."""
    kind = canonical_preconditioner(kind)
    grid = ev.jacobian.grid
    n = grid.n_faces
    if kind == "none":
        return np.eye(n)
    H = hessian_sparse(ev, params).toarray()
    D = np.diag(np.diag(H))
    if kind == "jacobi":
        return D
    if kind == "sgs":
        return (np.tril(H, -1) + D) @ np.diag(1.0 / np.diag(H)) @ (np.triu(H, 1) + D)
    blocks = hessian_column_blocks(ev, params)
    blocks.add_diagonal(params.alpha * grid.cell_volume * geo.perp_laplacian_diagonal(grid) + params.gamma)
    return blocks.to_sparse().toarray()


def preconditioned_spectrum(kind: str, ev: ObjectiveEval, params: ObjectiveParams, max_unknowns=2000):
    """Eigenvalues of ``P^{-1} H`` by dense assembly (small problems only)."""
    import scipy.linalg

    n = ev.jacobian.grid.n_faces
    if n > max_unknowns:
        raise ValueError(f"spectral diagnostics limited to {max_unknowns} unknowns, got {n}")
    H = hessian_sparse(ev, params).toarray()
    P = preconditioner_matrix(kind, ev, params)
    return np.sort(scipy.linalg.eigvals(H, P).real)


# --- line search -------------------------------------------------------------

def wolfe_linesearch(phi, f0, slope0, c1=1e-4, c2=0.9, max_trials=30, lam0=1.0):
    """Step satisfying the strong Wolfe conditions by bracketing and zoom.

    ``phi(lam)`` returns ``(value, derivative)`` along the search ray; an
    infinite value marks an infeasible point and shrinks the bracket.
    Returns ``(lam, value, payload)`` where payload is whatever ``phi``
    returned third (used to reuse the objective evaluation).
    """
    if not slope0 < 0:
        raise LineSearchError(f"not a descent direction (slope {slope0:.3e})")
    trials = 0

    def evaluate(lam):
        nonlocal trials
        trials += 1
        if trials > max_trials:
            raise LineSearchError(f"no Wolfe step within {max_trials} trials")
        return phi(lam)

    def sufficient(lam, f):
        return np.isfinite(f) and f <= f0 + c1 * lam * slope0

    def zoom(lo, f_lo, s_lo, hi, f_hi):
        while True:
            width = hi - lo
            if np.isfinite(f_hi):
                denom = 2.0 * (f_hi - f_lo - s_lo * width)
                lam = lo - s_lo * width**2 / denom if denom != 0 else lo + 0.5 * width
                a, b = sorted((lo + 0.1 * width, hi - 0.1 * width))
                lam = min(max(lam, a), b)
            else:
                lam = lo + 0.5 * width
            f, s, payload = evaluate(lam)
            if not sufficient(lam, f) or f >= f_lo:
                hi, f_hi = lam, f
            else:
                if abs(s) <= -c2 * slope0:
                    return lam, f, payload
                if s * (hi - lo) >= 0:
                    hi, f_hi = lo, f_lo
                lo, f_lo, s_lo = lam, f, s

    prev, f_prev, s_prev = 0.0, f0, slope0
    lam = lam0
    first = True
    while True:
        f, s, payload = evaluate(lam)
        if not sufficient(lam, f) or (not first and f >= f_prev):
            return zoom(prev, f_prev, s_prev, lam, f)
        if abs(s) <= -c2 * slope0:
            return lam, f, payload
        if s >= 0:
            return zoom(lam, f, s, prev, f_prev)
        prev, f_prev, s_prev = lam, f, s
        lam *= 2.0
        first = False


# --- outer loop --------------------------------------------------------------

def gauss_newton_solve(pair: VolumePair, b0, params: ObjectiveParams, config: GNConfig = None,
                       level: int = 0, report: SolveReport = None):
    """Minimise ``J_GN`` from ``b0``; returns ``(b, SolveReport)``.

    Stops once the objective change, the step and the gradient all fall
    below their tolerances, or after ``config.max_outer`` iterations.
    """
    config = config or GNConfig()
    report = report or SolveReport("gn")
    grid = pair.grid
    b = grid.check_field(b0).copy()
    j_zero = objective_gn(pair, np.zeros(grid.face_shape), params, derivatives=False).value
    tol_scale = 1.0 + abs(j_zero)
    ev = objective_gn(pair, b, params)
    if not np.isfinite(ev.value):
        raise ValueError("starting guess is infeasible for the penalised objective")
    t0 = time.perf_counter()
    report.records.append(IterationRecord(0, level, ev.value, float(np.linalg.norm(ev.grad)), time=0.0))
    if np.linalg.norm(ev.grad) == 0.0:
        report.termination = "converged"
        return b, report

    for k in range(1, config.max_outer + 1):
        g = ev.grad
        M = make_preconditioner(config.preconditioner, ev, params)
        res = pcg(lambda p: hessian_gn_apply(ev, params, p), g, M, config.eta, config.max_pcg)
        d = res.d
        slope = float(np.vdot(g, d))
        cos = -slope / (np.linalg.norm(g) * np.linalg.norm(d)) if slope < 0 else np.nan

        def phi(lam):
            e = objective_gn(pair, b + lam * d, params)
            if not np.isfinite(e.value):
                return np.inf, np.nan, e
            return e.value, float(np.vdot(e.grad, d)), e

        try:
            lam, _, ev_new = wolfe_linesearch(phi, ev.value, slope, config.wolfe_c1, config.wolfe_c2)
        except LineSearchError as err:
            report.termination = "line_search_failure"
            err.report = report
            raise
        b_new = b + lam * d
        rec = IterationRecord(k, level, ev_new.value, float(np.linalg.norm(ev_new.grad)), lam, cos,
                              res.iters, res.relres, res.relres_precond, time=time.perf_counter() - t0)
        report.records.append(rec)
        stop = (abs(ev_new.value - ev.value) <= config.eps_obj * tol_scale
                and np.linalg.norm(b_new - b) <= config.eps_iter * (1.0 + np.linalg.norm(b))
                and rec.grad_norm <= config.eps_grad * tol_scale)
        b, ev = b_new, ev_new
        if stop:
            report.termination = "converged"
            return b, report
    report.termination = "max_iter"
    return b, report
