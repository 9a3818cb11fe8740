"""Coarse-to-fine solution on a hierarchy of grids covering the same domain."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from .admm import ADMMConfig, admm_solve
from .geometry import GridSpec
from .gn_pcg import GNConfig, gauss_newton_solve
from .image_model import ImageVolume, VolumePair
from .objective import ObjectiveParams, objective_gn
from .report import SolveReport

STRATEGIES = (1, 2, 3)
PROLONG_SLOPE_CAP = 0.95


@dataclass
class LevelSchedule:
    """Grids ordered coarse to fine plus optional per-level config overrides."""

    grids: list
    overrides: list = field(default_factory=list)

    def __post_init__(self):
        if not self.grids:
            raise ValueError("a schedule needs at least one grid")
        for a, b in zip(self.grids[:-1], self.grids[1:]):
            if a.dim != b.dim or any(ma > mb for ma, mb in zip(a.m, b.m)):
                raise ValueError(f"grid {a.m} is not coarser than {b.m}")
            if not np.allclose(a.extent, b.extent) or not np.allclose(a.origin, b.origin):
                raise ValueError("all levels must cover the same domain")
        if len(self.overrides) > len(self.grids):
            raise ValueError("more overrides than levels")
        self.overrides = list(self.overrides) + [{}] * (len(self.grids) - len(self.overrides))

    @property
    def finest(self) -> GridSpec:
        return self.grids[-1]

    def __len__(self):
        return len(self.grids)


def coarsen(grid: GridSpec) -> GridSpec:
    """Halve every axis (rounding up) on the same domain."""
    m = tuple(-(-mi // 2) for mi in grid.m)
    return GridSpec(m, tuple(e / mi for e, mi in zip(grid.extent, m)), grid.origin)


def default_hierarchy(grid: GridSpec, levels: int | None = None, min_size: int = 16,
                      max_levels: int = 4) -> LevelSchedule:
    """Halve repeatedly down to ``min_size`` cells per axis, at most ``max_levels`` levels.

    An explicit ``levels`` overrides the automatic count; coarsening then
    only stops below two cells per axis.
    """
    grids = [grid]
    if levels is not None:
        if levels < 1:
            raise ValueError("levels must be >= 1")
        while len(grids) < levels:
            nxt = coarsen(grids[0])
            if min(nxt.m) < 2 or nxt.m == grids[0].m:
                raise ValueError(f"cannot build {levels} levels from {grid.m}")
            grids.insert(0, nxt)
        return LevelSchedule(grids)
    while len(grids) < max_levels:
        nxt = coarsen(grids[0])
        if min(nxt.m) < min_size:
            break
        grids.insert(0, nxt)
    return LevelSchedule(grids)


def _overlap_matrix(fine_edges, coarse_edges):
    """Row ``i``: fraction of coarse cell ``i`` covered by each fine cell."""
    lo = np.maximum(coarse_edges[:-1, None], fine_edges[None, :-1])
    hi = np.minimum(coarse_edges[1:, None], fine_edges[None, 1:])
    w = np.clip(hi - lo, 0.0, None)
    return w / np.diff(coarse_edges)[:, None]


def restrict_image(img: ImageVolume, coarse: GridSpec) -> ImageVolume:
    """Area-weighted block average onto ``coarse`` (mass preserving)."""
    fine = img.grid
    if coarse.dim != fine.dim or any(c > f for c, f in zip(coarse.m, fine.m)):
        raise ValueError(f"coarse grid {coarse.m} is larger than fine grid {fine.m}")
    if not np.allclose(coarse.extent, fine.extent) or not np.allclose(coarse.origin, fine.origin):
        raise ValueError("grids must cover the same domain")
    data = img.data
    for a in range(fine.dim):
        fe = fine.origin[a] + fine.h[a] * np.arange(fine.m[a] + 1)
        ce = coarse.origin[a] + coarse.h[a] * np.arange(coarse.m[a] + 1)
        ce[-1] = fe[-1]
        W = _overlap_matrix(fe, ce)
        data = np.moveaxis(np.tensordot(W, np.moveaxis(data, a, 0), axes=(1, 0)), 0, a)
    return ImageVolume(coarse, data)


def restrict_pair(pair: VolumePair, coarse: GridSpec) -> VolumePair:
    if coarse == pair.grid:
        return pair
    return VolumePair(restrict_image(pair.plus, coarse), restrict_image(pair.minus, coarse))


def _interp_axis(values, src, dst, axis):
    moved = np.moveaxis(values, axis, -1)
    out = np.apply_along_axis(lambda v: np.interp(dst, src, v), -1, moved)
    return np.moveaxis(out, -1, axis)


def prolong_field(b_coarse, coarse: GridSpec, fine: GridSpec, rescue: bool = True) -> np.ndarray:
    """Separable linear interpolation of a face field to the face grid of ``fine``.

    Beyond the outermost cell centres on axes 2 and 3 the field is held
    constant. With ``rescue``, a result violating ``max|D1 b| <= 0.95`` is
    scaled down to exactly that bound.
    """
    if coarse.dim != fine.dim or not np.allclose(coarse.extent, fine.extent) \
            or not np.allclose(coarse.origin, fine.origin):
        raise ValueError("grids must share dimension and domain")
    b = coarse.check_field(np.asarray(b_coarse, float))
    b = _interp_axis(b, coarse.face_coords(), fine.face_coords(), 0)
    for a in range(1, fine.dim):
        b = _interp_axis(b, coarse.cell_centers(a), fine.cell_centers(a), a)
    if rescue:
        b = rescue_feasibility(b, fine)
    return b


def rescue_feasibility(b, grid: GridSpec, cap: float = PROLONG_SLOPE_CAP) -> np.ndarray:
    """Scale ``b`` by the largest factor <= 1 giving ``max|D1 b| <= cap``."""
    worst = float(np.max(np.abs(geo.diff_x1(b, grid))))
    return b * (cap / worst) if worst > cap else b


@dataclass
class LevelInfo:
    grid: GridSpec
    start_objective: float
    zero_objective: float
    final_objective: float
    termination: str
    iterations: int


def _objective(pair, b, params):
    """Unpenalised ``D + alpha S`` used to compare level start points."""
    return objective_gn(pair, b, params, penalized=False, derivatives=False).value


def multilevel_solve(pair: VolumePair, schedule: LevelSchedule | None = None, solver: str = "gn",
                     params: ObjectiveParams | None = None, gn_config: GNConfig | None = None,
                     admm_config: ADMMConfig | None = None, strategy: int = 3, carry_rho: bool = True):
    """Solve on every level of ``schedule``, prolonging each result as the next start.

    ADMM restarts follow ``strategy``: 1 prolongs ``b``, ``z`` and ``u``;
    2 restarts from ``b0 = z0 = b_f`` with ``u0 = 0``; 3 (default) from
    ``b0 = z0 = (b_f + z_f) / 2`` with ``u0 = 0``.

    Returns ``(b, SolveReport, [LevelInfo, ...])`` with ``b`` on the data grid.
    """
    if params is None:
        raise ValueError("params are required")
    if solver not in ("gn", "admm"):
        raise ValueError(f"unknown solver {solver!r}")
    if strategy not in STRATEGIES:
        raise ValueError(f"strategy must be one of {STRATEGIES}")
    schedule = schedule or LevelSchedule([pair.grid])
    if schedule.finest != pair.grid:
        raise ValueError("finest level must equal the data grid")
    gn_config = gn_config or GNConfig()
    admm_config = admm_config or ADMMConfig()
    report = SolveReport(solver)
    infos = []
    prev = None
    prev_grid = None
    rho = None
    for lev, (grid, over) in enumerate(zip(schedule.grids, schedule.overrides)):
        lp = restrict_pair(pair, grid)
        zero = np.zeros(grid.face_shape)
        if solver == "gn":
            b0 = zero if prev is None else prolong_field(prev, prev_grid, grid)
            cfg = dataclasses.replace(gn_config, **over)
            b, rep = gauss_newton_solve(lp, b0, params, cfg, level=lev)
            prev = b
        else:
            if prev is None:
                init = (zero, zero, zero)
            else:
                pb, pz, pu = (prolong_field(v, prev_grid, grid, rescue=False) for v in prev)
                if strategy == 1:
                    init = (rescue_feasibility(pb, grid), pz, pu)
                elif strategy == 2:
                    b0 = rescue_feasibility(pb, grid)
                    init = (b0, b0.copy(), zero)
                else:
                    b0 = rescue_feasibility(0.5 * (pb + pz), grid)
                    init = (b0, b0.copy(), zero)
            cfg = dataclasses.replace(admm_config, **over)
            b, rep, state = admm_solve(lp, init, params, cfg, level=lev,
                                       rho=rho if carry_rho else None)
            rho = state.rho
            prev = (state.b, state.z, state.u)
            b0 = init[0]
        report.extend(rep)
        infos.append(LevelInfo(grid, _objective(lp, b0, params), _objective(lp, zero, params),
                               _objective(lp, b, params), rep.termination, len(rep.records) - 1))
        prev_grid = grid
    return b, report, infos
