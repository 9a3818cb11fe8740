"""End-to-end correction of a volume pair: permutation, multilevel solve, metrics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import parallel
from .config import RunConfig
from .geometry import GridSpec
from .image_model import ImageVolume, VolumePair, correct_pair, ncc, ssd
from .multilevel import LevelSchedule, default_hierarchy, multilevel_solve
from .report import SolveReport


def _axis_order(dim: int, pe_axis: int):
    """Array axis order that brings the phase-encoding axis to the front."""
    if pe_axis > dim:
        raise ValueError(f"pe_axis {pe_axis} exceeds dimension {dim}")
    order = list(range(dim))
    order.insert(0, order.pop(pe_axis - 1))
    return order


def permute_grid(grid: GridSpec, order) -> GridSpec:
    return GridSpec(tuple(grid.m[a] for a in order), tuple(grid.h[a] for a in order),
                    tuple(grid.origin[a] for a in order))


def to_internal(img: ImageVolume, pe_axis: int) -> ImageVolume:
    order = _axis_order(img.grid.dim, pe_axis)
    return ImageVolume(permute_grid(img.grid, order), np.transpose(img.data, order))


def from_internal(data: np.ndarray, grid: GridSpec, pe_axis: int):
    """Undo :func:`to_internal` for cell or face data; returns ``(data, grid)``."""
    order = _axis_order(grid.dim, pe_axis)
    inverse = np.argsort(order)
    return np.transpose(data, inverse), permute_grid(grid, inverse)


@dataclass
class CorrectionResult:
    field: np.ndarray
    grid: GridSpec
    corrected_plus: ImageVolume
    corrected_minus: ImageVolume
    corrected_mean: ImageVolume
    report: SolveReport
    levels: list
    metrics: dict


def similarity(a: ImageVolume, b: ImageVolume) -> dict:
    out = {"ssd": ssd(a, b)}
    try:
        out["ncc"] = ncc(a, b)
    except ValueError:
        out["ncc"] = None
    return out


def correct_volumes(plus: ImageVolume, minus: ImageVolume, cfg: RunConfig,
                    schedule: LevelSchedule | None = None) -> CorrectionResult:
    """Estimate the field for a pair given in the caller's axis order.

    The volumes are permuted so the phase-encoding axis is axis 1, solved on
    the multilevel hierarchy and permuted back; all outputs use the input
    axis order.
    """
    cfg.validate()
    if plus.grid != minus.grid:
        raise ValueError("the two volumes must share grid metadata")
    parallel.set_threads(cfg.threads)
    pair = VolumePair(to_internal(plus, cfg.pe_axis), to_internal(minus, cfg.pe_axis))
    if schedule is None:
        schedule = default_hierarchy(pair.grid, levels=cfg.levels)
    b, report, infos = multilevel_solve(pair, schedule, cfg.solver, cfg.objective_params(), cfg.gn_config(),
                                        cfg.admm_config(), strategy=cfg.strategy)
    cp, cm = correct_pair(pair, b)
    mean = ImageVolume(pair.grid, 0.5 * (cp.data + cm.data))
    before = similarity(pair.plus, pair.minus)
    after = similarity(cp, cm)
    metrics = {
        "solver": cfg.solver,
        "termination": report.termination,
        "level_terminations": list(report.levels),
        "grids": [list(i.grid.m) for i in infos],
        "iterations": [i.iterations for i in infos],
        "ssd_before": before["ssd"],
        "ssd_after": after["ssd"],
        "ssd_reduction": (1.0 - after["ssd"] / before["ssd"]) if before["ssd"] > 0 else None,
        "ncc_before": before["ncc"],
        "ncc_after": after["ncc"],
        "max_abs_d1b": float(np.max(np.abs(np.diff(b, axis=0)) / pair.grid.h[0])),
    }
    if cfg.solver == "gn":
        metrics["pcg_iterations"] = int(report.total("pcg_iters"))
    else:
        metrics["admm_iterations"] = int(sum(i.iterations for i in infos))
        metrics["final_rho"] = float(report.records[-1].rho)
    field, grid = from_internal(b, pair.grid, cfg.pe_axis)
    unperm = [ImageVolume(grid, from_internal(v.data, pair.grid, cfg.pe_axis)[0]) for v in (cp, cm, mean)]
    return CorrectionResult(field, grid, *unperm, report, infos, metrics)


def field_error(b, b_true) -> float:
    return float(np.linalg.norm(b - b_true) / np.linalg.norm(b_true))
