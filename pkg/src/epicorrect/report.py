"""Per-iteration convergence logs shared by both solvers."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, fields


@dataclass
class IterationRecord:
    iteration: int
    level: int = 0
    objective: float = math.nan
    grad_norm: float = math.nan
    step: float = math.nan
    cos_angle: float = math.nan
    pcg_iters: int = 0
    pcg_relres: float = math.nan
    pcg_relres_precond: float = math.nan
    primal_res: float = math.nan
    dual_res: float = math.nan
    eps_pri: float = math.nan
    eps_dual: float = math.nan
    rho: float = math.nan
    lagrangian: float = math.nan
    sqp_iters: int = 0
    qp_iters: int = 0
    kkt_residual: float = math.nan
    dual_consistency: float = math.nan
    b_update_time: float = math.nan
    time: float = math.nan


# columns written by default; wall-clock columns are opt-in so logs are reproducible
GN_COLUMNS = ("level", "iteration", "objective", "grad_norm", "step", "cos_angle",
              "pcg_iters", "pcg_relres", "pcg_relres_precond")
ADMM_COLUMNS = ("level", "iteration", "primal_res", "dual_res", "eps_pri", "eps_dual", "rho",
                "lagrangian", "sqp_iters", "qp_iters")


@dataclass
class SolveReport:
    solver: str
    records: list = field(default_factory=list)
    termination: str = ""
    levels: list = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.termination == "converged"

    def column(self, name, level=None):
        return [getattr(r, name) for r in self.records if level is None or r.level == level]

    def extend(self, other: "SolveReport"):
        self.records.extend(other.records)
        self.levels.append(other.termination)
        self.termination = other.termination
        return self

    def total(self, name):
        return sum(getattr(r, name) for r in self.records)

    def write_csv(self, path, columns=None, timing=False):
        cols = list(columns or (GN_COLUMNS if self.solver == "gn" else ADMM_COLUMNS))
        if timing:
            cols += ["b_update_time", "time"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for rec in self.records:
                w.writerow([_fmt(getattr(rec, c)) for c in cols])


def _fmt(v):
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def record_fields():
    return [f.name for f in fields(IterationRecord)]


def as_dicts(report: SolveReport):
    return [asdict(r) for r in report.records]
