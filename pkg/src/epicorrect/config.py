"""Validated run configuration shared by the CLI and the experiment scripts."""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields

from .admm import ADMMConfig, canonical_schedule
from .gn_pcg import GNConfig, canonical_preconditioner
from .objective import ObjectiveParams

ENV_PREFIX = "EPICORRECT_"


@dataclass
class RunConfig:
    alpha: float = 50.0
    beta: float = 10.0
    gamma: float = 1e-3
    solver: str = "gn"
    preconditioner: str = "block_jacobi"
    schedule: str = "adaptive_bounded"
    rho0: float = 1e6
    rho_min: float = 1e2
    levels: int | None = None
    strategy: int = 3
    eta: float = 0.1
    max_outer: int = 10
    max_pcg: int = 100
    eps_obj: float = 1e-3
    eps_iter: float = 1e-2
    eps_grad: float = 1e-2
    admm_max_iter: int = 50
    eps_abs: float = 0.2
    eps_rel: float = 0.2
    out_dir: str = "."
    threads: int = 1
    pe_axis: int = 1
    seed: int = 0

    def validate(self) -> "RunConfig":
        """Normalise names and check ranges; builds every solver config once to reuse its checks."""
        if self.solver not in ("gn", "admm"):
            raise ValueError(f"solver must be 'gn' or 'admm', got {self.solver!r}")
        self.preconditioner = canonical_preconditioner(self.preconditioner)
        self.schedule = canonical_schedule(self.schedule)
        if self.levels is not None and self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.strategy not in (1, 2, 3):
            raise ValueError("strategy must be 1, 2 or 3")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        if self.pe_axis not in (1, 2, 3):
            raise ValueError("pe_axis must be 1, 2 or 3")
        self.objective_params()
        self.gn_config()
        self.admm_config()
        return self

    def objective_params(self) -> ObjectiveParams:
        return ObjectiveParams(self.alpha, self.beta, self.gamma)

    def gn_config(self) -> GNConfig:
        return GNConfig(eta=self.eta, max_outer=self.max_outer, eps_obj=self.eps_obj, eps_iter=self.eps_iter,
                        eps_grad=self.eps_grad, max_pcg=self.max_pcg, preconditioner=self.preconditioner)

    def admm_config(self) -> ADMMConfig:
        return ADMMConfig(rho0=self.rho0, rho_min=self.rho_min, schedule=self.schedule, eps_abs=self.eps_abs,
                          eps_rel=self.eps_rel, max_iter=self.admm_max_iter)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes).validate()

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def _coerce(field, raw: str):
    kind = field.type if isinstance(field.type, str) else getattr(field.type, "__name__", "")
    if raw.lower() in ("none", "") and "None" in kind:
        return None
    if kind.startswith("int"):
        return int(raw)
    if kind.startswith("float"):
        return float(raw)
    return raw


def from_env(base: RunConfig | None = None, environ=None) -> RunConfig:
    """Apply ``EPICORRECT_<FIELD>`` overrides (e.g. ``EPICORRECT_ALPHA=20``)."""
    environ = os.environ if environ is None else environ
    cfg = dataclasses.replace(base or RunConfig())
    for f in fields(RunConfig):
        key = ENV_PREFIX + f.name.upper()
        if key in environ:
            try:
                setattr(cfg, f.name, _coerce(f, environ[key]))
            except ValueError:
                raise ValueError(f"cannot parse {key}={environ[key]!r}") from None
    return cfg
