"""Glue between a configuration and the numerical modules."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .campanato import IterationConfig
from .config import DensitySpec, ExperimentConfig
from .errors import ConfigError
from .measures import MASS_TOL_ENTROPIC, Ball, GridDensity, equalize_masses, read_csv_grid, read_pgm
from .synth import synth_density
from .tilt import TiltConfig
from .transport import (
    extract_map,
    map_from_function,
    separable_monotone_map,
    solve_entropic,
    solve_exact,
)

log = logging.getLogger(__name__)


@dataclass
class Problem:
    rho0: GridDensity
    rho1: GridDensity
    T: object
    info: dict = field(default_factory=dict)


def load_density(spec: DensitySpec, cfg: ExperimentConfig, seed: int = 0) -> GridDensity:
    g = cfg.grid
    if spec.file is not None:
        path = cfg.resolve(spec.file)
        if path.suffix.lower() == ".pgm":
            h = (g.upper - g.lower) / g.n
            return read_pgm(path, origin=(g.lower, g.lower), h=h, value_range=spec.value_range)
        return read_csv_grid(path)
    if spec.family is None:
        raise ConfigError("density spec names neither a family nor a file")
    return synth_density(spec.family, spec.params, g.n, g.dim, g.lower, g.upper, seed)


def solve_map(rho0: GridDensity, rho1: GridDensity, kind: str, reg_rel: float = 1e-4, tol: float = 1e-6, max_iter: int = 20000):
    """Optimal map of the configured kind and a summary of the solve."""
    same_grid = rho0.shape == rho1.shape and np.array_equal(rho0.origin, rho1.origin) and rho0.h == rho1.h
    if same_grid and np.array_equal(rho0.cells, rho1.cells):
        log.info("identical densities: the identity map is optimal")
        return map_from_function(rho0, lambda x: np.array(x, dtype=float)), {"solver": "identity", "cost": 0.0}
    if kind == "separable":
        equalize_masses(rho0, rho1, MASS_TOL_ENTROPIC)
        T = separable_monotone_map(rho0, rho1)
        return T, {"solver": "separable"}
    if kind == "exact":
        plan = solve_exact(rho0, rho1)
        return extract_map(plan), {"solver": "exact", "cost": plan.cost, "defect": plan.marginal_defect()}
    reg = reg_rel * max(rho0.diameter, rho1.diameter) ** 2
    plan = solve_entropic(rho0, rho1, reg, max_iter=max_iter, tol=tol)
    info = {"solver": "entropic", "reg": reg, "cost": plan.cost, "defect": plan.defect, "iterations": plan.iterations}
    return extract_map(plan), info


def build_problem(cfg: ExperimentConfig, seed: int = 0) -> Problem:
    rho0 = load_density(cfg.source, cfg, seed)
    rho1 = load_density(cfg.target, cfg, seed + 1)
    s = cfg.solver
    T, info = solve_map(rho0, rho1, s.kind, s.reg_rel, s.tol, s.max_iter)
    return Problem(rho0, rho1, T, info)


def tilt_config(cfg: ExperimentConfig) -> TiltConfig:
    t = cfg.tilt
    return TiltConfig(
        theta=t.theta,
        beta=t.beta,
        eps_step=t.eps_step,
        n_bins=t.n_bins,
        stage_cells=t.stage_cells,
        flux_method=t.flux_method,
    )


def iteration_config(cfg: ExperimentConfig) -> IterationConfig:
    return IterationConfig(K=cfg.iterate.K, alpha=cfg.iterate.alpha, tilt=tilt_config(cfg))


def ball_of(center, R: float, dim: int) -> Ball:
    c = np.asarray(center, dtype=float)[:dim]
    return Ball(c, float(R))


def band_mask(grid: GridDensity, band: Optional[list]) -> Optional[np.ndarray]:
    """Cells with ``|x_1 - offset| < halfwidth`` for ``band = [offset, halfwidth]``."""
    if band is None:
        return None
    offset, half = (float(v) for v in band)
    return np.abs(grid.centers()[..., 0] - offset) < half
