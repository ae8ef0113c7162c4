"""Excess energy and the smallness quantities of the epsilon-regularity setup."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceFailure, EmptyRestriction, InputError, ProblemTooLarge
from .measures import Ball, GridDensity, data_term, mean_over_ball, restrict
from .transport import TransportMap, solve_entropic, solve_exact


@dataclass(frozen=True)
class ExcessReport:
    E: float
    D: float
    R: float
    center: tuple

    def __post_init__(self):
        if self.E < 0 or self.D < 0 or self.R <= 0:
            raise InputError(f"invalid excess report {self}")

    @property
    def total(self) -> float:
        return self.E + self.D

    def to_dict(self) -> dict:
        return {"center": [float(c) for c in self.center], "R": self.R, "E": self.E, "D": self.D}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def squared_displacement_integral(tmap: TransportMap, rho0: GridDensity, ball: Ball) -> float:
    """``h^d * sum over cells centered in ball of |T(x) - x|^2 rho0(x)``."""
    if tmap.source.shape != rho0.shape:
        raise InputError("map and density live on different grids")
    mask = ball.contains(rho0.centers())
    if not mask.any():
        raise EmptyRestriction(f"no cell center lies in {ball}")
    live = mask & (rho0.cells > 0)
    disp = tmap.displacement()[live]
    if not np.all(np.isfinite(disp)):
        raise InputError("transport map undefined on part of the ball's support")
    return float(np.sum(np.sum(disp**2, axis=-1) * rho0.cells[live]) * rho0.cell_volume)


def excess_energy(tmap: TransportMap, rho0: GridDensity, ball: Ball) -> float:
    """``R^-2 * (1/|B_R|) * integral over B_R of |T - x|^2 rho0``."""
    return squared_displacement_integral(tmap, rho0, ball) / (ball.radius**2 * ball.volume)


def hypothesis_quantity(tmap: TransportMap, rho0: GridDensity, rho1: GridDensity, ball: Ball) -> ExcessReport:
    return ExcessReport(
        E=excess_energy(tmap, rho0, ball),
        D=data_term(rho0, rho1, ball),
        R=ball.radius,
        center=tuple(float(c) for c in ball.center),
    )


def wasserstein_to_uniform(rho: GridDensity, ball: Ball, reg_rel: float = 1e-4, max_cells: int = 4096) -> float:
    """``W^2(rho|B, uniform on B of equal mass) + (mean of rho over B - 1)^2``.

    Uniform means constant on the cells centered in ``ball``. The exact
    solver is used when the ball holds at most ``max_cells`` cells, the
    entropic one (with ``reg = reg_rel * diam(B)^2``) otherwise.
    """
    part = restrict(rho, ball)
    if part.total_mass() <= 0:
        raise InputError("density has no mass in the ball")
    mask = ball.contains(rho.centers())
    level = mean_over_ball(rho.cells, rho, ball)
    flat = rho.with_cells(np.where(mask, level, 0.0))
    if part.total_mass() > 0 and np.allclose(part.cells, flat.cells, rtol=1e-14, atol=0):
        w2 = 0.0
    elif mask.sum() <= max_cells:
        w2 = solve_exact(part, flat, max_cells=max_cells).cost
    else:
        try:
            w2 = solve_entropic(part, flat, reg=reg_rel * (2 * ball.radius) ** 2).cost
        except ConvergenceFailure as exc:
            raise ProblemTooLarge(f"neither solver handled the ball: {exc}") from exc
    return float(w2 + (level - 1.0) ** 2)
