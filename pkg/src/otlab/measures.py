"""Gridded densities, balls, restriction and the data term.

Cell ``cells[i, j]`` has its center at ``origin + (i + 1/2, j + 1/2) * h``.
Membership of a cell in a ball is decided by its center only.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .errors import EmptyRestriction, InputError, MassMismatch

log = logging.getLogger(__name__)

MASS_TOL_EXACT = 1e-8
MASS_TOL_ENTROPIC = 1e-6
SUPPORTED_DIMS = (1, 2)


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Ball:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise InputError(f"ball radius must be positive, got {self.radius}")
        object.__setattr__(self, "center", _frozen(np.atleast_1d(self.center)))
        object.__setattr__(self, "radius", float(self.radius))

    @classmethod
    def centered(cls, radius: float, dim: int = 2) -> "Ball":
        return cls(np.zeros(dim), radius)

    @property
    def dim(self) -> int:
        return self.center.shape[0]

    @property
    def volume(self) -> float:
        return ball_volume(self.dim, self.radius)

    def contains(self, points: np.ndarray) -> np.ndarray:
        diff = np.asarray(points, dtype=float) - self.center
        return np.einsum("...i,...i->...", diff, diff) <= self.radius**2 * (1 + 1e-12)

    def scaled(self, factor: float) -> "Ball":
        return Ball(self.center, self.radius * factor)


def ball_volume(dim: int, radius: float = 1.0) -> float:
    """Lebesgue measure of a ball: 2R in d=1, pi R^2 in d=2."""
    if dim == 1:
        return 2.0 * radius
    if dim == 2:
        return np.pi * radius**2
    raise InputError(f"unsupported dimension {dim}")


def sphere_area(dim: int, radius: float = 1.0) -> float:
    """H^{d-1} measure of the boundary sphere (two points count 1 each in d=1)."""
    if dim == 1:
        return 2.0
    if dim == 2:
        return 2.0 * np.pi * radius
    raise InputError(f"unsupported dimension {dim}")


@dataclass(frozen=True)
class GridDensity:
    """Nonnegative density (mass per unit volume) on a regular grid.

    ``sampler``, when given, is an exact continuous model of the density
    used by :meth:`evaluate` instead of interpolation. Synthetic families
    and resampled (tilted) densities carry one.
    """

    cells: np.ndarray
    origin: np.ndarray
    h: float
    sampler: Optional[Callable[[np.ndarray], np.ndarray]] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        cells = _frozen(self.cells)
        if cells.ndim not in SUPPORTED_DIMS:
            raise InputError(f"unsupported dimension {cells.ndim}")
        if not np.all(np.isfinite(cells)) or cells.min(initial=0.0) < 0:
            raise InputError("density cells must be finite and nonnegative")
        origin = _frozen(np.atleast_1d(self.origin))
        if origin.shape != (cells.ndim,):
            raise InputError("origin must have one coordinate per dimension")
        if not self.h > 0:
            raise InputError("spacing h must be positive")
        object.__setattr__(self, "cells", cells)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "h", float(self.h))

    @classmethod
    def from_function(cls, f, shape, origin, h) -> "GridDensity":
        """Sample ``f(points)`` at cell centers and keep ``f`` as the sampler."""
        g = cls(np.ones(shape), origin, h)
        return cls(np.maximum(f(g.centers()), 0.0), origin, h, sampler=f)

    @property
    def dim(self) -> int:
        return self.cells.ndim

    @property
    def shape(self) -> tuple:
        return self.cells.shape

    @property
    def cell_volume(self) -> float:
        return self.h**self.dim

    @property
    def lower(self) -> np.ndarray:
        return self.origin

    @property
    def upper(self) -> np.ndarray:
        return self.origin + self.h * np.array(self.shape)

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.upper - self.lower))

    def axes(self) -> list[np.ndarray]:
        return [self.origin[k] + self.h * (np.arange(n) + 0.5) for k, n in enumerate(self.shape)]

    def centers(self) -> np.ndarray:
        """Cell centers, shape ``(*shape, dim)``."""
        return np.stack(np.meshgrid(*self.axes(), indexing="ij"), axis=-1)

    def masses(self) -> np.ndarray:
        return self.cells * self.cell_volume

    def total_mass(self) -> float:
        return float(self.cells.sum() * self.cell_volume)

    def mass_in(self, ball: Ball) -> float:
        return float(self.cells[ball.contains(self.centers())].sum() * self.cell_volume)

    def with_cells(self, cells, sampler=None) -> "GridDensity":
        return replace(self, cells=cells, sampler=sampler)

    def scaled(self, factor: float) -> "GridDensity":
        s = None if self.sampler is None else (lambda p, f=self.sampler: factor * f(p))
        return self.with_cells(self.cells * factor, sampler=s)

    def inside(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        return np.all((p >= self.lower) & (p <= self.upper), axis=-1)

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        """Continuous density at arbitrary points; zero outside the grid box.

        Without a sampler, values are multilinear interpolants of the cell
        values (clamped to the nearest center inside the outer half-cell).
        """
        p = np.asarray(points, dtype=float)
        if self.sampler is not None:
            return np.asarray(self.sampler(p), dtype=float)
        out = interpolate_cells(self.cells, self.origin, self.h, p)
        return np.where(self.inside(p), out, 0.0)


def interpolate_cells(values: np.ndarray, origin, h: float, points: np.ndarray) -> np.ndarray:
    """Multilinear interpolation of cell-centered ``values`` (trailing axes allowed)."""
    dim = len(origin)
    shape = values.shape[:dim]
    p = np.asarray(points, dtype=float)
    lead = p.shape[:-1]
    p = p.reshape(-1, dim)
    idx0, wts = [], []
    for k in range(dim):
        s = (p[:, k] - origin[k]) / h - 0.5
        s = np.clip(s, 0.0, shape[k] - 1)
        i0 = np.minimum(np.floor(s).astype(int), max(shape[k] - 2, 0))
        t = s - i0
        if shape[k] == 1:
            i0 = np.zeros_like(i0)
            t = np.zeros_like(t)
        idx0.append(i0)
        wts.append(t)
    out = 0.0
    for corner in np.ndindex(*(2,) * dim):
        w = np.ones(p.shape[0])
        index = []
        for k, c in enumerate(corner):
            w = w * (wts[k] if c else 1.0 - wts[k])
            index.append(np.minimum(idx0[k] + c, shape[k] - 1))
        v = values[tuple(index)]
        out = out + (w.reshape((-1,) + (1,) * (v.ndim - 1)) * v)
    return np.asarray(out).reshape(lead + values.shape[dim:])


def _ball_mask(grid: GridDensity, ball: Ball) -> np.ndarray:
    if ball.dim != grid.dim:
        raise InputError(f"ball dimension {ball.dim} does not match grid dimension {grid.dim}")
    mask = ball.contains(grid.centers())
    if not mask.any():
        raise EmptyRestriction(f"no cell center of the grid lies in the ball {ball}")
    return mask


def restrict(rho: GridDensity, ball: Ball) -> GridDensity:
    """Density equal to ``rho`` on cells centered in ``ball`` and zero elsewhere."""
    mask = _ball_mask(rho, ball)
    sampler = None
    if rho.sampler is not None:
        sampler = lambda p, f=rho.sampler: np.where(ball.contains(p), f(p), 0.0)
    return rho.with_cells(np.where(mask, rho.cells, 0.0), sampler=sampler)


def sup_deviation_sq(rho: GridDensity, ball: Ball) -> float:
    """``max over cells in ball of (1 - rho)^2``."""
    mask = _ball_mask(rho, ball)
    return float(np.max((1.0 - rho.cells[mask]) ** 2))


def data_term(rho0: GridDensity, rho1: GridDensity, ball: Ball) -> float:
    """D = ||1 - rho0||^2_inf + ||1 - rho1||^2_inf over the ball."""
    return sup_deviation_sq(rho0, ball) + sup_deviation_sq(rho1, ball)


def mean_over_ball(f: np.ndarray, grid: GridDensity, ball: Ball) -> float:
    """Average of the grid field ``f`` over the cells centered in ``ball``."""
    f = np.asarray(f, dtype=float)
    if f.shape != grid.shape:
        raise InputError(f"field shape {f.shape} does not match grid shape {grid.shape}")
    mask = _ball_mask(grid, ball)
    return float(f[mask].sum() / mask.sum())


def equalize_masses(rho0: GridDensity, rho1: GridDensity, tol: float = MASS_TOL_EXACT):
    """Rescale ``rho1`` to the mass of ``rho0``; returns ``(rho1', factor)``.

    Relative mismatches above ``tol`` are refused; below it the rescale is
    applied and logged.
    """
    m0, m1 = rho0.total_mass(), rho1.total_mass()
    if m0 <= 0 or m1 <= 0:
        raise MassMismatch("densities must have positive mass")
    rel = abs(m0 - m1) / m0
    if rel > tol:
        raise MassMismatch(f"relative mass mismatch {rel:.3e} exceeds tolerance {tol:.1e}")
    factor = m0 / m1
    if factor != 1.0:
        log.info("rescaling target density by %.17g to equalize masses", factor)
    return rho1.scaled(factor), factor


# --- ingestion --------------------------------------------------------------


def read_csv_grid(path) -> GridDensity:
    """Read a CSV grid. First line: ``d,nx[,ny],origin_x[,origin_y],h``.

    The remaining rows hold the values; in d=2 row ``i`` lists ``cells[i, :]``.
    """
    lines = [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines:
        raise InputError(f"{path}: empty file")
    header = [float(v) for v in lines[0].lstrip("#").split(",")]
    d = int(header[0])
    if d not in SUPPORTED_DIMS or len(header) != 1 + 2 * d + 1:
        raise InputError(f"{path}: malformed header {lines[0]!r}")
    shape = tuple(int(v) for v in header[1 : 1 + d])
    origin = header[1 + d : 1 + 2 * d]
    h = header[-1]
    values = np.array([float(v) for ln in lines[1:] for v in ln.split(",")])
    if values.size != int(np.prod(shape)):
        raise InputError(f"{path}: expected {int(np.prod(shape))} values, found {values.size}")
    return GridDensity(values.reshape(shape), origin, h)


def write_csv_grid(rho: GridDensity, path) -> None:
    head = [rho.dim, *rho.shape, *rho.origin, rho.h]
    rows = [",".join(repr(v) if isinstance(v, int) else f"{v:.17g}" for v in head)]
    cells = rho.cells.reshape(rho.shape[0], -1)
    rows += [",".join(f"{v:.17g}" for v in row) for row in cells]
    Path(path).write_text("\n".join(rows) + "\n")


def _pgm_tokens(data: bytes):
    pos = 0
    tokens = []
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while data[pos : pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    return tokens, pos + 1


def read_pgm(path, origin=(0.0, 0.0), h=1.0, value_range=(0.0, 1.0)) -> GridDensity:
    """Binary (P5) PGM image as a 2-d density.

    Gray levels are mapped affinely from ``[0, maxval]`` onto ``value_range``.
    Image rows run top to bottom, so row ``r`` becomes ``cells[:, ny-1-r]``.
    """
    data = Path(path).read_bytes()
    tokens, offset = _pgm_tokens(data)
    if tokens[0] != b"P5":
        raise InputError(f"{path}: only binary P5 PGM is supported")
    width, height, maxval = (int(t) for t in tokens[1:])
    dtype = np.dtype(">u2") if maxval > 255 else np.uint8
    raw = np.frombuffer(data, dtype=dtype, count=width * height, offset=offset)
    img = raw.reshape(height, width).astype(float) / maxval
    lo, hi = value_range
    cells = (lo + (hi - lo) * img)[::-1, :].T
    return GridDensity(cells, origin, h)
