"""Discrete optimal transport for the squared Euclidean cost.

Two solvers are provided: an exact network-simplex solve (POT's ``emd``)
for support sizes up to a few thousand cells, and a log-domain Sinkhorn
solver that exploits the tensor structure of the grid so that the cost
matrix is never formed.  Plans are turned into maps by barycentric
projection.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy import ndimage

from .errors import ConvergenceFailure, InputError, MassMismatch, ProblemTooLarge, SolverFailure
from .measures import (
    MASS_TOL_ENTROPIC,
    MASS_TOL_EXACT,
    GridDensity,
    equalize_masses,
    interpolate_cells,
)

log = logging.getLogger(__name__)

EXACT_MAX_CELLS = 4096
DENSE_EXPORT_MAX = 4096 * 4096


def monotone_tol(grid: GridDensity) -> float:
    return 1e-6 * grid.diameter**2


# --- plans --------------------------------------------------------------------


@dataclass(frozen=True)
class TransportPlan:
    """Sparse plan: ``mass[k]`` moves from flat source cell ``src[k]`` to ``dst[k]``."""

    source: GridDensity
    target: GridDensity
    src: np.ndarray
    dst: np.ndarray
    mass: np.ndarray
    cost: float
    reg: Optional[float] = None

    def row_sums(self) -> np.ndarray:
        return np.bincount(self.src, self.mass, minlength=self.source.cells.size).reshape(self.source.shape)

    def col_sums(self) -> np.ndarray:
        return np.bincount(self.dst, self.mass, minlength=self.target.cells.size).reshape(self.target.shape)

    def pushforward(self, phi: np.ndarray) -> float:
        """``sum over entries of mass * phi(target cell)``."""
        return float(np.sum(self.mass * np.asarray(phi).ravel()[self.dst]))

    def marginal_defect(self) -> float:
        """Relative L1 violation of both marginal constraints."""
        m = self.source.total_mass()
        return float(
            (np.abs(self.row_sums() - self.source.masses()).sum() + np.abs(self.col_sums() - self.target.masses()).sum())
            / m
        )

    def conditional_moments(self):
        """Per source cell: mass, mean target, per-coordinate target variance."""
        y = self.target.centers().reshape(-1, self.target.dim)[self.dst]
        n = self.source.cells.size
        w = np.bincount(self.src, self.mass, minlength=n)
        mean = np.stack([np.bincount(self.src, self.mass * y[:, k], minlength=n) for k in range(y.shape[1])], -1)
        with np.errstate(invalid="ignore", divide="ignore"):
            mean = mean / w[:, None]
        dev = (y - mean[self.src]) ** 2
        var = np.stack([np.bincount(self.src, self.mass * dev[:, k], minlength=n) for k in range(y.shape[1])], -1)
        with np.errstate(invalid="ignore", divide="ignore"):
            var = var / w[:, None]
        shape = self.source.shape + (self.source.dim,)
        return w.reshape(self.source.shape), mean.reshape(shape), var.reshape(shape)

    def write_csv(self, path) -> None:
        rows = ["src_index,dst_index,mass"]
        rows += [f"{i},{j},{m:.17g}" for i, j, m in zip(self.src, self.dst, self.mass)]
        Path(path).write_text("\n".join(rows) + "\n")


def _lse(a: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis)


def _sq_kernel(x: np.ndarray, y: np.ndarray, reg: float) -> np.ndarray:
    return -((x[:, None] - y[None, :]) ** 2) / reg


_UNDERFLOW = 1e-250


def _lse_contract(a: np.ndarray, logk: np.ndarray) -> np.ndarray:
    """``log sum_j exp(a[..., j] + logk[i, j])`` for every i, shape ``(..., m)``.

    Runs as a matrix product after a per-line max shift; lines whose sum
    underflows are redone with the direct (cubic) formula.
    """
    if a.ndim == 1:
        return _lse_contract(a[None, :], logk)[0]
    m = np.max(a, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.exp(a - m) @ np.exp(logk).T
    bad = ~(s > _UNDERFLOW)
    with np.errstate(divide="ignore"):
        out = np.log(s) + m
    if bad.any():
        lines = np.nonzero(bad.any(axis=-1))
        sub = a[lines]
        out[lines] = _lse(sub[..., None, :] + logk, axis=-1)
    return out


def grid_softmin(logw: np.ndarray, tgt_axes, src_axes, reg: float) -> np.ndarray:
    """``L(x) = log sum_y exp(logw(y) - |x - y|^2 / reg)`` for x on a tensor grid.

    The squared distance splits over coordinates, so the sum is done one
    axis at a time.
    """
    out = logw
    for k, (ys, xs) in enumerate(zip(tgt_axes, src_axes)):
        moved = np.moveaxis(out, k, -1)
        res = _lse_contract(np.ascontiguousarray(moved), _sq_kernel(xs, ys, reg))
        out = np.moveaxis(res, -1, k)
    return out


def point_softmin(logw: np.ndarray, tgt_axes, points: np.ndarray, reg: float, chunk: int = 4096) -> np.ndarray:
    """``grid_softmin`` at arbitrary query points ``(N, d)``."""
    pts = np.asarray(points, dtype=float).reshape(-1, len(tgt_axes))
    out = np.empty(pts.shape[0])
    for s in range(0, pts.shape[0], chunk):
        p = pts[s : s + chunk]
        if len(tgt_axes) == 1:
            out[s : s + chunk] = _lse_contract(logw[None, :], _sq_kernel(p[:, 0], tgt_axes[0], reg))[0]
        else:
            # contract the second coordinate first: inner has shape (n1, N)
            inner = _lse_contract(logw, _sq_kernel(p[:, 1], tgt_axes[1], reg))
            out[s : s + chunk] = _lse(inner.T + _sq_kernel(p[:, 0], tgt_axes[0], reg), axis=-1)
    return out


@dataclass(frozen=True)
class EntropicPlan(TransportPlan):
    """Entropic plan ``pi_ij = a_i b_j exp((f_i + g_j - |x_i - y_j|^2) / reg)``.

    Entries are materialized lazily; conditional moments and the
    out-of-sample map use separable log-sum-exp sums instead.
    """

    f: np.ndarray = field(default=None, repr=False)
    g: np.ndarray = field(default=None, repr=False)
    defect: float = 0.0
    iterations: int = 0

    def _logb(self):
        with np.errstate(divide="ignore"):
            return np.log(self.target.masses())

    def _loga(self):
        with np.errstate(divide="ignore"):
            return np.log(self.source.masses())

    def _target_shift(self):
        return [ax[0] - self.target.h for ax in self.target.axes()]

    def row_sums(self) -> np.ndarray:
        base = grid_softmin(self.g / self.reg + self._logb(), self.target.axes(), self.source.axes(), self.reg)
        return np.exp(self._loga() + self.f / self.reg + base)

    def col_sums(self) -> np.ndarray:
        base = grid_softmin(self.f / self.reg + self._loga(), self.source.axes(), self.target.axes(), self.reg)
        return np.exp(self._logb() + self.g / self.reg + base)

    def pushforward(self, phi: np.ndarray) -> float:
        return float(np.sum(self.col_sums() * np.asarray(phi).reshape(self.target.shape)))

    def conditional_moments(self):
        src_axes, tgt_axes = self.source.axes(), self.target.axes()
        logw = self.g / self.reg + self._logb()
        base = grid_softmin(logw, tgt_axes, src_axes, self.reg)
        w = np.exp(self._loga() + self.f / self.reg + base)
        d = self.source.dim
        mean = np.empty(self.source.shape + (d,))
        var = np.empty_like(mean)
        for k, shift in enumerate(self._target_shift()):
            yk = np.expand_dims(tgt_axes[k] - shift, tuple(i for i in range(d) if i != k))
            l1 = grid_softmin(logw + np.log(yk), tgt_axes, src_axes, self.reg)
            l2 = grid_softmin(logw + 2 * np.log(yk), tgt_axes, src_axes, self.reg)
            m1 = np.exp(l1 - base)
            mean[..., k] = m1 + shift
            var[..., k] = np.maximum(np.exp(l2 - base) - m1**2, 0.0)
        undefined = self.source.cells <= 0
        mean[undefined] = np.nan
        var[undefined] = np.nan
        return w, mean, var

    def map_extension(self) -> Callable[[np.ndarray], np.ndarray]:
        """Smooth map ``x -> E[y | x]`` defined at every point of space."""
        tgt_axes = self.target.axes()
        logw = self.g / self.reg + self._logb()
        shifts = self._target_shift()
        d = self.target.dim
        logs = []
        for k, shift in enumerate(shifts):
            yk = np.expand_dims(tgt_axes[k] - shift, tuple(i for i in range(d) if i != k))
            logs.append(logw + np.log(yk))
        reg = self.reg

        def evaluate(points: np.ndarray) -> np.ndarray:
            p = np.asarray(points, dtype=float)
            lead = p.shape[:-1]
            flat = p.reshape(-1, d)
            base = point_softmin(logw, tgt_axes, flat, reg)
            cols = [np.exp(point_softmin(lk, tgt_axes, flat, reg) - base) + s for lk, s in zip(logs, shifts)]
            return np.stack(cols, -1).reshape(lead + (d,))

        return evaluate

    @property
    def entries(self):
        n0, n1 = self.source.cells.size, self.target.cells.size
        if n0 * n1 > DENSE_EXPORT_MAX:
            raise ProblemTooLarge(f"entropic plan with {n0}x{n1} entries is too large to materialize")
        x = self.source.centers().reshape(n0, -1)
        y = self.target.centers().reshape(n1, -1)
        c = ((x[:, None, :] - y[None, :, :]) ** 2).sum(-1)
        logp = self._loga().ravel()[:, None] + self._logb().ravel()[None, :]
        logp = logp + (self.f.ravel()[:, None] + self.g.ravel()[None, :] - c) / self.reg
        p = np.exp(logp)
        keep = p > 1e-15 * p.max()
        src, dst = np.nonzero(keep)
        return src, dst, p[keep]

    def write_csv(self, path) -> None:
        src, dst, mass = self.entries
        rows = ["src_index,dst_index,mass"] + [f"{i},{j},{m:.17g}" for i, j, m in zip(src, dst, mass)]
        Path(path).write_text("\n".join(rows) + "\n")


# --- solvers ------------------------------------------------------------------


def _check_pair(rho0: GridDensity, rho1: GridDensity):
    if rho0.dim != rho1.dim:
        raise InputError("source and target densities must have the same dimension")


def _pot():
    for backend in ("PYTORCH", "JAX", "CUPY", "TENSORFLOW"):
        os.environ.setdefault(f"POT_BACKEND_DISABLE_{backend}", "1")
    import ot

    return ot


def solve_exact(rho0: GridDensity, rho1: GridDensity, max_cells: int = EXACT_MAX_CELLS) -> TransportPlan:
    """Exact optimal plan by network simplex on the bipartite cell graph.

    Only cells of positive mass enter the graph; ``max_cells`` caps the
    number of such source (and target) cells.
    """
    _check_pair(rho0, rho1)
    rho1, _ = equalize_masses(rho0, rho1, MASS_TOL_EXACT)
    a_full, b_full = rho0.masses().ravel(), rho1.masses().ravel()
    si, ti = np.flatnonzero(a_full > 0), np.flatnonzero(b_full > 0)
    if max(si.size, ti.size) > max_cells:
        raise ProblemTooLarge(f"{si.size} source / {ti.size} target cells exceed the exact cap {max_cells}")
    x = rho0.centers().reshape(-1, rho0.dim)[si]
    y = rho1.centers().reshape(-1, rho1.dim)[ti]
    c = ((x[:, None, :] - y[None, :, :]) ** 2).sum(-1)
    total = a_full.sum()
    a, b = a_full[si] / total, b_full[ti] / b_full[ti].sum()
    ot = _pot()
    g, info = ot.emd(a, b, c, numItermax=max(10**7, 50 * c.size), log=True)
    if info.get("warning"):
        raise SolverFailure(f"network simplex did not finish: {info['warning']}")
    r, s = np.nonzero(g > 0)
    mass = g[r, s] * total
    return TransportPlan(rho0, rho1, si[r], ti[s], mass, float(np.sum(mass * c[r, s])))


def solve_entropic(
    rho0: GridDensity,
    rho1: GridDensity,
    reg: float,
    max_iter: int = 20000,
    tol: float = 1e-6,
    scaling_steps: int = 12,
) -> EntropicPlan:
    """Entropy-regularized plan by log-domain Sinkhorn with reg annealing.

    ``reg`` is in squared length units. Iteration at the target ``reg``
    stops once the relative L1 marginal defect is at most ``tol``.
    """
    _check_pair(rho0, rho1)
    if not reg > 0:
        raise InputError("reg must be positive")
    rho1, _ = equalize_masses(rho0, rho1, MASS_TOL_ENTROPIC)
    src_axes, tgt_axes = rho0.axes(), rho1.axes()
    a, b = rho0.masses(), rho1.masses()
    total = a.sum()
    with np.errstate(divide="ignore"):
        loga, logb = np.log(a), np.log(b)
    f = np.zeros(rho0.shape)
    g = np.zeros(rho1.shape)

    def col_log(fv, r):
        return grid_softmin(fv / r + loga, src_axes, tgt_axes, r)

    def row_log(gv, r):
        return grid_softmin(gv / r + logb, tgt_axes, src_axes, r)

    diam2 = max(rho0.diameter, rho1.diameter) ** 2
    start = max(diam2, reg)
    schedule = np.geomspace(start, reg, max(scaling_steps, 1)) if start > reg else np.array([reg])
    it = 0
    defect = np.inf
    for level, r in enumerate(schedule):
        last = level == len(schedule) - 1
        level_tol = tol if last else max(tol, 1e-3)
        level_iter = max_iter if last else 200
        for _ in range(level_iter):
            f = -r * row_log(g, r)
            g = -r * col_log(f, r)
            it += 1
            if it % 10 == 0 or not last:
                # after the g update columns are exact; rows carry the defect
                rows = a * np.exp(f / r + row_log(g, r))
                defect = float(np.nansum(np.abs(rows - a)) / total)
                if defect <= level_tol:
                    break
        f = np.where(a > 0, f, 0.0)
        g = np.where(b > 0, g, 0.0)
    if defect > tol:
        raise ConvergenceFailure(f"Sinkhorn stopped at marginal defect {defect:.3e} > {tol:.1e}", defect)
    plan = EntropicPlan(rho0, rho1, np.empty(0, int), np.empty(0, int), np.empty(0), 0.0, reg, f=f, g=g, defect=defect, iterations=it)
    w, mean, var = plan.conditional_moments()
    x = rho0.centers()
    sq = np.nansum((x - mean) ** 2 + var, axis=-1)
    cost = float(np.nansum(w * sq))
    object.__setattr__(plan, "cost", cost)
    log.debug("sinkhorn: reg=%.3g iterations=%d defect=%.2e cost=%.6g", reg, it, defect, cost)
    return plan


# --- maps ---------------------------------------------------------------------


@dataclass(frozen=True)
class TransportMap:
    """Per-cell image points ``values[..., :]`` of the source cells.

    Cells without mass hold NaN. ``extension`` (if any) evaluates the map
    at arbitrary points; otherwise :meth:`evaluate` interpolates the
    displacement multilinearly, filling undefined cells from their nearest
    defined neighbour.
    """

    source: GridDensity
    values: np.ndarray
    spread: Optional[np.ndarray] = None
    potential: Optional[np.ndarray] = None
    extension: Optional[Callable[[np.ndarray], np.ndarray]] = field(default=None, compare=False, repr=False)
    skipped: int = 0

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape != self.source.shape + (self.source.dim,):
            raise InputError(f"map values of shape {v.shape} do not fit grid {self.source.shape}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def dim(self) -> int:
        return self.source.dim

    def defined(self) -> np.ndarray:
        return np.all(np.isfinite(self.values), axis=-1)

    def displacement(self) -> np.ndarray:
        return self.values - self.source.centers()

    def _filled_displacement(self) -> np.ndarray:
        disp = self.displacement()
        ok = self.defined()
        if ok.all():
            return disp
        if not ok.any():
            raise InputError("transport map is undefined on every cell")
        _, idx = ndimage.distance_transform_edt(~ok, return_indices=True)
        return disp[tuple(idx)]

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        if self.extension is not None:
            return self.extension(p)
        disp = self._filled_displacement()
        return p + interpolate_cells(disp, self.source.origin, self.source.h, p)

    def max_spread(self) -> float:
        if self.spread is None:
            return 0.0
        return float(np.nanmax(np.sqrt(self.spread))) if np.isfinite(self.spread).any() else 0.0

    def write_csv(self, path) -> None:
        d = self.dim
        head = [f"x{k + 1}" for k in range(d)] + [f"Tx{k + 1}" for k in range(d)]
        x = self.source.centers().reshape(-1, d)
        t = self.values.reshape(-1, d)
        rows = [",".join(head)]
        for xi, ti in zip(x, t):
            if np.all(np.isfinite(ti)):
                rows.append(",".join(f"{v:.17g}" for v in (*xi, *ti)))
        Path(path).write_text("\n".join(rows) + "\n")


def extract_map(plan: TransportPlan) -> TransportMap:
    """Barycentric projection of a plan, with per-cell target variance as spread."""
    w, mean, var = plan.conditional_moments()
    empty = ~(w > 0) | (plan.source.cells <= 0)
    mean = np.where(empty[..., None], np.nan, mean)
    var = np.where(empty[..., None], np.nan, var)
    skipped = int(np.count_nonzero(empty))
    if skipped:
        log.debug("extract_map: %d source cells without mass skipped", skipped)
    ext = plan.map_extension() if isinstance(plan, EntropicPlan) else None
    return TransportMap(plan.source, mean, spread=var, extension=ext, skipped=skipped)


def map_from_function(rho0: GridDensity, f: Callable[[np.ndarray], np.ndarray]) -> TransportMap:
    """Analytic map sampled on the source grid and kept as its own extension."""
    x = rho0.centers()
    vals = np.where((rho0.cells > 0)[..., None], f(x), np.nan)
    return TransportMap(rho0, vals, extension=f)


def monotone_1d_oracle(rho0: GridDensity, rho1: GridDensity) -> TransportMap:
    """Monotone rearrangement ``F1^{-1} o F0`` with piecewise-linear CDFs."""
    if rho0.dim != 1 or rho1.dim != 1:
        raise InputError("the monotone oracle is one-dimensional")
    m0, m1 = rho0.total_mass(), rho1.total_mass()
    if m0 <= 0 or abs(m0 - m1) > MASS_TOL_EXACT * m0:
        raise MassMismatch(f"masses {m0!r} and {m1!r} differ")
    edges0 = rho0.origin[0] + rho0.h * np.arange(rho0.shape[0] + 1)
    edges1 = rho1.origin[0] + rho1.h * np.arange(rho1.shape[0] + 1)
    cdf0 = np.concatenate([[0.0], np.cumsum(rho0.masses())]) / m0
    cdf1 = np.concatenate([[0.0], np.cumsum(rho1.masses())]) / m1
    x = rho0.axes()[0]
    level = np.interp(x, edges0, cdf0)
    # strictly increasing abscissae for the inverse: drop flat stretches of F1
    keep = np.concatenate([[True], np.diff(cdf1) > 0])
    t = np.interp(level, cdf1[keep], edges1[keep])
    t = np.where(rho0.cells > 0, t, np.nan)
    return TransportMap(rho0, t[:, None])


def _profile_cdf(rho: GridDensity, axis: int, prof: np.ndarray, subcells: int):
    """Edges and cumulative mass of the 1-D profile along ``axis``.

    With a sampler the profile is resolved on ``subcells`` midpoints per
    cell, so jumps between cell centers land where the sampler puts them;
    otherwise the cell histogram is used. The CDF is not normalized:
    normalizing would spread the sub-cell quadrature error of each jump
    over the whole line.
    """
    n = len(prof)
    lo = rho.origin[axis]
    if rho.sampler is None or subcells <= 1:
        edges = lo + rho.h * np.arange(n + 1)
        mass = prof
    else:
        hf = rho.h / subcells
        edges = lo + hf * np.arange(n * subcells + 1)
        pts = np.tile(rho.origin + 0.5 * rho.h, (n * subcells, 1))
        pts[:, axis] = 0.5 * (edges[1:] + edges[:-1])
        mass = np.maximum(np.asarray(rho.sampler(pts), dtype=float), 0.0)
    return edges, np.concatenate([[0.0], np.cumsum(mass) * (edges[1] - edges[0])])


def separable_monotone_map(
    rho0: GridDensity, rho1: GridDensity, axis: int = 0, tol: float = 1e-12, subcells: int = 1024
) -> TransportMap:
    """Optimal map for densities that vary only along ``axis``.

    For such product measures on a box the optimal map moves points along
    ``axis`` only, by the monotone rearrangement ``F1^{-1} o F0`` of the 1-D
    profiles. The rearrangement is kept as the map's extension, so the map
    is exact between cell centers as well.
    """
    if rho0.shape != rho1.shape or np.any(rho0.origin != rho1.origin) or rho0.h != rho1.h:
        raise InputError("separable map needs both densities on the same grid")
    cdfs = []
    for rho in (rho0, rho1):
        line = np.moveaxis(rho.cells, axis, 0)
        prof = line.reshape(line.shape[0], -1)
        if np.max(np.abs(prof - prof[:, :1])) > tol * max(1.0, float(np.max(prof))):
            raise InputError("density varies across the chosen axis")
        cdfs.append(_profile_cdf(rho, axis, prof[:, 0], subcells))
    (e0, c0), (e1, c1) = cdfs
    keep = np.concatenate([[True], np.diff(c1) > 0])
    e1, c1 = e1[keep], c1[keep]

    def rearrange(points):
        out = np.array(points, dtype=float)
        out[..., axis] = np.interp(np.interp(out[..., axis], e0, c0), c1, e1)
        return out

    vals = np.where((rho0.cells > 0)[..., None], rearrange(rho0.centers()), np.nan)
    return TransportMap(rho0, vals, extension=rearrange)


def cyclical_monotonicity(tmap: TransportMap, max_pairs: Optional[int] = None, seed: int = 0) -> float:
    """Minimum of ``(T(x) - T(y)) . (x - y)`` over pairs of cells with mass.

    All pairs are used unless ``max_pairs`` asks for a random sample.
    """
    ok = tmap.defined() & (tmap.source.cells > 0)
    x = tmap.source.centers()[ok]
    t = tmap.values[ok]
    n = x.shape[0]
    if n < 2:
        return 0.0
    if max_pairs is not None and n * (n - 1) // 2 > max_pairs:
        rng = np.random.default_rng(seed)
        i = rng.integers(0, n, max_pairs)
        j = (i + rng.integers(1, n, max_pairs)) % n
        return float(np.min(np.einsum("ij,ij->i", t[i] - t[j], x[i] - x[j])))
    worst = np.inf
    for s in range(0, n, 512):
        dt = t[s : s + 512, None, :] - t[None, :, :]
        dx = x[s : s + 512, None, :] - x[None, :, :]
        prod = np.einsum("abk,abk->ab", dt, dx)
        rows = np.arange(prod.shape[0])
        prod[rows, s + rows] = np.inf
        worst = min(worst, float(np.min(prod)))
    return worst
