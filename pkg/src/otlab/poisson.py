"""Boundary flux of straight-line transport, Neumann solves on a ball, harmonic jets.

In d=2 the Neumann problem is discretized by finite volumes on a polar
grid of ``n_r x n_theta`` annular sectors. The outer face carries the
prescribed flux exactly, the innermost ring has a zero-area face at the
origin, and the singular system is closed with a mean-zero constraint.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import spsolve

from .errors import FitDegenerate, IncompatibleData, InputError, SolverFailure
from .measures import Ball, GridDensity, ball_volume, sphere_area
from .transport import TransportMap

log = logging.getLogger(__name__)

R_NEUMANN = 0.775
FIT_COND_MAX = 1e8
TANGENT_TOL = 1e-12


# --- boundary flux -------------------------------------------------------------


@dataclass(frozen=True)
class BoundaryFlux:
    """Signed outward mass per unit boundary area, binned over the sphere.

    In d=2 bin ``j`` is the arc ``[edges[j], edges[j+1])`` of angles; in
    d=1 the two bins are the endpoints ``center - R`` and ``center + R``.
    """

    ball: Ball
    values: np.ndarray
    edges: Optional[np.ndarray] = None
    tangential: int = 0

    @property
    def bin_areas(self) -> np.ndarray:
        if self.ball.dim == 1:
            return np.ones(2)
        return self.ball.radius * np.diff(self.edges)

    def net(self) -> float:
        """Total outward mass through the sphere."""
        return float(np.sum(self.values * self.bin_areas))

    def with_values(self, values) -> "BoundaryFlux":
        return BoundaryFlux(self.ball, np.asarray(values, dtype=float), self.edges, self.tangential)

    def write_csv(self, path) -> None:
        rows = ["bin_angle_start,bin_angle_end,flux_density"]
        if self.ball.dim == 1:
            bounds = [(np.pi, np.pi), (0.0, 0.0)]
        else:
            bounds = list(zip(self.edges[:-1], self.edges[1:]))
        rows += [f"{a:.17g},{b:.17g},{v:.17g}" for (a, b), v in zip(bounds, self.values)]
        Path(path).write_text("\n".join(rows) + "\n")


def uniform_flux(ball: Ball, value: float, n_bins: int = 64) -> BoundaryFlux:
    if ball.dim == 1:
        return BoundaryFlux(ball, np.full(2, float(value)))
    return BoundaryFlux(ball, np.full(n_bins, float(value)), np.linspace(0, 2 * np.pi, n_bins + 1))


def flux_from_function(ball: Ball, normal_derivative: Callable, n_bins: int = 64) -> BoundaryFlux:
    """Bin-averaged ``normal_derivative(theta)`` (d=2) or endpoint values (d=1)."""
    if ball.dim == 1:
        return BoundaryFlux(ball, np.array([normal_derivative(-1.0), normal_derivative(1.0)], dtype=float))
    edges = np.linspace(0, 2 * np.pi, n_bins + 1)
    # 4-point Gauss-Legendre average over each arc
    nodes, weights = np.polynomial.legendre.leggauss(4)
    mid, half = 0.5 * (edges[1:] + edges[:-1]), 0.5 * np.diff(edges)
    th = mid[:, None] + half[:, None] * nodes[None, :]
    vals = (normal_derivative(th) * weights).sum(-1) / 2.0
    return BoundaryFlux(ball, vals, edges)


def _particles(tmap: TransportMap, rho0: GridDensity, subsamples: int):
    """Source particles (position, image, mass) refining each cell ``subsamples^d`` times."""
    d = rho0.dim
    live = rho0.cells > 0
    x = rho0.centers()[live]
    m = rho0.cells[live] * rho0.cell_volume
    if subsamples <= 1:
        t = tmap.values[live]
        if not np.all(np.isfinite(t)):
            raise InputError("transport map undefined on part of the source support")
        return x, t, m
    s = subsamples
    offs = (np.arange(s) + 0.5) / s - 0.5
    grid = np.stack(np.meshgrid(*([offs] * d), indexing="ij"), -1).reshape(-1, d) * rho0.h
    p = (x[:, None, :] + grid[None, :, :]).reshape(-1, d)
    mp = np.repeat(m / s**d, s**d)
    return p, tmap.evaluate(p), mp


def particle_flux(
    tmap: TransportMap, rho0: GridDensity, ball: Ball, n_bins: int = 64, subsamples: int = 4
) -> BoundaryFlux:
    """Net outward mass crossing the sphere along the segments ``[x, T(x)]``, by particles.

    Each source particle of mass m deposits +m (outward) or -m (inward) at
    every crossing of its segment with the sphere; deposits are divided by
    the bin area. Tangential segments are counted and contribute nothing.
    Lattice counting makes the net flux noisy at the level of the
    sub-sample spacing; :func:`time_integrated_flux` is the default.
    """
    if ball.dim == 2 and n_bins < 8:
        raise InputError("need at least 8 angular bins")
    p, t, m = _particles(tmap, rho0, subsamples)
    u = p - ball.center
    v = t - p
    qa = np.einsum("ij,ij->i", v, v)
    qb = 2.0 * np.einsum("ij,ij->i", u, v)
    qc = np.einsum("ij,ij->i", u, u) - ball.radius**2
    moving = qa > 0
    denom = np.where(moving, 2 * qa, 1.0)
    disc = qb**2 - 4 * qa * qc
    scale = np.maximum(qb**2, np.abs(4 * qa * qc)) + 1e-300
    vertex = -qb / denom
    tangent = moving & (np.abs(disc) <= TANGENT_TOL * scale) & (vertex >= 0) & (vertex <= 1)
    cross = moving & (disc > TANGENT_TOL * scale)
    sq = np.sqrt(np.where(cross, disc, 0.0))
    n_tangent = int(np.count_nonzero(tangent))
    if n_tangent:
        log.debug("particle_flux: %d tangential segments (net zero crossing)", n_tangent)
    # the smaller root enters the ball, the larger one leaves it
    crossings = []
    for root, sign in (((-qb - sq) / denom, -1.0), ((-qb + sq) / denom, 1.0)):
        ok = cross & (root >= 0.0) & (root <= 1.0)
        idx = np.nonzero(ok)[0]
        crossings.append((u[idx] + root[ok][:, None] * v[idx], sign * m[idx]))
    if ball.dim == 1:
        vals = np.zeros(2)
        for pos, mass in crossings:
            np.add.at(vals, (pos[:, 0] > 0).astype(int), mass)
        return BoundaryFlux(ball, vals, None, n_tangent)
    edges = np.linspace(0.0, 2 * np.pi, n_bins + 1)
    vals = np.zeros(n_bins)
    for pos, mass in crossings:
        ang = np.mod(np.arctan2(pos[:, 1], pos[:, 0]), 2 * np.pi)
        np.add.at(vals, np.minimum((ang / (2 * np.pi) * n_bins).astype(int), n_bins - 1), mass)
    vals /= ball.radius * np.diff(edges)
    return BoundaryFlux(ball, vals, edges, n_tangent)


def _interp_jacobian(tmap: TransportMap, x: np.ndarray, t: float, eta: float) -> np.ndarray:
    """Central-difference Jacobian of ``x -> x + t (T(x) - x)``."""
    d = x.shape[-1]
    J = np.empty(x.shape[:-1] + (d, d))
    for k in range(d):
        e = np.zeros(d)
        e[k] = eta
        J[..., :, k] = (tmap.evaluate(x + e) - tmap.evaluate(x - e)) / (2 * eta)
    return (1 - t) * np.eye(d) + t * J


def _preimage(tmap: TransportMap, z: np.ndarray, t: float, eta: float, iters: int = 50, tol: float = 1e-12):
    """Solve ``x + t (T(x) - x) = z`` by damped Newton steps.

    Plain fixed-point iteration diverges once ``t |grad u| > 1``, which
    steep but monotone maps reach easily; Newton with step halving does not.
    """
    x = z.copy()
    scale = np.max(np.abs(z)) + 1.0

    def residual(p):
        return p + t * (tmap.evaluate(p) - p) - z

    res = residual(x)
    for _ in range(iters):
        norm = np.linalg.norm(res, axis=-1)
        if np.max(norm) <= tol * scale:
            return x, True
        J = _interp_jacobian(tmap, x, t, eta)
        step = np.linalg.solve(J, res[..., None])[..., 0]
        lam = np.ones(len(x))
        for _ in range(30):
            trial = x - lam[:, None] * step
            new = residual(trial)
            worse = np.linalg.norm(new, axis=-1) > (1 - 1e-4 * lam) * norm
            worse &= norm > tol * scale
            if not worse.any():
                break
            lam = np.where(worse, 0.5 * lam, lam)
        x, res = trial, new
    return x, bool(np.max(np.linalg.norm(res, axis=-1)) <= tol * scale)


def _jacobian_det(tmap: TransportMap, x: np.ndarray, t: float, eta: float) -> np.ndarray:
    interp = _interp_jacobian(tmap, x, t, eta)
    return np.linalg.det(interp) if x.shape[-1] > 1 else interp[..., 0, 0]


def time_integrated_flux(
    tmap: TransportMap,
    rho0: GridDensity,
    ball: Ball,
    n_bins: int = 64,
    n_time: int = 8,
    n_arc: int = 4,
    eta: Optional[float] = None,
    time_tol: float = 2e-4,
    max_time: int = 256,
) -> BoundaryFlux:
    """Normal component of the time-integrated flux of straight-line transport.

    Along ``x_t = x + t (T(x) - x)`` the transported density is
    ``rho_t(z) = rho0(x) / det(Id + t grad u(x))`` with ``u = T - x`` and
    ``x_t = z``, so the time-integrated flux density at a boundary point
    ``z`` is ``int_0^1 rho0(x) u(x).nu / det(Id + t grad u(x)) dt``. Each
    angular bin averages ``n_arc`` Gauss nodes. The time integral starts
    with ``n_time`` Gauss-Legendre nodes and doubles them until the net
    flux moves by less than ``time_tol * |B|`` (at most ``max_time``
    nodes); the integrand jumps where ``x_t`` crosses a density jump, and
    fixed low-order rules miss those. The map must be invertible along the
    interpolation, which holds for monotone maps.
    """
    if ball.dim == 2 and n_bins < 8:
        raise InputError("need at least 8 angular bins")
    c = ball.center
    if ball.dim == 1:
        z = np.array([[c[0] - ball.radius], [c[0] + ball.radius]])
        normal = np.array([[-1.0], [1.0]])
        edges = None
        weights_arc = np.ones((2, 1))
        z = z[:, None, :]
    else:
        edges = np.linspace(0.0, 2 * np.pi, n_bins + 1)
        gx, gw = np.polynomial.legendre.leggauss(n_arc)
        mid, half = 0.5 * (edges[1:] + edges[:-1]), 0.5 * np.diff(edges)
        ang = mid[:, None] + half[:, None] * gx[None, :]
        normal = np.stack([np.cos(ang), np.sin(ang)], -1)
        z = c + ball.radius * normal
        weights_arc = np.broadcast_to(gw / 2.0, ang.shape)
        normal = normal.reshape(-1, 2)
    lead = z.shape[:-1]
    zf = z.reshape(-1, ball.dim)
    eta = eta if eta is not None else 1e-4 * rho0.h

    def integrate(nodes):
        tx, tw = np.polynomial.legendre.leggauss(nodes)
        tx, tw = 0.5 * (tx + 1), 0.5 * tw
        dens = np.zeros(len(zf))
        failures = 0
        for t, w in zip(tx, tw):
            x, ok = _preimage(tmap, zf, t, eta)
            failures += not ok
            u = tmap.evaluate(x) - x
            det = _jacobian_det(tmap, x, t, eta)
            if np.any(det <= 0):
                raise SolverFailure("displacement interpolation is not invertible at the boundary")
            dens += w * rho0.evaluate(x) * np.einsum("ij,ij->i", u, normal) / det
        if failures:
            log.warning("time_integrated_flux: preimage iteration unconverged at %d time nodes", failures)
        log.debug("time_integrated_flux: %d time nodes", nodes)
        return (dens.reshape(lead) * weights_arc).sum(-1)

    probe = BoundaryFlux(ball, np.zeros(lead[0]), edges, 0)
    area = probe.bin_areas
    vals = integrate(n_time)
    while n_time < max_time:
        n_time *= 2
        finer = integrate(n_time)
        change = abs(float(np.sum((finer - vals) * area)))
        vals = finer
        if change <= time_tol * ball.volume:
            break
    else:
        log.warning("time_integrated_flux: time quadrature not settled at %d nodes", n_time)
    return BoundaryFlux(ball, vals, edges, 0)


def _polar_mass(rho: GridDensity, ball: Ball, n_radial: int, n_angular: int) -> float:
    rx, rw = np.polynomial.legendre.leggauss(n_radial)
    R = ball.radius
    if ball.dim == 1:
        x = ball.center[0] + R * rx
        return float(R * np.sum(rw * rho.evaluate(x[:, None])))
    r = 0.5 * R * (rx + 1)
    th = (np.arange(n_angular) + 0.5) * 2 * np.pi / n_angular
    pts = ball.center + np.stack(
        [r[:, None] * np.cos(th)[None, :], r[:, None] * np.sin(th)[None, :]], -1
    )
    vals = rho.evaluate(pts)
    return float(np.sum(vals * (0.5 * R * rw * r)[:, None]) * 2 * np.pi / n_angular)


def ball_mass(
    rho: GridDensity, ball: Ball, n_radial: int = 64, n_angular: int = 256, rel_tol: float = 1e-7, max_doublings: int = 4
) -> float:
    """Mass of ``rho`` in ``ball`` by polar quadrature of ``rho.evaluate``.

    Gauss-Legendre in the radius and the midpoint rule in the angle (exact
    for trigonometric polynomials); in d=1 Gauss-Legendre on the interval.
    Both counts double until the mass moves by less than ``rel_tol``, which
    smooth densities meet at once and densities with jumps approach at
    first order.
    """
    mass = _polar_mass(rho, ball, n_radial, n_angular)
    for _ in range(max_doublings):
        n_radial, n_angular = 2 * n_radial, 2 * n_angular
        finer = _polar_mass(rho, ball, n_radial, n_angular)
        settled = abs(finer - mass) <= rel_tol * abs(finer)
        mass = finer
        if settled:
            break
    return mass


def compatibility_constant(rho0: GridDensity, rho1: GridDensity, ball: Ball) -> float:
    """Average of ``rho0 - rho1`` over the ball (polar quadrature)."""
    return (ball_mass(rho0, ball) - ball_mass(rho1, ball)) / ball.volume


# --- Neumann solve ---------------------------------------------------------------


@dataclass(frozen=True)
class PolarGrid:
    radius: float
    n_r: int
    n_theta: int

    @property
    def dr(self):
        return self.radius / self.n_r

    @property
    def dtheta(self):
        return 2 * np.pi / self.n_theta

    @property
    def r(self):
        return (np.arange(self.n_r) + 0.5) * self.dr

    @property
    def theta(self):
        return (np.arange(self.n_theta) + 0.5) * self.dtheta

    def volumes(self):
        return np.repeat((self.r * self.dr * self.dtheta)[:, None], self.n_theta, axis=1)

    def nodes(self, center=(0.0, 0.0)):
        rr, tt = np.meshgrid(self.r, self.theta, indexing="ij")
        return np.stack([center[0] + rr * np.cos(tt), center[1] + rr * np.sin(tt)], -1)


def _radial_operator(grid: PolarGrid, mode: int) -> sparse.csr_matrix:
    """Finite-volume radial operator for angular Fourier mode ``mode``.

    Row i is the sum of outward radial face fluxes of ring i (outer
    boundary face excluded) minus ``mode^2 * dr * dtheta / r_i``.
    """
    nr, dr, dt = grid.n_r, grid.dr, grid.dtheta
    r = grid.r
    face = (r[:-1] + 0.5 * dr) * dt / dr
    main = np.zeros(nr)
    main[:-1] -= face
    main[1:] -= face
    main -= mode**2 * dr * dt / r
    return sparse.diags([face, main, face], [-1, 0, 1], format="csc")


def polar_laplacian_apply(grid: PolarGrid, u: np.ndarray) -> np.ndarray:
    """Discrete Laplacian (flux sums, interior faces only) applied mode by mode."""
    uh = np.fft.rfft(u, axis=1)
    out = np.empty_like(uh)
    for n in range(uh.shape[1]):
        out[:, n] = _radial_operator(grid, n) @ uh[:, n]
    return np.fft.irfft(out, n=grid.n_theta, axis=1)


def _solve_modes(grid: PolarGrid, rhs: np.ndarray) -> np.ndarray:
    """Solve the polar system for right-hand side ``rhs`` with zero-mean closure."""
    rh = np.fft.rfft(rhs, axis=1)
    uh = np.zeros_like(rh)
    vol_r = grid.r * grid.dr * grid.dtheta
    for n in range(rh.shape[1]):
        op = _radial_operator(grid, n)
        if n == 0:
            # singular mode: border with the mean-zero constraint
            system = sparse.bmat([[op, vol_r[:, None]], [vol_r[None, :], None]], format="csc")
            sol = spsolve(system, np.concatenate([rh[:, 0].real, [0.0]]))
            uh[:, 0] = sol[:-1]
        else:
            uh[:, n] = spsolve(op, rh[:, n])
    return np.fft.irfft(uh, n=grid.n_theta, axis=1)


def _deconvolve_bins(values: np.ndarray) -> np.ndarray:
    """Point values whose arc averages are ``values`` (band-limited model)."""
    n = len(values)
    vh = np.fft.rfft(values)
    k = np.arange(len(vh))
    vh /= np.sinc(k / n)
    return np.fft.irfft(vh, n=n)


@dataclass(frozen=True)
class HarmonicPotential:
    """Solved potential ``Phi`` on the ball and its harmonic correction ``phi``.

    ``phi = Phi - c/(2d) |x|^2``; ``jet_b`` and ``jet_A`` are the gradient
    and Hessian of ``phi`` at the ball center from a harmonic quadratic fit.
    """

    ball: Ball
    c: float
    nodes: np.ndarray
    Phi: np.ndarray
    phi: np.ndarray
    jet_b: np.ndarray
    jet_A: np.ndarray
    compat_defect: float = 0.0
    laplace_residual: float = 0.0
    grad_Phi: Optional[Callable[[np.ndarray], np.ndarray]] = field(default=None, compare=False, repr=False)
    polar: Optional[PolarGrid] = field(default=None, compare=False, repr=False)

    def grad_phi(self, points: np.ndarray) -> np.ndarray:
        """Gradient of the corrected potential at arbitrary points in the ball."""
        p = np.asarray(points, dtype=float)
        d = self.ball.dim
        return self.grad_Phi(p) - (self.c / d) * (p - self.ball.center)

    def jet_dict(self) -> dict:
        return {"c": self.c, "b": self.jet_b.tolist(), "A": self.jet_A.tolist()}

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.jet_dict(), sort_keys=True))


def _cartesian_gradient_polar(grid: PolarGrid, u: np.ndarray, g_bnd: np.ndarray) -> np.ndarray:
    """Cartesian gradient at sector centers; ``g_bnd`` is the outer normal derivative."""
    dr, dt = grid.dr, grid.dtheta
    nt = grid.n_theta
    ur = np.empty_like(u)
    ur[1:-1] = (u[2:] - u[:-2]) / (2 * dr)
    # mirror through the origin: the point (-r0, theta) is (r0, theta + pi)
    mirror = np.roll(u[0], -nt // 2)
    if u.shape[0] > 1:
        ur[0] = (u[1] - mirror) / (2 * dr)
        ur[-1] = (u[-1] - u[-2] + g_bnd * dr) / (2 * dr)
    else:
        ur[0] = 0.5 * g_bnd
    ut = (np.roll(u, -1, axis=1) - np.roll(u, 1, axis=1)) / (2 * dt) / grid.r[:, None]
    th = grid.theta[None, :]
    gx = ur * np.cos(th) - ut * np.sin(th)
    gy = ur * np.sin(th) + ut * np.cos(th)
    return np.stack([gx, gy], -1)


def _polar_interpolator(grid: PolarGrid, field_: np.ndarray, center) -> Callable:
    """Bilinear interpolation in (r, theta) of a smooth Cartesian field.

    A virtual ring at r=0 holding the innermost ring's angular mean makes
    the interpolant second-order accurate near the center.
    """
    r = np.concatenate([[0.0], grid.r])
    field_ = np.concatenate([np.broadcast_to(field_[0].mean(axis=0), field_[:1].shape), field_], axis=0)
    nt = grid.n_theta
    th0, dth = grid.theta[0], grid.dtheta

    def evaluate(points):
        p = np.asarray(points, dtype=float) - center
        lead = p.shape[:-1]
        p = p.reshape(-1, 2)
        rr = np.hypot(p[:, 0], p[:, 1])
        tt = np.mod(np.arctan2(p[:, 1], p[:, 0]), 2 * np.pi)
        i0 = np.clip(np.searchsorted(r, rr, side="right") - 1, 0, len(r) - 2)
        a = np.clip((rr - r[i0]) / (r[i0 + 1] - r[i0]), 0.0, 1.0)
        q = (tt - th0) / dth
        j0 = np.floor(q).astype(int)
        b = q - j0
        j0 %= nt
        j1 = (j0 + 1) % nt
        i1 = i0 + 1
        out = (
            ((1 - a) * (1 - b))[:, None] * field_[i0, j0]
            + ((1 - a) * b)[:, None] * field_[i0, j1]
            + (a * (1 - b))[:, None] * field_[i1, j0]
            + (a * b)[:, None] * field_[i1, j1]
        )
        return out.reshape(lead + field_.shape[2:])

    return evaluate


def _source_values(g, nodes) -> tuple[np.ndarray, bool]:
    if callable(g):
        return np.asarray(g(nodes), dtype=float), False
    g = np.asarray(g, dtype=float)
    if g.ndim == 0:
        return np.full(nodes.shape[:-1], float(g)), True
    if g.shape != nodes.shape[:-1]:
        raise InputError(f"source field of shape {g.shape} does not match the solver grid {nodes.shape[:-1]}")
    return g, False


def _project(flux: BoundaryFlux, total_source: float, compat_tol: Optional[float]):
    defect = total_source - flux.net()
    area = sphere_area(flux.ball.dim, flux.ball.radius)
    tol = 1e-3 * ball_volume(flux.ball.dim, flux.ball.radius) if compat_tol is None else compat_tol
    if abs(defect) > 10 * tol:
        raise IncompatibleData(f"flux compatibility defect {defect:.3e} exceeds 10 x {tol:.1e}")
    if abs(defect) > tol:
        log.warning("flux compatibility defect %.3e above tolerance %.1e", defect, tol)
    elif defect:
        log.debug("projecting flux data by %.3e", defect / area)
    return flux.values + defect / area, defect


def solve_neumann(
    g: Union[float, np.ndarray, Callable],
    flux: BoundaryFlux,
    n_r: Optional[int] = None,
    n_theta: Optional[int] = None,
    compat_tol: Optional[float] = None,
    fit_radius: Optional[float] = None,
) -> HarmonicPotential:
    """Solve ``Lap Phi = g`` in the ball with ``d Phi / d nu = flux`` on its boundary.

    ``g`` is a constant, a callable of points, or values on the solver
    nodes. Flux data are projected onto compatible data (uniform shift) and
    ``Phi`` is normalized to zero mean. ``c`` is the ball average of ``g``.
    """
    ball = flux.ball
    if ball.dim == 1:
        return _solve_neumann_1d(g, flux, n_r or 256, compat_tol)
    nt = len(flux.values)
    if n_theta is not None and n_theta != nt:
        raise InputError(f"n_theta={n_theta} does not match the {nt} flux bins")
    if nt % 2:
        raise InputError("the polar solver needs an even number of angular bins")
    grid = PolarGrid(ball.radius, n_r or nt, nt)
    nodes = grid.nodes(ball.center)
    gv, constant = _source_values(g, nodes)
    vol = grid.volumes()
    values, defect = _project(flux, float(np.sum(gv * vol)), compat_tol)
    rhs = gv * vol
    point_flux = _deconvolve_bins(values)
    rhs[-1] -= point_flux * grid.radius * grid.dtheta
    try:
        u = _solve_modes(grid, rhs)
    except Exception as exc:
        raise SolverFailure(f"polar Neumann solve failed: {exc}") from exc
    if not np.all(np.isfinite(u)):
        raise SolverFailure("polar Neumann solve returned non-finite values")
    c = float(np.sum(gv * vol) / np.sum(vol))
    r2 = np.sum((nodes - ball.center) ** 2, axis=-1)
    phi = u - c / 4.0 * r2
    lap_phi = polar_laplacian_apply(grid, phi)
    lap_phi[-1] += (point_flux - c * grid.radius / 2.0) * grid.radius * grid.dtheta
    residual = float(np.max(np.abs(lap_phi / vol - (gv - c))))
    grad = _polar_interpolator(grid, _cartesian_gradient_polar(grid, u, point_flux), ball.center)
    b, A = fit_harmonic_jet(nodes - ball.center, phi, fit_radius or 0.5 * ball.radius)
    return HarmonicPotential(
        ball, c, nodes, u, phi, b, A, float(defect), residual, grad_Phi=grad, polar=grid
    )


def _solve_neumann_1d(g, flux: BoundaryFlux, n: int, compat_tol) -> HarmonicPotential:
    ball = flux.ball
    R = ball.radius
    x = np.linspace(-R, R, n)
    gv, _ = _source_values(g, (ball.center[0] + x)[:, None])
    # trapezoid integral and its running version
    total = float(np.trapezoid(gv, x))
    values, defect = _project(flux, total, compat_tol)
    c = total / (2 * R)
    run = np.concatenate([[0.0], np.cumsum(0.5 * (gv[1:] + gv[:-1]) * np.diff(x))])
    slope0 = -values[0]  # outward normal at the left end points to -x
    dphi = slope0 + run
    Phi = np.concatenate([[0.0], np.cumsum(0.5 * (dphi[1:] + dphi[:-1]) * np.diff(x))])
    Phi -= np.trapezoid(Phi, x) / (2 * R)
    phi = Phi - 0.5 * c * x**2
    nodes = (ball.center[0] + x)[:, None]

    def grad(points):
        p = np.asarray(points, dtype=float)
        return np.interp(p[..., 0] - ball.center[0], x, dphi)[..., None]

    b, A = fit_harmonic_jet(x[:, None], phi, 0.5 * R)
    return HarmonicPotential(ball, c, nodes, Phi, phi, b, A, float(defect), 0.0, grad_Phi=grad)


def _harmonic_basis(p: np.ndarray) -> np.ndarray:
    if p.shape[-1] == 1:
        return np.stack([np.ones(len(p)), p[:, 0]], -1)
    x, y = p[:, 0], p[:, 1]
    return np.stack([np.ones(len(p)), x, y, 0.5 * (x**2 - y**2), x * y], -1)


def fit_harmonic_jet(points: np.ndarray, values: np.ndarray, radius: float):
    """Least-squares harmonic polynomial of degree <= 2 on ``|x| <= radius``.

    Returns gradient ``b`` and trace-free Hessian ``A`` at the origin. In
    d=1 harmonic means affine, so ``A`` is zero.
    """
    p = np.asarray(points, dtype=float)
    d = p.shape[-1]
    p = p.reshape(-1, d)
    v = np.asarray(values, dtype=float).ravel()
    sel = np.sum(p**2, axis=-1) <= radius**2
    if sel.sum() < (2 if d == 1 else 5):
        raise FitDegenerate(f"only {int(sel.sum())} samples inside the fit radius {radius}")
    basis = _harmonic_basis(p[sel])
    # column scaling keeps the condition number meaningful across radii
    scale = np.max(np.abs(basis), axis=0)
    if np.any(scale == 0):
        raise FitDegenerate("harmonic jet fit has a vanishing basis column")
    scaled = basis / scale
    cond = np.linalg.cond(scaled)
    if not np.isfinite(cond) or cond > FIT_COND_MAX:
        raise FitDegenerate(f"harmonic jet fit is ill-conditioned (cond={cond:.2e})")
    coef, *_ = np.linalg.lstsq(scaled, v[sel], rcond=None)
    coef = coef / scale
    if d == 1:
        return np.array([coef[1]]), np.zeros((1, 1))
    b = coef[1:3]
    A = np.array([[coef[3], coef[4]], [coef[4], -coef[3]]])
    return b, A


# --- Poisson bound diagnostic --------------------------------------------------------


def lemma_potential(g, ball: Ball, n: int = 64) -> HarmonicPotential:
    """Solution of ``Lap phi = g`` with uniform flux ``(1/|dB|) * integral of g``."""
    probe = BoundaryFlux(ball, np.zeros(2)) if ball.dim == 1 else uniform_flux(ball, 0.0, n)
    if ball.dim == 1:
        x = np.linspace(-ball.radius, ball.radius, 256)
        gv, _ = _source_values(g, (ball.center[0] + x)[:, None])
        total = float(np.trapezoid(gv, x))
        return solve_neumann(g, probe.with_values(np.full(2, total / 2.0)))
    grid = PolarGrid(ball.radius, n, n)
    gv, _ = _source_values(g, grid.nodes(ball.center))
    total = float(np.sum(gv * grid.volumes()))
    return solve_neumann(gv, probe.with_values(np.full(n, total / sphere_area(2, ball.radius))), n_r=n)


def check_gradient_bound(potential: HarmonicPotential, g) -> tuple[float, bool]:
    """``sup |grad Phi|^2 / ||g||_inf^2`` over the solver's sample nodes.

    Returns ``(ratio, degenerate)``; ``degenerate`` flags ``g == 0`` where
    the ratio is 0 by convention.
    """
    gv, _ = _source_values(g, potential.nodes)
    gmax = float(np.max(np.abs(gv)))
    if gmax == 0:
        return 0.0, True
    grads = potential.grad_Phi(potential.nodes)
    return float(np.max(np.sum(grads**2, axis=-1)) / gmax**2), False
