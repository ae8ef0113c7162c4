"""One excess-improvement step: harmonic jet, affine frame, transformed problem.

Tilted coordinates are centered at the working ball: for a frame
``(M, b)`` on ``B_R(c)``,

    x = c + M x_hat,   y_hat = M (y - c - b),
    T_hat(x_hat) = M (T(c + M x_hat) - c - b).

The transformed problem is resampled on a fresh grid covering
``[-theta R, theta R]^d``. Maps and densities are carried as closures, so
every stage evaluates the original data through the composed frames.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .errors import DomainExceeded, InputError, NotSymmetric, SmallnessViolated
from .excess import excess_energy
from .measures import Ball, GridDensity, data_term
from .poisson import (
    R_NEUMANN,
    HarmonicPotential,
    compatibility_constant,
    particle_flux,
    solve_neumann,
    time_integrated_flux,
)
from .transport import TransportMap, cyclical_monotonicity, monotone_tol

log = logging.getLogger(__name__)

DET_TOL = 1e-12
SYMMETRY_TOL = 1e-10
TRACE_TOL = 1e-8


def project_trace(A: np.ndarray, symmetry_tol: float = SYMMETRY_TOL):
    """Symmetric, trace-free part of ``A`` and the size of the removed trace part."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.shape[0] != A.shape[1]:
        raise InputError("expected a square matrix")
    scale = max(1.0, float(np.max(np.abs(A))))
    if np.max(np.abs(A - A.T)) > symmetry_tol * scale:
        raise NotSymmetric(f"asymmetry {np.max(np.abs(A - A.T)):.2e} beyond tolerance")
    S = 0.5 * (A + A.T)
    d = S.shape[0]
    shift = np.trace(S) / d
    return S - shift * np.eye(d), float(abs(shift) * np.sqrt(d))


def sym_exp_neg_half(A: np.ndarray, trace_tol: float = TRACE_TOL) -> np.ndarray:
    """``exp(-A/2)`` for symmetric ``A`` after projecting out its trace."""
    S, correction = project_trace(A)
    if correction > trace_tol:
        log.info("sym_exp_neg_half: removed trace part of norm %.3e", correction)
    lam, V = np.linalg.eigh(S)
    M = (V * np.exp(-0.5 * lam)) @ V.T
    return 0.5 * (M + M.T)


@dataclass(frozen=True)
class TiltFrame:
    M: np.ndarray
    b: np.ndarray
    det_tol: float = DET_TOL

    def __post_init__(self):
        M = np.atleast_2d(np.array(self.M, dtype=float))
        b = np.atleast_1d(np.array(self.b, dtype=float))
        if M.shape != (len(b), len(b)):
            raise InputError(f"frame matrix {M.shape} does not match vector of length {len(b)}")
        if np.max(np.abs(M - M.T)) > SYMMETRY_TOL * max(1.0, float(np.max(np.abs(M)))):
            raise NotSymmetric("frame matrix is not symmetric")
        if abs(np.linalg.det(M) - 1.0) > self.det_tol:
            raise InputError(f"frame determinant {np.linalg.det(M)!r} is not 1")
        M.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "M", M)
        object.__setattr__(self, "b", b)

    @classmethod
    def identity(cls, dim: int = 2) -> "TiltFrame":
        return cls(np.eye(dim), np.zeros(dim))

    @classmethod
    def from_jet(cls, A: np.ndarray, b: np.ndarray) -> "TiltFrame":
        return cls(sym_exp_neg_half(A), b)

    @property
    def dim(self) -> int:
        return len(self.b)

    @property
    def det_defect(self) -> float:
        return float(abs(np.linalg.det(self.M) - 1.0))

    def size(self, radius: float) -> float:
        """``|M - Id|^2 + |b|^2 / R^2`` (Frobenius norm)."""
        return float(np.sum((self.M - np.eye(self.dim)) ** 2) + np.sum(self.b**2) / radius**2)

    def to_dict(self) -> dict:
        return {"M": self.M.tolist(), "b": self.b.tolist()}


def compose(A: np.ndarray, d: np.ndarray, frame: TiltFrame):
    """Composed linear part and offset after one more frame: ``(M A, M (d + b))``."""
    return frame.M @ A, frame.M @ (d + frame.b)


@dataclass(frozen=True)
class TiltedProblem:
    rho0_hat: GridDensity
    rho1_hat: GridDensity
    T_hat: TransportMap
    frame: TiltFrame
    radius: float
    monotone_min: Optional[float] = None

    @property
    def ball(self) -> Ball:
        return Ball.centered(self.radius, self.frame.dim)


def _check_containment(frame: TiltFrame, ball: Ball, radius: float, rho0: GridDensity, rho1: GridDensity):
    """``M B_r`` and ``M^-1 B_r + b`` inside the current ball and the data boxes."""
    M, b = frame.M, frame.b
    d = frame.dim
    if d == 1:
        circle = np.array([[-1.0], [1.0]])
    else:
        t = np.linspace(0, 2 * np.pi, 721)[:-1]
        circle = np.stack([np.cos(t), np.sin(t)], -1)
    src = circle * radius @ M.T
    tgt = circle * radius @ np.linalg.inv(M).T + b
    slack = 1e-12 * ball.radius
    for name, pts, rho in (("source", src, rho0), ("target", tgt, rho1)):
        reach = float(np.max(np.linalg.norm(pts, axis=-1)))
        if reach > ball.radius + slack:
            raise DomainExceeded(f"tilted {name} ball reaches {reach:.4g} > R = {ball.radius:.4g}")
        if not np.all(rho.inside(ball.center + pts)):
            raise DomainExceeded(f"tilted {name} ball leaves the data domain")


def stage_grid_size(radius: float, h: float, stage_cells: Optional[int]) -> int:
    if stage_cells is not None:
        return int(stage_cells)
    return max(int(round(2 * radius / h)), 1)


def apply_frame(
    T: TransportMap,
    rho0: GridDensity,
    rho1: GridDensity,
    frame: TiltFrame,
    ball: Ball,
    theta: float = 1.0,
    stage_cells: Optional[int] = None,
    monotone_pairs: Optional[int] = 20000,
) -> TiltedProblem:
    """Transform ``(T, rho0, rho1)`` by ``frame`` and resample on ``B_{theta R}``.

    The new grid has ``stage_cells`` cells per axis over
    ``[-theta R, theta R]^d`` (default: the source spacing). Densities are
    composed with the affine maps through their samplers; the map goes
    through ``T.evaluate`` (its smooth extension when it has one,
    otherwise displacement interpolation).
    """
    if frame.dim != rho0.dim:
        raise InputError("frame and data dimensions differ")
    r = theta * ball.radius
    _check_containment(frame, ball, r, rho0, rho1)
    c = ball.center
    M, b = frame.M, frame.b
    Minv = np.linalg.inv(M)
    n = stage_grid_size(r, rho0.h, stage_cells)
    h = 2 * r / n
    shape, origin = (n,) * rho0.dim, np.full(rho0.dim, -r)

    def src_point(xh):
        return c + np.asarray(xh, dtype=float) @ M.T

    def sampler0(xh):
        return rho0.evaluate(src_point(xh))

    def sampler1(yh):
        return rho1.evaluate(c + b + np.asarray(yh, dtype=float) @ Minv.T)

    def t_hat(xh):
        return (T.evaluate(src_point(xh)) - c - b) @ M.T

    r0 = GridDensity.from_function(sampler0, shape, origin, h)
    r1 = GridDensity.from_function(sampler1, shape, origin, h)
    values = np.where((r0.cells > 0)[..., None], t_hat(r0.centers()), np.nan)
    That = TransportMap(r0, values, extension=t_hat)
    worst = None
    if monotone_pairs:
        worst = cyclical_monotonicity(That, max_pairs=monotone_pairs)
        tol = monotone_tol(r0) * float(np.linalg.norm(M, 2)) ** 2
        if worst < -tol:
            log.warning("tilted map fails the monotonicity spot-check: %.3e < -%.1e", worst, tol)
    return TiltedProblem(r0, r1, That, frame, r, worst)


@dataclass
class TiltConfig:
    theta: float = 0.25
    beta: float = 0.5
    eps_step: float = 0.1
    n_bins: int = 64
    flux_method: str = "eulerian"
    n_time: int = 8
    subsamples: int = 8
    r_neumann: float = R_NEUMANN
    n_r: Optional[int] = None
    stage_cells: Optional[int] = 64
    c_theta: Optional[float] = None
    monotone_pairs: Optional[int] = 20000

    def __post_init__(self):
        if not 0 < self.theta < 1:
            raise InputError("theta must lie in (0, 1)")
        if not 0 < self.beta < 1:
            raise InputError("beta must lie in (0, 1)")
        if self.flux_method not in ("eulerian", "particles"):
            raise InputError(f"unknown flux method {self.flux_method!r}")


@dataclass
class StepRecord:
    E_in: float
    D_in: float
    E_out: float
    D_out: float
    theta: float
    beta: float
    M: list
    b: list
    det_defect: float
    trace_correction: float
    flux_defect: float
    radius: float
    c: float
    frame_constant: float
    improvement_ratio: Optional[float]
    c_theta_measured: Optional[float]
    monotone_min: Optional[float] = None
    tangential: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass(frozen=True)
class HarmonicFit:
    """Neumann potential for one ball plus the quantities it is judged by."""

    E: float
    D: float
    potential: HarmonicPotential = field(repr=False)
    flux_defect: float
    tangential: int


def harmonic_fit(T: TransportMap, rho0: GridDensity, rho1: GridDensity, ball: Ball, config: TiltConfig) -> HarmonicFit:
    E = excess_energy(T, rho0, ball)
    D = data_term(rho0, rho1, ball)
    inner = Ball(ball.center, config.r_neumann * ball.radius)
    if config.flux_method == "particles":
        flux = particle_flux(T, rho0, inner, config.n_bins, config.subsamples)
    else:
        flux = time_integrated_flux(T, rho0, inner, config.n_bins, config.n_time)
    c = compatibility_constant(rho0, rho1, inner)
    pot = solve_neumann(c, flux, n_r=config.n_r, fit_radius=0.5 * inner.radius)
    return HarmonicFit(E, D, pot, pot.compat_defect, flux.tangential)


def harmonic_residual(T: TransportMap, rho0: GridDensity, fit: HarmonicFit, radius: float):
    """Scaled ``integral over B_{R/2} of |T - (x + grad phi)|^2 rho0`` and ``sup |grad phi|^2 / R^2``.

    Both are divided by the powers of ``R`` that make them scale free; for
    ``R = 1`` they are the plain integral and supremum.
    """
    half = Ball(fit.potential.ball.center, 0.5 * radius)
    x = rho0.centers()
    sel = half.contains(x) & (rho0.cells > 0)
    pts = x[sel]
    grad = fit.potential.grad_phi(pts)
    diff = T.values[sel] - pts - grad
    d = rho0.dim
    lhs = float(np.sum(np.sum(diff**2, -1) * rho0.cells[sel]) * rho0.cell_volume) / radius ** (d + 2)
    sup = float(np.max(np.sum(grad**2, -1))) / radius**2
    return lhs, sup


def tilt_step(T: TransportMap, rho0: GridDensity, rho1: GridDensity, ball: Ball, config: TiltConfig = None):
    """Flux, Neumann solve, jet, frame and transformed problem on ``B_{theta R}``."""
    config = config or TiltConfig()
    fit = harmonic_fit(T, rho0, rho1, ball, config)
    total = fit.E + fit.D
    if total > config.eps_step:
        raise SmallnessViolated(f"E + D = {total:.4g} exceeds eps_step = {config.eps_step:.4g}", total)
    pot = fit.potential
    _, trace_corr = project_trace(pot.jet_A)
    frame = TiltFrame.from_jet(pot.jet_A, pot.jet_b)
    tilted = apply_frame(
        T, rho0, rho1, frame, ball, config.theta, config.stage_cells, config.monotone_pairs
    )
    out_ball = tilted.ball
    E_out = excess_energy(tilted.T_hat, tilted.rho0_hat, out_ball)
    D_out = data_term(tilted.rho0_hat, tilted.rho1_hat, out_ball)
    contraction = config.theta ** (2 * config.beta)
    c_meas = (E_out - contraction * fit.E) / fit.D if fit.D > 0 else None
    if config.c_theta is not None and fit.E > 0:
        ratio = (E_out - config.c_theta * fit.D) / fit.E
    else:
        ratio = E_out / fit.E if fit.E > 0 else None
    record = StepRecord(
        E_in=fit.E,
        D_in=fit.D,
        E_out=E_out,
        D_out=D_out,
        theta=config.theta,
        beta=config.beta,
        M=frame.M.tolist(),
        b=frame.b.tolist(),
        det_defect=frame.det_defect,
        trace_correction=trace_corr,
        flux_defect=fit.flux_defect,
        radius=ball.radius,
        c=pot.c,
        frame_constant=frame.size(ball.radius) / total if total > 0 else 0.0,
        improvement_ratio=ratio,
        c_theta_measured=c_meas,
        monotone_min=tilted.monotone_min,
        tangential=fit.tangential,
    )
    log.info(
        "tilt step R=%.4g: E %.3e -> %.3e, D %.3e, frame constant %.3g",
        ball.radius, fit.E, E_out, fit.D, record.frame_constant,
    )
    return tilted, record
