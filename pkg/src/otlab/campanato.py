"""Campanato iteration of the tilting step and Hoelder-exponent estimates."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DomainExceeded, InputError, InsufficientTrace, OTLabError
from .excess import excess_energy
from .measures import Ball, GridDensity, data_term
from .tilt import StepRecord, TiltConfig, TiltFrame, compose, tilt_step
from .transport import TransportMap

log = logging.getLogger(__name__)

RADIUS_FLOOR_CELLS = 8


@dataclass
class IterationConfig:
    K: int = 3
    alpha: float = 0.5
    tilt: TiltConfig = field(default_factory=TiltConfig)

    def __post_init__(self):
        if self.K < 1:
            raise InputError("K must be at least 1")
        if not 0 < self.alpha < 1:
            raise InputError("alpha must lie in (0, 1)")


@dataclass
class IterationState:
    ball: Ball
    config: IterationConfig
    frames: list = field(default_factory=list)
    records: list = field(default_factory=list)
    composed_A: list = field(default_factory=list)
    composed_d: list = field(default_factory=list)
    E_trace: list = field(default_factory=list)
    D_trace: list = field(default_factory=list)
    early_stop_reason: Optional[str] = None

    @property
    def k(self) -> int:
        return len(self.frames)

    @property
    def theta(self) -> float:
        return self.config.tilt.theta

    @property
    def eps(self) -> float:
        """Largest ``E + D`` met along the iteration."""
        return float(max(e + d for e, d in zip(self.E_trace, self.D_trace)))

    def radius(self, k: int) -> float:
        return self.ball.radius * self.theta**k

    def recomposition_defect(self) -> float:
        """Largest gap between the incremental and from-scratch ``A_k``, ``d_k``."""
        dim = self.ball.dim
        worst = 0.0
        for k in range(1, self.k + 1):
            A = np.eye(dim)
            for frame in self.frames[:k]:
                A = frame.M @ A
            d = np.zeros(dim)
            for i in range(k):
                P = np.eye(dim)
                for frame in self.frames[i:k]:
                    P = frame.M @ P
                d = d + P @ self.frames[i].b
            worst = max(
                worst,
                float(np.max(np.abs(A - self.composed_A[k]))),
                float(np.max(np.abs(d - self.composed_d[k]))),
            )
        return worst

    def norms(self, k: int) -> tuple:
        A = self.composed_A[k]
        return float(np.linalg.norm(A, 2)), float(np.linalg.norm(np.linalg.inv(A), 2))

    def decay_exponent(self) -> Optional[float]:
        """Minus the least-squares slope of ``log E_k`` against ``k``."""
        ks = [k for k, e in enumerate(self.E_trace) if e > 0]
        if len(ks) < 2:
            return None
        slope = np.polyfit(ks, np.log([self.E_trace[k] for k in ks]), 1)[0]
        return float(-slope)

    def growth_constant(self) -> float:
        """Smallest ``C`` with ``max(|A_k|, |A_k^-1|) <= (1 + C sqrt(eps))^k`` for all k."""
        eps = self.eps
        if self.k == 0 or eps <= 0:
            return 0.0
        worst = max(max(self.norms(k)) ** (1.0 / k) for k in range(1, self.k + 1))
        return float((worst - 1.0) / np.sqrt(eps))

    def shift_constant(self) -> float:
        """Smallest ``C`` with ``|b_k|^2 <= C theta^{2k} R^2 eps``."""
        eps = self.eps
        if self.k == 0 or eps <= 0:
            return 0.0
        return float(
            max(np.sum(f.b**2) / (self.theta ** (2 * k) * self.ball.radius**2 * eps) for k, f in enumerate(self.frames, 1))
        )

    def excess_bound_holds(self, c_theta: float, slack: float = 1e-12) -> bool:
        """``E_k <= theta^{2 k beta} E_0 + C_theta/(1 - theta^{2 beta}) eps`` along the trace."""
        q = self.theta ** (2 * self.config.tilt.beta)
        c_sum = max(c_theta, 0.0) / (1 - q)
        E0, eps = self.E_trace[0], self.eps
        return all(e <= q**k * E0 + c_sum * eps + slack for k, e in enumerate(self.E_trace))

    def growth_bound_holds(self, c: float) -> bool:
        root = np.sqrt(self.eps)
        return all(max(self.norms(k)) <= (1 + c * root) ** k * (1 + 1e-12) for k in range(1, self.k + 1))

    def trace_rows(self) -> list:
        rows = []
        for k in range(len(self.E_trace)):
            nA, nAi = self.norms(k)
            M = self.frames[k - 1].M if k else np.eye(self.ball.dim)
            b = self.frames[k - 1].b if k else np.zeros(self.ball.dim)
            rows.append(
                {
                    "k": k,
                    "E_k": self.E_trace[k],
                    "D_k": self.D_trace[k],
                    "normM": float(np.linalg.norm(M, 2)),
                    "normb": float(np.linalg.norm(b)),
                    "normA": nA,
                    "normAinv": nAi,
                }
            )
        return rows

    def write_csv(self, path) -> None:
        cols = ["k", "E_k", "D_k", "normM", "normb", "normA", "normAinv"]
        lines = [",".join(cols)]
        for row in self.trace_rows():
            lines.append(",".join(str(row["k"]) if c == "k" else f"{row[c]:.17g}" for c in cols))
        Path(path).write_text("\n".join(lines) + "\n")

    def summary(self, alpha_hat: Optional[float] = None) -> dict:
        return {
            "alpha_hat": alpha_hat,
            "decay_exponent": self.decay_exponent(),
            "early_stop_reason": self.early_stop_reason,
            "steps": self.k,
            "eps": self.eps,
            "growth_constant": self.growth_constant(),
            "recomposition_defect": self.recomposition_defect(),
            "records": [r.to_dict() for r in self.records],
        }

    def write_json(self, path, alpha_hat: Optional[float] = None) -> None:
        Path(path).write_text(json.dumps(self.summary(alpha_hat), sort_keys=True, indent=1))


def iterate(
    T: TransportMap, rho0: GridDensity, rho1: GridDensity, ball: Ball, config: Optional[IterationConfig] = None
) -> IterationState:
    """Run up to ``K`` tilting steps on balls of radius ``theta^k R``.

    Any library error inside a step ends the iteration with a recorded
    reason; the trace up to that point is kept.
    """
    config = config or IterationConfig()
    dim = ball.dim
    state = IterationState(ball, config, composed_A=[np.eye(dim)], composed_d=[np.zeros(dim)])
    state.E_trace.append(excess_energy(T, rho0, ball))
    state.D_trace.append(data_term(rho0, rho1, ball))
    cur = (T, rho0, rho1, ball)
    for k in range(1, config.K + 1):
        h = cur[1].h
        nxt = state.radius(k)
        cells = config.tilt.stage_cells
        h_next = 2 * nxt / cells if cells else h
        if nxt < RADIUS_FLOOR_CELLS * h_next:
            state.early_stop_reason = f"step {k}: radius {nxt:.4g} below {RADIUS_FLOOR_CELLS} cells of size {h_next:.3g}"
            break
        try:
            tilted, record = tilt_step(*cur, config.tilt)
        except OTLabError as exc:
            state.early_stop_reason = f"step {k}: {type(exc).__name__}: {exc}"
            log.info("iteration stopped early: %s", state.early_stop_reason)
            break
        A, d = compose(state.composed_A[-1], state.composed_d[-1], tilted.frame)
        state.frames.append(tilted.frame)
        state.records.append(record)
        state.composed_A.append(A)
        state.composed_d.append(d)
        state.E_trace.append(record.E_out)
        state.D_trace.append(record.D_out)
        cur = (tilted.T_hat, tilted.rho0_hat, tilted.rho1_hat, tilted.ball)
    return state


# --- Hoelder bookkeeping ---------------------------------------------------------------


@dataclass
class HolderEstimate:
    alpha_hat: float
    exact_fit: bool
    radii: list
    residuals: list
    contained: list
    growth_constant: float

    def to_dict(self) -> dict:
        return asdict(self)


def _ball_average(T: TransportMap, ball: Ball, b: np.ndarray, n_radial: int = 16, n_angular: int = 32):
    """``mean over ball of |T - b|^2`` and the number of samples it rests on."""
    if T.extension is not None:
        rx, rw = np.polynomial.legendre.leggauss(n_radial)
        R = ball.radius
        if ball.dim == 1:
            pts = ball.center + R * rx[:, None]
            vals = np.sum((T.evaluate(pts) - b) ** 2, -1)
            return float(np.sum(rw * vals) / 2.0), n_radial
        r = 0.5 * R * (rx + 1)
        th = (np.arange(n_angular) + 0.5) * 2 * np.pi / n_angular
        pts = ball.center + np.stack([np.outer(r, np.cos(th)), np.outer(r, np.sin(th))], -1)
        vals = np.sum((T.evaluate(pts) - b) ** 2, -1)
        w = (0.5 * R * rw * r)[:, None] * (2 * np.pi / n_angular)
        return float(np.sum(vals * w) / ball.volume), n_radial * n_angular
    mask = ball.contains(T.source.centers()) & T.defined()
    if not mask.any():
        return np.nan, 0
    return float(np.mean(np.sum((T.values[mask] - b) ** 2, -1))), int(mask.sum())


def holder_estimate(
    state: IterationState, T: TransportMap, c_growth: Optional[float] = None, min_samples: int = 8
) -> HolderEstimate:
    """Exponent ``alpha_hat`` from ``mean over B_{r_k} of |T - x0 - A_k^-1 d_k|^2 ~ r_k^{2 alpha}``.

    ``r_k = (R/2) (theta / (1 + C sqrt(eps)))^k`` with ``C`` the measured
    frame growth constant unless given. Residuals use the original map and
    the composed frames. ``exact_fit`` flags a log-log fit without residual.
    """
    C = state.growth_constant() if c_growth is None else c_growth
    C = max(C, 0.0)
    q = state.theta / (1 + C * np.sqrt(state.eps))
    center = state.ball.center
    radii, res, contained = [], [], []
    for k in range(state.k + 1):
        r = 0.5 * state.ball.radius * q**k
        A, d = state.composed_A[k], state.composed_d[k]
        b = center + np.linalg.solve(A, d)
        # B_r inside A_k^T(B_{theta^k R}) iff r <= smallest singular value times theta^k R
        contained.append(bool(r <= np.linalg.svd(A, compute_uv=False).min() * state.radius(k) * (1 + 1e-12)))
        value, n = _ball_average(T, Ball(center, r), b)
        if n < min_samples or not np.isfinite(value):
            continue
        radii.append(r)
        res.append(value)
    pos = [(r, v) for r, v in zip(radii, res) if v > 0]
    if len(pos) < 3:
        raise InsufficientTrace(f"only {len(pos)} usable radii in the iteration trace")
    lr = np.log([r for r, _ in pos])
    lv = np.log([v for _, v in pos])
    coef, resid, *_ = np.polyfit(lr, lv, 1, full=True)
    fit_err = float(np.max(np.abs(np.polyval(coef, lr) - lv)))
    return HolderEstimate(float(coef[0] / 2), fit_err < 1e-8, radii, res, contained, float(C))


# --- Campanato seminorm ---------------------------------------------------------------------


def _disk_offsets(r: float, h: float, dim: int) -> np.ndarray:
    m = int(np.floor(r / h + 1e-9))
    ax = np.arange(-m, m + 1)
    grid = np.stack(np.meshgrid(*([ax] * dim), indexing="ij"), -1).reshape(-1, dim)
    keep = np.sum((grid * h) ** 2, -1) <= r**2 * (1 + 1e-12)
    return grid[keep]


def _center_indices(T: TransportMap, ball: Ball, spacing: float) -> np.ndarray:
    """Cell indices nearest to a lattice of the given spacing inside ``ball``."""
    g = T.source
    m = int(np.floor(ball.radius / spacing + 1e-9))
    ax = np.arange(-m, m + 1) * spacing
    pts = np.stack(np.meshgrid(*([ax] * g.dim), indexing="ij"), -1).reshape(-1, g.dim)
    pts = ball.center + pts[np.sum(pts**2, -1) <= ball.radius**2 * (1 + 1e-12)]
    idx = np.floor((pts - g.origin) / g.h).astype(int)
    return np.unique(idx, axis=0)


def dyadic_radii(R: float, r_min: float) -> list:
    """``R 2^-j`` for j >= 1 down to ``r_min``."""
    out, r = [], R / 2
    while r >= r_min * (1 - 1e-12):
        out.append(r)
        r /= 2
    return out


def campanato_profile(T: TransportMap, ball: Ball, alpha: float, r_min: float) -> dict:
    """Sup over centers of ``r^{-2 alpha} min_b mean_{B_r(x0)} |T - b|^2`` for each dyadic ``r``.

    Centers form a lattice of spacing ``r/2`` over ``ball`` snapped to cell
    centers; the inner minimum is the variance of ``T`` over the cells
    centered in ``B_r(x0)``.
    """
    g = T.source
    if r_min < 2 * g.h * (1 - 1e-12):
        raise InputError(f"r_min = {r_min} is below two cells (h = {g.h})")
    reach = ball.radius * 1.5
    lo, hi = ball.center - reach, ball.center + reach
    if np.any(lo < g.lower - 1e-12) or np.any(hi > g.upper + 1e-12):
        raise DomainExceeded("map grid does not cover the domain ball dilated by R/2")
    vals = np.where(T.defined()[..., None], T.values, np.nan)
    out = {}
    for r in dyadic_radii(ball.radius, r_min):
        off = _disk_offsets(r, g.h, g.dim)
        centers = _center_indices(T, ball, r / 2)
        idx = centers[:, None, :] + off[None, :, :]
        if np.any(idx < 0) or np.any(idx >= np.array(g.shape)):
            raise DomainExceeded(f"balls of radius {r} leave the map grid")
        patch = vals[tuple(np.moveaxis(idx, -1, 0))]
        mean = np.nanmean(patch, axis=1, keepdims=True)
        var = np.nanmean(np.sum((patch - mean) ** 2, -1), axis=1)
        out[r] = float(np.nanmax(var)) / r ** (2 * alpha)
    return out


def campanato_seminorm(T: TransportMap, ball: Ball, alpha: float, r_min: float) -> float:
    """Sup over dyadic radii in ``[r_min, R/2]`` and centers in ``ball``."""
    prof = campanato_profile(T, ball, alpha, r_min)
    if not prof:
        raise InputError("no dyadic radius between r_min and R/2")
    return max(prof.values())


def seminorm_refinement(T: TransportMap, ball: Ball, alpha: float, r_mins, growth: float = 2.0):
    """Seminorm at successively halved ``r_min``; flags divergence when every halving grows it ``growth``-fold."""
    values = [campanato_seminorm(T, ball, alpha, r) for r in r_mins]
    ratios = [b / a for a, b in zip(values, values[1:])]
    return values, ratios, bool(ratios) and all(q >= growth for q in ratios)
