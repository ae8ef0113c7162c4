"""Point certificates and grid scans for the epsilon-regularity hypothesis.

The hypothesis at ``(x0, R)`` is

    (2R)^-(d+2) * integral over B_2R of |T - x|^2 rho0 + D(B_2R)
        = |B_1| * E(B_2R) + D(B_2R),

compared against a calibrated threshold ``eps_cal``.
"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .campanato import IterationConfig, holder_estimate, iterate
from .errors import DomainExceeded, InputError, OTLabError
from .excess import excess_energy
from .measures import Ball, GridDensity, ball_volume, data_term
from .transport import TransportMap

log = logging.getLogger(__name__)

CALIBRATION_FILE = "eps_cal.json"
MIN_CELLS_PER_RADIUS = 8


@dataclass
class Certificate:
    center: tuple
    R: float
    hypothesis_value: float
    threshold: float
    E2R: float
    D2R: float
    trace: Optional[dict] = None
    alpha_hat: Optional[float] = None

    def __post_init__(self):
        if not self.hypothesis_value >= 0:
            raise InputError("hypothesis value must be nonnegative")

    @property
    def verdict(self) -> str:
        return "pass" if self.hypothesis_value <= self.threshold else "fail"

    def to_dict(self) -> dict:
        return {
            "center": [float(c) for c in self.center],
            "R": self.R,
            "hypothesis_value": self.hypothesis_value,
            "threshold": self.threshold,
            "verdict": self.verdict,
            "E2R": self.E2R,
            "D2R": self.D2R,
            "alpha_hat": self.alpha_hat,
            "trace": self.trace,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _within(rho: GridDensity, ball: Ball) -> bool:
    slack = 1e-12 * max(1.0, ball.radius)
    return bool(np.all(ball.center - ball.radius >= rho.lower - slack) and np.all(ball.center + ball.radius <= rho.upper + slack))


def hypothesis_value(T: TransportMap, rho0: GridDensity, rho1: GridDensity, x0, R: float):
    """``(value, E(B_2R), D(B_2R))`` for the ball ``B_R(x0)``."""
    big = Ball(np.asarray(x0, dtype=float), 2 * R)
    if not (_within(rho0, big) and _within(rho1, big)):
        raise DomainExceeded(f"B_2R({list(big.center)}) with R = {R} leaves the data domain")
    E = excess_energy(T, rho0, big)
    D = data_term(rho0, rho1, big)
    return ball_volume(big.dim) * E + D, E, D


def certify_point(
    T: TransportMap,
    rho0: GridDensity,
    rho1: GridDensity,
    x0,
    R: float,
    alpha: float,
    eps_cal: float,
    iteration: Optional[IterationConfig] = None,
) -> Certificate:
    """Evaluate the hypothesis on ``B_2R(x0)``; on a pass, iterate on ``B_R(x0)``."""
    value, E, D = hypothesis_value(T, rho0, rho1, x0, R)
    cert = Certificate(tuple(np.asarray(x0, dtype=float)), float(R), float(value), float(eps_cal), E, D)
    if cert.verdict == "pass":
        cfg = iteration or IterationConfig(alpha=alpha)
        state = iterate(T, rho0, rho1, Ball(np.asarray(x0, dtype=float), R), cfg)
        try:
            est = holder_estimate(state, T)
            cert.alpha_hat = est.alpha_hat
            summary = state.summary(est.alpha_hat)
            summary["holder"] = est.to_dict()
        except OTLabError as exc:
            summary = state.summary(None)
            summary["holder_error"] = f"{type(exc).__name__}: {exc}"
        cert.trace = summary
    return cert


# --- scans ---------------------------------------------------------------------------------


Domain = Union[Ball, tuple]


def _domain_mask(points: np.ndarray, domain: Domain) -> np.ndarray:
    if isinstance(domain, Ball):
        return domain.contains(points)
    lo, hi = (np.asarray(v, dtype=float) for v in domain)
    return np.all((points >= lo - 1e-12) & (points <= hi + 1e-12), axis=-1)


def _domain_box(domain: Domain, dim: int):
    if isinstance(domain, Ball):
        return domain.center - domain.radius, domain.center + domain.radius
    lo, hi = (np.broadcast_to(np.asarray(v, dtype=float), (dim,)) for v in domain)
    return lo, hi


def scan_centers(domain: Domain, spacing: float, dim: int) -> np.ndarray:
    """Lattice of the given spacing, anchored at the domain's lower corner, inside the domain."""
    lo, hi = _domain_box(domain, dim)
    axes = [lo[k] + spacing * np.arange(int(np.floor((hi[k] - lo[k]) / spacing + 1e-9)) + 1) for k in range(dim)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, dim)
    return pts[_domain_mask(pts, domain)]


@dataclass
class HypothesisTable:
    """Hypothesis values per scan center and ladder radius.

    ``status`` is ``"ok"``, ``"domain"`` (B_2R leaves the data) or
    ``"support"`` (B_2R meets a cell where a density vanishes).
    """

    centers: np.ndarray
    ladder: list
    values: np.ndarray
    status: np.ndarray


def _table_row(T, rho0, rho1, c, ladder, empty0, empty1, x0, x1):
    vals = np.full(len(ladder), np.nan)
    stat = np.full(len(ladder), "ok", dtype=object)
    for j, R in enumerate(ladder):
        big = Ball(c, 2 * R)
        if not (_within(rho0, big) and _within(rho1, big)):
            stat[j] = "domain"
        elif np.any(empty0 & big.contains(x0)) or np.any(empty1 & big.contains(x1)):
            stat[j] = "support"
        else:
            vals[j] = hypothesis_value(T, rho0, rho1, c, R)[0]
    return vals, stat


def hypothesis_table(
    T: TransportMap,
    rho0: GridDensity,
    rho1: GridDensity,
    centers: np.ndarray,
    ladder: Sequence[float],
    workers: int = 1,
) -> HypothesisTable:
    """Hypothesis values for every (center, radius) pair.

    Rows are independent, so ``workers > 1`` evaluates them in a thread
    pool; results are gathered in center order either way.
    """
    empty0 = rho0.cells <= 0
    empty1 = rho1.cells <= 0
    x0, x1 = rho0.centers(), rho1.centers()

    def row(c):
        return _table_row(T, rho0, rho1, c, ladder, empty0, empty1, x0, x1)

    if workers > 1 and len(centers) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(row, centers))
    else:
        rows = [row(c) for c in centers]
    m = len(ladder)
    values = np.array([r[0] for r in rows], dtype=float).reshape(len(rows), m)
    status = np.array([r[1] for r in rows], dtype=object).reshape(len(rows), m)
    return HypothesisTable(np.asarray(centers), list(ladder), values, status)


@dataclass
class ScanResult:
    grid: GridDensity = field(repr=False)
    domain_mask: np.ndarray = field(repr=False)
    certified: np.ndarray = field(repr=False)
    balls: list
    excluded: list
    eps_cal: float
    alpha: float

    @property
    def coverage(self) -> float:
        total = int(self.domain_mask.sum())
        return float((self.certified & self.domain_mask).sum() / total) if total else 0.0

    def coverage_in(self, mask: np.ndarray) -> float:
        sel = mask & self.domain_mask
        return float((self.certified & sel).sum() / sel.sum()) if sel.any() else 0.0

    def to_dict(self) -> dict:
        return {
            "eps_cal": self.eps_cal,
            "alpha": self.alpha,
            "coverage": self.coverage,
            "balls": self.balls,
            "excluded": self.excluded,
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n")

    def write_csv(self, path) -> None:
        d = self.grid.dim
        x = self.grid.centers().reshape(-1, d)
        flags = self.certified.ravel()
        inside = self.domain_mask.ravel()
        head = ",".join([f"x{k + 1}" for k in range(d)] + ["certified"])
        rows = [head] + [
            ",".join([f"{v:.17g}" for v in xi] + [str(int(fl))]) for xi, fl, ok in zip(x, flags, inside) if ok
        ]
        Path(path).write_text("\n".join(rows) + "\n")


def _check_ladder(ladder: Sequence[float], h: float):
    lad = [float(r) for r in ladder]
    if not lad:
        raise InputError("radius ladder is empty")
    if any(b >= a for a, b in zip(lad, lad[1:])):
        raise InputError("radius ladder must be strictly descending")
    if lad[-1] < MIN_CELLS_PER_RADIUS * h * (1 - 1e-12):
        raise InputError(f"ladder radius {lad[-1]} is below {MIN_CELLS_PER_RADIUS} cells (h = {h})")
    return lad


def certified_raster(table: HypothesisTable, eps_cal: float, grid: GridDensity):
    """Largest passing radius per center and the union of certified balls on ``grid``."""
    x = grid.centers()
    covered = np.zeros(grid.shape, dtype=bool)
    picks = []
    for i, c in enumerate(table.centers):
        ok = np.nonzero((table.status[i] == "ok") & (table.values[i] <= eps_cal))[0]
        if ok.size:
            j = int(ok[0])
            picks.append((i, j))
            covered |= Ball(c, table.ladder[j]).contains(x)
    return covered, picks


def scan_regular_set(
    T: TransportMap,
    rho0: GridDensity,
    rho1: GridDensity,
    domain: Domain,
    alpha: float,
    ladder: Sequence[float],
    eps_cal: float,
    table: Optional[HypothesisTable] = None,
    workers: int = 1,
) -> ScanResult:
    """Certify each center of a ``R_top/2`` lattice at its largest passing ladder radius."""
    lad = _check_ladder(ladder, rho0.h)
    if table is None:
        centers = scan_centers(domain, lad[0] / 2, rho0.dim)
        table = hypothesis_table(T, rho0, rho1, centers, lad, workers)
    covered, picks = certified_raster(table, eps_cal, rho0)
    balls = []
    picked = dict(picks)
    excluded = []
    for i, c in enumerate(table.centers):
        entry = {"center": [float(v) for v in c]}
        if i in picked:
            j = picked[i]
            entry.update(R=table.ladder[j], hypothesis_value=float(table.values[i, j]), verdict="pass")
        else:
            finite = table.values[i][np.isfinite(table.values[i])]
            entry.update(R=None, hypothesis_value=float(finite.min()) if finite.size else None, verdict="fail")
        balls.append(entry)
        reasons = sorted({str(s) for s in table.status[i] if s != "ok"})
        if reasons:
            excluded.append({"center": entry["center"], "reasons": reasons})
    mask = _domain_mask(rho0.centers(), domain)
    return ScanResult(rho0, mask, covered, balls, excluded, float(eps_cal), float(alpha))


# --- calibration -------------------------------------------------------------------------


@dataclass
class CalibrationInstance:
    """Scan data plus, for singular fixtures, the cells no certified ball may touch."""

    name: str
    table: HypothesisTable
    grid: GridDensity = field(repr=False)
    domain_mask: np.ndarray = field(repr=False)
    bad: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def singular(self) -> bool:
        return self.bad is not None


def calibration_instance(name, T, rho0, rho1, domain: Domain, ladder, bad=None, workers: int = 1) -> CalibrationInstance:
    lad = _check_ladder(ladder, rho0.h)
    table = hypothesis_table(T, rho0, rho1, scan_centers(domain, lad[0] / 2, rho0.dim), lad, workers)
    return CalibrationInstance(name, table, rho0, _domain_mask(rho0.centers(), domain), bad)


@dataclass
class CalibrationResult:
    """Admissible window ``[eps_min, eps_max]`` and the shipped value inside it.

    ``eps_max`` is the largest threshold without false passes, ``eps_min``
    the smallest reaching the smooth-coverage target. The shipped
    ``eps_cal`` is their geometric mean, which keeps a margin to both
    failure modes.
    """

    eps_cal: float
    eps_min: float
    eps_max: float
    false_passes: int
    smooth_coverage: float
    target_coverage: float
    history: list

    @property
    def ok(self) -> bool:
        return self.false_passes == 0 and self.smooth_coverage >= self.target_coverage

    def to_dict(self) -> dict:
        return {
            "eps_cal": self.eps_cal,
            "eps_min": self.eps_min,
            "eps_max": self.eps_max,
            "false_passes": self.false_passes,
            "smooth_coverage": self.smooth_coverage,
            "target_coverage": self.target_coverage,
            "ok": self.ok,
        }


def _evaluate(instances: Sequence[CalibrationInstance], eps: float):
    false, cover = 0, []
    for inst in instances:
        covered, _ = certified_raster(inst.table, eps, inst.grid)
        if inst.singular:
            false += int(np.count_nonzero(covered & inst.bad))
        else:
            cover.append((covered & inst.domain_mask).sum() / max(inst.domain_mask.sum(), 1))
    return false, float(min(cover)) if cover else 1.0


def _bisect(pred, lo: float, hi: float, iterations: int):
    """Bracket ``(last true, first false)`` of a predicate true at ``lo`` and false at ``hi``."""
    a, b = np.log(lo), np.log(hi)
    for _ in range(iterations):
        mid = 0.5 * (a + b)
        if pred(float(np.exp(mid))):
            a = mid
        else:
            b = mid
    return float(np.exp(a)), float(np.exp(b))


def calibrate(
    instances: Sequence[CalibrationInstance],
    lo: float = 1e-6,
    hi: float = 1.0,
    iterations: int = 40,
    target_coverage: float = 0.95,
) -> CalibrationResult:
    """Bisect the admissible threshold window on smooth and singular fixtures.

    A false pass is a certified ball reaching a bad cell of a singular
    fixture. Smooth coverage is the smallest coverage over smooth fixtures.
    Both counts are nondecreasing in ``eps``.
    """
    if not instances:
        raise InputError("calibration needs at least one instance")
    if not 0 < lo < hi:
        raise InputError("calibration needs 0 < lo < hi")
    history = []

    def probe(eps):
        f, cov = _evaluate(instances, eps)
        history.append((eps, f, cov))
        return f, cov

    f_lo, _ = probe(lo)
    if f_lo > 0:
        raise InputError(f"false passes already at eps = {lo}")
    f_hi, c_hi = probe(hi)
    if f_hi == 0:
        eps_max = hi
    else:
        eps_max = _bisect(lambda e: probe(e)[0] == 0, lo, hi, iterations)[0]
    if probe(lo)[1] >= target_coverage:
        eps_min = lo
    elif c_hi < target_coverage:
        eps_min = hi
    else:
        eps_min = _bisect(lambda e: probe(e)[1] < target_coverage, lo, hi, iterations)[1]
    eps_cal = float(np.sqrt(eps_min * eps_max)) if eps_min <= eps_max else eps_max
    false, cov = _evaluate(instances, eps_cal)
    return CalibrationResult(eps_cal, eps_min, eps_max, false, cov, target_coverage, history)


def load_calibration(path=None) -> dict:
    """The shipped calibration record, or one read from ``path``."""
    if path is not None:
        return json.loads(Path(path).read_text())
    text = resources.files("otlab").joinpath("data", CALIBRATION_FILE).read_text()
    return json.loads(text)
