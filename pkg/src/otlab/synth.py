"""Synthetic density families used as test instances."""
from __future__ import annotations

import hashlib
from typing import Optional

import numpy as np

from .errors import ConfigError
from .measures import GridDensity

FLOOR = 0.1
FAMILIES = ("uniform", "sinusoidal", "bump", "jump")


def grid_shape(n: int, dim: int) -> tuple:
    return (n,) * dim


def _profile(family: str, params: dict, dim: int):
    p = dict(params)
    if family == "uniform":
        return lambda x: np.zeros(x.shape[:-1])
    if family == "sinusoidal":
        delta, freq = float(p.get("delta", 0.05)), float(p.get("frequency", 1.0))
        phase = float(p.get("phase", 0.0))
        return lambda x: delta * np.prod(np.sin(np.pi * freq * x + phase), axis=-1)
    if family == "bump":
        delta, width = float(p.get("delta", 0.1)), float(p.get("width", 0.2))
        center = np.asarray(p.get("center", [0.0] * dim), dtype=float)
        return lambda x: delta * np.exp(-np.sum((x - center) ** 2, axis=-1) / (2 * width**2))
    if family == "jump":
        delta = float(p.get("delta", 0.5))
        normal = np.asarray(p.get("normal", [1.0] + [0.0] * (dim - 1)), dtype=float)
        normal = normal / np.linalg.norm(normal)
        offset = float(p.get("offset", 0.0))
        outer = p.get("outer", p.get("width"))
        inner = p.get("inner")

        def step(x):
            s = x @ normal - offset
            if outer is None:
                return delta * np.sign(s)
            # slot: level -delta on |s| < inner/2, +delta on inner/2 <= |s| < outer/2
            w_out = float(outer)
            w_in = 0.5 * w_out if inner is None else float(inner)
            a = np.abs(s)
            return delta * np.where(a < w_in / 2, -1.0, np.where(a < w_out / 2, 1.0, 0.0))

        return step
    raise ConfigError(f"unknown density family {family!r}; expected one of {FAMILIES}")


def synth_density(
    family: str,
    params: Optional[dict] = None,
    n: int = 64,
    dim: int = 2,
    lower: float = -1.0,
    upper: float = 1.0,
    seed: int = 0,
) -> GridDensity:
    """``1 + perturbation`` on the cube ``[lower, upper]^dim``, clipped below at 0.1.

    ``params["jitter"]`` adds seeded multiplicative cell noise of that
    relative amplitude; the continuous sampler then ignores it.
    """
    params = params or {}
    prof = _profile(family, params, dim)

    def density(x):
        return np.maximum(1.0 + prof(np.asarray(x, dtype=float)), FLOOR)

    h = (upper - lower) / n
    rho = GridDensity.from_function(density, grid_shape(n, dim), [lower] * dim, h)
    jitter = float(params.get("jitter", 0.0))
    if jitter:
        rng = np.random.default_rng(seed)
        cells = rho.cells * (1 + jitter * rng.uniform(-1, 1, rho.shape))
        rho = rho.with_cells(np.maximum(cells, FLOOR))
    return rho


def density_hash(rho: GridDensity) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(rho.cells).tobytes())
    h.update(np.asarray(rho.origin).tobytes())
    h.update(np.float64(rho.h).tobytes())
    return h.hexdigest()
