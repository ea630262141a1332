"""Toy datasets, one row per sample."""

from __future__ import annotations

import numpy as np


def gaussian(n: int, seed: int, d: int = 1, mean: float = 0.0,
             var: float = 1.0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return mean + np.sqrt(var) * rng.standard_normal((n, d))


def gaussian_mixture(n: int, seed: int, centers=((-2.0, 0.0), (2.0, 0.0)),
                     std: float = 0.5) -> np.ndarray:
    """Equal-weight Gaussian mixture; default is the 2-D two-Gaussians."""
    rng = np.random.default_rng(seed)
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    which = rng.integers(0, centers.shape[0], size=n)
    return centers[which] + std * rng.standard_normal((n, centers.shape[1]))


def two_moons(n: int, seed: int, noise: float = 0.1) -> np.ndarray:
    rng = np.random.default_rng(seed)
    angle = np.pi * rng.random(n)
    upper = rng.random(n) < 0.5
    x = np.where(upper, np.cos(angle), 1.0 - np.cos(angle))
    y = np.where(upper, np.sin(angle), 0.5 - np.sin(angle))
    return np.stack([x, y], axis=1) + noise * rng.standard_normal((n, 2))


def checkerboard(n: int, seed: int, extent: float = 4.0) -> np.ndarray:
    """Uniform on the black cells of a 4x4 checkerboard on [-e, e]^2."""
    rng = np.random.default_rng(seed)
    out = np.zeros((n, 2))
    filled = 0
    while filled < n:
        cand = rng.uniform(-extent, extent, size=(2 * (n - filled) + 16, 2))
        cell = np.floor(cand / (extent / 2.0)).astype(int)
        keep = (cell[:, 0] + cell[:, 1]) % 2 == 0
        take = cand[keep][:n - filled]
        out[filled:filled + take.shape[0]] = take
        filled += take.shape[0]
    return out


def make(name: str, n: int, seed: int, params: dict = None) -> np.ndarray:
    params = dict(params or {})
    builders = {"gaussian": gaussian, "gaussian-mixture": gaussian_mixture,
                "two-moons": two_moons, "checkerboard": checkerboard}
    if name not in builders:
        raise ValueError(f"unknown dataset {name!r}")
    return builders[name](n, seed, **params)
