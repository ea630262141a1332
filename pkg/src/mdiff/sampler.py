"""Reverse-time generation.

The generative process starts from the stationary prior N(0, S^{-1}) and
integrates the reverse-time SDE with drift g^2(T-t) s(u, T-t) - A(T-t) u
and diffusion g(T-t), by Euler-Maruyama on a uniform grid, stopping at the
truncation time. The data estimate is the first column of the terminal
augmented state, optionally pushed through the Gaussian posterior mean of
y_0 given y_eps.
"""

from __future__ import annotations

import concurrent.futures
import dataclasses
import os

import numpy as np

from . import autodiff as ad
from . import kernel as kernel_mod
from .process import DiffusionSpec


class DivergenceError(RuntimeError):
    """Integration produced a non-finite state."""

    def __init__(self, t: float):
        super().__init__(f"non-finite state at integration time t={t}")
        self.t = t


@dataclasses.dataclass
class SamplePath:
    grid: np.ndarray          # integration times, 0 .. T - eps
    states: list              # (n, d, K) snapshot at each grid time

    @property
    def terminal_z(self) -> np.ndarray:
        return self.states[-1][..., 0]


def _diffusion_root(spec: DiffusionSpec, s: float) -> np.ndarray:
    """Symmetric square root of g^2(s)."""
    g2 = spec.diffusion_sq(s)
    vals, vecs = np.linalg.eigh(g2)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def reverse_sde_step(spec: DiffusionSpec, score, u: np.ndarray, t: float,
                     dt: float, noise: np.ndarray) -> np.ndarray:
    """One Euler-Maruyama update of the reverse-time SDE, per row."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    s = spec.horizon - t
    a = spec.drift_matrix(s)
    g2 = spec.diffusion_sq(s)
    s_t = ad.value(score(u, s))
    drift = s_t @ g2.T - u @ a.T
    out = u + drift * dt + np.sqrt(dt) * (noise @ _diffusion_root(spec, s).T)
    if not np.all(np.isfinite(out)):
        raise DivergenceError(t)
    return out


def denoise(spec: DiffusionSpec, score, u: np.ndarray) -> np.ndarray:
    """Posterior-mean map from the state at the truncation time back to 0."""
    ker = kernel_mod.transition(spec, spec.eps, kernel_mod.FULL_STATE)
    s_t = ad.value(score(u, spec.eps))
    inv_a = np.linalg.inv(ker.mean_map)
    return (u + s_t @ ker.cov) @ inv_a.T


def generate(spec: DiffusionSpec, score, n: int, d: int, steps: int,
             seed: int, return_path: bool = False,
             final_denoise: bool = False):
    """Draw n samples of d data features each.

    Returns (z, path) where z is (n, d) and path a SamplePath when
    requested. Every sample owns the random stream keyed (seed, index), so
    results do not depend on chunking or thread count (MDM_THREADS).
    """
    if steps < 1:
        raise ValueError("steps must be positive")
    k = spec.k
    if n == 0:
        return (np.zeros((0, d)),
                SamplePath(np.zeros(0), []) if return_path else None)
    t_end = spec.horizon - spec.eps
    dt = t_end / steps
    grid = np.linspace(0.0, t_end, steps + 1)
    prior_chol = np.linalg.cholesky(spec.stationary_cov())

    def integrate(indices):
        m = len(indices)
        u = np.zeros((m, d, k))
        noise = np.zeros((m, steps, d, k))
        for row, i in enumerate(indices):
            rng = np.random.default_rng([seed, int(i)])
            u[row] = rng.standard_normal((d, k)) @ prior_chol.T
            noise[row] = rng.standard_normal((steps, d, k))
        snaps = [u.copy()] if return_path else None
        for j in range(steps):
            u = reverse_sde_step(spec, score, u, grid[j], dt, noise[:, j])
            if return_path:
                snaps.append(u.copy())
        return u, snaps

    threads = int(os.environ.get("MDM_THREADS", "1"))
    indices = np.arange(n)
    if threads > 1 and n >= 2 * threads and not return_path:
        chunks = np.array_split(indices, threads)
        with concurrent.futures.ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(lambda c: integrate(c)[0], chunks))
        u = np.concatenate(results, axis=0)
        snaps = None
    else:
        u, snaps = integrate(indices)

    if final_denoise:
        u = denoise(spec, score, u)
    path = SamplePath(grid, snaps) if return_path else None
    return u[..., 0], path


def dump_csv(z: np.ndarray, path: str = None) -> str:
    lines = [",".join(repr(float(v)) for v in row) for row in np.atleast_2d(z)]
    text = "\n".join(lines) + "\n"
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text
