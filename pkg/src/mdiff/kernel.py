"""Gaussian transition laws of the linear inference process.

For a linear SDE dy = A(s) y ds + g(s) dB the conditional law q(y_s | y_0)
is Gaussian. When the drift matrices commute across time the flow map is
``expm`` of the integrated drift and the covariance follows from a
matrix-fraction decomposition: stack (C; H) with Sigma = C H^{-1}, then

    (C_s; H_s) = expm([[M_s, N_s], [0, -M_s^T]]) @ (Sigma_0; I)

where M_s integrates A and N_s integrates g g^T. A fixed-step RK4
integration of the mean/covariance ODEs serves both as an independent
oracle and as the fallback for non-commuting schedules.

The same kernel is shared by all d data features; states are (d, K) arrays
with one feature per row.
"""

from __future__ import annotations

import dataclasses
import json
import threading

import numpy as np

from . import autodiff as ad
from . import matops
from .process import DiffusionSpec


class KernelDegenerateError(matops.MatrixError):
    """Covariance unusable at the requested time."""

    def __init__(self, message: str, s: float):
        super().__init__(f"{message} (s={s})")
        self.s = s


@dataclasses.dataclass(frozen=True, eq=False)
class Conditioning:
    """What the transition law is conditioned on.

    full-state: exact y_0, initial covariance zero.
    data-only:  only the data coordinate is observed; the auxiliary
                coordinates start from their chosen Gaussian initial law,
                which folds into the kernel as a nonzero initial covariance
                and a mean offset.
    """

    mode: str = "full-state"

    def __post_init__(self):
        if self.mode not in ("full-state", "data-only"):
            raise ValueError(f"unknown conditioning mode {self.mode!r}")

    def sigma0(self, spec: DiffusionSpec) -> np.ndarray:
        out = np.zeros((spec.k, spec.k))
        if self.mode == "data-only" and spec.k > 1:
            out[1:, 1:] = spec.aux_init_cov
        return out

    def center(self, spec: DiffusionSpec, y0_or_x: np.ndarray) -> np.ndarray:
        """Conditioning vector per row: exact y_0, or [x, aux_init_mean]."""
        arr = np.asarray(y0_or_x, dtype=float)
        if self.mode == "full-state":
            if arr.ndim == 1:
                arr = arr[:, None] if spec.k == 1 else arr[None, :]
            if arr.shape[-1] != spec.k:
                raise ValueError(f"expected {spec.k} state columns")
            return arr
        if arr.ndim == 2 and arr.shape[-1] == 1:
            arr = arr[:, 0]
        if arr.ndim != 1:
            raise ValueError("data-only conditioning expects a d-vector x")
        out = np.tile(np.concatenate([[0.0], spec.aux_init_mean]), (arr.size, 1))
        out[:, 0] = arr
        return out


FULL_STATE = Conditioning("full-state")
DATA_ONLY = Conditioning("data-only")


@dataclasses.dataclass(frozen=True, eq=False)
class GaussianKernel:
    """q(y_s | conditioning) = N(mean_map @ center, cov) per data row."""

    s: float
    mean_map: np.ndarray
    cov: np.ndarray
    chol: np.ndarray

    @property
    def k(self) -> int:
        return self.mean_map.shape[0]

    def mean(self, center: np.ndarray) -> np.ndarray:
        return center @ self.mean_map.T

    def to_json(self) -> dict:
        return {"s": self.s, "mean_map": self.mean_map.tolist(),
                "cov": self.cov.tolist(), "chol": self.chol.tolist()}

    @staticmethod
    def from_json(doc: dict) -> "GaussianKernel":
        return GaussianKernel(
            float(doc["s"]), np.array(doc["mean_map"], dtype=float),
            np.array(doc["cov"], dtype=float), np.array(doc["chol"], dtype=float))


def kernel_tensors(m_int, n_int, sigma0):
    """Mean map, covariance and Cholesky factor from integrated coefficients.

    Written against the autodiff dispatch layer: with plain arrays it
    returns arrays, with Var inputs it returns Vars whose gradients flow
    through the matrix exponential and the factorization.
    """
    k = ad.value(m_int).shape[0]
    zeros = np.zeros((k, k))
    top = ad.concat([m_int, n_int], axis=1)
    bottom = ad.concat([zeros, -ad.transpose(m_int)], axis=1)
    block = ad.concat([top, bottom], axis=0)
    e = ad.expm(block)
    mean_map = e[:k, :k]
    c = ad.add(ad.matmul(e[:k, :k], sigma0), e[:k, k:])
    h = ad.add(ad.matmul(e[k:, :k], sigma0), e[k:, k:])
    cov = ad.transpose(ad.solve(ad.transpose(h), ad.transpose(c)))
    cov = ad.mul(ad.add(cov, ad.transpose(cov)), 0.5)
    chol = ad.cholesky(cov)
    return mean_map, cov, chol


def transition(spec: DiffusionSpec, s: float,
               cond: Conditioning = FULL_STATE) -> GaussianKernel:
    """Closed-form transition kernel at elapsed time s.

    Valid only when the drift commutes across time (shared or constant
    schedules); otherwise raises and the caller must use transition_ode.
    """
    if not spec.commuting_path():
        raise ValueError(
            "closed-form transition requires commuting drift (shared or "
            "constant schedules); use transition_ode for this spec")
    s = spec._check_time(s)
    m_int = spec.drift_integral(s)
    n_int = spec.diffusion_sq_integral(s)
    try:
        mean_map, cov, chol = kernel_tensors(m_int, n_int, cond.sigma0(spec))
    except (np.linalg.LinAlgError, matops.MatrixError) as exc:
        raise KernelDegenerateError(f"transition failed: {exc}", s) from exc
    if not np.all(np.isfinite(cov)):
        raise KernelDegenerateError("matrix fraction produced non-finite "
                                    "covariance", s)
    return GaussianKernel(s, mean_map, cov, chol)


def transition_batch(spec: DiffusionSpec, times: np.ndarray,
                     cond: Conditioning = FULL_STATE):
    """Vectorized closed-form kernels at many times.

    Returns (mean_map, cov, chol) stacked as (n, K, K) arrays. Same
    formulas as :func:`transition`, evaluated through one stacked matrix
    exponential; the ELBO estimator calls this on thousands of times.
    """
    if not spec.commuting_path():
        raise ValueError("batch transition requires commuting drift")
    times = np.asarray(times, dtype=float)
    k = spec.k
    bq = np.array([spec.sched_q.integral(s) for s in times])
    bd = np.array([spec.sched_d.integral(s) for s in times])
    m_int = -(bq[:, None, None] * spec.q_base
              + bd[:, None, None] * spec.d_base) @ spec.s_mat
    n_int = 2.0 * bd[:, None, None] * spec.d_base

    block = np.zeros((times.size, 2 * k, 2 * k))
    block[:, :k, :k] = m_int
    block[:, :k, k:] = n_int
    block[:, k:, k:] = -np.swapaxes(m_int, -1, -2)
    e = matops.expm(block)
    sigma0 = cond.sigma0(spec)
    c = e[:, :k, :k] @ sigma0 + e[:, :k, k:]
    h = e[:, k:, :k] @ sigma0 + e[:, k:, k:]
    cov = np.linalg.solve(np.swapaxes(h, -1, -2), np.swapaxes(c, -1, -2))
    cov = matops.symmetrize(np.swapaxes(cov, -1, -2))
    if not np.all(np.isfinite(cov)):
        bad = times[~np.isfinite(cov).all(axis=(1, 2))][0]
        raise KernelDegenerateError("non-finite covariance in batch", float(bad))
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise KernelDegenerateError(
            "batch covariance not positive definite; keep times >= eps",
            float(times.min())) from exc
    return e[:, :k, :k], cov, chol


def transition_ode(spec: DiffusionSpec, s: float,
                   cond: Conditioning = FULL_STATE,
                   steps: int = 1000) -> GaussianKernel:
    """Transition kernel by fixed-step RK4 on the mean/covariance ODEs.

    dM/ds = A(s) M,   dSigma/ds = A Sigma + Sigma A^T + g g^T.
    Independent of the closed form; authoritative for non-commuting
    schedules.
    """
    s = spec._check_time(s)
    if steps < 1:
        raise ValueError("steps must be positive")
    h = s / steps
    mean_map = np.eye(spec.k)
    cov = cond.sigma0(spec).copy()

    def rhs(t, m, sig):
        a = spec.drift_matrix(t)
        g2 = spec.diffusion_sq(t)
        return a @ m, a @ sig + sig @ a.T + g2

    t = 0.0
    for _ in range(steps):
        k1m, k1s = rhs(t, mean_map, cov)
        k2m, k2s = rhs(t + 0.5 * h, mean_map + 0.5 * h * k1m, cov + 0.5 * h * k1s)
        k3m, k3s = rhs(t + 0.5 * h, mean_map + 0.5 * h * k2m, cov + 0.5 * h * k2s)
        k4m, k4s = rhs(t + h, mean_map + h * k3m, cov + h * k3s)
        mean_map = mean_map + (h / 6.0) * (k1m + 2 * k2m + 2 * k3m + k4m)
        cov = cov + (h / 6.0) * (k1s + 2 * k2s + 2 * k3s + k4s)
        t += h
    cov = matops.symmetrize(cov)
    chol = matops.cholesky_psd(cov)
    return GaussianKernel(s, mean_map, cov, chol)


def sample(kernel: GaussianKernel, center: np.ndarray,
           noise: np.ndarray) -> np.ndarray:
    """Reparameterized draw y_s = mean_map @ center + L @ noise, per row.

    ``center`` is the conditioning state (d, K) as built by
    :meth:`Conditioning.center`; ``noise`` is an externally supplied (d, K)
    standard-normal draw, so the map is deterministic and differentiable.
    """
    center = np.asarray(center, dtype=float)
    noise = np.asarray(noise, dtype=float)
    if center.shape != noise.shape:
        raise ValueError("center and noise shapes differ")
    return center @ kernel.mean_map.T + noise @ kernel.chol.T


def score_of_kernel(kernel: GaussianKernel, y_s: np.ndarray,
                    center: np.ndarray) -> np.ndarray:
    """Conditional score: -Sigma^{-1} (y_s - mean) per row."""
    scale = max(np.abs(kernel.cov).max(), 1.0)
    if np.linalg.eigvalsh(kernel.cov).min() < 1e-12 * scale:
        raise KernelDegenerateError(
            "covariance numerically singular; evaluate at s >= eps and use "
            "the truncation likelihood below it", kernel.s)
    resid = np.asarray(y_s, dtype=float) - kernel.mean(np.asarray(center, float))
    return -np.linalg.solve(kernel.cov, resid.T).T


def log_density(kernel: GaussianKernel, y_s: np.ndarray,
                center: np.ndarray) -> float:
    """Sum over rows of log N(y_s; mean_map @ center, cov)."""
    scale = max(np.abs(kernel.cov).max(), 1.0)
    if np.linalg.eigvalsh(kernel.cov).min() < 1e-12 * scale:
        raise KernelDegenerateError("covariance numerically singular",
                                    kernel.s)
    resid = np.asarray(y_s, dtype=float) - kernel.mean(np.asarray(center, float))
    k = kernel.k
    solved = np.linalg.solve(kernel.cov, resid.T).T
    quad = np.sum(resid * solved, axis=-1)
    _, logdet = np.linalg.slogdet(kernel.cov)
    return float(np.sum(-0.5 * (k * np.log(2 * np.pi) + logdet + quad)))


class KernelCache:
    """Kernels keyed by quantized time; safe for concurrent readers."""

    def __init__(self, spec: DiffusionSpec, cond: Conditioning = FULL_STATE,
                 quantum: float = 1e-9):
        self.spec = spec
        self.cond = cond
        self.quantum = quantum
        self._store: dict[int, GaussianKernel] = {}
        self._lock = threading.Lock()

    def get(self, s: float) -> GaussianKernel:
        key = int(round(s / self.quantum))
        found = self._store.get(key)
        if found is not None:
            return found
        made = transition(self.spec, key * self.quantum, self.cond)
        with self._lock:
            return self._store.setdefault(key, made)


def dump_kernel(kernel: GaussianKernel, path: str = None) -> str:
    doc = json.dumps(kernel.to_json(), indent=2)
    if path is not None:
        with open(path, "w") as fh:
            fh.write(doc)
    return doc
