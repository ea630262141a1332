"""Linear time-varying inference processes with a prescribed Gaussian
stationary law.

A process over K coordinates per data feature is written through the pair
(Q, D): ``Q(s) = b_q(s) * q_base`` skew-symmetric, ``D(s) = b_d(s) * d_base``
positive semi-definite, drift ``f(y, s) = -(Q(s) + D(s)) S y`` and diffusion
``g^2(s) = 2 D(s)``. Any such process leaves N(0, S^{-1}) invariant, so the
prior used by the generative model is known in closed form.
"""

from __future__ import annotations

import dataclasses
import json
import warnings

import numpy as np

from . import matops


@dataclasses.dataclass(frozen=True)
class Schedule:
    """Scalar time profile b(s) with a closed-form antiderivative.

    kind "constant": b(s) = params[0].
    kind "linear-beta": b(s) = b0 + (b1 - b0) * s / T with params (b0, b1, T).
    """

    kind: str
    params: tuple

    def __post_init__(self):
        object.__setattr__(self, "params", tuple(float(p) for p in self.params))
        if self.kind == "constant":
            if len(self.params) != 1:
                raise ValueError("constant schedule takes one parameter")
        elif self.kind == "linear-beta":
            if len(self.params) != 3 or self.params[2] <= 0:
                raise ValueError("linear-beta schedule takes (b0, b1, T), T > 0")
        else:
            raise ValueError(f"unknown schedule kind {self.kind!r}")

    def value(self, s: float) -> float:
        if self.kind == "constant":
            return self.params[0]
        b0, b1, t = self.params
        return b0 + (b1 - b0) * s / t

    def integral(self, s: float) -> float:
        """Antiderivative evaluated at s, with integral(0) = 0."""
        if self.kind == "constant":
            return self.params[0] * s
        b0, b1, t = self.params
        return b0 * s + 0.5 * (b1 - b0) * s * s / t

    def to_json(self) -> dict:
        return {"kind": self.kind, "params": list(self.params)}

    @staticmethod
    def from_json(doc: dict) -> "Schedule":
        return Schedule(doc["kind"], tuple(doc["params"]))


def constant(b0: float) -> Schedule:
    return Schedule("constant", (b0,))


def linear_beta(b0: float, b1: float, horizon: float) -> Schedule:
    return Schedule("linear-beta", (b0, b1, horizon))


@dataclasses.dataclass(frozen=True, eq=False)
class DiffusionSpec:
    """Complete parameterization of one linear inference process.

    All matrices are K x K and shared across data features. ``aux_init_mean``
    and ``aux_init_cov`` define the chosen Gaussian initial distribution of
    the K-1 auxiliary coordinates given a data value.
    """

    k: int
    q_base: np.ndarray
    d_base: np.ndarray
    s_mat: np.ndarray
    sched_q: Schedule
    sched_d: Schedule
    horizon: float = 1.0
    eps: float = 1e-3
    aux_init_mean: np.ndarray = None
    aux_init_cov: np.ndarray = None

    def __post_init__(self):
        k = int(self.k)
        if k < 1:
            raise ValueError("k must be a positive integer")
        q = np.array(self.q_base, dtype=float).reshape(k, k)
        d = np.array(self.d_base, dtype=float).reshape(k, k)
        s = np.array(self.s_mat, dtype=float).reshape(k, k)
        if np.abs(q + q.T).max() > 0:
            raise ValueError("q_base must be exactly skew-symmetric")
        if np.abs(d - d.T).max() > 1e-12 * max(1.0, np.abs(d).max()):
            raise ValueError("d_base must be symmetric")
        if np.linalg.eigvalsh(0.5 * (d + d.T)).min() < -1e-10:
            raise ValueError("d_base must be positive semi-definite")
        matops.cholesky(s)  # raises if the precision is not SPD
        if not 0 < self.eps < self.horizon:
            raise ValueError("need 0 < eps < horizon")

        mean = self.aux_init_mean
        cov = self.aux_init_cov
        if k > 1:
            if mean is None:
                mean = np.zeros(k - 1)
            if cov is None:
                cov = np.linalg.inv(s)[1:, 1:]  # stationary auxiliary block
            mean = np.array(mean, dtype=float).reshape(k - 1)
            cov = np.array(cov, dtype=float).reshape(k - 1, k - 1)
            matops.cholesky(cov)
        else:
            mean = np.zeros(0)
            cov = np.zeros((0, 0))
        for name, val in (("k", k), ("q_base", q), ("d_base", d), ("s_mat", s),
                          ("horizon", float(self.horizon)),
                          ("eps", float(self.eps)),
                          ("aux_init_mean", mean), ("aux_init_cov", cov)):
            object.__setattr__(self, name, val)
        for arr in (q, d, s, mean, cov):
            if isinstance(arr, np.ndarray):
                arr.setflags(write=False)

        self._warn_if_rank_deficient()

    def _warn_if_rank_deficient(self):
        for s in np.linspace(0.25 * self.horizon, self.horizon, 4):
            m = self.sched_q.value(s) * self.q_base + self.sched_d.value(s) * self.d_base
            if np.linalg.matrix_rank(m, tol=1e-10) < self.k:
                warnings.warn(
                    "Q(s) + D(s) is rank deficient at sampled times; the "
                    "stationary law may not be unique", RuntimeWarning)
                return

    # --- process coefficients -------------------------------------------

    def _check_time(self, s: float) -> float:
        s = float(s)
        if not 0.0 <= s <= self.horizon + 1e-12:
            raise ValueError(f"time {s} outside [0, {self.horizon}]")
        return s

    def drift_matrix(self, s: float) -> np.ndarray:
        """A(s) with dy = A(s) y ds + g(s) dB: -(b_q Q + b_d D) S."""
        s = self._check_time(s)
        q = self.sched_q.value(s) * self.q_base
        d = self.sched_d.value(s) * self.d_base
        return -(q + d) @ self.s_mat

    def diffusion_sq(self, s: float) -> np.ndarray:
        """g(s) g(s)^T = 2 b_d(s) d_base."""
        s = self._check_time(s)
        return 2.0 * self.sched_d.value(s) * self.d_base

    def drift_integral(self, s: float) -> np.ndarray:
        """Antiderivative of A evaluated on [0, s]."""
        s = self._check_time(s)
        q = self.sched_q.integral(s) * self.q_base
        d = self.sched_d.integral(s) * self.d_base
        return -(q + d) @ self.s_mat

    def diffusion_sq_integral(self, s: float) -> np.ndarray:
        s = self._check_time(s)
        return 2.0 * self.sched_d.integral(s) * self.d_base

    def commuting_path(self) -> bool:
        """True when A(s) commutes across times, so the exponential of the
        integrated coefficients is the exact flow map."""
        if self.k == 1 or np.abs(self.q_base).max() == 0 or np.abs(self.d_base).max() == 0:
            return True
        if self.sched_q == self.sched_d:
            return True
        return self.sched_q.kind == "constant" and self.sched_d.kind == "constant"

    def stationary_cov(self) -> np.ndarray:
        return np.linalg.inv(self.s_mat)

    def stationary_log_density(self, u: np.ndarray) -> float:
        """Sum over rows of the log-density of N(0, S^{-1})."""
        u = np.asarray(u, dtype=float)
        if u.ndim == 1:
            u = u[None, :]
        if u.shape[-1] != self.k:
            raise ValueError(f"state has {u.shape[-1]} columns, expected {self.k}")
        sign, logdet_prec = np.linalg.slogdet(self.s_mat)
        quad = np.einsum("...i,ij,...j->...", u, self.s_mat, u)
        per_row = -0.5 * (self.k * np.log(2.0 * np.pi) - logdet_prec + quad)
        return float(per_row.sum())

    # --- serialization ---------------------------------------------------

    def to_json(self) -> dict:
        return {
            "k": self.k,
            "q_base": self.q_base.tolist(),
            "d_base": self.d_base.tolist(),
            "s_mat": self.s_mat.tolist(),
            "sched_q": self.sched_q.to_json(),
            "sched_d": self.sched_d.to_json(),
            "horizon": self.horizon,
            "eps": self.eps,
            "aux_init_mean": self.aux_init_mean.tolist(),
            "aux_init_cov": self.aux_init_cov.tolist(),
        }

    @staticmethod
    def from_json(doc: dict) -> "DiffusionSpec":
        return DiffusionSpec(
            k=doc["k"],
            q_base=np.array(doc["q_base"], dtype=float),
            d_base=np.array(doc["d_base"], dtype=float),
            s_mat=np.array(doc["s_mat"], dtype=float),
            sched_q=Schedule.from_json(doc["sched_q"]),
            sched_d=Schedule.from_json(doc["sched_d"]),
            horizon=doc["horizon"],
            eps=doc["eps"],
            aux_init_mean=np.array(doc["aux_init_mean"], dtype=float),
            aux_init_cov=np.array(doc["aux_init_cov"], dtype=float).reshape(
                doc["k"] - 1, doc["k"] - 1),
        )

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2)

    @staticmethod
    def load(path: str) -> "DiffusionSpec":
        with open(path) as fh:
            return DiffusionSpec.from_json(json.load(fh))


@dataclasses.dataclass
class LearnableParams:
    """Unconstrained parameterization of (q_base, d_base).

    ``q_tilde`` is a free K x K matrix mapped through antisymmetrization;
    ``d_tilde`` is either a length-K vector (diagonal D, the default) or a
    free K x K matrix mapped through the Gram product.
    """

    q_tilde: np.ndarray
    d_tilde: np.ndarray
    diagonal_d: bool = True

    @staticmethod
    def vpsde_equivalent(k: int, beta: float = 2.0,
                         diagonal_d: bool = True) -> "LearnableParams":
        """Start at the scalar variance-preserving process embedded in K
        coordinates: no mixing, dissipation beta/2 on every coordinate."""
        q = np.zeros((k, k))
        if diagonal_d:
            d = np.full(k, np.sqrt(beta / 2.0))
        else:
            d = np.sqrt(beta / 2.0) * np.eye(k)
        return LearnableParams(q, d, diagonal_d)

    def q_base(self):
        return matops.make_skew(self.q_tilde)

    def d_base(self):
        if self.diagonal_d:
            return np.diag(np.asarray(self.d_tilde, dtype=float) ** 2)
        return matops.make_psd(self.d_tilde)

    def to_spec(self, template: DiffusionSpec) -> DiffusionSpec:
        """Induce a valid spec; every other field is taken from the template."""
        return dataclasses.replace(
            template, q_base=self.q_base(), d_base=self.d_base())


def named_instance(name: str, hyper: dict = None) -> DiffusionSpec:
    """Build one of the reference processes.

    vpsde: K=1 variance-preserving, hyper {beta} or {beta0, beta1}.
    cld:   K=2 critically damped Langevin, hyper {beta, gamma, mass}.
    alda:  K=3 accelerated Langevin, hyper {length, gamma, xi}.
    malda: K=3 modified accelerated Langevin, hyper {length, gamma}.
    Common keys: horizon (default 1.0), eps (default 1e-3).
    """
    hyper = dict(hyper or {})
    horizon = float(hyper.pop("horizon", 1.0))
    eps = float(hyper.pop("eps", 1e-3))

    def beta_schedule():
        if "beta0" in hyper:
            b0, b1 = hyper.pop("beta0"), hyper.pop("beta1")
            if b0 <= 0 or b1 <= 0:
                raise ValueError("beta endpoints must be positive")
            return linear_beta(b0, b1, horizon), 1.0
        beta = float(hyper.pop("beta", 2.0))
        if beta <= 0:
            raise ValueError("beta must be positive")
        return constant(1.0), beta

    if name == "vpsde":
        sched, beta = beta_schedule()
        if sched.kind == "constant":
            sched = constant(beta / 2.0)
        else:
            b0, b1, t = sched.params
            sched = linear_beta(b0 / 2.0, b1 / 2.0, t)
        spec = DiffusionSpec(1, np.zeros((1, 1)), np.eye(1), np.eye(1),
                             sched, sched, horizon, eps)
    elif name == "cld":
        gamma = float(hyper.pop("gamma", 1.0))
        mass = float(hyper.pop("mass", 1.0))
        if gamma < 0 or mass <= 0:
            raise ValueError("need gamma >= 0 and mass > 0")
        sched, beta = beta_schedule()
        q = beta * np.array([[0.0, -1.0], [1.0, 0.0]])
        d = beta * np.diag([0.0, gamma])
        s = np.diag([1.0, 1.0 / mass])
        spec = DiffusionSpec(2, q, d, s, sched, sched, horizon, eps)
    elif name == "alda":
        length = float(hyper.pop("length", 1.0))
        gamma = float(hyper.pop("gamma", 1.0))
        xi = float(hyper.pop("xi", 1.0))
        if length <= 0 or xi <= 0:
            raise ValueError("need length > 0 and xi > 0")
        q = np.array([[0.0, -1.0 / length, 0.0],
                      [1.0 / length, 0.0, -gamma],
                      [0.0, gamma, 0.0]])
        d = np.diag([0.0, 0.0, xi / length])
        s = np.diag([1.0, length, length])
        sched = constant(1.0)
        spec = DiffusionSpec(3, q, d, s, sched, sched, horizon, eps)
    elif name == "malda":
        length = float(hyper.pop("length", 1.0))
        gamma = float(hyper.pop("gamma", 1.0))
        if length <= 0:
            raise ValueError("need length > 0")
        q = np.array([[0.0, -1.0 / length, -1.0 / length],
                      [1.0 / length, 0.0, -gamma],
                      [1.0 / length, gamma, 0.0]])
        d = np.diag([0.0, 1.0 / length, 1.0 / length])
        s = np.diag([1.0, length, length])
        sched = constant(1.0)
        spec = DiffusionSpec(3, q, d, s, sched, sched, horizon, eps)
    else:
        raise ValueError(f"unknown instance {name!r}")

    if hyper:
        raise ValueError(f"unused hyperparameters: {sorted(hyper)}")
    return spec
