"""Score fields: exact Gaussian oracle, small MLP, noise-prediction wrap.

A score field maps an augmented state (d, K) and a time to the (d, K)
score values. Implementations written through the autodiff dispatch layer
accept either plain arrays or Var nodes, so the same forward code serves
fast evaluation and gradient-based training.
"""

from __future__ import annotations

import json

import numpy as np

from . import autodiff as ad
from . import kernel as kernel_mod
from .process import DiffusionSpec

TIME_EMBED_WIDTH = 16


def time_embedding(s, width: int = TIME_EMBED_WIDTH) -> np.ndarray:
    """Sinusoidal features of the time value, log-spaced frequencies.

    Accepts a scalar (returns (width,)) or an array (returns s.shape +
    (width,)).
    """
    half = width // 2
    freqs = np.exp(np.linspace(np.log(1.0), np.log(100.0), half))
    s = np.asarray(s, dtype=float)
    phases = s[..., None] * freqs
    return np.concatenate([np.sin(phases), np.cos(phases)], axis=-1)


class MlpScore:
    """Fully connected tanh network on the flattened augmented state.

    Input is the d*K state concatenated with the time embedding; output is
    reshaped back to (d, K). Parameters may be plain arrays or Var leaves.
    """

    def __init__(self, d: int, k: int, hidden=(64, 64, 64), seed: int = 0):
        self.d = d
        self.k = k
        self.hidden = tuple(hidden)
        rng = np.random.default_rng(seed)
        widths = [d * k + TIME_EMBED_WIDTH, *hidden, d * k]
        self.weights = []
        self.biases = []
        for n_in, n_out in zip(widths[:-1], widths[1:]):
            scale = np.sqrt(2.0 / (n_in + n_out))
            self.weights.append(rng.normal(0.0, scale, size=(n_in, n_out)))
            self.biases.append(np.zeros(n_out))

    @property
    def params(self) -> list:
        return self.weights + self.biases

    def set_params(self, params: list) -> None:
        n = len(self.weights)
        self.weights = list(params[:n])
        self.biases = list(params[n:])

    @property
    def param_count(self) -> int:
        return sum(ad.value(p).size for p in self.params)

    def __call__(self, y, s):
        """Evaluate at state (d, K) or a stack (..., d, K)."""
        yv = ad.value(y)
        batch_shape = yv.shape[:-2]
        h = ad.reshape(y, batch_shape + (self.d * self.k,))
        emb = np.broadcast_to(time_embedding(s), batch_shape + (TIME_EMBED_WIDTH,))
        h = ad.concat([h, emb], axis=-1)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = ad.add(ad.matmul(h, w), b)
            if i < len(self.weights) - 1:
                h = ad.tanh(h)
        return ad.reshape(h, batch_shape + (self.d, self.k))

    def jacobian(self, y: np.ndarray, s: float) -> np.ndarray:
        """Full (d*K, d*K) Jacobian of the flattened score at one state."""
        y_var = ad.Var(np.asarray(y, dtype=float))
        out = ad.reshape(self(y_var, s), (self.d * self.k,))
        n = self.d * self.k
        rows = np.zeros((n, n))
        for i in range(n):
            seed = np.zeros(n)
            seed[i] = 1.0
            ad.backward(out, seed)
            rows[i] = y_var.grad.reshape(n)
        return rows

    def div_weighted(self, y: np.ndarray, s: float, weight: np.ndarray) -> float:
        """Divergence of y -> score(y) @ weight over the flattened state."""
        jac = self.jacobian(y, s)
        big = np.kron(np.eye(self.d), np.asarray(weight, dtype=float))
        return float(np.trace(big @ jac))

    # --- checkpointing ---------------------------------------------------

    def to_json(self) -> dict:
        return {
            "d": self.d, "k": self.k, "hidden": list(self.hidden),
            "params": [ad.value(p).tolist() for p in self.params],
        }

    @staticmethod
    def from_json(doc: dict) -> "MlpScore":
        model = MlpScore(doc["d"], doc["k"], tuple(doc["hidden"]))
        params = [np.array(p, dtype=float) for p in doc["params"]]
        expect = [p.shape for p in model.params]
        got = [p.shape for p in params]
        if expect != got:
            raise ValueError(f"checkpoint shapes {got} do not match {expect}")
        model.set_params(params)
        return model

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh)

    @staticmethod
    def load(path: str) -> "MlpScore":
        with open(path) as fh:
            return MlpScore.from_json(json.load(fh))


class AnalyticGaussianScore:
    """Exact marginal score for independent Gaussian data coordinates.

    With x_j ~ N(0, data_var[j]) and the auxiliary initial law of the spec,
    the joint initial state of row j is Gaussian, so the marginal at time s
    is N(mu_s, M C0_j M^T + Sigma) and the score is linear in the state.
    """

    def __init__(self, data_var, spec: DiffusionSpec):
        self.data_var = np.atleast_1d(np.asarray(data_var, dtype=float))
        self.d = self.data_var.size
        self.spec = spec
        self.k = spec.k
        # initial covariance / mean of the joint row state (x_j, v_0)
        self.init_cov = np.zeros((self.d, self.k, self.k))
        for j in range(self.d):
            self.init_cov[j, 0, 0] = self.data_var[j]
            if self.k > 1:
                self.init_cov[j, 1:, 1:] = spec.aux_init_cov
        self.init_mean = np.tile(
            np.concatenate([[0.0], spec.aux_init_mean]), (self.d, 1))
        self._cache = kernel_mod.KernelCache(spec, kernel_mod.FULL_STATE)

    def refresh(self, spec: DiffusionSpec) -> None:
        """Re-anchor the oracle on an updated process (same data law)."""
        self.__init__(self.data_var, spec)

    @property
    def param_count(self) -> int:
        return 0

    def marginal_moments(self, mean_map: np.ndarray, cov: np.ndarray):
        """Per-row marginal mean (..., d, K) and covariance (..., d, K, K)
        from stacked kernel tensors of shape (..., K, K)."""
        m = mean_map[..., None, :, :]
        lam = m @ self.init_cov @ np.swapaxes(m, -1, -2) + cov[..., None, :, :]
        mu = (m @ self.init_mean[..., :, None])[..., 0]
        return mu, lam

    def score_from_moments(self, y, mu: np.ndarray, lam: np.ndarray):
        """-Lambda^{-1} (y - mu) per row; Var-friendly in y."""
        prec = np.linalg.inv(lam)
        resid = ad.sub(y, mu)
        # row vectors: s = -(y - mu) @ P with symmetric P
        return ad.mul(ad.matmul(ad.reshape(resid, ad.value(resid).shape[:-1]
                                           + (1, self.k)), prec), -1.0)[..., 0, :]

    def __call__(self, y, s):
        ker = self._cache.get(float(s))
        mu, lam = self.marginal_moments(ker.mean_map, ker.cov)
        return self.score_from_moments(y, mu, lam)

    def jacobian(self, y: np.ndarray, s: float) -> np.ndarray:
        ker = self._cache.get(float(s))
        _, lam = self.marginal_moments(ker.mean_map, ker.cov)
        prec = np.linalg.inv(lam)
        blocks = [-prec[j].T for j in range(self.d)]
        out = np.zeros((self.d * self.k, self.d * self.k))
        for j, b in enumerate(blocks):
            sl = slice(j * self.k, (j + 1) * self.k)
            out[sl, sl] = b
        return out

    def div_weighted(self, y: np.ndarray, s: float, weight: np.ndarray) -> float:
        ker = self._cache.get(float(s))
        _, lam = self.marginal_moments(ker.mean_map, ker.cov)
        prec = np.linalg.inv(lam)
        w = np.asarray(weight, dtype=float)
        return float(-sum(np.trace(prec[j] @ w) for j in range(self.d)))


class NoisePredictionScore:
    """Score parameterized through a noise predictor.

    If y_s = mean + L eps, the conditional score is -L^{-T} eps, so a model
    predicting eps induces the score -L^{-T} eps_model(y, s). The Cholesky
    factor comes from the full-state transition kernel at the same time.
    """

    def __init__(self, eps_model, spec: DiffusionSpec):
        self.eps_model = eps_model
        self.spec = spec
        self._cache = kernel_mod.KernelCache(spec, kernel_mod.FULL_STATE)

    @property
    def param_count(self) -> int:
        return getattr(self.eps_model, "param_count", 0)

    def chol_at(self, s: float) -> np.ndarray:
        chol = self._cache.get(float(s)).chol
        if np.abs(np.diag(chol)).min() <= 0.0:
            raise kernel_mod.KernelDegenerateError(
                "singular Cholesky factor in noise-prediction wrap", float(s))
        return chol

    def __call__(self, y, s):
        eps = self.eps_model(y, s)
        chol = self.chol_at(s)
        # row form of -L^{-T} eps: -eps @ L^{-1}
        inv_l = np.linalg.inv(chol)
        return ad.mul(ad.matmul(eps, inv_l), -1.0)
