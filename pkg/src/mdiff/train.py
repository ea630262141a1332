"""Joint stochastic optimization of the score model and, optionally, the
process matrices.

Each step draws one stochastic ELBO evaluation through the tape and
ascends it with Adam. The process parameters stay unconstrained: the skew
and Gram maps are part of the differentiated graph, so the induced (Q, D)
pair satisfies its constraints exactly after every update rather than by
projection.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import autodiff as ad
from . import elbo as elbo_mod
from .process import DiffusionSpec, LearnableParams
from .score import AnalyticGaussianScore


class TrainDivergenceError(RuntimeError):
    """Non-finite gradient; carries the first offending ELBO term."""

    def __init__(self, term: str):
        super().__init__(f"non-finite gradient traced to term {term!r}")
        self.term = term


@dataclasses.dataclass
class TrainConfig:
    steps: int = 1000
    batch: int = 128
    lr_theta: float = 1e-3
    lr_phi: float = 1e-3
    learn_inference: bool = False
    seed: int = 0
    eval_every: int = 200
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    n_time: int = 1
    phi_warmup: int = 10
    eval_batch: int = 1024
    eval_n_time: int = 16

    def __post_init__(self):
        if not (np.isfinite(self.lr_theta) and np.isfinite(self.lr_phi)):
            raise ValueError("learning rates must be finite")
        if self.lr_theta < 0 or self.lr_phi < 0:
            raise ValueError("learning rates must be nonnegative")
        if self.steps > 0 and self.eval_every > self.steps:
            raise ValueError("eval_every must not exceed steps")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


class _Moments:
    """Adam first/second moments for one list of parameter arrays."""

    def __init__(self, params):
        self.m = [np.zeros_like(ad.value(p)) for p in params]
        self.v = [np.zeros_like(ad.value(p)) for p in params]

    def step(self, params, grads, lr, t, cfg: TrainConfig):
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            if cfg.optimizer == "sgd":
                out.append(p + lr * g)
                continue
            self.m[i] = cfg.beta1 * self.m[i] + (1 - cfg.beta1) * g
            self.v[i] = cfg.beta2 * self.v[i] + (1 - cfg.beta2) * g * g
            mhat = self.m[i] / (1 - cfg.beta1 ** t)
            vhat = self.v[i] / (1 - cfg.beta2 ** t)
            out.append(p + lr * mhat / (np.sqrt(vhat) + cfg.adam_eps))
        return out


@dataclasses.dataclass
class TrainState:
    spec: DiffusionSpec          # template; q/d blocks refreshed when learned
    score: object
    learnable: LearnableParams = None
    step: int = 0
    history: list = dataclasses.field(default_factory=list)
    evals: list = dataclasses.field(default_factory=list)
    report: dict = None
    _opt_theta: _Moments = None
    _opt_phi: _Moments = None

    def current_spec(self) -> DiffusionSpec:
        if self.learnable is None:
            return self.spec
        return self.learnable.to_spec(self.spec)


def _grad_norm(grads) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def train_step(state: TrainState, batch: np.ndarray,
               config: TrainConfig) -> TrainState:
    """One ascent step on a single stochastic ELBO draw."""
    batch = np.atleast_2d(np.asarray(batch, dtype=float))
    if batch.shape[0] == 0:
        raise ValueError("empty batch")
    spec = state.current_spec()

    theta = getattr(state.score, "params", [])
    theta_vars = [ad.Var(ad.value(p)) for p in theta]
    if theta:
        state.score.set_params(theta_vars)

    learn_phi = config.learn_inference and state.learnable is not None
    if learn_phi:
        lp = state.learnable
        q_var = ad.Var(lp.q_tilde)
        d_var = ad.Var(lp.d_tilde)
        q_base = ad.sub(q_var, ad.transpose(q_var))
        if lp.diagonal_d:
            d_base = ad.diag(ad.mul(d_var, d_var))
        else:
            d_base = ad.matmul(d_var, ad.transpose(d_var))
    else:
        q_base, d_base = spec.q_base, spec.d_base

    if isinstance(state.score, AnalyticGaussianScore):
        state.score.refresh(spec)

    total, parts = elbo_mod.elbo_sample(
        spec, q_base, d_base, state.score, batch,
        seed=[config.seed, state.step], n_time=config.n_time)
    if not np.all(np.isfinite(ad.value(total))):
        raise TrainDivergenceError(_blame_term(parts))
    if isinstance(total, ad.Var):
        ad.backward(total)

    leaves = theta_vars + ([q_var, d_var] if learn_phi else [])
    grads = [leaf.grad if leaf.grad is not None
             else np.zeros_like(leaf.value) for leaf in leaves]
    if any(not np.all(np.isfinite(g)) for g in grads):
        raise TrainDivergenceError(_blame_term(parts))

    t = state.step + 1
    if theta:
        if state._opt_theta is None:
            state._opt_theta = _Moments(theta)
        n = len(theta)
        new_theta = state._opt_theta.step(
            [ad.value(p) for p in theta], grads[:n], config.lr_theta, t, config)
        state.score.set_params(new_theta)
    if learn_phi:
        if state._opt_phi is None:
            state._opt_phi = _Moments([lp.q_tilde, lp.d_tilde])
        ramp = min(1.0, t / max(config.phi_warmup, 1))
        new_q, new_d = state._opt_phi.step(
            [lp.q_tilde, lp.d_tilde], grads[len(theta):],
            config.lr_phi * ramp, t, config)
        lp.q_tilde, lp.d_tilde = new_q, new_d

    state.step = t
    state.history.append({
        "step": t, "elbo": float(ad.value(total)),
        "grad_norm_theta": _grad_norm(grads[:len(theta)]),
        "grad_norm_phi": _grad_norm(grads[len(theta):]),
    })
    return state


def _blame_term(parts) -> str:
    for name, term in parts.items():
        val = ad.value(term)
        if not np.all(np.isfinite(val)):
            return name
        if isinstance(term, ad.Var) and term.grad is not None \
                and not np.all(np.isfinite(term.grad)):
            return name
    return "unknown"


def _evaluate(state: TrainState, held_out: np.ndarray,
              config: TrainConfig, seed: int):
    spec = state.current_spec()
    score = state.score
    if isinstance(score, AnalyticGaussianScore):
        score.refresh(spec)
    n = min(config.eval_batch, held_out.shape[0])
    est = elbo_mod.estimate_elbo(spec, score, held_out[:n],
                                 config.eval_n_time, seed)
    return est


def fit(dataset: np.ndarray, spec: DiffusionSpec, score,
        config: TrainConfig,
        learnable: LearnableParams = None) -> TrainState:
    """Run the training loop with seeded minibatches and held-out evals.

    Returns the final state; ``state.evals`` holds (step, ElboBreakdown)
    pairs on the held-out split, ``state.report`` the best/final summary.
    """
    dataset = np.atleast_2d(np.asarray(dataset, dtype=float))
    if dataset.shape[0] < max(config.batch, 10):
        raise ValueError("dataset smaller than one batch")
    rng = np.random.default_rng(config.seed)
    perm = rng.permutation(dataset.shape[0])
    n_held = max(1, dataset.shape[0] // 10)
    held_out = dataset[perm[:n_held]]
    train_rows = dataset[perm[n_held:]]

    state = TrainState(spec=spec, score=score, learnable=learnable)
    state.evals.append((0, _evaluate(state, held_out, config, config.seed)))
    for step in range(config.steps):
        idx = rng.integers(0, train_rows.shape[0], size=config.batch)
        state = train_step(state, train_rows[idx], config)
        if (step + 1) % config.eval_every == 0 or step + 1 == config.steps:
            state.evals.append(
                (step + 1,
                 _evaluate(state, held_out, config, [config.seed, step + 1])))

    best = max(state.evals, key=lambda e: e[1].total)
    final = state.evals[-1]
    state.report = {
        "best_step": best[0], "best_elbo": best[1].total,
        "best_stderr": best[1].stderr,
        "final_step": final[0], "final_elbo": final[1].total,
        "final_stderr": final[1].stderr,
    }
    return state


def history_csv(state: TrainState) -> str:
    """Training log; eval rows carry the held-out estimate and stderr."""
    lines = ["step,elbo,stderr,grad_norm_theta,grad_norm_phi"]
    evals = dict(state.evals)
    for h in state.history:
        est = evals.get(h["step"])
        lines.append(",".join([
            str(h["step"]),
            repr(float(est.total)) if est else repr(float(h["elbo"])),
            repr(float(est.stderr)) if est else "",
            repr(float(h["grad_norm_theta"])),
            repr(float(h["grad_norm_phi"]))]))
    return "\n".join(lines) + "\n"
