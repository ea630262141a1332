"""Evidence lower bound of the multivariate diffusion model.

The bound for one datum x splits into four parts:

    total = l_T + (T - eps) * E_s[integrand(s)] + l_q + likelihood_eps

where l_T is the cross term against the stationary prior, l_q the negative
log-density of the drawn auxiliary initial values, the integrand is the
score-matching term in denoising (dsm) or implicit (ism) form averaged
over stratified times on [eps, T], and likelihood_eps restores a proper
bound below the truncation time via the Gaussian posterior of y_0 given
y_eps.

Two evaluation routes share the same formulas: a vectorized numpy
estimator over large batches, and a tape-friendly single-draw route whose
output differentiates with respect to score parameters and the process
matrices.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import autodiff as ad
from . import kernel as kernel_mod
from .kernel import FULL_STATE, GaussianKernel, KernelDegenerateError
from .process import DiffusionSpec

EXACT_DIV_CAP = 64


@dataclasses.dataclass(frozen=True)
class ElboBreakdown:
    """Batch-mean ELBO parts; total is their exact sum."""

    l_T: float
    l_q: float
    integrand_estimate: float
    likelihood_eps: float
    total: float
    stderr: float

    @staticmethod
    def assemble(l_t, l_q, integrand, like, stderr) -> "ElboBreakdown":
        return ElboBreakdown(l_t, l_q, integrand, like,
                             l_t + integrand + l_q + like, stderr)

    def csv_row(self, seed: int, form: str, n_time: int) -> str:
        vals = [self.l_T, self.l_q, self.integrand_estimate,
                self.likelihood_eps, self.total, self.stderr]
        return ",".join([str(seed), form, str(n_time)]
                        + [repr(float(v)) for v in vals])


CSV_HEADER = "seed,form,n_time,l_T,l_q,integrand,likelihood_eps,total,stderr"


def _weighted_sq(v, g2_mat):
    """sum over rows of v_r^T G v_r, through the dispatch layer."""
    w = ad.matmul(v, g2_mat)
    return ad.asum(ad.mul(v, w))


def drift_trace(spec: DiffusionSpec, s: float) -> float:
    """trace(A(s)): the skew part is traceless against symmetric S."""
    return -spec.sched_d.value(s) * float(np.trace(spec.d_base @ spec.s_mat))


def dsm_integrand(spec: DiffusionSpec, kernel: GaussianKernel, score,
                  y_s: np.ndarray, center: np.ndarray, s: float) -> float:
    """Denoising form: 1/2 |s_q|^2_{g2} - 1/2 |s_th - s_q|^2_{g2} + d tr A."""
    s_q = kernel_mod.score_of_kernel(kernel, y_s, center)
    s_t = ad.value(score(y_s, s))
    g2 = spec.diffusion_sq(s)
    d = y_s.shape[0]
    return float(0.5 * _weighted_sq(s_q, g2)
                 - 0.5 * _weighted_sq(s_t - s_q, g2)
                 + d * drift_trace(spec, s))


def dsm_quadratic_trace(spec: DiffusionSpec, kernel: GaussianKernel,
                        s: float, d: int) -> float:
    """Analytic E|s_q|^2_{g2} = d * trace(g2 Sigma^{-1}), replacing the
    sampled quadratic score term."""
    g2 = spec.diffusion_sq(s)
    return float(d * np.trace(np.linalg.solve(kernel.cov, g2)))


def ism_integrand(spec: DiffusionSpec, score, y_s: np.ndarray,
                  s: float) -> float:
    """Implicit form with exact divergence:
    -1/2 |s_th|^2_{g2} - div(g2 s_th) + d tr A."""
    d, k = y_s.shape
    if d * k > EXACT_DIV_CAP:
        raise ValueError(f"exact divergence capped at {EXACT_DIV_CAP} "
                         f"coordinates, got {d * k}")
    g2 = spec.diffusion_sq(s)
    s_t = ad.value(score(y_s, s))
    div = score.div_weighted(y_s, s, g2)
    return float(-0.5 * _weighted_sq(s_t, g2) - div + d * drift_trace(spec, s))


def ism_integrand_hutchinson(spec: DiffusionSpec, score, y_s: np.ndarray,
                             s: float, n_probe: int, rng) -> tuple:
    """Implicit form with Rademacher-probe divergence; returns the value
    and the probe variance of the divergence estimate."""
    g2 = spec.diffusion_sq(s)
    s_t = ad.value(score(y_s, s))
    estimates = np.zeros(n_probe)
    for p in range(n_probe):
        probe = rng.integers(0, 2, size=y_s.shape) * 2.0 - 1.0
        y_var = ad.Var(y_s)
        weighted = ad.matmul(score(y_var, s), g2)
        contracted = ad.asum(ad.mul(weighted, probe))
        ad.backward(contracted)
        estimates[p] = float(np.sum(probe * y_var.grad))
    div = float(estimates.mean())
    var = float(estimates.var(ddof=1) / n_probe) if n_probe > 1 else 0.0
    d = y_s.shape[0]
    value = float(-0.5 * _weighted_sq(s_t, g2) - div + d * drift_trace(spec, s))
    return value, var


def truncation_likelihood(spec: DiffusionSpec, kernel_eps: GaussianKernel,
                          score, y0: np.ndarray, y_eps: np.ndarray) -> float:
    """log p(y_0 | y_eps) - log q(y_eps | y_0), summed over rows.

    The reverse density is the Gaussian with posterior-mean map
    mu_p = A^{-1} Sigma s_th(y_eps, eps) + A^{-1} y_eps and covariance
    Sigma_p = A^{-1} Sigma A^{-T}, with A the mean map at the truncation
    time.
    """
    a = kernel_eps.mean_map
    if abs(np.linalg.det(a)) < 1e-300:
        raise KernelDegenerateError("singular mean map", kernel_eps.s)
    sigma = kernel_eps.cov
    s_t = ad.value(score(y_eps, kernel_eps.s))
    inv_a = np.linalg.inv(a)
    mu_p = (y_eps + s_t @ sigma) @ inv_a.T
    sigma_p = inv_a @ sigma @ inv_a.T
    post = GaussianKernel(kernel_eps.s, np.eye(spec.k),
                          0.5 * (sigma_p + sigma_p.T),
                          np.linalg.cholesky(0.5 * (sigma_p + sigma_p.T)))
    forward = kernel_mod.log_density(kernel_eps, y_eps, y0)
    reverse = kernel_mod.log_density(post, y0, mu_p)
    return float(reverse - forward)


# ---------------------------------------------------------------------------
# batched estimator
# ---------------------------------------------------------------------------


def _gauss_logpdf_rows(resid: np.ndarray, prec: np.ndarray,
                       logdet_cov: float) -> np.ndarray:
    """Row-summed Gaussian log-density; resid (..., d, K), prec (K, K)."""
    k = prec.shape[0]
    quad = np.einsum("...ri,ij,...rj->...", resid, prec, resid)
    d = resid.shape[-2]
    return -0.5 * (d * k * np.log(2 * np.pi) + d * logdet_cov + quad)


def _draw_per_row(spec: DiffusionSpec, x: np.ndarray, n_time: int, seed: int):
    """Deterministic per-datum random draws from streams keyed (seed, i)."""
    b, d = x.shape
    k = spec.k
    v0 = np.zeros((b, d, k - 1))
    u = np.zeros((b, n_time))
    noise_s = np.zeros((b, n_time, d, k))
    noise_t = np.zeros((b, d, k))
    noise_e = np.zeros((b, d, k))
    aux_chol = (np.linalg.cholesky(spec.aux_init_cov) if k > 1
                else np.zeros((0, 0)))
    for i in range(b):
        rng = np.random.default_rng([seed, i])
        v0[i] = spec.aux_init_mean + rng.standard_normal((d, k - 1)) @ aux_chol.T
        u[i] = rng.random(n_time)
        noise_s[i] = rng.standard_normal((n_time, d, k))
        noise_t[i] = rng.standard_normal((d, k))
        noise_e[i] = rng.standard_normal((d, k))
    return v0, u, noise_s, noise_t, noise_e


def estimate_elbo(spec: DiffusionSpec, score, x: np.ndarray, n_time: int,
                  seed: int, form: str = "dsm",
                  use_trace: bool = False) -> ElboBreakdown:
    """Monte Carlo ELBO over a data batch, reported per datum.

    x is (batch, d). Each datum has its own random stream keyed by
    (seed, index), so the estimate is independent of evaluation order.
    Stratified times: one uniform draw per stratum of [eps, T]. The ism
    form is only available for score fields exposing closed-form marginal
    moments (the Gaussian oracle); dsm works with any score field that
    accepts stacked states and per-element times.
    """
    if form not in ("dsm", "ism"):
        raise ValueError(f"unknown form {form!r}")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    b, d = x.shape
    k = spec.k
    n_time = int(n_time)
    if n_time < 1:
        raise ValueError("n_time must be positive")
    t, eps = spec.horizon, spec.eps

    v0, u, noise_s, noise_t, noise_e = _draw_per_row(spec, x, n_time, seed)
    y0 = np.concatenate([x[:, :, None], v0], axis=2)  # (b, d, k)

    # l_q: closed-form Gaussian negative log-density of the drawn v0
    if k > 1:
        prec_aux = np.linalg.inv(spec.aux_init_cov)
        _, logdet_aux = np.linalg.slogdet(spec.aux_init_cov)
        l_q = -_gauss_logpdf_rows(v0 - spec.aux_init_mean,
                                  prec_aux, logdet_aux)
    else:
        l_q = np.zeros(b)

    # l_T through a draw of y_T
    ker_t = kernel_mod.transition(spec, t, FULL_STATE)
    y_t = y0 @ ker_t.mean_map.T + noise_t @ ker_t.chol.T
    _, logdet_prec = np.linalg.slogdet(spec.s_mat)
    quad_t = np.einsum("bri,ij,brj->b", y_t, spec.s_mat, y_t)
    l_t = -0.5 * (d * k * np.log(2 * np.pi) - d * logdet_prec + quad_t)

    # stratified times and their kernels
    strata = (np.arange(n_time) + u) / n_time
    times = eps + (t - eps) * strata  # (b, n_time)
    try:
        mmap, cov, chol = kernel_mod.transition_batch(spec, times.ravel())
    except KernelDegenerateError:
        raise
    mmap = mmap.reshape(b, n_time, k, k)
    cov = cov.reshape(b, n_time, k, k)
    chol = chol.reshape(b, n_time, k, k)

    resid = np.einsum("bjrl,bjkl->bjrk", noise_s, chol)
    y_s = np.einsum("brl,bjkl->bjrk", y0, mmap) + resid

    prec = np.linalg.inv(cov)
    s_q = -np.einsum("bjrl,bjlk->bjrk", resid, prec)

    bd = np.array([spec.sched_d.value(s) for s in times.ravel()])
    bd = bd.reshape(b, n_time)
    g2_unit = 2.0 * spec.d_base  # g2(s) = bd(s) * g2_unit
    tr_unit = -float(np.trace(spec.d_base @ spec.s_mat))
    tr_a = bd * tr_unit  # trace A(s) per (b, j)

    analytic = hasattr(score, "marginal_moments")
    if analytic:
        mu, lam = score.marginal_moments(mmap, cov)
        lam_prec = np.linalg.inv(lam)
        s_t = -np.einsum("bjrl,bjrlk->bjrk", y_s - mu, lam_prec)
    else:
        if form == "ism":
            raise ValueError("batched ism needs a score with closed-form "
                             "marginal moments")
        s_t = ad.value(score(y_s, times))
    if form == "dsm":
        if use_trace:
            qn = bd * np.einsum("bjkl,bjlk->bj", prec, g2_unit[None, None])
            qn = qn * d
        else:
            qn = bd * np.einsum("bjrk,kl,bjrl->bj", s_q, g2_unit, s_q)
        rn = bd * np.einsum("bjrk,kl,bjrl->bj", s_t - s_q, g2_unit, s_t - s_q)
        integrand = 0.5 * qn - 0.5 * rn + d * tr_a
    else:
        tn = bd * np.einsum("bjrk,kl,bjrl->bj", s_t, g2_unit, s_t)
        div = -bd * np.einsum("bjrkl,lk->bj",
                              lam_prec @ g2_unit[None, None, None], np.eye(k))
        integrand = -0.5 * tn - div + d * tr_a
    integrand_scaled = (t - eps) * integrand.mean(axis=1)  # (b,)

    # truncation likelihood at eps
    ker_e = kernel_mod.transition(spec, eps, FULL_STATE)
    y_e = y0 @ ker_e.mean_map.T + noise_e @ ker_e.chol.T
    s_te = ad.value(score(y_e, eps))
    inv_a = np.linalg.inv(ker_e.mean_map)
    mu_p = (y_e + s_te @ ker_e.cov) @ inv_a.T
    sigma_p = 0.5 * (inv_a @ ker_e.cov @ inv_a.T
                     + (inv_a @ ker_e.cov @ inv_a.T).T)
    _, logdet_p = np.linalg.slogdet(sigma_p)
    like = _gauss_logpdf_rows(y0 - mu_p, np.linalg.inv(sigma_p), logdet_p)
    _, logdet_e = np.linalg.slogdet(ker_e.cov)
    like -= _gauss_logpdf_rows(noise_e @ ker_e.chol.T,
                               np.linalg.inv(ker_e.cov), logdet_e)

    totals = l_t + l_q + integrand_scaled + like
    stderr = float(totals.std(ddof=1) / np.sqrt(b)) if b > 1 else 0.0
    return ElboBreakdown.assemble(
        float(l_t.mean()), float(l_q.mean()), float(integrand_scaled.mean()),
        float(like.mean()), stderr)


# ---------------------------------------------------------------------------
# tape-friendly single-draw route (shared with training)
# ---------------------------------------------------------------------------


def _kernel_tensors_at(spec: DiffusionSpec, q_base, d_base, s: float,
                       sigma0):
    bq = spec.sched_q.integral(s)
    bd = spec.sched_d.integral(s)
    coeff = ad.add(ad.mul(q_base, bq), ad.mul(d_base, bd))
    m_int = ad.mul(ad.matmul(coeff, spec.s_mat), -1.0)
    n_int = ad.mul(d_base, 2.0 * bd)
    return kernel_mod.kernel_tensors(m_int, n_int, sigma0)


def _logdet_from_chol(chol):
    return ad.mul(ad.asum(ad.log(ad.diag_part(chol))), 2.0)


def _gauss_logpdf_var(resid, cov, chol):
    """Row-summed Gaussian log-density with Var-capable covariance."""
    shape = ad.value(resid).shape
    d, k = shape[-2], shape[-1]
    n_rows = d * np.prod(shape[:-2], dtype=int) if len(shape) > 2 else d
    prec = ad.solve(cov, np.eye(k))
    quad = ad.asum(ad.mul(resid, ad.matmul(resid, prec)))
    logdet = _logdet_from_chol(chol)
    const = n_rows * k * np.log(2 * np.pi)
    return ad.mul(ad.add(ad.add(ad.mul(logdet, float(n_rows)), quad), const),
                  -0.5)


def elbo_sample(spec: DiffusionSpec, q_base, d_base, score, x: np.ndarray,
                seed: int, n_time: int = 1, use_trace: bool = False):
    """One stochastic ELBO evaluation, batch-averaged, per datum.

    q_base and d_base may be Var nodes (their gradients then flow through
    the kernels, the reparameterized samples, l_T and the truncation term)
    or plain arrays; the score field may hold Var parameters. Returns
    (total, parts) where parts maps term names to their (possibly Var)
    values. Times are shared across the batch within each stratum.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    b, d = x.shape
    k = spec.k
    t, eps = spec.horizon, spec.eps
    rng = np.random.default_rng(seed)

    if k > 1:
        aux_chol = np.linalg.cholesky(spec.aux_init_cov)
        v0 = spec.aux_init_mean + rng.standard_normal((b, d, k - 1)) @ aux_chol.T
        prec_aux = np.linalg.inv(spec.aux_init_cov)
        _, logdet_aux = np.linalg.slogdet(spec.aux_init_cov)
        l_q = float(-_gauss_logpdf_rows(v0 - spec.aux_init_mean, prec_aux,
                                        logdet_aux).mean())
        y0 = np.concatenate([x[:, :, None], v0], axis=2)
    else:
        l_q = 0.0
        y0 = x[:, :, None]

    sigma0 = np.zeros((k, k))

    # prior cross term through a draw at the horizon
    m_t, cov_t, chol_t = _kernel_tensors_at(spec, q_base, d_base, t, sigma0)
    y_t = ad.add(ad.matmul(y0, ad.transpose(m_t)),
                 ad.matmul(rng.standard_normal((b, d, k)), ad.transpose(chol_t)))
    _, logdet_prec = np.linalg.slogdet(spec.s_mat)
    quad_t = ad.asum(ad.mul(y_t, ad.matmul(y_t, spec.s_mat)))
    l_t = ad.mul(ad.add(ad.mul(quad_t, 1.0 / b),
                        d * k * np.log(2 * np.pi) - d * logdet_prec), -0.5)

    # stratified integrand
    pieces = []
    for j in range(n_time):
        s = eps + (t - eps) * (j + rng.random()) / n_time
        m_s, cov_s, chol_s = _kernel_tensors_at(spec, q_base, d_base, s, sigma0)
        noise = rng.standard_normal((b, d, k))
        shift = ad.matmul(noise, ad.transpose(chol_s))
        y_s = ad.add(ad.matmul(y0, ad.transpose(m_s)), shift)
        inv_cov = ad.solve(cov_s, np.eye(k))
        s_q = ad.mul(ad.matmul(shift, inv_cov), -1.0)
        s_t = score(y_s, s)
        bd_s = spec.sched_d.value(s)
        g2 = ad.mul(d_base, 2.0 * bd_s)
        if use_trace:
            qn = ad.mul(ad.trace(ad.matmul(inv_cov, g2)), float(b * d))
        else:
            qn = _weighted_sq(s_q, g2)
        rn = _weighted_sq(ad.sub(s_t, s_q), g2)
        tr_a = ad.mul(ad.trace(ad.matmul(d_base, spec.s_mat)), -bd_s * d)
        pieces.append(ad.add(ad.mul(ad.sub(qn, rn), 0.5 / b), tr_a))
    acc = pieces[0]
    for p in pieces[1:]:
        acc = ad.add(acc, p)
    integrand = ad.mul(acc, (t - eps) / n_time)

    # truncation term at eps
    m_e, cov_e, chol_e = _kernel_tensors_at(spec, q_base, d_base, eps, sigma0)
    noise_e = rng.standard_normal((b, d, k))
    shift_e = ad.matmul(noise_e, ad.transpose(chol_e))
    y_e = ad.add(ad.matmul(y0, ad.transpose(m_e)), shift_e)
    s_te = score(y_e, eps)
    inv_a = ad.solve(m_e, np.eye(k))
    mu_p = ad.matmul(ad.add(y_e, ad.matmul(s_te, cov_e)), ad.transpose(inv_a))
    sigma_p = ad.matmul(ad.matmul(inv_a, cov_e), ad.transpose(inv_a))
    sigma_p = ad.mul(ad.add(sigma_p, ad.transpose(sigma_p)), 0.5)
    chol_p = ad.cholesky(sigma_p)
    log_rev = _gauss_logpdf_var(ad.sub(y0, mu_p), sigma_p, chol_p)
    log_fwd = _gauss_logpdf_var(shift_e, cov_e, chol_e)
    like = ad.mul(ad.sub(log_rev, log_fwd), 1.0 / b)

    total = ad.add(ad.add(ad.add(l_t, integrand), l_q), like)
    parts = {"l_T": l_t, "l_q": l_q, "integrand": integrand,
             "likelihood_eps": like}
    return total, parts


def dump_csv(rows, path: str = None) -> str:
    text = "\n".join([CSV_HEADER] + list(rows)) + "\n"
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text
