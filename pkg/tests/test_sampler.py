import os

import numpy as np
import pytest

from mdiff import (AnalyticGaussianScore, DiffusionSpec, DivergenceError,
                   constant, denoise, generate, named_instance,
                   reverse_sde_step)
from mdiff import autodiff as ad
from mdiff import kernel as K
from mdiff import sampler as sampler_mod


class ZeroScore:
    def __call__(self, y, s):
        return np.zeros_like(ad.value(y))


class TestReverseStep:
    def test_rejects_bad_dt(self):
        spec = named_instance("vpsde")
        with pytest.raises(ValueError):
            reverse_sde_step(spec, ZeroScore(), np.zeros((1, 1)), 0.1, 0.0,
                             np.zeros((1, 1)))

    def test_pure_rotation_conserves_quadratic_form(self):
        # zero diffusion, skew drift: u S u^T is invariant of the flow, so
        # its Euler drift is second order in dt
        spec = DiffusionSpec(2, np.array([[0.0, -1.0], [1.0, 0.0]]),
                             np.zeros((2, 2)), np.eye(2), constant(1.0),
                             constant(1.0))
        u = np.array([[0.8, -0.5]])
        q0 = (u @ spec.s_mat @ u.T).item()
        drifts = []
        for dt in (1e-2, 5e-3):
            out = reverse_sde_step(spec, ZeroScore(), u, 0.3, dt,
                                   np.zeros_like(u))
            drifts.append(abs((out @ spec.s_mat @ out.T).item() - q0))
        assert drifts[0] / drifts[1] == pytest.approx(4.0, rel=0.05)

    def test_euler_first_order_against_exact_linear_flow(self):
        # unit data + VPSDE(beta = 2): score(u) = -u, A = -1, g2 = 2, so the
        # noiseless reverse flow is du/dt = -u with solution u0 e^{-t}
        spec = named_instance("vpsde", {"beta": 2.0})
        score = AnalyticGaussianScore([1.0], spec)
        t_end = spec.horizon - spec.eps
        u0 = np.array([[1.3]])
        exact = u0 * np.exp(-t_end)
        errs = []
        for steps in (64, 128):
            u = u0.copy()
            dt = t_end / steps
            for j in range(steps):
                u = reverse_sde_step(spec, score, u, j * dt, dt,
                                     np.zeros_like(u))
            errs.append(float(np.abs(u - exact).max()))
        assert errs[0] / errs[1] == pytest.approx(2.0, rel=0.1)

    @pytest.mark.filterwarnings("ignore:overflow")
    def test_divergence_error(self):
        spec = named_instance("vpsde")
        huge = lambda y, s: np.full_like(ad.value(y), 1e308)
        with pytest.raises(DivergenceError):
            reverse_sde_step(spec, huge, np.ones((1, 1)), 0.1, 0.5,
                             np.zeros((1, 1)))


class TestGenerate:
    def test_validation_and_empty(self):
        spec = named_instance("vpsde")
        with pytest.raises(ValueError):
            generate(spec, ZeroScore(), 4, 1, 0, seed=0)
        z, path = generate(spec, ZeroScore(), 0, 3, 10, seed=0,
                           return_path=True)
        assert z.shape == (0, 3)
        assert path.states == []

    def test_single_step_matches_manual_formula(self):
        spec = named_instance("vpsde", {"beta": 2.0})
        score = AnalyticGaussianScore([1.0], spec)
        seed, n, d = 3, 5, 2
        z, _ = generate(spec, score, n, d, 1, seed=seed)
        t_end = spec.horizon - spec.eps
        prior_chol = np.linalg.cholesky(spec.stationary_cov())
        for i in range(n):
            rng = np.random.default_rng([seed, i])
            u0 = rng.standard_normal((d, 1)) @ prior_chol.T
            eps = rng.standard_normal((1, d, 1))[0]
            s = spec.horizon
            s_t = ad.value(score(u0, s))
            drift = (s_t @ spec.diffusion_sq(s).T
                     - u0 @ spec.drift_matrix(s).T)
            u1 = (u0 + drift * t_end
                  + np.sqrt(t_end) * eps * np.sqrt(spec.diffusion_sq(s)[0, 0]))
            assert np.allclose(z[i], u1[:, 0], atol=1e-12)

    def test_stationary_self_consistency(self):
        # exact score for unit Gaussian data: terminal draw must be ~N(0, 1)
        spec = named_instance("vpsde", {"beta": 2.0})
        score = AnalyticGaussianScore([1.0], spec)
        z, _ = generate(spec, score, 4000, 1, 200, seed=4)
        assert abs(z.mean()) < 0.08
        assert abs(z.var() - 1.0) < 0.12

    @pytest.mark.parametrize("name", ["vpsde", "cld", "alda", "malda"])
    def test_named_instance_moments(self, name):
        spec = named_instance(name)
        score = AnalyticGaussianScore([1.0], spec)
        z, _ = generate(spec, score, 2000, 1, 150, seed=5)
        assert abs(z.mean()) < 0.12, name
        assert abs(z.var() - 1.0) < 0.2, name

    def test_path_snapshots(self):
        spec = named_instance("cld")
        score = AnalyticGaussianScore([1.0], spec)
        z, path = generate(spec, score, 3, 2, 20, seed=6, return_path=True)
        assert len(path.states) == 21
        assert path.grid[0] == 0.0
        assert np.isclose(path.grid[-1], spec.horizon - spec.eps)
        assert np.array_equal(path.terminal_z, z)

    def test_thread_fanout_identical(self):
        spec = named_instance("cld")
        score = AnalyticGaussianScore([1.0], spec)
        base, _ = generate(spec, score, 16, 1, 30, seed=7)
        os.environ["MDM_THREADS"] = "4"
        try:
            fan, _ = generate(spec, score, 16, 1, 30, seed=7)
        finally:
            del os.environ["MDM_THREADS"]
        assert np.array_equal(base, fan)

    def test_seed_streams_are_per_sample(self):
        spec = named_instance("vpsde")
        score = AnalyticGaussianScore([1.0], spec)
        a, _ = generate(spec, score, 4, 1, 10, seed=8)
        b, _ = generate(spec, score, 8, 1, 10, seed=8)
        assert np.array_equal(a, b[:4])


class TestDenoise:
    def test_small_truncation_small_correction(self):
        spec = named_instance("vpsde", {"beta": 2.0, "eps": 1e-3})
        score = AnalyticGaussianScore([1.0], spec)
        u = np.random.default_rng(9).normal(size=(6, 1, 1))
        out = denoise(spec, score, u)
        assert np.abs(out - u).max() < 5e-3

    def test_matches_posterior_mean_formula(self):
        spec = named_instance("cld")
        score = AnalyticGaussianScore([1.0], spec)
        ker = K.transition(spec, spec.eps)
        u = np.random.default_rng(10).normal(size=(3, 2))
        s_t = ad.value(score(u, spec.eps))
        expect = (u + s_t @ ker.cov) @ np.linalg.inv(ker.mean_map).T
        assert np.allclose(denoise(spec, score, u), expect, atol=1e-12)

    def test_generate_final_denoise_runs(self):
        spec = named_instance("cld")
        score = AnalyticGaussianScore([1.0], spec)
        z, _ = generate(spec, score, 8, 1, 20, seed=11, final_denoise=True)
        assert np.all(np.isfinite(z))


class TestDump:
    def test_csv_round_trip(self, tmp_path):
        z = np.array([[0.1, -1 / 3], [2.0, 5e-17]])
        path = tmp_path / "samples.csv"
        text = sampler_mod.dump_csv(z, str(path))
        back = np.array([[float(v) for v in line.split(",")]
                         for line in text.strip().splitlines()])
        assert np.array_equal(back, z)
        assert path.read_text() == text
