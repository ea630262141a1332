import json

import numpy as np
import pytest

from mdiff import (DiffusionSpec, LearnableParams, Schedule, constant,
                   linear_beta, named_instance)


class TestSchedule:
    def test_constant(self):
        s = constant(2.5)
        assert s.value(0.3) == 2.5
        assert s.integral(0.0) == 0.0
        assert s.integral(2.0) == 5.0

    def test_linear_beta(self):
        s = linear_beta(0.1, 2.1, 1.0)
        assert np.isclose(s.value(0.0), 0.1)
        assert np.isclose(s.value(1.0), 2.1)
        assert np.isclose(s.integral(1.0), 0.5 * (0.1 + 2.1))
        # antiderivative matches numerical quadrature
        grid = np.linspace(0, 0.7, 20001)
        quad = np.trapezoid([s.value(t) for t in grid], grid)
        assert np.isclose(s.integral(0.7), quad, atol=1e-8)

    def test_monotone_integral(self):
        s = linear_beta(0.5, 3.0, 2.0)
        times = np.linspace(0, 2.0, 50)
        vals = [s.integral(t) for t in times]
        assert np.all(np.diff(vals) >= 0)

    def test_rejects_bad_kinds(self):
        with pytest.raises(ValueError):
            Schedule("cubic", (1.0,))
        with pytest.raises(ValueError):
            Schedule("constant", (1.0, 2.0))


class TestSpecInvariants:
    def test_rejects_non_skew_q(self):
        with pytest.raises(ValueError):
            DiffusionSpec(2, np.eye(2), np.eye(2), np.eye(2),
                          constant(1.0), constant(1.0))

    def test_rejects_indefinite_d(self):
        with pytest.raises(ValueError):
            DiffusionSpec(2, np.zeros((2, 2)), np.diag([1.0, -1.0]),
                          np.eye(2), constant(1.0), constant(1.0))

    def test_rejects_bad_eps(self):
        with pytest.raises(ValueError):
            DiffusionSpec(1, np.zeros((1, 1)), np.eye(1), np.eye(1),
                          constant(1.0), constant(1.0), horizon=1.0, eps=1.5)

    def test_rank_deficiency_warns(self):
        with pytest.warns(RuntimeWarning):
            DiffusionSpec(2, np.zeros((2, 2)), np.diag([1.0, 0.0]),
                          np.eye(2), constant(1.0), constant(1.0))

    def test_aux_defaults_stationary_block(self):
        spec = named_instance("cld", {"mass": 4.0})
        assert np.allclose(spec.aux_init_cov, [[4.0]])
        assert np.allclose(spec.aux_init_mean, [0.0])


class TestCoefficients:
    def test_vpsde_drift(self):
        spec = named_instance("vpsde", {"beta": 2.0})
        for s in (0.0, 0.4, 1.0):
            assert np.allclose(spec.drift_matrix(s), [[-1.0]])
        assert np.allclose(spec.diffusion_sq(0.3), [[2.0]])

    def test_cld_drift_example(self):
        spec = named_instance("cld", {"beta": 4.0, "gamma": 1.0, "mass": 4.0})
        assert np.allclose(spec.drift_matrix(0.2),
                           [[0.0, 1.0], [-4.0, -1.0]], rtol=1e-14)

    def test_null_process(self):
        with pytest.warns(RuntimeWarning):
            spec = DiffusionSpec(1, np.zeros((1, 1)), np.zeros((1, 1)),
                                 np.eye(1), constant(1.0), constant(1.0))
        assert np.allclose(spec.drift_matrix(0.5), 0.0)

    def test_alda_diffusion(self):
        xi, length = 1.5, 2.0
        spec = named_instance("alda", {"length": length, "gamma": 1.0,
                                       "xi": xi})
        g2 = spec.diffusion_sq(0.5)
        assert np.allclose(g2, np.diag([0.0, 0.0, 2 * xi / length]))
        assert np.allclose(g2, g2.T)

    def test_time_domain_errors(self):
        spec = named_instance("vpsde")
        with pytest.raises(ValueError):
            spec.drift_matrix(-0.1)
        with pytest.raises(ValueError):
            spec.diffusion_sq(1.5)

    def test_integrals_match_quadrature(self):
        spec = named_instance("cld", {"beta0": 0.2, "beta1": 3.0})
        grid = np.linspace(0, 0.8, 8001)
        quad = np.trapezoid([spec.drift_matrix(t) for t in grid], grid,
                            axis=0)
        assert np.allclose(spec.drift_integral(0.8), quad, atol=1e-7)


class TestNamedInstances:
    def test_vpsde_example(self):
        spec = named_instance("vpsde", {"beta": 2.0})
        assert spec.k == 1
        assert np.allclose(spec.q_base, [[0.0]])
        assert np.allclose(spec.d_base, [[1.0]])
        assert np.allclose(spec.s_mat, [[1.0]])

    def test_cld_example(self):
        spec = named_instance("cld", {"beta": 4.0, "gamma": 1.0, "mass": 4.0})
        assert np.allclose(spec.q_base, [[0.0, -4.0], [4.0, 0.0]])
        assert np.allclose(spec.d_base, np.diag([0.0, 4.0]))
        assert np.allclose(spec.s_mat, np.diag([1.0, 0.25]))

    def test_malda_example(self):
        spec = named_instance("malda", {"length": 1.0, "gamma": 1.0})
        assert np.allclose(np.abs(spec.q_base),
                           [[0, 1, 1], [1, 0, 1], [1, 1, 0]])
        assert np.allclose(spec.d_base, np.diag([0.0, 1.0, 1.0]))
        assert np.allclose(spec.stationary_cov(), np.eye(3))

    def test_alda_stationary_cov(self):
        spec = named_instance("alda", {"length": 2.0, "gamma": 1.0, "xi": 1.0})
        assert np.allclose(spec.stationary_cov(), np.diag([1.0, 0.5, 0.5]))

    def test_unknown_name(self):
        with pytest.raises(ValueError):
            named_instance("ould")

    def test_nonpositive_hyper(self):
        with pytest.raises(ValueError):
            named_instance("vpsde", {"beta": -1.0})
        with pytest.raises(ValueError):
            named_instance("cld", {"mass": 0.0})

    def test_unused_hyper_rejected(self):
        with pytest.raises(ValueError):
            named_instance("vpsde", {"beta": 1.0, "mass": 2.0})

    def test_k1_is_always_vpsde(self):
        # the only 1x1 skew matrix is zero, so any K=1 spec is the scalar
        # variance-preserving process with D(s) = beta(s)/2
        from mdiff import matops
        assert np.array_equal(matops.make_skew(np.array([[7.0]])),
                              np.zeros((1, 1)))
        spec = DiffusionSpec(1, np.zeros((1, 1)), np.eye(1), np.eye(1),
                             linear_beta(0.1, 1.0, 1.0),
                             linear_beta(0.1, 1.0, 1.0))
        for s in (0.1, 0.6):
            beta = 2.0 * spec.sched_d.value(s)
            assert np.allclose(spec.drift_matrix(s), [[-beta / 2.0]])
            assert np.allclose(spec.diffusion_sq(s), [[beta]])


class TestStationaryLogDensity:
    def test_standard_normal_at_zero(self):
        spec = named_instance("vpsde")
        assert np.isclose(spec.stationary_log_density(np.zeros((1, 1))),
                          -0.5 * np.log(2 * np.pi))

    def test_cld_product_density(self):
        spec = named_instance("cld", {"mass": 4.0})
        expected = -0.5 * np.log(2 * np.pi) - 0.5 * np.log(2 * np.pi * 4.0)
        assert np.isclose(spec.stationary_log_density(np.zeros((1, 2))),
                          expected)

    def test_row_additivity(self):
        spec = named_instance("cld")
        row = np.array([[0.3, -0.2]])
        two = np.vstack([row, row])
        assert np.isclose(spec.stationary_log_density(two),
                          2 * spec.stationary_log_density(row))

    def test_normalization_monte_carlo(self):
        # importance draw from a wider Gaussian; integral of exp(logpdf) = 1
        rng = np.random.default_rng(9)
        for name in ("vpsde", "cld", "alda"):
            spec = named_instance(name, {"mass": 2.0} if name == "cld" else {})
            k = spec.k
            scale = 1.6
            draws = scale * rng.standard_normal((100_000, k))
            log_q = (-0.5 * np.sum((draws / scale) ** 2, axis=1)
                     - 0.5 * k * np.log(2 * np.pi * scale ** 2))
            sign, logdet_prec = np.linalg.slogdet(spec.s_mat)
            quad = np.einsum("ni,ij,nj->n", draws, spec.s_mat, draws)
            log_p = -0.5 * (k * np.log(2 * np.pi) - logdet_prec + quad)
            w = np.exp(log_p - log_q)
            est, err = w.mean(), w.std(ddof=1) / np.sqrt(w.size)
            assert abs(est - 1.0) <= 3 * err

    def test_dimension_mismatch(self):
        spec = named_instance("cld")
        with pytest.raises(ValueError):
            spec.stationary_log_density(np.zeros((1, 3)))


class TestSerialization:
    def test_bit_exact_round_trip(self, tmp_path):
        spec = named_instance("cld", {"beta0": 0.1, "beta1": 2.7,
                                      "gamma": 0.3, "mass": 1.7})
        path = tmp_path / "spec.json"
        spec.save(str(path))
        back = DiffusionSpec.load(str(path))
        assert np.array_equal(spec.q_base, back.q_base)
        assert np.array_equal(spec.d_base, back.d_base)
        assert np.array_equal(spec.s_mat, back.s_mat)
        assert spec.sched_q == back.sched_q
        assert spec.sched_d == back.sched_d
        assert spec.horizon == back.horizon and spec.eps == back.eps
        assert np.array_equal(spec.aux_init_cov, back.aux_init_cov)
        # and the serialized text itself round-trips
        assert json.dumps(spec.to_json()) == json.dumps(back.to_json())


class TestLearnableParams:
    def test_induced_spec_valid(self):
        rng = np.random.default_rng(10)
        lp = LearnableParams(rng.normal(size=(2, 2)), rng.normal(size=2))
        template = named_instance("cld")
        spec = lp.to_spec(template)
        assert np.array_equal(spec.q_base, -spec.q_base.T)
        assert np.linalg.eigvalsh(spec.d_base).min() >= -1e-12

    def test_full_d_variant(self):
        rng = np.random.default_rng(11)
        lp = LearnableParams(np.zeros((3, 3)), rng.normal(size=(3, 3)),
                             diagonal_d=False)
        d = lp.d_base()
        assert np.allclose(d, d.T)
        assert np.linalg.eigvalsh(d).min() >= -1e-12

    def test_vpsde_equivalent_embedding(self):
        lp = LearnableParams.vpsde_equivalent(2, beta=2.0)
        template = named_instance("cld")
        spec = lp.to_spec(template)
        assert np.allclose(spec.q_base, 0.0)
        assert np.allclose(spec.d_base, np.eye(2))
