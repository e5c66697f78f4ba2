import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lebm.model import (
    EbmPrior,
    Generator,
    ModelParams,
    ebm_f,
    ebm_grad_z,
    ebm_grad_z_tape,
    gen_loglik,
    gen_mean,
    init_ebm,
    init_generator,
    joint_logdensity_unnorm,
    likelihood_score,
    likelihood_score_tape,
    linear_generator,
    posterior_score,
    prior_score,
    shift_energy,
    zero_ebm,
)
from lebm.numerics import Layer, Rng, iso_gaussian_logpdf
from lebm.oracle import finite_diff_grad, linear_gaussian_posterior, relative_error


def random_model(seed, d=3, D=4, width=8, output="tanh"):
    rng = Rng(seed, "model-test")
    return ModelParams(init_ebm(rng, d, width), init_generator(rng, d, D, width, 2, output_activation=output))


class TestTypes:
    def test_ebm_output_width(self):
        with pytest.raises(ValueError):
            EbmPrior([Layer(np.ones((2, 2)), np.zeros(2))])

    def test_default_architecture(self):
        alpha = init_ebm(Rng(0), 100)
        assert [l.weight.shape for l in alpha.layers] == [(100, 200), (200, 200), (200, 1)]
        assert [l.activation for l in alpha.layers] == ["leaky_relu", "leaky_relu", "identity"]
        assert all(l.slope == 0.2 for l in alpha.layers)

    def test_generator_defaults(self):
        beta = init_generator(Rng(0), 4, 784, output_activation="tanh")
        assert beta.sigma == 0.3
        assert beta.layers[0].slope == 0.1 and beta.layers[-1].activation == "tanh"
        assert beta.data_dim == 784

    def test_xavier_init_and_zero_bias(self):
        alpha = init_ebm(Rng(0), 100)
        w = alpha.layers[1].weight
        assert abs(w.std() - math.sqrt(2.0 / 400)) < 0.002
        assert all(np.all(l.bias == 0) for l in alpha.layers)

    def test_sigma_positive(self):
        with pytest.raises(ValueError):
            Generator([Layer(np.eye(2), np.zeros(2))], sigma=0.0)

    def test_latent_dims_must_match(self):
        with pytest.raises(ValueError):
            ModelParams(zero_ebm(2, 4), linear_generator(np.eye(3), np.zeros(3), 1.0))


class TestEnergy:
    def test_zero_weights(self):
        assert np.array_equal(ebm_f(zero_ebm(3, 5), Rng(0).standard_normal((7, 3))), np.zeros(7))

    def test_linear(self):
        alpha = EbmPrior([Layer(np.array([[2.0]]), np.zeros(1))])
        assert ebm_f(alpha, np.array([[3.0]]))[0] == 6.0

    def test_published_architecture_shape(self):
        alpha = init_ebm(Rng(1), 100)
        assert ebm_f(alpha, Rng(2).standard_normal((16, 100))).shape == (16,)

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            ebm_f(init_ebm(Rng(0), 3, 4), np.ones((2, 4)))


class TestScores:
    def test_zero_energy_prior_score(self):
        z = Rng(0).standard_normal((5, 3))
        assert np.array_equal(prior_score(zero_ebm(3, 4), z), -z)

    def test_linear_energy_prior_score(self):
        alpha = EbmPrior([Layer(np.array([[1.7]]), np.zeros(1))])
        z = Rng(0).standard_normal((5, 1))
        assert np.allclose(prior_score(alpha, z), 1.7 - z, atol=1e-15)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.floats(-1e3, 1e3))
    def test_shift_invariance_is_bitwise(self, seed, c):
        params = random_model(seed)
        shifted = ModelParams(shift_energy(params.alpha, c), params.beta)
        rng = Rng(seed, "z")
        z, x = rng.standard_normal((6, 3)), rng.standard_normal((6, 4))
        assert np.array_equal(prior_score(params.alpha, z), prior_score(shifted.alpha, z))
        assert np.array_equal(posterior_score(params, x, z), posterior_score(shifted, x, z))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000))
    def test_posterior_decomposition(self, seed):
        params = random_model(seed)
        rng = Rng(seed, "decomp")
        z, x = rng.standard_normal((6, 3)), rng.standard_normal((6, 4))
        diff = posterior_score(params, x, z) - prior_score(params.alpha, z)
        assert np.max(np.abs(diff - likelihood_score_tape(params.beta, x, z))) < 1e-12

    @pytest.mark.parametrize("seed", range(5))
    def test_fused_paths_match_tape(self, seed):
        params = random_model(seed)
        rng = Rng(seed, "fused")
        z, x = rng.standard_normal((6, 3)), rng.standard_normal((6, 4))
        assert np.max(np.abs(ebm_grad_z(params.alpha, z) - ebm_grad_z_tape(params.alpha, z))) < 1e-12
        assert np.max(np.abs(likelihood_score(params.beta, x, z) - likelihood_score_tape(params.beta, x, z))) < 1e-12

    def test_linear_gaussian_posterior_score(self):
        params = ModelParams(zero_ebm(2, 4), linear_generator(np.eye(2), np.zeros(2), 1.0))
        z, x = Rng(0).standard_normal((4, 2)), Rng(1).standard_normal((4, 2))
        assert np.allclose(posterior_score(params, x, z), x - 2 * z, atol=1e-14)

    @pytest.mark.parametrize("seed", range(5))
    def test_posterior_score_matches_finite_differences(self, seed):
        params = random_model(seed)
        rng = Rng(seed, "fd")
        z, x = rng.standard_normal((3, 3)), rng.standard_normal((3, 4))

        def log_joint(zz):
            return float(np.sum(ebm_f(params.alpha, zz) - 0.5 * np.sum(zz * zz, axis=1) + gen_loglik(params.beta, x, zz)))

        assert relative_error(posterior_score(params, x, z), finite_diff_grad(log_joint, z)) < 1e-6

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.0, 100.0))
    def test_outputs_finite_for_bounded_latents(self, seed, radius):
        params = random_model(seed, d=4, D=5)
        rng = Rng(seed, "finite")
        z = rng.standard_normal((4, 4))
        z *= radius / np.maximum(np.linalg.norm(z, axis=1, keepdims=True), 1e-12)
        x = rng.standard_normal((4, 5))
        for out in (
            ebm_f(params.alpha, z),
            prior_score(params.alpha, z),
            gen_loglik(params.beta, x, z),
            posterior_score(params, x, z),
            joint_logdensity_unnorm(params, x, z),
        ):
            assert np.all(np.isfinite(out))


class TestLikelihood:
    def test_zero_residual(self):
        beta = init_generator(Rng(0), 2, 5, 8, 2, output_activation="identity", sigma=0.3)
        z = Rng(1).standard_normal((3, 2))
        ll = gen_loglik(beta, gen_mean(beta, z), z)
        assert np.allclose(ll, -2.5 * math.log(2 * math.pi * 0.09), atol=1e-12)

    def test_frozen_value(self):
        beta = linear_generator(np.ones((1, 1)), np.zeros(1), 0.3)
        ll = gen_loglik(beta, np.array([[1.3]]), np.array([[1.0]]))
        assert ll[0] == pytest.approx(-0.5 - 0.5 * math.log(2 * math.pi * 0.09), abs=1e-12)
        assert ll[0] == pytest.approx(-0.21500, abs=5e-5)

    @pytest.mark.parametrize("seed", range(3))
    def test_definition_via_iso_gaussian(self, seed):
        params = random_model(seed)
        rng = Rng(seed, "def")
        z, x = rng.standard_normal((5, 3)), rng.standard_normal((5, 4))
        expected = iso_gaussian_logpdf(x - gen_mean(params.beta, z), 0.09)
        assert np.array_equal(gen_loglik(params.beta, x, z), expected)

    def test_shape_mismatch(self):
        params = random_model(0)
        with pytest.raises(ValueError):
            gen_loglik(params.beta, np.ones((2, 3)), np.ones((2, 3)))


class TestJoint:
    def test_zero_energy_on_manifold(self):
        beta = init_generator(Rng(3), 2, 4, 8, 2, output_activation="identity")
        params = ModelParams(zero_ebm(2, 4), beta)
        z = Rng(4).standard_normal((5, 2))
        expected = iso_gaussian_logpdf(z, 1.0) - 2.0 * math.log(2 * math.pi * 0.09)
        assert np.allclose(joint_logdensity_unnorm(params, gen_mean(beta, z), z), expected, atol=1e-12)

    def test_raising_energy_by_one(self):
        params = random_model(5)
        shifted = ModelParams(shift_energy(params.alpha, 1.0), params.beta)
        rng = Rng(5, "joint")
        z, x = rng.standard_normal((8, 3)), rng.standard_normal((8, 4))
        diff = joint_logdensity_unnorm(shifted, x, z) - joint_logdensity_unnorm(params, x, z)
        assert np.allclose(diff, 1.0, atol=1e-12)

    def test_linear_gaussian_constant_offset(self):
        rng = Rng(0, "lg-joint")
        W, b, sigma = rng.standard_normal((3, 2)), rng.standard_normal(3), 0.5
        params = ModelParams(zero_ebm(2, 4), linear_generator(W.T, b, sigma))
        z, x = rng.standard_normal((100, 2)), rng.standard_normal((100, 3))
        # exact log p(x, z) = log N(z; 0, I) + log N(x; W z + b, sigma^2 I)
        resid = x - z @ W.T - b
        exact = -0.5 * np.sum(z * z, 1) - math.log(2 * math.pi) - 0.5 * np.sum(resid**2, 1) / sigma**2 - 1.5 * math.log(
            2 * math.pi * sigma**2
        )
        offset = joint_logdensity_unnorm(params, x, z) - exact
        assert np.ptp(offset) < 1e-9
