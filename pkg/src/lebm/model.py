"""Latent EBM prior, Gaussian generator, and the scores the samplers need.

The prior is ``p_alpha(z) ∝ exp(f_alpha(z)) N(z; 0, I)`` with ``f_alpha`` an
MLP; the generator is ``x = g_beta(z) + eps`` with ``eps ~ N(0, sigma^2 I)``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .numerics import Layer, Rng, Tape, Var, init_mlp, iso_gaussian_logpdf, mlp_forward, mlp_input_grad, with_params
from .numerics.tape import ensure_finite, scale, square, vsum


@dataclass(frozen=True, eq=False)
class EbmPrior:
    layers: tuple[Layer, ...]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.layers[-1].d_out != 1:
            raise ValueError("EBM output layer must have width 1")

    @property
    def latent_dim(self) -> int:
        return self.layers[0].d_in

    @property
    def nef(self) -> int:
        return self.layers[0].d_out if len(self.layers) > 1 else 0


@dataclass(frozen=True, eq=False)
class Generator:
    layers: tuple[Layer, ...]
    sigma: float = 0.3

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")

    @property
    def latent_dim(self) -> int:
        return self.layers[0].d_in

    @property
    def data_dim(self) -> int:
        return self.layers[-1].d_out


@dataclass(frozen=True, eq=False)
class ModelParams:
    alpha: EbmPrior
    beta: Generator

    def __post_init__(self):
        if self.alpha.latent_dim != self.beta.latent_dim:
            raise ValueError(
                f"prior latent dim {self.alpha.latent_dim} != generator latent dim "
                f"{self.beta.latent_dim}"
            )

    @property
    def latent_dim(self) -> int:
        return self.alpha.latent_dim


def init_ebm(
    rng: Rng, latent_dim: int, nef: int = 200, hidden_layers: int = 2, slope: float = 0.2
) -> EbmPrior:
    dims = [latent_dim] + [nef] * hidden_layers + [1]
    return EbmPrior(init_mlp(rng, dims, "leaky_relu", slope, "identity"))


def zero_ebm(latent_dim: int, nef: int = 200, hidden_layers: int = 2, slope: float = 0.2) -> EbmPrior:
    """An EBM with every weight and bias zero, i.e. ``f_alpha ≡ 0``."""
    dims = [latent_dim] + [nef] * hidden_layers + [1]
    layers = [
        Layer(np.zeros((a, b)), np.zeros(b), "identity" if i == len(dims) - 2 else "leaky_relu", slope)
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]))
    ]
    return EbmPrior(layers)


def init_generator(
    rng: Rng,
    latent_dim: int,
    data_dim: int,
    hidden: int = 200,
    hidden_layers: int = 2,
    slope: float = 0.1,
    output_activation: str = "identity",
    sigma: float = 0.3,
) -> Generator:
    dims = [latent_dim] + [hidden] * hidden_layers + [data_dim]
    return Generator(init_mlp(rng, dims, "leaky_relu", slope, output_activation), sigma)


def linear_generator(weight: np.ndarray, bias: np.ndarray, sigma: float) -> Generator:
    """``g(z) = z @ weight + bias`` with no nonlinearity."""
    return Generator([Layer(np.asarray(weight, float), np.asarray(bias, float))], sigma)


def shift_energy(alpha: EbmPrior, c: float) -> EbmPrior:
    """Add ``c`` to the output bias, i.e. ``f_alpha + c``."""
    last = alpha.layers[-1]
    return EbmPrior(alpha.layers[:-1] + (replace(last, bias=last.bias + c),))


def with_layer_params(net, arrays):
    """Copy of an :class:`EbmPrior` or :class:`Generator` with new weight arrays
    (ordered as ``flatten_params``)."""
    layers = with_params(net.layers, arrays)
    if isinstance(net, Generator):
        return Generator(layers, net.sigma)
    return EbmPrior(layers)


# --- tape builders --------------------------------------------------------


def ebm_f_on_tape(tape: Tape, alpha: EbmPrior, z: Var, params: Sequence[Var] | None = None) -> Var:
    out = mlp_forward(alpha.layers, z, tape, params)
    return vsum(out, axis=1)


def gen_loglik_on_tape(
    tape: Tape,
    beta: Generator,
    x: np.ndarray,
    z: Var,
    params: Sequence[Var] | None = None,
) -> Var:
    g = mlp_forward(beta.layers, z, tape, params)
    if g.shape != x.shape:
        raise ValueError(f"data shape {x.shape} does not match generator output {g.shape}")
    var = beta.sigma * beta.sigma
    sq = vsum(square(tape.const(x) - g), axis=1)
    const = -0.5 * x.shape[1] * np.log(2.0 * np.pi * var)
    return scale(sq, -0.5 / var) + const


def _as_rows(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2:
        raise ValueError(f"expected a 2-d row batch, got shape {z.shape}")
    return z


# --- public operations ----------------------------------------------------


def ebm_f(alpha: EbmPrior, z) -> np.ndarray:
    """Negative energy ``f_alpha(z)`` per row."""
    z = _as_rows(z)
    tape = Tape()
    return ebm_f_on_tape(tape, alpha, tape.const(z)).value


def ebm_grad_z(alpha: EbmPrior, z) -> np.ndarray:
    """``∇_z f_alpha(z)`` per row (fused path; matches the tape to rounding)."""
    z = _as_rows(z)
    return mlp_input_grad(alpha.layers, z, np.ones_like)


def ebm_grad_z_tape(alpha: EbmPrior, z) -> np.ndarray:
    z = _as_rows(z)
    tape = Tape()
    zv = tape.var(z)
    (g,) = tape.backward(vsum(ebm_f_on_tape(tape, alpha, zv)), [zv])
    return g


def prior_score(alpha: EbmPrior, z) -> np.ndarray:
    """``∇_z log p_alpha(z) = ∇_z f_alpha(z) - z``."""
    z = _as_rows(z)
    return ensure_finite(ebm_grad_z(alpha, z) - z, "prior score")


def gen_mean(beta: Generator, z) -> np.ndarray:
    z = _as_rows(z)
    tape = Tape()
    return mlp_forward(beta.layers, tape.const(z), tape).value


def gen_loglik(beta: Generator, x, z) -> np.ndarray:
    """Full Gaussian log density ``log N(x; g_beta(z), sigma^2 I)`` per row."""
    x = _as_rows(x)
    g = gen_mean(beta, z)
    if g.shape != x.shape:
        raise ValueError(f"data shape {x.shape} does not match generator output {g.shape}")
    return iso_gaussian_logpdf(x - g, beta.sigma * beta.sigma)


def likelihood_score(beta: Generator, x, z) -> np.ndarray:
    """``∇_z log p_beta(x | z)`` (fused path)."""
    x, z = _as_rows(x), _as_rows(z)
    inv_var = 1.0 / (beta.sigma * beta.sigma)

    def residual(g):
        if g.shape != x.shape:
            raise ValueError(f"data shape {x.shape} does not match generator output {g.shape}")
        return (x - g) * inv_var

    return mlp_input_grad(beta.layers, z, residual)


def likelihood_score_tape(beta: Generator, x, z) -> np.ndarray:
    x, z = _as_rows(x), _as_rows(z)
    tape = Tape()
    zv = tape.var(z)
    (g,) = tape.backward(vsum(gen_loglik_on_tape(tape, beta, x, zv)), [zv])
    return g


def posterior_score(params: ModelParams, x, z) -> np.ndarray:
    """``∇_z log p_theta(z | x)``: prior score plus likelihood score."""
    return ensure_finite(
        prior_score(params.alpha, z) + likelihood_score(params.beta, x, z), "posterior score"
    )


def joint_logdensity_unnorm(params: ModelParams, x, z) -> np.ndarray:
    """``f_alpha(z) + log p0(z) + log p_beta(x | z)``, omitting ``log Z(alpha)``."""
    z = _as_rows(z)
    return ebm_f(params.alpha, z) + iso_gaussian_logpdf(z, 1.0) + gen_loglik(params.beta, x, z)
