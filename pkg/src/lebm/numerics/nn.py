"""Fully connected networks recorded on a :class:`~lebm.numerics.tape.Tape`."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .rng import Rng
from .tape import Tape, Var, ensure_finite, leaky_relu, linear, tanh

ACTIVATIONS = ("leaky_relu", "tanh", "identity")


@dataclass(frozen=True, eq=False)
class Layer:
    """Affine map ``x @ weight + bias`` followed by an activation.

    ``weight`` has shape (d_in, d_out); ``slope`` is only used by leaky_relu.
    """

    weight: np.ndarray
    bias: np.ndarray
    activation: str = "identity"
    slope: float = 0.2

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.activation == "leaky_relu" and not 0.0 < self.slope < 1.0:
            raise ValueError(f"leaky_relu slope must lie in (0, 1), got {self.slope}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ValueError(
                f"layer shapes do not match: weight {self.weight.shape}, bias {self.bias.shape}"
            )

    @property
    def d_in(self) -> int:
        return self.weight.shape[0]

    @property
    def d_out(self) -> int:
        return self.weight.shape[1]


def xavier_normal(rng: Rng, d_in: int, d_out: int) -> np.ndarray:
    std = np.sqrt(2.0 / (d_in + d_out))
    return std * rng.standard_normal((d_in, d_out))


def init_mlp(
    rng: Rng,
    dims: Sequence[int],
    hidden_activation: str = "leaky_relu",
    slope: float = 0.2,
    output_activation: str = "identity",
) -> list[Layer]:
    """Xavier-normal weights and zero biases for a ``dims[0] -> ... -> dims[-1]`` stack."""
    if len(dims) < 2:
        raise ValueError("an MLP needs at least input and output dims")
    layers = []
    for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
        last = i == len(dims) - 2
        layers.append(
            Layer(
                weight=xavier_normal(rng, d_in, d_out),
                bias=np.zeros(d_out),
                activation=output_activation if last else hidden_activation,
                slope=slope,
            )
        )
    return layers


def flatten_params(layers: Sequence[Layer]) -> list[np.ndarray]:
    out = []
    for layer in layers:
        out.extend((layer.weight, layer.bias))
    return out


def with_params(layers: Sequence[Layer], arrays: Sequence[np.ndarray]) -> list[Layer]:
    if len(arrays) != 2 * len(layers):
        raise ValueError(f"expected {2 * len(layers)} arrays, got {len(arrays)}")
    return [
        replace(layer, weight=np.asarray(arrays[2 * i]), bias=np.asarray(arrays[2 * i + 1]))
        for i, layer in enumerate(layers)
    ]


def param_names(prefix: str, layers: Sequence[Layer]) -> list[str]:
    names = []
    for i in range(len(layers)):
        names.extend((f"{prefix}.{i}.weight", f"{prefix}.{i}.bias"))
    return names


def param_vars(tape: Tape, layers: Sequence[Layer], requires_grad: bool) -> list[Var]:
    return [tape.var(a, requires_grad=requires_grad) for a in flatten_params(layers)]


def mlp_forward(
    layers: Sequence[Layer],
    x: Var,
    tape: Tape,
    params: Sequence[Var] | None = None,
) -> Var:
    """Run the stack on a row batch ``x`` (n x d_in), recording on ``tape``.

    Pass ``params`` (from :func:`param_vars`) to differentiate with respect to
    the weights; otherwise the weights are baked into the nodes as constants.
    """
    if params is None:
        params = flatten_params(layers)
    h = x
    for i, layer in enumerate(layers):
        if h.shape[-1] != layer.d_in:
            raise ValueError(
                f"layer {i}: expected input width {layer.d_in}, got {h.shape[-1]}"
            )
        h = linear(h, params[2 * i], params[2 * i + 1])
        if layer.activation == "leaky_relu":
            h = leaky_relu(h, layer.slope)
        elif layer.activation == "tanh":
            h = tanh(h)
    ensure_finite(h.value, "mlp output")
    return h


def mlp_input_grad(
    layers: Sequence[Layer],
    x: np.ndarray,
    out_grad: Callable[[np.ndarray], np.ndarray],
) -> np.ndarray:
    """Vector-Jacobian product with respect to the input of the stack.

    ``out_grad`` maps the network output to the cotangent to pull back. This is
    a fused tape-free path for the Langevin inner loop; the tape is the
    reference it is tested against.
    """
    h = x
    derivs = []
    for i, layer in enumerate(layers):
        if h.shape[-1] != layer.d_in:
            raise ValueError(
                f"layer {i}: expected input width {layer.d_in}, got {h.shape[-1]}"
            )
        a = h @ layer.weight
        a += layer.bias
        if layer.activation == "leaky_relu":
            d = (a > 0).astype(np.float64)
            d *= 1.0 - layer.slope
            d += layer.slope
            h = a * d
        elif layer.activation == "tanh":
            h = np.tanh(a)
            d = 1.0 - h * h
        else:
            h, d = a, None
        derivs.append(d)
    g = out_grad(h)
    for layer, d in zip(reversed(layers), reversed(derivs)):
        if d is not None:
            g = g * d
        if layer.d_out == 1:
            # outer product: broadcasting beats a rank-1 matmul
            g = g * layer.weight[:, 0]
        else:
            g = g @ layer.weight.T
    return ensure_finite(g, "input gradient")


def iso_gaussian_logpdf(v: np.ndarray, variance: float) -> np.ndarray:
    """Row-wise log density of N(0, variance * I) evaluated at the rows of ``v``."""
    if variance <= 0:
        raise ValueError(f"variance must be positive, got {variance}")
    v = np.atleast_2d(np.asarray(v, dtype=np.float64))
    d = v.shape[1]
    return -np.sum(v * v, axis=1) / (2.0 * variance) - 0.5 * d * np.log(2.0 * np.pi * variance)
