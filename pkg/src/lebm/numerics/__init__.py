from .adam import AdamState, adam_step
from .nn import (
    Layer,
    flatten_params,
    init_mlp,
    iso_gaussian_logpdf,
    mlp_forward,
    mlp_input_grad,
    param_names,
    param_vars,
    with_params,
    xavier_normal,
)
from .rng import Rng, derive_key, rng_standard_normal
from .tape import NonFiniteError, Tape, TapeError, Var, backward_gradients, ensure_finite

__all__ = [
    "AdamState",
    "Layer",
    "NonFiniteError",
    "Rng",
    "Tape",
    "TapeError",
    "Var",
    "adam_step",
    "backward_gradients",
    "derive_key",
    "ensure_finite",
    "flatten_params",
    "init_mlp",
    "iso_gaussian_logpdf",
    "mlp_forward",
    "mlp_input_grad",
    "param_names",
    "param_vars",
    "rng_standard_normal",
    "with_params",
    "xavier_normal",
]
