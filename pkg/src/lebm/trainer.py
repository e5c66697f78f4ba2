"""Joint learning of the latent EBM prior and the generator.

Each iteration: draw a minibatch with replacement, sample ``z-`` from the
short-run prior and ``z+`` from the short-run posterior (both cold-started
from N(0, I)), then take one Adam ascent step on

    alpha: mean grad f(z+) - mean grad f(z-)
    beta:  mean grad log p_beta(x | z+)

All randomness for iteration ``t`` comes from streams keyed by
``(seed, phase, t[, chain])``, so a run resumed from a checkpoint continues
exactly as an unbroken one would.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .checkpoint import Checkpoint, save_checkpoint
from .config import TrainConfig
from .data import Dataset, batch_indices
from .model import (
    EbmPrior,
    Generator,
    ModelParams,
    ebm_f_on_tape,
    gen_loglik_on_tape,
    gen_mean,
    init_ebm,
    init_generator,
    linear_generator,
    zero_ebm,
)
from .numerics import AdamState, Rng, Tape, adam_step, flatten_params, param_names, param_vars, with_params
from .numerics.tape import vsum
from .sampler import SamplerDivergence, sample_posterior_shortrun, sample_prior_shortrun

log = logging.getLogger(__name__)

METRICS_COLUMNS = (
    "iter",
    "f_pos_mean",
    "f_neg_mean",
    "recon_mse",
    "grad_norm_alpha",
    "grad_norm_beta",
    "wall_ms",
)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainState:
    params: ModelParams
    opt_alpha: AdamState
    opt_beta: AdamState
    iteration: int = 0


@dataclass(frozen=True)
class IterationReport:
    iteration: int
    f_pos_mean: float
    f_neg_mean: float
    recon_mse: float
    grad_norm_alpha: float
    grad_norm_beta: float


# --- construction ---------------------------------------------------------


def build_model(cfg: TrainConfig, data_dim: int) -> ModelParams:
    rng = Rng(cfg.seed, "init")
    if cfg.prior == "gaussian":
        alpha = zero_ebm(cfg.nz, cfg.nef, cfg.ebm_layers, cfg.ebm_slope)
    else:
        alpha = init_ebm(rng, cfg.nz, cfg.nef, cfg.ebm_layers, cfg.ebm_slope)
    if cfg.gen_init == "identity":
        if cfg.gen_layers != 0 or cfg.nz != data_dim:
            raise ValueError("gen_init = identity needs gen_layers = 0 and nz equal to the data dim")
        beta = linear_generator(np.eye(cfg.nz), np.zeros(data_dim), cfg.sigma)
    else:
        beta = init_generator(
            rng,
            cfg.nz,
            data_dim,
            cfg.gen_hidden,
            cfg.gen_layers,
            cfg.gen_slope,
            cfg.gen_output,
            cfg.sigma,
        )
    return ModelParams(alpha, beta)


def init_state(cfg: TrainConfig, data_dim: int) -> TrainState:
    params = build_model(cfg, data_dim)
    adam_kw = dict(beta1=cfg.adam_beta1, beta2=cfg.adam_beta2, eps=cfg.adam_eps)
    return TrainState(
        params,
        AdamState.for_params(flatten_params(params.alpha.layers), cfg.eta0, **adam_kw),
        AdamState.for_params(flatten_params(params.beta.layers), cfg.eta1, **adam_kw),
    )


def state_from_checkpoint(ckpt: Checkpoint) -> TrainState:
    return TrainState(ckpt.params, ckpt.opt_alpha, ckpt.opt_beta, ckpt.iteration)


def state_to_checkpoint(state: TrainState, cfg: TrainConfig) -> Checkpoint:
    return Checkpoint(
        state.params, state.opt_alpha, state.opt_beta, state.iteration, cfg.seed, cfg.to_text()
    )


# --- gradient estimates ---------------------------------------------------


def _mean_f_grad(alpha: EbmPrior, z: np.ndarray) -> list[np.ndarray]:
    tape = Tape()
    pv = param_vars(tape, alpha.layers, requires_grad=True)
    f = ebm_f_on_tape(tape, alpha, tape.const(np.asarray(z, dtype=np.float64)), pv)
    return tape.backward(f.mean(), pv)


def grad_alpha_estimate(alpha: EbmPrior, z_plus: np.ndarray, z_minus: np.ndarray) -> list[np.ndarray]:
    """Positive-phase minus negative-phase mean of ``∇_alpha f_alpha``."""
    if np.shape(z_plus) != np.shape(z_minus):
        raise ValueError(f"z_plus {np.shape(z_plus)} and z_minus {np.shape(z_minus)} differ in shape")
    pos = _mean_f_grad(alpha, z_plus)
    neg = _mean_f_grad(alpha, z_minus)
    return [p - n for p, n in zip(pos, neg)]


def grad_beta_estimate(beta: Generator, x: np.ndarray, z_plus: np.ndarray) -> list[np.ndarray]:
    """Batch mean of ``∇_beta log p_beta(x_i | z_i+)``."""
    x = np.asarray(x, dtype=np.float64)
    z_plus = np.asarray(z_plus, dtype=np.float64)
    if x.shape[0] != z_plus.shape[0]:
        raise ValueError("x and z_plus must have the same number of rows")
    tape = Tape()
    pv = param_vars(tape, beta.layers, requires_grad=True)
    ll = gen_loglik_on_tape(tape, beta, x, tape.const(z_plus), pv)
    return tape.backward(ll.mean(), pv)


def _norm(grads) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


# --- one iteration --------------------------------------------------------


def train_iteration(
    state: TrainState, batch: np.ndarray, cfg: TrainConfig
) -> tuple[TrainState, IterationReport]:
    """Prior sampling, posterior sampling, alpha ascent, beta ascent (in that order)."""
    t = state.iteration
    params = state.params
    m = batch.shape[0]
    frozen_prior = cfg.prior == "gaussian"
    try:
        if frozen_prior:
            z_minus = None
        else:
            z_minus, _ = sample_prior_shortrun(
                params, m, cfg.prior_langevin, Rng.chains(cfg.seed, "prior", t, n=m)
            )
        z_plus, _ = sample_posterior_shortrun(
            params, batch, cfg.posterior_langevin, Rng.chains(cfg.seed, "posterior", t, n=m)
        )
    except SamplerDivergence as exc:
        raise TrainingError(f"iteration {t}: {exc}") from exc

    return apply_updates(state, batch, z_plus, z_minus, frozen_prior)


def apply_updates(
    state: TrainState,
    batch: np.ndarray,
    z_plus: np.ndarray,
    z_minus: np.ndarray | None,
    frozen_prior: bool = False,
) -> tuple[TrainState, IterationReport]:
    """One Adam ascent step for alpha (skipped when ``frozen_prior``) and beta
    given already-sampled ``z+`` and ``z-``; both gradients use the current
    parameters."""
    t = state.iteration
    params = state.params
    alpha, beta = params.alpha, params.beta
    alpha_names = param_names("alpha", alpha.layers)
    beta_names = param_names("beta", beta.layers)

    if frozen_prior:
        f_pos = f_neg = 0.0
        grad_norm_alpha = 0.0
        new_alpha = alpha
    else:
        g_alpha = grad_alpha_estimate(alpha, z_plus, z_minus)
        grad_norm_alpha = _norm(g_alpha)
        tape = Tape()
        f_pos = float(ebm_f_on_tape(tape, alpha, tape.const(z_plus)).value.mean())
        f_neg = float(ebm_f_on_tape(tape, alpha, tape.const(z_minus)).value.mean())
        new_alpha = EbmPrior(
            with_params(
                alpha.layers,
                adam_step(state.opt_alpha, flatten_params(alpha.layers), [-g for g in g_alpha], alpha_names),
            )
        )

    g_beta = grad_beta_estimate(beta, batch, z_plus)
    recon = float(np.mean((gen_mean(beta, z_plus) - batch) ** 2))
    new_beta = Generator(
        with_params(
            beta.layers,
            adam_step(state.opt_beta, flatten_params(beta.layers), [-g for g in g_beta], beta_names),
        ),
        beta.sigma,
    )
    new_state = replace(state, params=ModelParams(new_alpha, new_beta), iteration=t + 1)
    report = IterationReport(t, f_pos, f_neg, recon, grad_norm_alpha, _norm(g_beta))
    return new_state, report


def sample_batch(dataset: Dataset, cfg: TrainConfig, t: int) -> np.ndarray:
    return dataset.items[batch_indices(len(dataset), cfg.batch_size, Rng(cfg.seed, "batch", t))]


# --- outer loop -----------------------------------------------------------


def _format_row(report: IterationReport, wall_ms: float) -> list[str]:
    return [
        str(report.iteration + 1),
        repr(report.f_pos_mean),
        repr(report.f_neg_mean),
        repr(report.recon_mse),
        repr(report.grad_norm_alpha),
        repr(report.grad_norm_beta),
        repr(round(wall_ms, 3)),
    ]


def train_loop(
    cfg: TrainConfig,
    dataset: Dataset,
    out_dir=None,
    state: TrainState | None = None,
    record_wall_time: bool = True,
    callback: Callable[[TrainState, IterationReport], None] | None = None,
) -> tuple[TrainState, list[IterationReport]]:
    """Run iterations ``state.iteration .. cfg.iterations - 1``.

    With ``out_dir`` set, writes ``metrics.csv`` (one row every ``log_every``
    iterations) and ``checkpoint.bin`` (every ``checkpoint_every`` iterations
    and at the end). ``record_wall_time=False`` writes 0 in the ``wall_ms``
    column so reruns give byte-identical metrics.
    """
    if len(dataset) < 1:
        raise ValueError("dataset is empty")
    if cfg.batch_size > len(dataset):
        raise ValueError(f"batch size {cfg.batch_size} exceeds dataset size {len(dataset)}")
    state = state or init_state(cfg, dataset.dim)
    out = Path(out_dir) if out_dir is not None else None
    writer = fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_path = out / "metrics.csv"
        resuming = state.iteration > 0 and metrics_path.exists()
        fh = open(metrics_path, "a" if resuming else "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        if not resuming:
            writer.writerow(METRICS_COLUMNS)

    reports: list[IterationReport] = []
    try:
        tick = time.perf_counter()
        for t in range(state.iteration, cfg.iterations):
            state, report = train_iteration(state, sample_batch(dataset, cfg, t), cfg)
            reports.append(report)
            if callback is not None:
                callback(state, report)
            if (t + 1) % cfg.log_every == 0:
                now = time.perf_counter()
                wall_ms = 1000.0 * (now - tick) if record_wall_time else 0.0
                tick = now
                log.info(
                    "iter %d  f+ %.4f  f- %.4f  mse %.5f",
                    t + 1, report.f_pos_mean, report.f_neg_mean, report.recon_mse,
                )
                if writer is not None:
                    writer.writerow(_format_row(report, wall_ms))
                    fh.flush()
            if out is not None and cfg.checkpoint_every and (t + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(out / "checkpoint.bin", state_to_checkpoint(state, cfg))
        if out is not None:
            save_checkpoint(out / "checkpoint.bin", state_to_checkpoint(state, cfg))
    finally:
        if fh is not None:
            fh.close()
    return state, reports
