"""Diagnostics: reconstruction error, anomaly scores and AUPRC, estimating-
equation residuals, and the short-run KL profile."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .model import ModelParams, gen_mean, joint_logdensity_unnorm, prior_score
from .numerics import Rng
from .oracle import Grid1D, QuadraticTilt, log_tilted_density_1d
from .sampler import LangevinConfig, langevin_run, sample_p0, sample_posterior_shortrun, sample_prior_shortrun
from .trainer import _mean_f_grad, grad_beta_estimate


class SparseHistogramWarning(RuntimeWarning):
    """A histogram bin is empty where the target still has visible mass."""


@dataclass(frozen=True)
class AnomalyResult:
    scores: np.ndarray
    labels: np.ndarray
    auprc: float


def mse(x_hat: np.ndarray, x: np.ndarray) -> float:
    """Mean over items of the per-dimension mean squared error."""
    diff = np.asarray(x_hat, dtype=np.float64) - np.asarray(x, dtype=np.float64)
    return float(np.mean(np.mean(diff * diff, axis=1)))


def reconstruct(
    params: ModelParams, x: np.ndarray, cfg: LangevinConfig, rng: Rng | None = None
) -> tuple[np.ndarray, float]:
    """Posterior short-run inference followed by decoding."""
    x = np.asarray(x, dtype=np.float64)
    rng = rng or Rng.chains(0, "reconstruct", n=x.shape[0])
    z_plus, _ = sample_posterior_shortrun(params, x, cfg, rng)
    x_hat = gen_mean(params.beta, z_plus)
    return x_hat, mse(x_hat, x)


def anomaly_score(
    params: ModelParams,
    x: np.ndarray,
    cfg: LangevinConfig,
    n_chains: int = 8,
    rng: Rng | None = None,
    chunk: int = 4096,
) -> np.ndarray:
    """Average of ``log p_theta(x, z)`` (unnormalized) over posterior chains.

    Chains for item ``i`` are rows ``i * n_chains .. (i + 1) * n_chains - 1`` of
    ``rng``; by default their streams are keyed by item and chain index.
    """
    if n_chains < 1:
        raise ValueError(f"n_chains must be >= 1, got {n_chains}")
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    rng = rng or Rng.chains(0, "anomaly", n=n * n_chains)
    if rng.n_streams != n * n_chains:
        raise ValueError(f"rng must carry {n * n_chains} streams, has {rng.n_streams}")
    reps = np.repeat(x, n_chains, axis=0)
    joint = np.empty(n * n_chains)
    for start in range(0, n * n_chains, chunk):
        stop = min(start + chunk, n * n_chains)
        sub = Rng(keys=rng.keys[start:stop], counter=rng.counter)
        z, _ = sample_posterior_shortrun(params, reps[start:stop], cfg, sub)
        joint[start:stop] = joint_logdensity_unnorm(params, reps[start:stop], z)
    return joint.reshape(n, n_chains).mean(axis=1)


def _pr_points(scores: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Precision and recall at every distinct threshold, anomalies = low score."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in shape")
    if not set(np.unique(labels)) <= {0, 1}:
        raise ValueError("labels must be 0 (normal) or 1 (anomaly)")
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == labels.size:
        raise ValueError("AUPRC needs both normal and anomalous items")
    order = np.argsort(scores, kind="mergesort")
    s, y = scores[order], labels[order]
    # close a threshold group only where the score changes, so ties move together
    last_of_group = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp = np.cumsum(y)[last_of_group]
    flagged = last_of_group + 1
    return tp / flagged, tp / n_pos


def auprc(scores, labels) -> float:
    """Step-wise area under the precision-recall curve.

    ``sum_k (R_k - R_{k-1}) P_k`` over distinct thresholds, sweeping from the
    lowest score upward (precision is held constant across each recall step).
    """
    precision, recall = _pr_points(np.asarray(scores), np.asarray(labels))
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def pr_curve(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    precision, recall = _pr_points(np.asarray(scores), np.asarray(labels))
    return np.r_[0.0, recall], np.r_[1.0, precision]


def write_pr_curve(path, scores, labels) -> None:
    recall, precision = pr_curve(scores, labels)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["recall", "precision"])
        writer.writerows((repr(float(r)), repr(float(p))) for r, p in zip(recall, precision))


def anomaly_detect(
    params: ModelParams, x: np.ndarray, labels: np.ndarray, cfg: LangevinConfig, n_chains: int = 8, rng=None
) -> AnomalyResult:
    scores = anomaly_score(params, x, cfg, n_chains, rng)
    return AnomalyResult(scores, np.asarray(labels), auprc(scores, labels))


def _chunks(n: int, size: int):
    for start in range(0, n, size):
        yield start, min(start + size, n)


def eq_residual_vectors(
    params: ModelParams,
    x: np.ndarray,
    prior_cfg: LangevinConfig,
    posterior_cfg: LangevinConfig,
    n_mc: int = 32,
    seed: int = 0,
    chunk: int = 8192,
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Monte Carlo estimating-equation residuals, one array per parameter.

    alpha: mean over items and ``n_mc`` posterior chains each of
    ``∇_alpha f(z+)`` minus the mean over as many prior chains of
    ``∇_alpha f(z-)``. beta: mean over items and chains of
    ``∇_beta log p_beta(x | z+)``.
    """
    if n_mc < 1:
        raise ValueError(f"n_mc must be >= 1, got {n_mc}")
    x = np.asarray(x, dtype=np.float64)
    total = x.shape[0] * n_mc
    reps = np.repeat(x, n_mc, axis=0)
    post_keys = Rng.chains(seed, "residual-posterior", n=total).keys
    prior_keys = Rng.chains(seed, "residual-prior", n=total).keys

    def accumulate(acc, grads, weight):
        grads = [weight * g for g in grads]
        return grads if acc is None else [a + g for a, g in zip(acc, grads)]

    pos = neg = gb = None
    for start, stop in _chunks(total, chunk):
        w = (stop - start) / total
        z_plus, _ = sample_posterior_shortrun(params, reps[start:stop], posterior_cfg, Rng(keys=post_keys[start:stop]))
        pos = accumulate(pos, _mean_f_grad(params.alpha, z_plus), w)
        gb = accumulate(gb, grad_beta_estimate(params.beta, reps[start:stop], z_plus), w)
        z_minus, _ = sample_prior_shortrun(params, stop - start, prior_cfg, Rng(keys=prior_keys[start:stop]))
        neg = accumulate(neg, _mean_f_grad(params.alpha, z_minus), w)
    return [p - q for p, q in zip(pos, neg)], gb


def _norm(arrays) -> float:
    return float(np.sqrt(sum(float(np.sum(a * a)) for a in arrays)))


def eq_residual(
    params: ModelParams,
    x: np.ndarray,
    prior_cfg: LangevinConfig,
    posterior_cfg: LangevinConfig,
    n_mc: int = 32,
    seed: int = 0,
    chunk: int = 8192,
) -> tuple[float, float]:
    """``(||delta_alpha||_2, ||delta_beta||_2)`` over a dataset; see :func:`eq_residual_vectors`."""
    d_alpha, d_beta = eq_residual_vectors(params, x, prior_cfg, posterior_cfg, n_mc, seed, chunk)
    return _norm(d_alpha), _norm(d_beta)


def _bin_masses(alpha, grid: Grid1D, bins: int, sub: int = 16) -> np.ndarray:
    """Target probability per histogram bin from a fine trapezoid grid."""
    fine = Grid1D(grid.lo, grid.hi, bins * sub)
    z, logp = log_tilted_density_1d(alpha, fine)
    dens = np.exp(logp)
    seg = 0.5 * (dens[:-1] + dens[1:]) * fine.step
    masses = seg.reshape(bins, sub).sum(axis=1)
    return masses / masses.sum()


def kl_profile(
    alpha,
    K_list: Sequence[int],
    s: float,
    n_samples: int = 100_000,
    grid: Grid1D | None = None,
    bins: int = 256,
    seed: int = 0,
    convention: str = "langevin",
) -> list[tuple[int, float]]:
    """Plug-in ``KL(p~_K || p_alpha)`` from histograms of 1-d short-run chains.

    ``alpha`` is a 1-d :class:`EbmPrior` or a :class:`QuadraticTilt`.
    One set of ``n_samples`` chains runs to ``max(K_list)``; the state at each
    requested K is histogrammed into ``bins`` equal bins over the grid range.
    """
    grid = grid or Grid1D(-8.0, 8.0, 2048)
    if alpha.latent_dim != 1:
        raise ValueError("kl_profile needs a 1-d latent space")
    K_sorted = sorted(set(int(k) for k in K_list))
    cfg = LangevinConfig(max(K_sorted), s, record_trace=True, convention=convention)
    rng = Rng(seed, "kl-profile")
    z0 = sample_p0(rng, n_samples, 1)
    if isinstance(alpha, QuadraticTilt):
        score = lambda z: alpha.grad(z) - z  # noqa: E731
    else:
        score = lambda z: prior_score(alpha, z)  # noqa: E731
    _, trace = langevin_run(score, z0, cfg, rng)
    target = _bin_masses(alpha, grid, bins)
    edges = np.linspace(grid.lo, grid.hi, bins + 1)
    out = []
    for K in K_sorted:
        counts, _ = np.histogram(trace.states[K][:, 0], bins=edges)
        p_hat = counts / n_samples
        if np.any((counts == 0) & (target > 1e-6)):
            warnings.warn(
                f"K={K}: empty histogram bins where the target mass exceeds 1e-6; "
                "consider wider bins or more samples",
                SparseHistogramWarning,
                stacklevel=2,
            )
        nz = p_hat > 0
        kl = float(np.sum(p_hat[nz] * (np.log(p_hat[nz]) - np.log(np.maximum(target[nz], 1e-300)))))
        out.append((K, kl))
    return [(k, v) for k, v in out if k in set(int(k) for k in K_list)]


def moment_summary(z: np.ndarray) -> dict[str, np.ndarray]:
    z = np.asarray(z, dtype=np.float64)
    return {"mean": z.mean(axis=0), "var": z.var(axis=0)}


def mode_occupancy(samples: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Fraction of samples whose nearest center is each mode."""
    d2 = ((samples[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    nearest = np.argmin(d2, axis=1)
    return np.bincount(nearest, minlength=len(centers)) / len(samples)
