"""Independent references: grid quadrature of the EBM prior, closed-form
Gaussian posteriors, and central finite differences.

None of these touch the autodiff tape or the Langevin sampler, so they can be
used to check both.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import logsumexp

from .model import EbmPrior, ebm_f
from .numerics import Rng

TAIL_TOLERANCE = 1e-6
MAX_GRID_2D = 512


class OracleError(ValueError):
    pass


@dataclass(frozen=True)
class Grid1D:
    """``bins`` equal intervals on ``[lo, hi]`` (``bins + 1`` nodes)."""

    lo: float = -8.0
    hi: float = 8.0
    bins: int = 2048

    def __post_init__(self):
        if not self.hi > self.lo:
            raise OracleError(f"grid needs hi > lo, got [{self.lo}, {self.hi}]")
        if self.bins < 64:
            raise OracleError(f"grid needs at least 64 bins, got {self.bins}")
        if self.lo > -4.0 or self.hi < 4.0:
            raise OracleError("grid must cover at least [-4, 4] (8 standard deviations of p0)")

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.bins + 1)

    @property
    def step(self) -> float:
        return (self.hi - self.lo) / self.bins


def _log_integrand(f: Callable[[np.ndarray], np.ndarray], pts: np.ndarray) -> np.ndarray:
    d = pts.shape[1]
    return f(pts) - 0.5 * np.sum(pts * pts, axis=1) - 0.5 * d * np.log(2.0 * np.pi)


def _energy_fn(alpha) -> Callable[[np.ndarray], np.ndarray]:
    if isinstance(alpha, EbmPrior):
        return lambda z: ebm_f(alpha, z)
    return lambda z: np.asarray(alpha(z), dtype=np.float64).reshape(-1)


def _trapezoid_weights(bins: int, step: float) -> np.ndarray:
    w = np.full(bins + 1, step)
    w[0] = w[-1] = 0.5 * step
    return w


def log_tilted_density_1d(alpha, grid: Grid1D) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and normalized ``log p_alpha`` on a 1-d grid."""
    f = _energy_fn(alpha)
    z = grid.nodes
    logq = _log_integrand(f, z[:, None])
    log_z = logsumexp(logq + np.log(_trapezoid_weights(grid.bins, grid.step)))
    return z, logq - log_z


def grid_log_partition(alpha, grid: Grid1D | None = None, dim: int = 1) -> float:
    """``log E_{p0}[exp(f_alpha(z))]`` by trapezoid quadrature.

    ``alpha`` is an :class:`EbmPrior` or any callable mapping a row batch to
    one value per row. ``dim`` 2 uses the tensor grid (capped at 512 bins per
    axis).
    """
    grid = grid or Grid1D()
    if isinstance(alpha, EbmPrior):
        dim = alpha.latent_dim
    if dim not in (1, 2):
        raise OracleError(f"grid partition is only available for d in {{1, 2}}, got {dim}")
    f = _energy_fn(alpha)
    z = grid.nodes
    w1 = _trapezoid_weights(grid.bins, grid.step)
    if dim == 1:
        pts = z[:, None]
        logw = np.log(w1)
        edge = np.array([0, grid.bins])
    else:
        if grid.bins > MAX_GRID_2D:
            raise OracleError(f"2-d grid capped at {MAX_GRID_2D} bins per axis")
        za, zb = np.meshgrid(z, z, indexing="ij")
        pts = np.column_stack([za.ravel(), zb.ravel()])
        logw = np.log(np.outer(w1, w1).ravel())
        k = grid.bins + 1
        border = np.zeros((k, k), dtype=bool)
        border[[0, -1], :] = True
        border[:, [0, -1]] = True
        edge = np.flatnonzero(border.ravel())
    logq = _log_integrand(f, pts)
    log_z = float(logsumexp(logq + logw))
    # tail mass beyond the grid, bounded by the boundary density over a unit width
    tail = float(np.exp(logsumexp(logq[edge]) - log_z))
    if not np.isfinite(log_z) or tail > TAIL_TOLERANCE:
        raise OracleError(f"grid [{grid.lo}, {grid.hi}] too narrow: tail mass estimate {tail:.3g}")
    return log_z


@dataclass(frozen=True)
class QuadraticTilt:
    """Closed-form energy ``f(z) = -curvature * ||z||^2 / 2``.

    The tilted prior is ``N(0, I / (1 + curvature))``. Usable wherever an
    :class:`EbmPrior` is accepted by the grid oracle and the KL profile.
    """

    curvature: float = 1.0
    latent_dim: int = 1

    def __call__(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        return -0.5 * self.curvature * np.sum(z * z, axis=1)

    def grad(self, z: np.ndarray) -> np.ndarray:
        return -self.curvature * np.asarray(z, dtype=np.float64)


def tilted_gaussian_reference(a: float) -> tuple[float, float]:
    """Exact ``(mean, variance)`` of ``exp(a z) N(z; 0, 1)`` normalized: N(a, 1)."""
    return float(a), 1.0


def linear_gaussian_posterior(
    W: np.ndarray, b: np.ndarray, sigma: float, x: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Posterior of ``z ~ N(0, I)``, ``x = W z + b + N(0, sigma^2 I)``.

    ``W`` is (D, d). Returns the mean (one row per row of ``x``) and the
    shared covariance ``(I + W^T W / sigma^2)^{-1}``.
    """
    W = np.atleast_2d(np.asarray(W, dtype=np.float64))
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    x = np.asarray(x, dtype=np.float64)
    d = W.shape[1]
    precision = np.eye(d) + W.T @ W / sigma**2
    cond = np.linalg.cond(precision)
    if not np.isfinite(cond) or cond > 1e12:
        raise OracleError(f"posterior precision is ill-conditioned (cond = {cond:.3g})")
    cov = np.linalg.inv(precision)
    cov = 0.5 * (cov + cov.T)
    rhs = (np.atleast_2d(x) - b) @ W / sigma**2
    mean = np.linalg.solve(precision, rhs.T).T
    return (mean[0] if x.ndim == 1 else mean), cov


def finite_diff_grad(f: Callable[[np.ndarray], float], point: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences ``(f(p + h e_i) - f(p - h e_i)) / 2h`` for every coordinate."""
    if not h > 0:
        raise ValueError(f"h must be positive, got {h}")
    point = np.array(point, dtype=np.float64)
    grad = np.empty_like(point)
    flat, gflat = point.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(f(point))
        flat[i] = orig - h
        down = float(f(point))
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    """``max|a - b| / max(max|a|, max|b|)``: one scale per tensor, so tiny
    entries of a large gradient do not dominate."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(float(np.max(np.abs(a), initial=0.0)), float(np.max(np.abs(b), initial=0.0)), floor)
    return float(np.max(np.abs(a - b), initial=0.0)) / scale


def gradient_check(seed: int, d: int = 3, data_dim: int = 4, width: int = 8, n: int = 5, h: float = 1e-5) -> float:
    """Worst tape-vs-finite-difference relative error over a random EBM and
    generator: every parameter tensor and the latent input, for both the
    summed energy and the summed generator log-likelihood."""
    from .model import ebm_f_on_tape, gen_loglik, gen_loglik_on_tape, init_ebm, init_generator, with_layer_params
    from .numerics import Tape, flatten_params, param_vars

    rng = Rng(seed, "gradient-check")
    alpha = init_ebm(rng, d, width, 2)
    beta = init_generator(rng, d, data_dim, width, 2, output_activation="tanh")
    # nonzero biases so their gradients are exercised on a generic point
    alpha = with_layer_params(alpha, [p + 0.1 * rng.standard_normal(p.shape) for p in flatten_params(alpha.layers)])
    beta = with_layer_params(beta, [p + 0.1 * rng.standard_normal(p.shape) for p in flatten_params(beta.layers)])
    z = rng.standard_normal((n, d))
    x = 0.5 * rng.standard_normal((n, data_dim))

    worst = 0.0
    for net, total in (
        (alpha, lambda net, zz: float(np.sum(ebm_f(net, zz)))),
        (beta, lambda net, zz: float(np.sum(gen_loglik(net, x, zz)))),
    ):
        tape = Tape()
        pv = param_vars(tape, net.layers, requires_grad=True)
        zv = tape.var(z)
        if net is alpha:
            root = ebm_f_on_tape(tape, net, zv, pv).sum()
        else:
            root = gen_loglik_on_tape(tape, net, x, zv, pv).sum()
        grads = tape.backward(root, pv + [zv])
        arrays = flatten_params(net.layers)
        for i, g in enumerate(grads[:-1]):
            def as_fn(p, i=i):
                params = list(arrays)
                params[i] = p
                return total(with_layer_params(net, params), z)

            worst = max(worst, relative_error(g, finite_diff_grad(as_fn, arrays[i], h)))
        worst = max(worst, relative_error(grads[-1], finite_diff_grad(lambda zz: total(net, zz), z, h)))
    return worst
