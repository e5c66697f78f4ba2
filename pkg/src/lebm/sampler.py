"""Short-run unadjusted Langevin dynamics in latent space.

Each chain starts from ``p0 = N(0, I)`` and takes exactly ``K`` steps of

    z_{k+1} = z_k + h * score(z_k) + sqrt(2 h) * eps_k

There are two ways to read a step-size value ``s``:

* ``"langevin"``: ``h = s`` (the textbook form above).
* ``"noise_scale"``: ``s`` is the noise multiplier, so the drift step is
  ``s**2 / 2`` and the noise is ``s * eps``. The published short-run
  defaults (0.4 prior, 0.1 posterior) are values of this kind, which is why
  :func:`prior_config` and :func:`posterior_config` use it.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .model import ModelParams, ebm_f, posterior_score, prior_score
from .numerics import Rng

CONVENTIONS = ("langevin", "noise_scale")
DIVERGENCE_LIMIT = 1e6
TRACE_COORD_LIMIT = 8


class SamplerDivergence(FloatingPointError):
    def __init__(self, step: int, chain: int, detail: str):
        super().__init__(f"Langevin chain {chain} diverged at step {step}: {detail}")
        self.step = step
        self.chain = chain


@dataclass(frozen=True)
class LangevinConfig:
    K: int
    s: float
    record_trace: bool = False
    convention: str = "langevin"

    def __post_init__(self):
        if int(self.K) != self.K or self.K < 0:
            raise ValueError(f"K must be a nonnegative integer, got {self.K}")
        if not self.s > 0:
            raise ValueError(f"step size s must be positive, got {self.s}")
        if self.convention not in CONVENTIONS:
            raise ValueError(f"unknown step convention {self.convention!r}")

    @property
    def drift_step(self) -> float:
        return self.s if self.convention == "langevin" else 0.5 * self.s * self.s

    @property
    def noise_scale(self) -> float:
        return float(np.sqrt(2.0 * self.s)) if self.convention == "langevin" else self.s


def prior_config(K: int = 60, s: float = 0.4, convention: str = "noise_scale", **kw) -> LangevinConfig:
    return LangevinConfig(K, s, convention=convention, **kw)


def posterior_config(K: int = 20, s: float = 0.1, convention: str = "noise_scale", **kw) -> LangevinConfig:
    return LangevinConfig(K, s, convention=convention, **kw)


@dataclass
class ChainTrace:
    states: list[np.ndarray] = field(default_factory=list)
    energies: list[np.ndarray] = field(default_factory=list)

    def to_csv(self, path, max_coords: int = TRACE_COORD_LIMIT) -> None:
        """Rows ``step, chain, f_alpha, z_0..z_{d-1}``; coordinates only when d <= max_coords."""
        d = self.states[0].shape[1]
        with_coords = d <= max_coords
        header = ["step", "chain", "f_alpha"]
        if with_coords:
            header += [f"z_{j}" for j in range(d)]
        with open(Path(path), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for step, state in enumerate(self.states):
                energy = self.energies[step] if self.energies else np.full(len(state), np.nan)
                for chain, row in enumerate(state):
                    line = [step, chain, repr(float(energy[chain]))]
                    if with_coords:
                        line += [repr(float(v)) for v in row]
                    writer.writerow(line)

    def energy_profile(self) -> np.ndarray:
        """Per-step (mean, std) of ``f_alpha`` across chains, shape (K+1, 2)."""
        e = np.stack(self.energies)
        return np.column_stack([e.mean(axis=1), e.std(axis=1)])


def sample_p0(rng: Rng, n: int, d: int) -> np.ndarray:
    if n < 1 or d < 1:
        raise ValueError(f"n and d must be >= 1, got n={n}, d={d}")
    return rng.standard_normal((n, d))


def _check_state(z: np.ndarray, step: int) -> None:
    bad = ~np.isfinite(z) | (np.abs(z) > DIVERGENCE_LIMIT)
    if bad.any():
        chain = int(np.argwhere(bad)[0, 0])
        value = z[chain][bad[chain]][0]
        raise SamplerDivergence(step, chain, f"|z| reached {value!r}")


def langevin_run(
    score: Callable[[np.ndarray], np.ndarray],
    z0: np.ndarray,
    cfg: LangevinConfig,
    rng: Rng,
    energy: Callable[[np.ndarray], np.ndarray] | None = None,
) -> tuple[np.ndarray, ChainTrace | None]:
    """Run ``cfg.K`` Langevin steps from ``z0``; ``rng`` supplies fresh noise per step."""
    z = np.array(z0, dtype=np.float64)
    if z.ndim != 2:
        raise ValueError(f"z0 must be a 2-d row batch, got shape {z.shape}")
    trace = ChainTrace() if cfg.record_trace else None
    h, noise = cfg.drift_step, cfg.noise_scale

    def record(state):
        if trace is not None:
            trace.states.append(state)
            if energy is not None:
                trace.energies.append(energy(state))

    record(z)
    for k in range(cfg.K):
        z = z + h * score(z) + noise * rng.standard_normal(z.shape)
        _check_state(z, k + 1)
        record(z)
    return z, trace


def sample_prior_shortrun(
    params: ModelParams, n: int, cfg: LangevinConfig, rng: Rng
) -> tuple[np.ndarray, ChainTrace | None]:
    """Draw ``n`` samples of the short-run prior; one chain per row of ``rng``."""
    alpha = params.alpha
    z0 = sample_p0(rng, n, alpha.latent_dim)
    return langevin_run(
        lambda z: prior_score(alpha, z), z0, cfg, rng, energy=lambda z: ebm_f(alpha, z)
    )


def sample_posterior_shortrun(
    params: ModelParams, x: np.ndarray, cfg: LangevinConfig, rng: Rng
) -> tuple[np.ndarray, ChainTrace | None]:
    """One short-run posterior chain per data row."""
    x = np.asarray(x, dtype=np.float64)
    z0 = sample_p0(rng, x.shape[0], params.latent_dim)
    return langevin_run(
        lambda z: posterior_score(params, x, z),
        z0,
        cfg,
        rng,
        energy=lambda z: ebm_f(params.alpha, z),
    )
