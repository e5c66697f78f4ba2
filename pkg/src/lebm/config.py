"""Training configuration and its plain-text ``key = value`` file format.

Keys are case-sensitive; unknown keys, duplicates, unparsable values and
violated invariants are all hard errors naming the key and line. Missing keys
take the published defaults (short-run K0=60, s0=0.4, K1=20, s1=0.1 in the
noise-scale convention; sigma=0.3; Adam lr 2e-5 / 1e-4 with betas
(0.5, 0.999); latent dim 100 in image mode).
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Iterable, Mapping

from .sampler import LangevinConfig


class ConfigError(ValueError):
    pass


_CHOICES = {
    "mode": ("image", "toy"),
    "dataset": ("idx", "ring", "tilted"),
    "gen_output": ("tanh", "identity"),
    "gen_init": ("xavier", "identity"),
    "prior": ("ebm", "gaussian"),
    "step_convention": ("noise_scale", "langevin"),
}

# keys whose default depends on ``mode``
_MODE_DEFAULTS = {
    "nz": {"image": 100, "toy": 2},
    "gen_output": {"image": "tanh", "toy": "identity"},
    "dataset": {"image": "idx", "toy": "ring"},
}


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "image"
    dataset: str = "idx"
    idx_images: str = ""
    idx_labels: str = ""
    n_train: int = 0
    holdout_digit: int = -1
    test_fraction: float = 0.2
    n_data: int = 2000
    ring_modes: int = 8
    ring_radius: float = 2.0
    ring_noise: float = 0.1
    tilt_mean: float = 2.0
    nz: int = 100
    nef: int = 200
    ebm_layers: int = 2
    ebm_slope: float = 0.2
    gen_hidden: int = 200
    gen_layers: int = 2
    gen_slope: float = 0.1
    gen_output: str = "tanh"
    gen_init: str = "xavier"
    prior: str = "ebm"
    sigma: float = 0.3
    K0: int = 60
    s0: float = 0.4
    K1: int = 20
    s1: float = 0.1
    step_convention: str = "noise_scale"
    eta0: float = 2e-5
    eta1: float = 1e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 100
    iterations: int = 70000
    seed: int = 0
    log_every: int = 100
    checkpoint_every: int = 0

    def __post_init__(self):
        for key, allowed in _CHOICES.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(f"{key}: must be one of {allowed}, got {getattr(self, key)!r}")
        checks = [
            ("K0", self.K0 >= 0, "K >= 0"),
            ("K1", self.K1 >= 0, "K >= 0"),
            ("s0", self.s0 > 0, "s > 0"),
            ("s1", self.s1 > 0, "s > 0"),
            ("sigma", self.sigma > 0, "sigma > 0"),
            ("eta0", self.eta0 >= 0, "eta >= 0"),
            ("eta1", self.eta1 >= 0, "eta >= 0"),
            ("iterations", self.iterations >= 1, "T >= 1"),
            ("batch_size", self.batch_size >= 1, "m >= 1"),
            ("nz", self.nz >= 1, "nz >= 1"),
            ("nef", self.nef >= 1, "nef >= 1"),
            ("gen_hidden", self.gen_hidden >= 1, "gen_hidden >= 1"),
            ("ebm_layers", self.ebm_layers >= 0, "ebm_layers >= 0"),
            ("gen_layers", self.gen_layers >= 0, "gen_layers >= 0"),
            ("ebm_slope", 0 < self.ebm_slope < 1, "0 < slope < 1"),
            ("gen_slope", 0 < self.gen_slope < 1, "0 < slope < 1"),
            ("adam_beta1", 0 <= self.adam_beta1 < 1, "0 <= beta1 < 1"),
            ("adam_beta2", 0 <= self.adam_beta2 < 1, "0 <= beta2 < 1"),
            ("adam_eps", self.adam_eps > 0, "eps > 0"),
            ("test_fraction", 0 < self.test_fraction < 1, "0 < test_fraction < 1"),
            ("n_data", self.n_data >= 1, "n_data >= 1"),
            ("n_train", self.n_train >= 0, "n_train >= 0"),
            ("ring_modes", self.ring_modes >= 1, "ring_modes >= 1"),
            ("log_every", self.log_every >= 1, "log_every >= 1"),
            ("checkpoint_every", self.checkpoint_every >= 0, "checkpoint_every >= 0"),
            ("seed", self.seed >= 0, "seed >= 0"),
        ]
        for key, ok, rule in checks:
            if not ok:
                raise ConfigError(f"{key}: violates invariant {rule} (got {getattr(self, key)!r})")

    @property
    def prior_langevin(self) -> LangevinConfig:
        return LangevinConfig(self.K0, self.s0, convention=self.step_convention)

    @property
    def posterior_langevin(self) -> LangevinConfig:
        return LangevinConfig(self.K1, self.s1, convention=self.step_convention)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    def with_overrides(self, **kw) -> "TrainConfig":
        return replace(self, **kw)


_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _format(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _convert(key: str, raw: str, where: str):
    kind = _TYPES[key]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {key} = {raw!r} as {kind}") from None
    return raw


def _parse_lines(lines: Iterable[tuple[str, str]], values: dict, origins: dict) -> None:
    for where, line in lines:
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{where}: expected 'key = value', got {text!r}")
        key, raw = (part.strip() for part in text.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"{where}: unknown key {key!r}")
        if where.startswith("line") and key in origins:
            raise ConfigError(f"{where}: duplicate key {key!r} (first set at {origins[key]})")
        values[key] = raw
        origins[key] = where


def parse_config(
    path=None,
    overrides: Iterable[str] = (),
    env: Mapping[str, str] | None = None,
) -> TrainConfig:
    """Read a config file, apply ``key=value`` overrides, fill defaults.

    ``LEBM_SEED`` in ``env`` supplies the seed when neither the file nor an
    override sets it.
    """
    text = Path(path).read_text() if path is not None else None
    return parse_config_text(text, overrides, env)


def parse_config_text(
    text: str | None,
    overrides: Iterable[str] = (),
    env: Mapping[str, str] | None = None,
) -> TrainConfig:
    """Same as :func:`parse_config` for config text already in memory."""
    env = os.environ if env is None else env
    values: dict[str, str] = {}
    origins: dict[str, str] = {}
    if text is not None:
        _parse_lines(((f"line {i}", ln) for i, ln in enumerate(text.splitlines(), 1)), values, origins)
    _parse_lines(((f"override {o!r}", o) for o in overrides), values, origins)
    if "seed" not in values and env.get("LEBM_SEED"):
        values["seed"] = env["LEBM_SEED"]
        origins["seed"] = "environment LEBM_SEED"

    typed = {k: _convert(k, v, origins[k]) for k, v in values.items()}
    mode = typed.get("mode", TrainConfig.mode)
    if mode not in _CHOICES["mode"]:
        raise ConfigError(f"{origins['mode']}: mode must be one of {_CHOICES['mode']}, got {mode!r}")
    for key, by_mode in _MODE_DEFAULTS.items():
        typed.setdefault(key, by_mode[mode])
    try:
        return TrainConfig(**typed)
    except ConfigError as exc:
        key = str(exc).split(":", 1)[0]
        if key in origins:
            raise ConfigError(f"{origins[key]}: {exc}") from None
        raise
