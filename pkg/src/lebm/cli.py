"""Command-line front end.

    lebm train --config ring.cfg --override seed=7 --out runs/ring
    lebm sample --checkpoint runs/ring/checkpoint.bin --n 64 --out runs/ring
    lebm reconstruct --checkpoint runs/ring/checkpoint.bin
    lebm score-anomaly --checkpoint runs/mnist1/checkpoint.bin --out runs/mnist1
    lebm diagnose-chain --checkpoint runs/ring/checkpoint.bin --out runs/ring
    lebm check --quick

Exit codes: 0 success, 1 usage error, 2 runtime error, 3 failed check.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import logging
import math
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, TrainConfig, parse_config, parse_config_text
from .data import datasets_for, denormalize_pixels
from .evaluate import SparseHistogramWarning, anomaly_score, auprc, kl_profile, reconstruct, write_pr_curve
from .model import EbmPrior, ModelParams, ebm_f, gen_mean, linear_generator, posterior_score, zero_ebm
from .numerics import Layer, Rng
from .oracle import (
    Grid1D,
    OracleError,
    QuadraticTilt,
    gradient_check,
    grid_log_partition,
    linear_gaussian_posterior,
)
from .sampler import LangevinConfig, sample_prior_shortrun
from .trainer import state_from_checkpoint, train_loop

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3

log = logging.getLogger("lebm")


class UsageError(Exception):
    pass


# --- run directory bookkeeping --------------------------------------------


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out: Path, cfg: TrainConfig, command: str) -> Path:
    """``manifest.txt``: config hash, seed, code version and a digest per output file."""
    lines = [
        f"command = {command}",
        f"config_sha256 = {cfg.digest()}",
        f"seed = {cfg.seed}",
        f"version = {__version__}",
    ]
    for path in sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.txt"):
        lines.append(f"file {path.relative_to(out).as_posix()} sha256 = {file_digest(path)}")
    manifest = out / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def write_pgm(path, image: np.ndarray) -> None:
    """Binary greyscale PGM (P5, maxval 255) from a uint8 array of shape (h, w)."""
    image = np.asarray(image, dtype=np.uint8)
    h, w = image.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + image.tobytes())


def _image_shape(dim: int) -> tuple[int, int]:
    side = math.isqrt(dim)
    return (side, side) if side * side == dim else (1, dim)


def _load(args) -> tuple[object, TrainConfig]:
    try:
        ckpt = load_checkpoint(args.checkpoint)
    except FileNotFoundError:
        raise UsageError(f"checkpoint not found: {args.checkpoint}") from None
    cfg = parse_config_text(ckpt.config_text, args.override, env={})
    return ckpt, cfg


def _threads(n: int | None):
    if n is None:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


# --- commands -------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = parse_config(args.config, args.override)
    log.info("config:\n%s", cfg.to_text().rstrip())
    train, _ = datasets_for(cfg)
    out = Path(args.out)
    state = None
    if args.resume and (out / "checkpoint.bin").exists():
        state = state_from_checkpoint(load_checkpoint(out / "checkpoint.bin"))
        # the config in force sets the learning rates, so a resumed run can decay them
        state.opt_alpha.lr, state.opt_beta.lr = cfg.eta0, cfg.eta1
        log.info("resuming at iteration %d", state.iteration)
    deterministic = args.threads == 1
    state, reports = train_loop(cfg, train, out, state=state, record_wall_time=not deterministic)
    (out / "config.txt").write_text(cfg.to_text())
    write_manifest(out, cfg, "train")
    if reports:
        last = reports[-1]
        print(f"trained to iteration {state.iteration}: recon_mse {last.recon_mse:.6f}")
    return EXIT_OK


def cmd_sample(args) -> int:
    ckpt, cfg = _load(args)
    params = ckpt.params
    rng = Rng.chains(args.seed, "sample", n=args.n)
    z, _ = sample_prior_shortrun(params, args.n, cfg.prior_langevin, rng)
    x = gen_mean(params.beta, z)
    out = Path(args.out)
    sample_dir = out / "samples"
    sample_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    if cfg.mode == "image":
        shape = _image_shape(x.shape[1])
        pixels = denormalize_pixels(np.clip(x, -1.0, 1.0))
        for i, img in enumerate(pixels):
            name = f"sample_{i:05d}.pgm"
            write_pgm(sample_dir / name, img.reshape(shape))
            rows.append([str(i), name, repr(float(ebm_f(params.alpha, z[i : i + 1])[0]))])
    else:
        with open(sample_dir / "samples.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow([f"x{j}" for j in range(x.shape[1])] + [f"z{j}" for j in range(z.shape[1])])
            writer.writerows([repr(float(v)) for v in np.r_[xi, zi]] for xi, zi in zip(x, z))
        f = ebm_f(params.alpha, z)
        rows = [[str(i), "samples.csv", repr(float(f[i]))] for i in range(args.n)]
    with open(sample_dir / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["index", "file", "f_alpha"])
        writer.writerows(rows)
    write_manifest(out, cfg, "sample")
    print(f"wrote {args.n} samples to {sample_dir}")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    ckpt, cfg = _load(args)
    train, test = datasets_for(cfg)
    data = test if (args.split == "test" and test is not None) else train
    if args.limit:
        data = data.subset(np.arange(min(args.limit, len(data))))
    rng = Rng.chains(args.seed, "reconstruct", n=len(data))
    x_hat, mse = reconstruct(ckpt.params, data.items, cfg.posterior_langevin, rng)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "reconstruction.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["item", "mse"])
            per_item = np.mean((x_hat - data.items) ** 2, axis=1)
            writer.writerows((str(i), repr(float(v))) for i, v in enumerate(per_item))
        write_manifest(out, cfg, "reconstruct")
    print(f"reconstruction mse {mse:.6f} over {len(data)} items")
    return EXIT_OK


def cmd_score_anomaly(args) -> int:
    ckpt, cfg = _load(args)
    _, test = datasets_for(cfg)
    if test is None:
        raise UsageError("score-anomaly needs an IDX config with holdout_digit >= 0")
    rng = Rng.chains(args.seed, "anomaly", n=len(test) * args.n_chains)
    scores = anomaly_score(ckpt.params, test.items, cfg.posterior_langevin, args.n_chains, rng)
    value = auprc(scores, test.labels)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "scores.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["item", "score", "label"])
        writer.writerows((str(i), repr(float(s)), str(int(l))) for i, (s, l) in enumerate(zip(scores, test.labels)))
    write_pr_curve(out / "pr_curve.csv", scores, test.labels)
    write_manifest(out, cfg, "score-anomaly")
    print(f"AUPRC {value:.4f} (holdout digit {cfg.holdout_digit}, {len(test)} test items)")
    return EXIT_OK


def cmd_diagnose_chain(args) -> int:
    ckpt, cfg = _load(args)
    params = ckpt.params
    lcfg = LangevinConfig(args.K, args.s if args.s else cfg.s0, record_trace=True, convention=cfg.step_convention)
    _, trace = sample_prior_shortrun(params, args.n, lcfg, Rng.chains(args.seed, "diagnose", n=args.n))
    trace_dir = Path(args.out) / "traces"
    trace_dir.mkdir(parents=True, exist_ok=True)
    trace.to_csv(trace_dir / "prior_chain.csv")
    with open(trace_dir / "energy_profile.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "f_alpha_mean", "f_alpha_std"])
        for k, (mean, std) in enumerate(trace.energy_profile()):
            writer.writerow([str(k), repr(float(mean)), repr(float(std))])
    write_manifest(Path(args.out), cfg, "diagnose-chain")
    print(f"wrote {args.K + 1} steps x {args.n} chains to {trace_dir}")
    return EXIT_OK


# --- self-checks ----------------------------------------------------------


def _checks(quick: bool):
    """Yield ``(name, passed, detail)`` for each oracle check."""
    seeds = 3 if quick else 20
    worst = max(gradient_check(seed) for seed in range(seeds))
    yield "fd-gradients", worst < 1e-6, f"max relative error {worst:.2e} over {seeds} seeds"

    a = 1.5
    linear = EbmPrior([Layer(np.array([[a]]), np.zeros(1))])
    log_z = grid_log_partition(linear, Grid1D())
    yield "grid-partition-linear", abs(log_z - a * a / 2) < 1e-6, f"log Z {log_z:.9f} vs {a * a / 2}"
    log_z0 = grid_log_partition(zero_ebm(1, 4, 1), Grid1D())
    yield "grid-partition-zero", abs(log_z0) < 1e-8, f"log Z {log_z0:.2e}"

    rng = Rng(0, "check-posterior")
    W = rng.standard_normal((3, 2))
    b = rng.standard_normal(3)
    x = rng.standard_normal((4, 3))
    mean, _ = linear_gaussian_posterior(W, b, 0.5, x)
    params = ModelParams(zero_ebm(2, 4, 1), linear_generator(W.T, b, 0.5))
    resid = float(np.max(np.abs(posterior_score(params, x, mean))))
    yield "posterior-stationarity", resid < 1e-8, f"|score at posterior mean| {resid:.2e}"

    # quick mode uses fewer chains, so its bounds are widened to the same 4-sigma level
    n_chains, mean_tol, var_lo, var_hi = (4000, 0.07, 0.90, 1.11) if quick else (20000, 0.03, 0.95, 1.06)
    params0 = ModelParams(zero_ebm(2, 4, 1), linear_generator(np.eye(2), np.zeros(2), 1.0))
    z, _ = sample_prior_shortrun(params0, n_chains, LangevinConfig(2000, 0.01), Rng.chains(0, "check-stationary", n=n_chains))
    m, v = z.mean(axis=0), z.var(axis=0)
    ok = bool(np.all(np.abs(m) < mean_tol) and np.all((v > var_lo) & (v < var_hi)))
    yield "langevin-stationarity", ok, f"mean {np.round(m, 4)} var {np.round(v, 4)} ({n_chains} chains)"

    n_samples = 20000 if quick else 100000
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", SparseHistogramWarning)
        prof = kl_profile(QuadraticTilt(1.0), [0, 1, 2, 5, 10, 20, 40], 0.1, n_samples=n_samples)
    sparse = sum(issubclass(w.category, SparseHistogramWarning) for w in caught)
    kl0 = prof[0][1]
    target = 0.5 * (2.0 - 1.0 - math.log(2.0))
    slack = 0.01
    mono = all(b <= a + slack for (_, a), (_, b) in zip(prof[1:], prof[2:]))
    yield "kl-k0", abs(kl0 - target) < 0.02, f"KL(K=0) {kl0:.4f} vs {target:.4f}"
    yield "kl-monotone", mono, "profile " + ", ".join(f"K={k}:{v:.4f}" for k, v in prof[1:]) + (
        f" ({sparse} profile points had empty tail bins)" if sparse else ""
    )


def cmd_check(args) -> int:
    failed = 0
    start = time.perf_counter()
    for name, ok, detail in _checks(args.quick):
        failed += not ok
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}", flush=True)
    print(f"{'all checks passed' if not failed else f'{failed} check(s) failed'} in {time.perf_counter() - start:.1f}s")
    return EXIT_OK if not failed else EXIT_CHECK


# --- argument parsing -----------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lebm", description="Latent-space EBM prior: training and diagnostics")
    parser.add_argument("--threads", type=int, default=None, help="BLAS thread cap; 1 = bit-exact mode")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_overrides(p):
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")

    p = sub.add_parser("train", help="run the learning algorithm")
    p.add_argument("--config", default=None)
    p.add_argument("--out", default="run")
    p.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint.bin")
    with_overrides(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="short-run prior samples through the generator")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="run")
    with_overrides(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("reconstruct", help="posterior inference and reconstruction error")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "test"), default="train")
    p.add_argument("--limit", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    with_overrides(p)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("score-anomaly", help="anomaly scores and AUPRC on the held-out split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n-chains", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="run")
    with_overrides(p)
    p.set_defaults(func=cmd_score_anomaly)

    p = sub.add_parser("diagnose-chain", help="trace prior chains and their energy profile")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--K", type=int, default=100)
    p.add_argument("--s", type=float, default=0.0, help="step size (default: the config's s0)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="run")
    with_overrides(p)
    p.set_defaults(func=cmd_diagnose_chain)

    p = sub.add_parser("check", help="oracle self-checks (no downloads)")
    p.add_argument("--quick", action="store_true")
    p.set_defaults(func=cmd_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.threads is not None and args.threads < 1:
        print("lebm: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    limiter = _threads(args.threads)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"lebm {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, OracleError, OSError, ValueError, ArithmeticError, RuntimeError) as exc:
        print(f"lebm {args.command}: {type(exc).__module__}.{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


if __name__ == "__main__":
    sys.exit(main())
