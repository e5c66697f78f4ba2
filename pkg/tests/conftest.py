"""Shared fixtures.

The MNIST fixture uses real digits: ``LEBM_MNIST_DIR`` pointing at the
standard IDX files if set, otherwise the 5000-image subset bundled with
mlxtend, written out as IDX so it goes through the same loader.
"""

import os
import time
from pathlib import Path

import numpy as np
import pytest

from lebm.data import write_idx_images, write_idx_labels

# wall time of the expensive session fixtures, for runtime budgets
FIXTURE_SECONDS = {}

MNIST_NAMES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte")


def _find_mnist(root: Path):
    for suffix in ("", ".gz"):
        paths = [root / (name + suffix) for name in MNIST_NAMES]
        if all(p.exists() for p in paths):
            return paths
    return None


@pytest.fixture(scope="session")
def mnist_idx(tmp_path_factory):
    env = os.environ.get("LEBM_MNIST_DIR")
    if env:
        found = _find_mnist(Path(env))
        if found is None:
            pytest.fail(f"LEBM_MNIST_DIR={env} does not contain {MNIST_NAMES}")
        return tuple(str(p) for p in found)
    mnist = pytest.importorskip("mlxtend.data")
    X, y = mnist.mnist_data()
    out = tmp_path_factory.mktemp("mnist")
    images, labels = out / MNIST_NAMES[0], out / MNIST_NAMES[1]
    write_idx_images(images, np.asarray(X, dtype=np.uint8).reshape(-1, 28, 28))
    write_idx_labels(labels, np.asarray(y, dtype=np.uint8))
    return str(images), str(labels)


TILTED_CONFIG = """\
mode = toy
dataset = tilted
tilt_mean = 2.0
n_data = 2000
nz = 1
ebm_layers = 0
gen_init = identity
gen_layers = 0
sigma = 0.1
eta0 = 5e-3
eta1 = 0.0
iterations = 5000
batch_size = 100
log_every = 500
"""


@pytest.fixture(scope="session")
def tilted_run():
    """Linear EBM prior learned under a frozen identity generator on
    ``x = z + 0.1 eps`` with ``z ~ N(2, 1)``; shared by the trainer tests and
    the acceptance suite. Parameters after iterations 1 and 2000 are kept."""
    from lebm.config import parse_config_text
    from lebm.data import datasets_for
    from lebm.trainer import train_loop

    start = time.perf_counter()
    cfg = parse_config_text(TILTED_CONFIG, env={})
    train, _ = datasets_for(cfg)
    snapshots = {}

    def keep(state, report):
        if state.iteration in (1, 2000):
            snapshots[state.iteration] = state.params

    state, reports = train_loop(cfg, train, record_wall_time=False, callback=keep)
    FIXTURE_SECONDS["tilted_run"] = time.perf_counter() - start
    return cfg, train, state, reports, snapshots


RING_CONFIG = """\
mode = toy
dataset = ring
n_data = 2000
ring_modes = 8
nz = 2
nef = 64
gen_hidden = 64
s1 = 0.3
eta0 = 2e-4
eta1 = 1e-3
batch_size = 100
iterations = 4000
log_every = 500
"""

# (end iteration, learning-rate multiplier): a long phase at the base rates,
# then three shorter phases at decayed rates
RING_SCHEDULE = ((4000, 1.0), (5500, 0.1), (7000, 0.03), (8500, 0.01))


def _train_scheduled(cfg, dataset, schedule):
    from lebm.trainer import init_state, train_loop

    state = init_state(cfg, dataset.dim)
    initial = state.params
    for end, factor in schedule:
        state.opt_alpha.lr = cfg.eta0 * factor
        state.opt_beta.lr = cfg.eta1 * factor
        state, _ = train_loop(cfg.with_overrides(iterations=end), dataset, state=state, record_wall_time=False)
    return initial, state


@pytest.fixture(scope="session")
def ring_run():
    """The 8-mode ring run and its fixed-Gaussian-prior twin, trained with an
    identical schedule. Returns a dict with configs, data, initial and final
    parameters of both models and the wall time of the whole run."""
    from lebm.config import parse_config_text
    from lebm.data import datasets_for

    start = time.perf_counter()
    cfg = parse_config_text(RING_CONFIG, env={})
    data, _ = datasets_for(cfg)
    initial, ebm = _train_scheduled(cfg, data, RING_SCHEDULE)
    base_cfg = cfg.with_overrides(prior="gaussian")
    _, base = _train_scheduled(base_cfg, data, RING_SCHEDULE)
    return {
        "cfg": cfg,
        "base_cfg": base_cfg,
        "data": data,
        "initial": initial,
        "ebm": ebm.params,
        "baseline": base.params,
        "train_seconds": time.perf_counter() - start,
    }



@pytest.fixture(scope="session")
def ring_residuals(ring_run):
    """Estimating-equation residual norms of the ring EBM at initialization
    and after training, 32 chains per expectation."""
    from lebm.evaluate import eq_residual

    cfg, x = ring_run["cfg"], ring_run["data"].items
    args = (x, cfg.prior_langevin, cfg.posterior_langevin, 32)
    return {"initial": eq_residual(ring_run["initial"], *args), "final": eq_residual(ring_run["ebm"], *args)}


# --- per-test outcome log (read by the suite-level acceptance check) -------


def pytest_configure(config):
    config.lebm_reports = {}
    config.lebm_acceptance = []


def pytest_runtest_logreport(report):
    config = _CONFIG.get("config")
    if config is None:
        return
    entry = config.lebm_reports.setdefault(report.nodeid, {"outcome": "passed", "duration": 0.0})
    entry["duration"] += report.duration
    if report.failed:
        entry["outcome"] = "failed"
    elif report.skipped and entry["outcome"] != "failed":
        entry["outcome"] = "skipped"


_CONFIG = {}


@pytest.hookimpl(tryfirst=True)
def pytest_sessionstart(session):
    _CONFIG["config"] = session.config


@pytest.fixture(scope="session")
def fixture_seconds():
    return FIXTURE_SECONDS


@pytest.fixture(scope="session")
def suite_reports(request):
    return request.config.lebm_reports


@pytest.fixture(scope="session")
def acceptance_log(request):
    return request.config.lebm_acceptance


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "lebm_acceptance", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
