import datetime as dt
import json
from pathlib import Path

import numpy as np
import pytest

from implcorr.synth import SynthConfig, generate_market

GOLDEN = Path(__file__).parent / "golden"

# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []

# Small market used by the synth, correlation and CLI tests; cheap enough to build per session.
SMALL_SYNTH = {"n_days": 70, "n_assets": 3, "obs_per_day": 40, "tree_steps": 60}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_market():
    return generate_market(SynthConfig(seed=11, **SMALL_SYNTH))


@pytest.fixture(scope="session")
def oracle_market():
    """Two years of closes with constituent strikes equal to the realized variances."""
    cfg = SynthConfig(seed=5, n_days=521, n_assets=4, obs_per_day=1, tree_steps=20,
                      oracle_constituent_strikes=True)
    return generate_market(cfg)


def write_config(directory: Path, **overrides) -> Path:
    cfg = {
        "data_dir": "data",
        "output_dir": "out",
        "seed": 11,
        "synth": dict(SMALL_SYNTH),
        "estimation": {"start": "2010-01-01", "end": "2010-03-05"},
        "backtest": {"start": "2010-03-08", "end": "2010-12-31"},
        "dsfm": {"grid_size": [9, 9], "bandwidth": [0.2, 0.25], "n_factors_max": 3},
        "var": {"p": 1},
        "iv": {"tree_steps": 60},
        "strategy": {"tenors": [0.083, 0.25]},
    }
    cfg.update(overrides)
    path = directory / "config.json"
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture(scope="session")
def fitted_run(tmp_path_factory):
    """A generated and fitted small run shared by the CLI tests."""
    from implcorr.cli import main

    root = tmp_path_factory.mktemp("run")
    cfg = write_config(root)
    assert main(["generate", "--config", str(cfg)]) == 0
    assert main(["fit", "--config", str(cfg), "--threads", "2"]) == 0
    return root, cfg


def d(s: str) -> dt.date:
    return dt.date.fromisoformat(s)


def golden_inputs():
    """Seeded hedge errors and payoffs behind the golden summary tables."""
    rng = np.random.default_rng(2024)
    tenors = (0.083, 0.25, 0.5, 1.0)
    errors = {t: rng.normal(-0.5, 1.0 + t, 60) for t in tenors}
    payoffs = {k: {t: rng.normal(0.001 * (1 + i), 0.002, 60) for t in tenors}
               for i, k in enumerate(("D", "D-D_h", "D_adv"))}
    return errors, payoffs


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1])):
            terminalreporter.write_line(line)
