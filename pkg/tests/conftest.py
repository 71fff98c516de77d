from __future__ import annotations

import copy
import os

import numpy as np
import pytest
import yaml

from histmatch.campaign import Campaign
from histmatch.config import shipped_config

os.environ.setdefault("SOURCE_DATE_EPOCH", "1262304000")


def toy_raw() -> dict:
    return yaml.safe_load(shipped_config("toy").read_text())


def small_raw() -> dict:
    """A 3-input, 4-output campaign that runs in a couple of seconds."""
    raw = toy_raw()
    raw["name"] = "small"
    raw["parameters"] = [
        {"name": "alpha", "min": 0.0, "max": 2.0},
        {"name": "beta", "min": -5.0, "max": 5.0},
        {"name": "gamma", "min": 100.0, "max": 550.0},
    ]
    raw["simulator"] = {"kind": "toy", "outputs": 4, "toy": {"n_active": 2, "decay": 0.8, "scales": [0.1, 0.1, 1.0]}}
    raw["observations"] = {"synthesize": {"x_star_unit": [0.2, -0.3, 0.0], "seed": 3}}
    raw["emulator"]["max_active"] = 3
    raw["engine"]["n_candidates"] = 4000
    raw["engine"]["maximin_iterations"] = 20
    raw["waves"] = [
        {"runs": 40, "max_active": 3, "cutoffs": {"i_2m": 2.7, "i_3m": 2.3}, "diagnostic_runs": 30},
        {"runs": 40, "max_active": 3, "cutoffs": {"i_2m": 2.7, "i_3m": 2.3}, "diagnostic_runs": 30},
    ]
    raw["harvest"] = {"runs": 20, "cutoff_i_m": 2.5}
    raw["projection"] = {"axes": ["alpha", "beta"], "resolution": 6, "n_hidden": 20, "statistic": "i_2m"}
    return raw


def dump(raw: dict) -> str:
    return yaml.safe_dump(raw, sort_keys=False)


def toy_with_truth(x_star, seed: int) -> str:
    raw = toy_raw()
    raw["seed"] = int(seed)
    raw["observations"] = {"synthesize": {"x_star_unit": [float(v) for v in x_star], "seed": int(seed) + 1}}
    return dump(raw)


@pytest.fixture
def small_campaign(tmp_path) -> Campaign:
    return Campaign.create(tmp_path / "camp", dump(small_raw()))


@pytest.fixture(scope="session")
def toy_campaign(tmp_path_factory) -> Campaign:
    """The shipped toy campaign after all three waves (shared, read-only)."""
    camp = Campaign.create(tmp_path_factory.mktemp("toy") / "camp", shipped_config("toy").read_text())
    for _ in range(camp.planned_waves):
        out = camp.run_wave()
        assert out.gate_passed, out.report.summary()
    return camp


@pytest.fixture
def rng():
    return np.random.default_rng(20100101)


def deep(raw: dict) -> dict:
    return copy.deepcopy(raw)


def const_emulator(mean: float, var: float, output_index: int = 0, d: int = 2, anchor: float = 0.0):
    """Emulator predicting ``mean`` with variance ``var`` everywhere (pure nugget, no trend inputs)."""
    from histmatch.emulator import Emulator, RegressionSummary

    X = np.full((1, d), anchor)
    summary = RegressionSummary(np.sqrt(var), 0.0, 0.0, 1, (), 0, 1)
    return Emulator(output_index, (), np.zeros((1, 0), int), np.array([mean]), 0.0, var, 1.0, X,
                    np.zeros(1), summary)


def linear_emulator(k: int, d: int, output_index: int, var: float = 1e-12):
    """Emulator whose mean is exactly x_k (linear trend, negligible variance)."""
    from histmatch.emulator import Emulator, RegressionSummary

    X = np.zeros((1, d))
    summary = RegressionSummary(0.0, 1.0, 1.0, 2, (k,), 1, 1)
    return Emulator(output_index, (k,), np.array([[0], [1]]), np.array([0.0, 1.0]), 0.0, var, 1.0, X,
                    np.zeros(1), summary)


# --- acceptance criteria summary ------------------------------------------

_CRITERIA: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    n, title = mark.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    if rep.failed:
        _CRITERIA[n] = (title, "FAIL", detail or str(rep.longrepr).splitlines()[-1][:200])
    elif rep.skipped:
        _CRITERIA[n] = (title, "SKIP", detail)
    elif rep.when == "call":
        _CRITERIA[n] = (title, "PASS", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, status, detail = _CRITERIA[n]
        line = f"criterion {n:2d} {status}: {title}"
        terminalreporter.write_line(line + (f" ({detail})" if detail else ""))
