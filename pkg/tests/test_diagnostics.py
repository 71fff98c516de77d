import csv
import io

import numpy as np
import pytest

from histmatch.design import space_filling
from histmatch.diagnostics import (
    DiagnosticOverlapError,
    held_out_diagnostics,
    progression_csv,
    regression_progression,
)
from histmatch.emulator import EmulatorConfig, fit_emulator
from histmatch.simulators import default_toy, toy_simulate


@pytest.fixture(scope="module")
def fitted():
    c = default_toy(dimension=3, n_outputs=3, n_active=3)
    X = space_filling(80, 3, 1).points
    Y = toy_simulate(X, c)
    return c, X, Y


def test_own_training_runs_zero_nugget(fitted):
    c, X, Y = fitted
    ems = [fit_emulator(X, Y[:, o], EmulatorConfig(nugget_share=0.0, max_active=3), o) for o in range(3)]
    rep = held_out_diagnostics(ems, X, Y, allow_overlap=True)
    assert np.abs(rep.errors).max() < 1e-6
    assert rep.passed


def test_overlap_is_an_error(fitted):
    c, X, Y = fitted
    em = fit_emulator(X, Y[:, 0], EmulatorConfig(max_active=3))
    with pytest.raises(DiagnosticOverlapError):
        held_out_diagnostics([em], X[:5], Y[:5])


def test_honest_and_broken(fitted):
    c, X, Y = fitted
    Xd = space_filling(200, 3, 99).points
    Yd = toy_simulate(Xd, c)
    cfg = EmulatorConfig(max_active=3, theta_multiplier=0.5)
    ems = [fit_emulator(X, Y[:, o], cfg, o) for o in range(3)]
    rep = held_out_diagnostics(ems, Xd, Yd)
    assert rep.passed
    assert np.all(rep.exceed_fraction <= 0.10)
    broken = [fit_emulator(X, Y[:, o], EmulatorConfig(max_active=3, theta=ems[o].theta * 100), o) for o in range(3)]
    rep_b = held_out_diagnostics(broken, Xd, Yd)
    assert not rep_b.passed and rep_b.flagged


def test_report_csv(fitted):
    c, X, Y = fitted
    em = fit_emulator(X, Y[:, 1], EmulatorConfig(max_active=3), 1)
    Xd = space_filling(10, 3, 5).points
    rep = held_out_diagnostics([em], Xd, toy_simulate(Xd, c), run_ids=[f"d{i}" for i in range(10)])
    rows = list(csv.DictReader(io.StringIO(rep.to_csv())))
    assert len(rows) == 10 and rows[0]["run_id"] == "d0" and rows[0]["output"] == "1"
    assert float(rows[3]["std_error"]) == rep.errors[3, 0]
    s = rep.summary()
    assert s["n_runs"] == 10 and 0.0 <= s["exceed_fraction"][0] <= 1.0


def test_progression_single_wave(small_campaign):
    small_campaign.run_wave()
    rows = regression_progression(small_campaign.chain)
    assert {r["wave"] for r in rows} == {1}
    assert len(rows) == 4
    ems = small_campaign.chain.waves[0].emulators
    for r, em in zip(rows, ems):
        assert r["residual_sd"] == em.summary.residual_sd
    text = progression_csv(rows)
    assert text.splitlines()[0].startswith("wave,output")
