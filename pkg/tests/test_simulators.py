import json
import math
import sys
from pathlib import Path

import numpy as np
import pytest

from histmatch.budget import BudgetComponent, BudgetConfigError, build_budget, grouped_covariance, zero_budget
from histmatch.simulators import (
    AdapterConfig,
    ExternalSimulator,
    FailureKind,
    SimulatorFailure,
    ToyCoefficients,
    ToySimulator,
    default_toy,
    external_simulate,
    parse_output_file,
    synthesize_observations,
    toy_simulate,
)
from histmatch.space import ParameterDef, ParameterSpace

GOLDEN = Path(__file__).parent / "data" / "toy_golden.json"


def test_break_bin_value_at_origin():
    c = default_toy()
    f = toy_simulate(np.zeros(8), c)
    mid = int(np.flatnonzero(c.bins == c.M0)[0])
    assert f[mid] == pytest.approx(-2.0 - 1.0 / math.log(10), abs=1e-14)


def test_inactive_input_changes_nothing(rng):
    c = default_toy(n_active=5)
    x = rng.uniform(-1, 1, 8)
    y = x.copy()
    y[6] = -y[6]
    assert np.array_equal(toy_simulate(x, c), toy_simulate(y, c))
    assert c.active_inputs() == [0, 1, 2, 3, 4]


def test_golden_file():
    g = json.loads(GOLDEN.read_text())
    c = ToyCoefficients.from_dict(g["coefficients"])
    for case in g["cases"]:
        np.testing.assert_allclose(toy_simulate(case["x"], c), case["f"], rtol=0, atol=1e-12)


def test_batch_matches_pointwise(rng):
    c = default_toy()
    X = rng.uniform(-1, 1, (7, 8))
    Y = toy_simulate(X, c)
    for x, y in zip(X, Y):
        np.testing.assert_allclose(toy_simulate(x, c), y, rtol=0, atol=1e-13)


def test_decreasing_beyond_break():
    c = default_toy()
    for x in (np.zeros(8), np.full(8, 0.5), np.full(8, -0.5)):
        f = toy_simulate(x, c)
        mstar = c.M0 + x @ c.c
        alpha = c.alpha0 + x @ c.b
        assert alpha > -2
        # brighter (more negative) than the break: counts fall off
        bright = c.bins < mstar
        assert np.all(np.diff(f[bright][::-1]) < 0)


def test_bad_coefficients():
    with pytest.raises(ValueError):
        ToyCoefficients(0, [1, 2], 0, [1], 0, [1, 2], [0, 1])
    with pytest.raises(ValueError):
        ToyCoefficients(0, [1], 0, [1], 0, [1], [1, 0])


# --- observations ---

def _budget(n):
    return build_budget([
        BudgetComponent("d", "discrepancy", grouped_covariance(n, 0.2, [{"outputs": list(range(n)), "rho": 0.4}])),
        BudgetComponent("o", "observation", np.diag(np.full(n, 0.1**2))),
    ])


def test_zero_budget_gives_truth():
    c = default_toy()
    x = np.linspace(-0.5, 0.5, 8)
    np.testing.assert_array_equal(synthesize_observations(x, c, zero_budget(11), 1), toy_simulate(x, c))


def test_seeds_differ():
    c = default_toy()
    x = np.zeros(8)
    assert not np.array_equal(synthesize_observations(x, c, _budget(11), 1), synthesize_observations(x, c, _budget(11), 2))
    np.testing.assert_array_equal(synthesize_observations(x, c, _budget(11), 1), synthesize_observations(x, c, _budget(11), 1))


def test_noise_covariance_monte_carlo():
    c = default_toy()
    b = _budget(11)
    x = np.zeros(8)
    f = toy_simulate(x, c)
    draws = np.array([synthesize_observations(x, c, b, s) - f for s in range(10_000)])
    emp = np.var(draws, axis=0, ddof=1)
    np.testing.assert_allclose(emp, np.diag(b.total), rtol=0.05)


def test_non_psd_budget_rejected():
    with pytest.raises(BudgetConfigError):
        BudgetComponent("bad", "discrepancy", np.array([[1.0, 2.0], [2.0, 1.0]]))


# --- external adapter ---

@pytest.fixture
def toy_exec(tmp_path):
    space = ParameterSpace([ParameterDef(f"p{k}", -2.0 + k, 3.0 + 2 * k) for k in range(8)])
    coeffs = default_toy()
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({
        "parameters": [{"name": p.name, "min": p.min, "max": p.max} for p in space.params],
        "coefficients": coeffs.to_dict(),
    }))
    adapter = AdapterConfig(
        command=[sys.executable, "-m", "histmatch.simulators", str(spec), "{input}", "{output}"],
        columns=list(range(11)), timeout=60, workdir=str(tmp_path / "runs"),
    )
    return space, coeffs, adapter


def test_external_matches_toy(toy_exec, rng):
    space, coeffs, adapter = toy_exec
    X = rng.uniform(-1, 1, (3, 8))
    sim = ExternalSimulator(space, adapter, [f"y{k}" for k in range(11)])
    res = sim.evaluate(X, workers=2)
    assert res.ok.all()
    np.testing.assert_allclose(res.outputs, toy_simulate(X, coeffs), atol=1e-9, rtol=0)
    np.testing.assert_allclose(external_simulate(X[0], space, adapter), toy_simulate(X[0], coeffs), atol=1e-9)


def test_exit_status_is_flagged(tmp_path):
    space = ParameterSpace.unit_cube(2)
    adapter = AdapterConfig(command=[sys.executable, "-c", "import sys; sys.exit(1)"], columns=[0])
    res = ExternalSimulator(space, adapter, ["y"]).evaluate(np.zeros((2, 2)))
    assert not res.ok.any()
    assert all(f.kind is FailureKind.EXIT_STATUS for f in res.failures.values())


def test_timeout_is_flagged():
    space = ParameterSpace.unit_cube(1)
    adapter = AdapterConfig(command=[sys.executable, "-c", "import time; time.sleep(5)"], columns=[0], timeout=0.3)
    with pytest.raises(SimulatorFailure) as e:
        ExternalSimulator(space, adapter, ["y"]).run_one(np.zeros(1))
    assert e.value.kind is FailureKind.TIMEOUT


def test_missing_column_names_it(tmp_path):
    p = tmp_path / "out.txt"
    p.write_text("# header\n1.0, 2.0\n")
    np.testing.assert_array_equal(parse_output_file(p, [1, 0]), [2.0, 1.0])
    with pytest.raises(SimulatorFailure, match="column 5") as e:
        parse_output_file(p, [0, 5])
    assert e.value.kind is FailureKind.MALFORMED_OUTPUT
    with pytest.raises(SimulatorFailure) as e:
        parse_output_file(tmp_path / "nope.txt", [0])
    assert e.value.kind is FailureKind.MISSING_OUTPUT


def test_toy_simulator_interface():
    sim = ToySimulator(default_toy())
    res = sim.evaluate(np.zeros((4, 8)))
    assert res.ok.all() and res.outputs.shape == (4, 11) and res.failed_fraction == 0.0
