"""Iterative refocusing: design, simulate, emulate, diagnose, cut, measure.

A :class:`WaveChain` is the frozen sequence of (emulators, cutoffs) pairs.
A point is non-implausible after wave k when it passes the cutoffs of every
wave 1..k, each scored with that wave's own emulators.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import implausibility as imp
from .budget import VarianceBudget
from .design import EmptyRegionError, constrained_design, space_filling
from .diagnostics import DiagnosticReport, held_out_diagnostics
from .emulator import Emulator, EmulatorConfig, fit_emulator

logger = logging.getLogger(__name__)

_BATCH = 20000


class WaveAborted(RuntimeError):
    pass


class DiagnosticsFailed(WaveAborted):
    def __init__(self, report: DiagnosticReport):
        self.report = report
        super().__init__(
            f"emulator diagnostics failed for outputs {report.flagged} "
            f"(more than {report.max_fraction:.0%} of held-out errors beyond {report.threshold}); "
            "rerun with the override flag to cut anyway"
        )


def derive_seed(seed: int, *tags) -> int:
    """Stable 32-bit sub-seed for (seed, tags...)."""
    ints = [int(seed)] + [t if isinstance(t, int) else int.from_bytes(str(t).encode(), "little") % (2**32) for t in tags]
    return int(np.random.SeedSequence(ints).generate_state(1)[0])


@dataclass
class WaveRecord:
    index: int
    emulators: list[Emulator]
    cutoffs: imp.CutoffSet
    space_fraction: float = 1.0
    space_se: float = 0.0
    n_candidates: int = 0
    n_train: int = 0
    n_diagnostic: int = 0
    diagnostics: dict | None = None
    variance_ratio: dict | None = None

    @property
    def outputs(self) -> list[int]:
        return [em.output_index for em in self.emulators]

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "outputs": self.outputs,
            "cutoffs": self.cutoffs.to_dict(),
            "space_fraction": self.space_fraction,
            "space_se": self.space_se,
            "n_candidates": self.n_candidates,
            "n_train": self.n_train,
            "n_diagnostic": self.n_diagnostic,
            "diagnostics": self.diagnostics,
            "variance_ratio": self.variance_ratio,
            "emulators": [f"emulators/output_{o:03d}.emu" for o in self.outputs],
        }


@dataclass
class WaveChain:
    budget: VarianceBudget
    z: np.ndarray
    multivariate: bool = False
    mv_groups: list[list[int]] | None = None
    waves: list[WaveRecord] = field(default_factory=list)

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=float)
        if len(self.z) != self.budget.n_outputs:
            raise ValueError(f"observations have {len(self.z)} entries, budget covers {self.budget.n_outputs}")

    def __len__(self) -> int:
        return len(self.waves)

    def scores(self, X, wave: WaveRecord, multivariate: bool | None = None) -> dict[str, np.ndarray]:
        mv = wave.cutoffs.i_mv is not None if multivariate is None else multivariate
        return imp.evaluate(X, wave.emulators, self.budget, self.z, mv, self.mv_groups)

    def wave_passes(self, X, wave: WaveRecord) -> np.ndarray:
        if not wave.cutoffs.present():
            return np.ones(len(X), dtype=bool)
        return imp.passes_batch(self.scores(X, wave), wave.cutoffs)

    def membership(self, X, upto: int | None = None) -> np.ndarray:
        """Boolean per row of ``X``: passes every wave's cutoffs (through wave ``upto``)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        alive = np.ones(len(X), dtype=bool)
        waves = self.waves if upto is None else self.waves[:upto]
        for wave in waves:
            idx = np.flatnonzero(alive)
            if idx.size == 0:
                break
            for s in range(0, idx.size, _BATCH):
                part = idx[s : s + _BATCH]
                alive[part] = self.wave_passes(X[part], wave)
        return alive

    def contains(self, x) -> bool:
        return bool(self.membership(np.asarray(x, dtype=float)[None, :])[0])

    def predicate(self, upto: int | None = None):
        return lambda X: self.membership(X, upto)


def membership(chain: WaveChain | None, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if chain is None or not chain.waves:
        return np.ones(len(X), dtype=bool)
    return chain.membership(X)


def uniform_candidates(n: int, d: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 11]))
    return rng.uniform(-1.0, 1.0, size=(n, d))


def space_fraction(chain: WaveChain | None, n_candidates: int, seed: int, d: int | None = None):
    """Monte Carlo fraction of the cube that is non-implausible, with its standard error."""
    if n_candidates < 1000:
        raise ValueError("space_fraction needs at least 1000 candidates")
    if chain is None or not chain.waves:
        return 1.0, 0.0
    d = d or chain.waves[0].emulators[0].dimension
    X = uniform_candidates(n_candidates, d, seed)
    p = float(chain.membership(X).mean())
    return p, math.sqrt(p * (1.0 - p) / n_candidates)


@dataclass(frozen=True)
class WaveSpec:
    runs: int
    max_active: int
    cutoffs: imp.CutoffSet
    outputs: tuple[int, ...] | None = None
    diagnostic_runs: int = 200


@dataclass(frozen=True)
class EngineSettings:
    seed: int = 0
    oversample: float = 2.0
    maximin_iterations: int = 200
    n_candidates: int = 20000
    diag_threshold: float = 3.0
    diag_max_fraction: float = 0.10
    override_diagnostics: bool = False
    max_failed_fraction: float = 0.10
    emulator: EmulatorConfig = EmulatorConfig()
    termination_fraction: float = 0.25
    inherit_active: bool = True  # later waves start stepwise selection from earlier active sets


def wave_design(chain: WaveChain | None, n: int, d: int, settings: EngineSettings, wave_index: int, tag: str):
    """Space-filling points inside the current non-implausible region."""
    seed = derive_seed(settings.seed, "design", tag, wave_index)
    if chain is None or not chain.waves:
        return space_filling(n, d, seed, settings.maximin_iterations)
    try:
        return constrained_design(n, chain.predicate(), d, settings.oversample, seed)
    except EmptyRegionError as exc:
        raise WaveAborted(
            f"wave {wave_index}: {exc}. The non-implausible region may be empty, which is a "
            "strong warning of problems with the simulator or with the data."
        ) from exc


def fit_wave(
    X, Y, outputs: Sequence[int], max_active: int, config: EmulatorConfig, run_ids=(), previous=None,
) -> list[Emulator]:
    """One emulator per output.  ``previous`` maps output index -> earlier active set."""
    cfg = replace(config, max_active=min(max_active, X.shape[1]))
    previous = previous or {}
    return [
        fit_emulator(X, Y[:, o], cfg, output_index=o, run_ids=run_ids, start_active=previous.get(o))
        for o in outputs
    ]


def inherited_active(chain: "WaveChain") -> dict[int, tuple[int, ...]]:
    """Latest active set per output over the chain's waves."""
    out: dict[int, tuple[int, ...]] = {}
    for rec in chain.waves:
        for em in rec.emulators:
            out[em.output_index] = em.active
    return out


def variance_ratio(emulators: Sequence[Emulator], budget: VarianceBudget, X_region) -> dict[int, float]:
    """Mean emulator variance over region samples divided by Var(eps_i) + Var(e_i)."""
    out = {}
    tot = budget.total_variance
    for em in emulators:
        if len(X_region) == 0:
            out[em.output_index] = float("nan")
            continue
        _, v = em.predict(X_region)
        out[em.output_index] = float(np.mean(v) / tot[em.output_index]) if tot[em.output_index] > 0 else math.inf
    return out


def should_terminate(record: WaveRecord, fraction: float) -> bool:
    r = record.variance_ratio or {}
    return bool(r) and all(v < fraction for v in r.values())


@dataclass
class WaveOutcome:
    record: WaveRecord
    train_X: np.ndarray
    train_Y: np.ndarray
    train_ok: np.ndarray
    diag_X: np.ndarray
    diag_Y: np.ndarray
    diag_ok: np.ndarray
    failures: dict
    diag_failures: dict
    report: DiagnosticReport | None
    gate_passed: bool


def evaluate_runs(simulator, X):
    res = simulator.evaluate(X)
    return res.outputs, res.ok, res.failures


def run_wave(
    chain: WaveChain,
    spec: WaveSpec,
    simulator,
    settings: EngineSettings,
    wave_index: int | None = None,
    train_runs=None,
    diag_runs=None,
) -> WaveOutcome:
    """One full wave.  The chain is extended only if diagnostics pass (or are overridden).

    ``train_runs`` / ``diag_runs`` may carry ``(X, Y, ok, failures)`` from an
    interrupted attempt so completed simulator runs are never repeated.
    """
    wave_index = wave_index or len(chain.waves) + 1
    d = simulator.dimension
    n_out = simulator.spec.output_count
    outputs = tuple(spec.outputs) if spec.outputs is not None else tuple(range(n_out))

    if train_runs is None:
        X = wave_design(chain, spec.runs, d, settings, wave_index, "train").points
        Y, ok, fails = evaluate_runs(simulator, X)
    else:
        X, Y, ok, fails = train_runs
    if 1.0 - ok.mean() > settings.max_failed_fraction:
        raise WaveAborted(f"wave {wave_index}: {int((~ok).sum())} of {len(ok)} simulator runs failed")

    if diag_runs is None and spec.diagnostic_runs > 0:
        Xd = wave_design(chain, spec.diagnostic_runs, d, settings, wave_index, "diagnostic").points
        Yd, okd, failsd = evaluate_runs(simulator, Xd)
    elif diag_runs is not None:
        Xd, Yd, okd, failsd = diag_runs
    else:
        Xd, Yd, okd, failsd = np.empty((0, d)), np.empty((0, n_out)), np.zeros(0, bool), {}

    previous = inherited_active(chain) if settings.inherit_active else None
    emulators = fit_wave(X[ok], Y[ok], outputs, spec.max_active, settings.emulator, previous=previous)

    report = None
    gate = True
    if len(Xd) and okd.any():
        report = held_out_diagnostics(
            emulators, Xd[okd], Yd[okd], settings.diag_threshold, settings.diag_max_fraction
        )
        gate = report.passed
    record = WaveRecord(
        index=wave_index, emulators=emulators, cutoffs=spec.cutoffs,
        n_train=int(ok.sum()), n_diagnostic=int(okd.sum()) if len(okd) else 0,
        diagnostics=report.summary() if report else None,
    )
    outcome = WaveOutcome(record, X, Y, ok, Xd, Yd, okd, fails, failsd, report, gate)
    if not gate and not settings.override_diagnostics:
        return outcome

    chain.waves.append(record)
    finish_record(chain, record, settings)
    return outcome


def finish_record(chain: WaveChain, record: WaveRecord, settings: EngineSettings) -> None:
    """Space fraction and termination statistic for the newest wave."""
    d = record.emulators[0].dimension if record.emulators else 1
    record.space_fraction, record.space_se = space_fraction(
        chain, settings.n_candidates, derive_seed(settings.seed, "space"), d
    )
    record.n_candidates = settings.n_candidates
    # the same candidate set every wave, so the fractions are exactly nested
    Xc = uniform_candidates(settings.n_candidates, d, derive_seed(settings.seed, "space"))
    inside = Xc[chain.membership(Xc)][:2000]
    record.variance_ratio = {str(k): v for k, v in variance_ratio(record.emulators, chain.budget, inside).items()}


@dataclass
class HarvestResult:
    X: np.ndarray
    Y: np.ndarray
    ok: np.ndarray
    i_m: np.ndarray
    accepted: np.ndarray
    failures: dict

    @property
    def n_accepted(self) -> int:
        return int(self.accepted.sum())


def harvest_acceptable(
    chain: WaveChain,
    simulator,
    n_target: int,
    final_cutoff_i_m: float,
    seed: int,
    oversample: float = 2.0,
    outputs: Sequence[int] | None = None,
) -> HarvestResult:
    """Run the real simulator inside the final region and keep runs with I_M below the cutoff.

    Implausibility is recomputed with zero emulator variance, over ``outputs``
    (default: every simulator output).
    """
    if not chain.waves:
        raise ValueError("harvest needs a non-empty chain")
    d = simulator.dimension
    design = constrained_design(n_target, chain.predicate(), d, oversample, derive_seed(seed, "harvest"))
    X = design.points
    Y, ok, fails = evaluate_runs(simulator, X)
    idx = list(outputs) if outputs is not None else list(range(simulator.spec.output_count))
    var = chain.budget.total_variance[idx]
    I = np.full((len(X), len(idx)), np.inf)
    I[ok] = imp.univariate(chain.z[idx], Y[ok][:, idx], 0.0, var)
    i_m = I.max(axis=1)
    accepted = ok & (i_m < final_cutoff_i_m)
    if not accepted.any():
        logger.warning("harvest: no run satisfied I_M < %s", final_cutoff_i_m)
    return HarvestResult(X, Y, ok, i_m, accepted, fails)
