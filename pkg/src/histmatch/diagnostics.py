"""Held-out validation of emulators and per-wave regression summaries."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .emulator import Emulator

DEFAULT_THRESHOLD = 3.0
DEFAULT_MAX_FRACTION = 0.10


class DiagnosticOverlapError(ValueError):
    """Diagnostic points coincide with training points, which voids the check."""


@dataclass
class DiagnosticReport:
    outputs: list[int]
    errors: np.ndarray  # (n_runs, n_outputs) standardised errors
    means: np.ndarray
    variances: np.ndarray
    observed: np.ndarray
    threshold: float
    max_fraction: float
    run_ids: list[str]

    @property
    def exceed_fraction(self) -> np.ndarray:
        if len(self.errors) == 0:
            return np.zeros(len(self.outputs))
        return np.mean(np.abs(self.errors) > self.threshold, axis=0)

    @property
    def mean_error(self) -> np.ndarray:
        return np.mean(self.errors, axis=0) if len(self.errors) else np.zeros(len(self.outputs))

    @property
    def flagged(self) -> list[int]:
        return [o for o, f in zip(self.outputs, self.exceed_fraction) if f > self.max_fraction]

    @property
    def passed(self) -> bool:
        return not self.flagged

    def summary(self) -> dict:
        return {
            "passed": self.passed,
            "threshold": self.threshold,
            "max_fraction": self.max_fraction,
            "n_runs": int(len(self.errors)),
            "outputs": list(self.outputs),
            "exceed_fraction": [float(f) for f in self.exceed_fraction],
            "mean_error": [float(m) for m in self.mean_error],
            "flagged": self.flagged,
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["run_id", "output", "simulator", "emulator_mean", "emulator_var", "std_error", "exceeds"])
        for i, rid in enumerate(self.run_ids):
            for k, o in enumerate(self.outputs):
                e = self.errors[i, k]
                w.writerow([
                    rid, o, format(self.observed[i, k], ".17g"), format(self.means[i, k], ".17g"),
                    format(self.variances[i, k], ".17g"), format(e, ".17g"), int(abs(e) > self.threshold),
                ])
        return buf.getvalue()


def _overlap(X_diag: np.ndarray, X_train: np.ndarray) -> np.ndarray:
    if len(X_diag) == 0 or len(X_train) == 0:
        return np.zeros(len(X_diag), dtype=bool)
    train = {row.tobytes() for row in np.ascontiguousarray(X_train)}
    return np.array([row.tobytes() in train for row in np.ascontiguousarray(X_diag)])


def standardized_errors(em: Emulator, X, y) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    mean, var = em.predict(X)
    y = np.asarray(y, dtype=float)
    num = y - mean
    denom = np.sqrt(np.maximum(var, em.sigma_w2))
    tiny = 1e-8 * (1.0 + np.abs(y))
    # error and sd both at round-off level (zero-nugget interpolation): score 0
    exact = (np.abs(num) <= tiny) & (denom <= tiny)
    with np.errstate(divide="ignore", invalid="ignore"):
        err = np.where(exact, 0.0, num / denom)
    return err, mean, var


def held_out_diagnostics(
    emulators: Sequence[Emulator],
    X_diag,
    Y_diag,
    threshold: float = DEFAULT_THRESHOLD,
    max_fraction: float = DEFAULT_MAX_FRACTION,
    run_ids: Sequence[str] | None = None,
    allow_overlap: bool = False,
) -> DiagnosticReport:
    """Standardised errors (f(x) - E f(x)) / sd of every emulator on held-out runs.

    ``Y_diag`` holds full simulator output vectors; each emulator reads its
    own ``output_index`` column.  An output is flagged when more than
    ``max_fraction`` of its errors exceed ``threshold`` in magnitude.
    ``allow_overlap`` exists only to test the interpolation property.
    """
    X_diag = np.atleast_2d(np.asarray(X_diag, dtype=float))
    Y_diag = np.atleast_2d(np.asarray(Y_diag, dtype=float))
    if not allow_overlap:
        for em in emulators:
            clash = _overlap(X_diag, em.X_train)
            if clash.any():
                raise DiagnosticOverlapError(
                    f"{int(clash.sum())} diagnostic point(s) are training points of emulator "
                    f"for output {em.output_index}"
                )
    n, q = len(X_diag), len(emulators)
    errs, means, vars_, obs = (np.empty((n, q)) for _ in range(4))
    for k, em in enumerate(emulators):
        y = Y_diag[:, em.output_index]
        errs[:, k], means[:, k], vars_[:, k] = standardized_errors(em, X_diag, y)
        obs[:, k] = y
    ids = list(run_ids) if run_ids is not None else [str(i) for i in range(n)]
    return DiagnosticReport(
        [em.output_index for em in emulators], errs, means, vars_, obs, threshold, max_fraction, ids
    )


def regression_progression(chain) -> list[dict]:
    """(wave, output) rows of residual sd and adjusted R^2 for every emulator in the chain."""
    rows = []
    for rec in chain.waves:
        for em in rec.emulators:
            s = em.summary
            rows.append({
                "wave": rec.index,
                "output": em.output_index,
                "n_runs": s.n_runs,
                "active": " ".join(str(a) for a in em.active),
                "n_active": len(em.active),
                "degree": s.degree,
                "basis_size": s.basis_size,
                "residual_sd": s.residual_sd,
                "adjusted_r2": s.adjusted_r2,
            })
    return rows


def progression_csv(rows: list[dict]) -> str:
    cols = ["wave", "output", "n_runs", "active", "n_active", "degree", "basis_size", "residual_sd", "adjusted_r2"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([format(r[c], ".17g") if isinstance(r[c], float) else r[c] for c in cols])
    return buf.getvalue()
