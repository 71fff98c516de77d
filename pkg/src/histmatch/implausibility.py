"""Implausibility measures and cutoff tests."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np
from scipy import stats

from .emulator import Emulator, predict_many

STATISTICS = ("i_m", "i_2m", "i_3m", "i_mv")
_MV_JITTER = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)


class ImplausibilityConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CutoffSet:
    i_m: float | None = None
    i_2m: float | None = None
    i_3m: float | None = None
    i_mv: float | None = None

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if v is not None and not v > 0:
                raise ImplausibilityConfigError(f"cutoff {f.name} must be > 0, got {v}")

    @classmethod
    def from_dict(cls, d: dict | None) -> "CutoffSet":
        d = dict(d or {})
        unknown = set(d) - set(STATISTICS)
        if unknown:
            raise ImplausibilityConfigError(f"unknown cutoff statistic(s) {sorted(unknown)}")
        return cls(**{k: (None if v is None else float(v)) for k, v in d.items()})

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in STATISTICS if getattr(self, k) is not None}

    def present(self) -> dict[str, float]:
        return self.to_dict()


@dataclass(frozen=True)
class ImplausibilityResult:
    per_output: np.ndarray
    i_m: float | None
    i_2m: float | None
    i_3m: float | None
    i_mv: float | None = None

    def get(self, name: str) -> float | None:
        return getattr(self, name)


def combine(per_output) -> tuple[float | None, float | None, float | None]:
    """Largest, second and third largest values; ``None`` where undefined."""
    v = np.sort(np.asarray(per_output, dtype=float).ravel())[::-1]
    out = [float(v[k]) if k < len(v) else None for k in range(3)]
    return out[0], out[1], out[2]


def order_statistics(I: np.ndarray) -> np.ndarray:
    """Batch version of :func:`combine`: ``(m, q)`` -> ``(m, 3)``, NaN where undefined."""
    I = np.atleast_2d(I)
    top = -np.sort(-I, axis=1)[:, :3]
    if top.shape[1] < 3:
        top = np.concatenate([top, np.full((len(I), 3 - top.shape[1]), np.nan)], axis=1)
    return top


def predict_all(emulators: Sequence[Emulator], X) -> tuple[np.ndarray, np.ndarray, list[int]]:
    means, vars_ = predict_many(emulators, X)
    return means, vars_, [em.output_index for em in emulators]


def univariate(z, means, em_vars, budget_vars) -> np.ndarray:
    """|z - E f| / sqrt(Var f + Var eps + Var e), broadcasting over rows."""
    total = np.asarray(em_vars) + np.asarray(budget_vars)
    if np.any(total <= 0):
        raise ImplausibilityConfigError("total variance must be > 0 for every scored output")
    return np.abs(np.asarray(z) - np.asarray(means)) / np.sqrt(total)


def _budget_parts(budget, z, idx):
    z = np.asarray(z, dtype=float)
    if len(z) != budget.n_outputs:
        raise ImplausibilityConfigError(f"observation length {len(z)} != budget dimension {budget.n_outputs}")
    if any(i < 0 or i >= len(z) for i in idx):
        raise ImplausibilityConfigError(f"emulated outputs {idx} outside 0..{len(z) - 1}")
    cov = budget.total[np.ix_(idx, idx)]
    return z[idx], cov


def implausibility_matrix(X, emulators: Sequence[Emulator], budget, z) -> np.ndarray:
    means, vars_, idx = predict_all(emulators, X)
    zi, cov = _budget_parts(budget, z, idx)
    return univariate(zi, means, vars_, np.diag(cov))


def implausibility_vector(x, emulators: Sequence[Emulator], budget, z) -> np.ndarray:
    return implausibility_matrix(np.asarray(x, dtype=float)[None, :], emulators, budget, z)[0]


def mahalanobis_batch(diff: np.ndarray, em_vars: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """d^T (diag(em_vars) + cov)^-1 d per row, via Cholesky with jitter escalation."""
    diff = np.atleast_2d(diff)
    em_vars = np.atleast_2d(em_vars)
    V = cov[None, :, :] + em_vars[:, :, None] * np.eye(cov.shape[0])[None]
    scale = float(np.mean(np.diag(cov))) if cov.size else 1.0
    scale = scale if scale > 0 else 1.0
    eye = np.eye(cov.shape[0])[None]
    for level in _MV_JITTER:
        try:
            L = np.linalg.cholesky(V + level * scale * eye)
            break
        except np.linalg.LinAlgError:
            continue
    else:
        raise np.linalg.LinAlgError("implausibility covariance V(x) is not positive definite")
    y = np.linalg.solve(L, diff[:, :, None])[:, :, 0]
    return np.sum(y * y, axis=1)


def multivariate_matrix(
    X, emulators: Sequence[Emulator], budget, z, groups: Sequence[Sequence[int]] | None = None, *,
    _pred=None,
) -> np.ndarray:
    """I_MV per row: maximum over output groups of the squared Mahalanobis distance.

    ``groups`` are lists of output indices; default is one group holding every
    emulated output.
    """
    means, vars_, idx = _pred if _pred is not None else predict_all(emulators, X)
    zi, cov = _budget_parts(budget, z, idx)
    diff = zi - means
    if groups is None:
        return mahalanobis_batch(diff, vars_, cov)
    out = np.full(len(means), -np.inf)
    pos = {o: k for k, o in enumerate(idx)}
    for g in groups:
        cols = [pos[o] for o in g if o in pos]
        if not cols:
            continue
        out = np.maximum(out, mahalanobis_batch(diff[:, cols], vars_[:, cols], cov[np.ix_(cols, cols)]))
    return out


def multivariate_implausibility(x, emulators, budget, z, groups=None) -> float:
    return float(multivariate_matrix(np.asarray(x, dtype=float)[None, :], emulators, budget, z, groups)[0])


def evaluate(X, emulators, budget, z, multivariate: bool = False, groups=None) -> dict[str, np.ndarray]:
    """All statistics for a batch of points; keys ``per_output`` plus STATISTICS."""
    pred = predict_all(emulators, X)
    means, vars_, idx = pred
    zi, cov = _budget_parts(budget, z, idx)
    I = univariate(zi, means, vars_, np.diag(cov))
    top = order_statistics(I)
    out = {"per_output": I, "i_m": top[:, 0], "i_2m": top[:, 1], "i_3m": top[:, 2]}
    if multivariate:
        out["i_mv"] = multivariate_matrix(X, emulators, budget, z, groups, _pred=pred)
    return out


def result_at(x, emulators, budget, z, multivariate: bool = False, groups=None) -> ImplausibilityResult:
    r = evaluate(np.asarray(x, dtype=float)[None, :], emulators, budget, z, multivariate, groups)

    def scalar(k):
        if k not in r:
            return None
        v = float(r[k][0])
        return None if math.isnan(v) else v

    return ImplausibilityResult(r["per_output"][0], scalar("i_m"), scalar("i_2m"), scalar("i_3m"), scalar("i_mv"))


def passes(result: ImplausibilityResult, cutoffs: CutoffSet) -> bool:
    for name, bound in cutoffs.present().items():
        value = result.get(name)
        if value is None:
            raise ImplausibilityConfigError(f"cutoff on {name} but the statistic was not computed")
        if not value <= bound:
            return False
    return True


def passes_batch(scores: dict[str, np.ndarray], cutoffs: CutoffSet) -> np.ndarray:
    n = len(scores["per_output"])
    ok = np.ones(n, dtype=bool)
    for name, bound in cutoffs.present().items():
        if name not in scores or np.isnan(scores[name]).all():
            raise ImplausibilityConfigError(f"cutoff on {name} but the statistic was not computed")
        ok &= scores[name] <= bound
    return ok


def chi2_threshold(n_outputs: int, quantile: float = 0.995) -> float:
    """Heuristic I_MV cutoff: chi-square quantile with one degree of freedom per output."""
    return float(stats.chi2.ppf(quantile, n_outputs))


def scores_csv(X, scores: dict[str, np.ndarray], outputs: Sequence[int], passed, names=None) -> str:
    """Batch scoring table: inputs, per-output I, the combined statistics and a pass flag."""
    X = np.atleast_2d(X)
    names = list(names) if names is not None else [f"x{k}" for k in range(X.shape[1])]
    stat_cols = [s for s in STATISTICS if s in scores]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(names + [f"I_{o}" for o in outputs] + stat_cols + ["pass"])
    for r in range(len(X)):
        vals = list(X[r]) + list(scores["per_output"][r]) + [scores[s][r] for s in stat_cols]
        w.writerow([format(float(v), ".17g") for v in vals] + [int(bool(passed[r]))])
    return buf.getvalue()
