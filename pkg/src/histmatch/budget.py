"""Variance budget: model discrepancy and observation error covariances."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

CLASSES = ("discrepancy", "observation")
PSD_TOL = 1e-10


class BudgetConfigError(ValueError):
    pass


def _min_eig(cov: np.ndarray) -> float:
    if cov.size == 0:
        return 0.0
    return float(np.linalg.eigvalsh(cov).min())


def check_psd(cov: np.ndarray, name: str) -> None:
    w = np.linalg.eigvalsh(cov) if cov.size else np.zeros(0)
    scale = max(1.0, float(np.abs(w).max()) if w.size else 1.0)
    if w.size and w.min() < -PSD_TOL * scale:
        raise BudgetConfigError(
            f"component {name!r}: covariance not positive semidefinite (min eigenvalue {w.min():.3g})"
        )


@dataclass(frozen=True)
class BudgetComponent:
    name: str
    kind: str
    cov: np.ndarray

    def __post_init__(self):
        if self.kind not in CLASSES:
            raise BudgetConfigError(f"component {self.name!r}: class must be one of {CLASSES}, got {self.kind!r}")
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape[0] != cov.shape[1]:
            raise BudgetConfigError(f"component {self.name!r}: covariance must be square, got {cov.shape}")
        if not np.allclose(cov, cov.T, rtol=0, atol=1e-12 * max(1.0, np.abs(cov).max())):
            raise BudgetConfigError(f"component {self.name!r}: covariance not symmetric")
        cov = 0.5 * (cov + cov.T)
        check_psd(cov, self.name)
        cov.setflags(write=False)
        object.__setattr__(self, "cov", cov)

    @property
    def variances(self) -> np.ndarray:
        return np.diag(self.cov)


def grouped_covariance(
    n_outputs: int, sd, groups: Sequence[dict] | None = None
) -> np.ndarray:
    """Diagonal from ``sd`` plus a uniform correlation ``rho`` inside each group.

    ``groups`` is a list of ``{"outputs": [...], "rho": r}``.
    """
    sd = np.broadcast_to(np.asarray(sd, dtype=float), (n_outputs,)).copy()
    if (sd < 0).any():
        raise BudgetConfigError("standard deviations must be >= 0")
    corr = np.eye(n_outputs)
    for g in groups or ():
        idx = np.asarray(g["outputs"], dtype=int)
        rho = float(g["rho"])
        if not -1.0 <= rho <= 1.0:
            raise BudgetConfigError(f"correlation {rho} outside [-1, 1]")
        if idx.size and (idx.min() < 0 or idx.max() >= n_outputs):
            raise BudgetConfigError(f"group outputs {idx.tolist()} outside 0..{n_outputs - 1}")
        block = np.ix_(idx, idx)
        corr[block] = rho
        corr[idx, idx] = 1.0
    return corr * np.outer(sd, sd)


@dataclass(frozen=True)
class VarianceBudget:
    components: tuple[BudgetComponent, ...]
    n_outputs: int
    total_discrepancy: np.ndarray = field(repr=False, default=None)
    total_observation: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        names = [c.name for c in self.components]
        if len(set(names)) != len(names):
            raise BudgetConfigError(f"duplicate component names in {names}")
        totals = {k: np.zeros((self.n_outputs, self.n_outputs)) for k in CLASSES}
        for c in self.components:
            if c.cov.shape != (self.n_outputs, self.n_outputs):
                raise BudgetConfigError(
                    f"component {c.name!r}: expected {self.n_outputs}x{self.n_outputs}, got {c.cov.shape}"
                )
            totals[c.kind] = totals[c.kind] + c.cov
        for k, m in totals.items():
            m.setflags(write=False)
        object.__setattr__(self, "total_discrepancy", totals["discrepancy"])
        object.__setattr__(self, "total_observation", totals["observation"])

    @property
    def total(self) -> np.ndarray:
        return self.total_discrepancy + self.total_observation

    @property
    def total_variance(self) -> np.ndarray:
        return np.diag(self.total).copy()

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.components]

    def component(self, name: str) -> BudgetComponent:
        for c in self.components:
            if c.name == name:
                return c
        raise KeyError(f"unknown budget component {name!r}; have {self.names}")


def zero_budget(n_outputs: int) -> VarianceBudget:
    return VarianceBudget((), n_outputs)


def build_budget(components: Iterable[BudgetComponent | dict], n_outputs: int | None = None) -> VarianceBudget:
    comps = []
    for c in components:
        if isinstance(c, dict):
            c = BudgetComponent(c["name"], c.get("class", c.get("kind")), np.asarray(c["cov"], dtype=float))
        comps.append(c)
    if n_outputs is None:
        if not comps:
            raise BudgetConfigError("n_outputs required for an empty budget")
        n_outputs = comps[0].cov.shape[0]
    budget = VarianceBudget(tuple(comps), n_outputs)
    check_psd(budget.total_discrepancy, "total discrepancy")
    check_psd(budget.total_observation, "total observation")
    return budget


def scale_component(budget: VarianceBudget, name: str, factor: float) -> VarianceBudget:
    if factor < 0:
        raise BudgetConfigError("scale factor must be >= 0")
    budget.component(name)
    comps = tuple(replace(c, cov=c.cov * factor) if c.name == name else c for c in budget.components)
    return VarianceBudget(comps, budget.n_outputs)


def budget_report(budget: VarianceBudget, labels: Sequence[str] | None = None) -> list[dict]:
    """Per-output standard deviation of every component, plus the quadrature total."""
    labels = list(labels) if labels is not None else [str(i) for i in range(budget.n_outputs)]
    rows = []
    for i in range(budget.n_outputs):
        row = {"output": i, "label": labels[i]}
        var_total = 0.0
        for c in budget.components:
            v = max(float(c.cov[i, i]), 0.0)
            row[f"sd_{c.name}"] = np.sqrt(v)
            var_total += v
        row["sd_total"] = np.sqrt(var_total)
        rows.append(row)
    return rows


def budget_report_csv(budget: VarianceBudget, labels=None) -> str:
    rows = budget_report(budget, labels)
    cols = ["output", "label", *[f"sd_{c.name}" for c in budget.components], "sd_total"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([r["output"], r["label"], *(format(r[c], ".17g") for c in cols[2:])])
    return buf.getvalue()


def estimate_inactive_covariance(
    simulate,
    dimension: int,
    active: Sequence[int],
    n_active_points: int = 10,
    n_inactive_points: int = 50,
    seed: int = 0,
) -> np.ndarray:
    """Covariance of outputs when only the inactive inputs vary.

    For each of ``n_active_points`` settings of the active inputs, the
    inactive ones are swept over a Latin hypercube; the within-setting
    covariances are averaged.
    """
    from .design import latin_hypercube

    active = sorted(set(int(a) for a in active))
    inactive = [k for k in range(dimension) if k not in active]
    if not inactive:
        out = np.atleast_2d(simulate(np.zeros((1, dimension))))
        return np.zeros((out.shape[1], out.shape[1]))
    outer = latin_hypercube(n_active_points, max(len(active), 1), seed).points
    covs = []
    for i in range(n_active_points):
        inner = latin_hypercube(n_inactive_points, len(inactive), seed + 1 + i).points
        X = np.zeros((n_inactive_points, dimension))
        X[:, inactive] = inner
        if active:
            X[:, active] = outer[i, : len(active)]
        Y = np.atleast_2d(simulate(X))
        covs.append(np.cov(Y, rowvar=False, ddof=1))
    return np.atleast_2d(np.mean(covs, axis=0))
