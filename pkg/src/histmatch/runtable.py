"""Run tables: simulator runs with their coordinates, outputs and status.

CSV dialect: comma separated, header row, fixed column order, floats written
with 17 significant digits so a write/read cycle is bit exact.
"""
from __future__ import annotations

import csv
import io
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .space import ParameterSpace

ROLES = ("train", "diagnostic", "harvest")
STATUSES = ("ok", "failed", "pending")


def fmt(x: float) -> str:
    x = float(x)
    if np.isnan(x):
        return "nan"
    return format(x, ".17g")


def timestamp() -> str:
    """UTC timestamp; honours SOURCE_DATE_EPOCH for reproducible outputs."""
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = float(epoch) if epoch else time.time()
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(t))


@dataclass
class RunTable:
    space: ParameterSpace
    n_outputs: int
    run_id: list[str] = field(default_factory=list)
    wave: list[int] = field(default_factory=list)
    role: list[str] = field(default_factory=list)
    status: list[str] = field(default_factory=list)
    seed: list[int] = field(default_factory=list)
    stamp: list[str] = field(default_factory=list)
    failure: list[str] = field(default_factory=list)
    unit: np.ndarray = None
    outputs: np.ndarray = None

    def __post_init__(self):
        d = self.space.dimension
        self.unit = np.empty((0, d)) if self.unit is None else np.atleast_2d(np.asarray(self.unit, dtype=float)).reshape(-1, d)
        self.outputs = (
            np.empty((0, self.n_outputs)) if self.outputs is None
            else np.asarray(self.outputs, dtype=float).reshape(-1, self.n_outputs)
        )
        self._validate()

    def _validate(self):
        n = len(self.run_id)
        lens = {len(self.wave), len(self.role), len(self.status), len(self.seed), len(self.stamp),
                len(self.failure), len(self.unit), len(self.outputs)}
        if lens != {n}:
            raise ValueError("run table columns have inconsistent lengths")
        if len(set(self.run_id)) != n:
            raise ValueError("duplicate run ids in run table")
        bad = sorted(set(self.status) - set(STATUSES))
        if bad:
            raise ValueError(f"unknown run status {bad[0]!r}")
        ok = np.array([s == "ok" for s in self.status], dtype=bool)
        if ok.any() and not np.isfinite(self.outputs[ok]).all():
            raise ValueError("rows with status ok must have finite outputs")

    def __len__(self) -> int:
        return len(self.run_id)

    @property
    def raw(self) -> np.ndarray:
        return self.space.from_unit(self.unit) if len(self) else np.empty((0, self.space.dimension))

    @property
    def ok(self) -> np.ndarray:
        return np.array([s == "ok" for s in self.status], dtype=bool)

    def append(self, ids, wave, role, unit, outputs, ok, seed, failures=None):
        unit = np.atleast_2d(np.asarray(unit, dtype=float))
        outputs = np.atleast_2d(np.asarray(outputs, dtype=float)).reshape(len(unit), self.n_outputs)
        ok = np.asarray(ok, dtype=bool)
        failures = failures or {}
        stamp = timestamp()
        self.run_id.extend(ids)
        self.wave.extend([int(wave)] * len(unit))
        self.role.extend([role] * len(unit))
        self.status.extend(["ok" if o else "failed" for o in ok])
        self.seed.extend([int(seed)] * len(unit))
        self.stamp.extend([stamp] * len(unit))
        self.failure.extend([str(failures.get(i, "")) for i in range(len(unit))])
        self.unit = np.vstack([self.unit, unit])
        self.outputs = np.vstack([self.outputs, np.where(ok[:, None], outputs, np.nan)])
        self._validate()
        return self

    @property
    def pending(self) -> np.ndarray:
        return np.array([s == "pending" for s in self.status], dtype=bool)

    def add_pending(self, ids, wave, role, unit, seed):
        """Designed but not yet simulated rows."""
        unit = np.atleast_2d(np.asarray(unit, dtype=float))
        self.run_id.extend(ids)
        self.wave.extend([int(wave)] * len(unit))
        self.role.extend([role] * len(unit))
        self.status.extend(["pending"] * len(unit))
        self.seed.extend([int(seed)] * len(unit))
        self.stamp.extend([""] * len(unit))
        self.failure.extend([""] * len(unit))
        self.unit = np.vstack([self.unit, unit])
        self.outputs = np.vstack([self.outputs, np.full((len(unit), self.n_outputs), np.nan)])
        self._validate()
        return self

    def record(self, rows, outputs, ok, failures=None):
        """Store simulator results for row positions ``rows``."""
        rows = np.asarray(rows, dtype=int)
        outputs = np.atleast_2d(np.asarray(outputs, dtype=float)).reshape(len(rows), self.n_outputs)
        ok = np.asarray(ok, dtype=bool)
        failures = failures or {}
        stamp = timestamp()
        for k, r in enumerate(rows):
            self.status[r] = "ok" if ok[k] else "failed"
            self.stamp[r] = stamp
            self.failure[r] = "" if ok[k] else str(failures.get(k, "failed"))
            self.outputs[r] = outputs[k] if ok[k] else np.nan
        self._validate()
        return self

    def select(self, mask) -> "RunTable":
        mask = np.asarray(mask, dtype=bool)
        pick = lambda col: [v for v, m in zip(col, mask) if m]  # noqa: E731
        return RunTable(
            self.space, self.n_outputs, pick(self.run_id), pick(self.wave), pick(self.role),
            pick(self.status), pick(self.seed), pick(self.stamp), pick(self.failure),
            self.unit[mask], self.outputs[mask],
        )

    def where(self, role: str | None = None, wave: int | None = None, ok_only: bool = False) -> "RunTable":
        mask = np.ones(len(self), dtype=bool)
        if role is not None:
            mask &= np.array([r == role for r in self.role], dtype=bool)
        if wave is not None:
            mask &= np.array([w == wave for w in self.wave], dtype=bool)
        if ok_only:
            mask &= self.ok
        return self.select(mask)

    # --- CSV ---

    def columns(self) -> list[str]:
        names = self.space.names
        return (
            ["run_id", "wave", "role", "status", "seed", "timestamp"]
            + [f"u_{n}" for n in names]
            + list(names)
            + [f"y{k}" for k in range(self.n_outputs)]
            + ["failure"]
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns())
        raw = self.raw
        for i in range(len(self)):
            w.writerow(
                [self.run_id[i], self.wave[i], self.role[i], self.status[i], self.seed[i], self.stamp[i]]
                + [fmt(v) for v in self.unit[i]]
                + [fmt(v) for v in raw[i]]
                + [fmt(v) for v in self.outputs[i]]
                + [self.failure[i]]
            )
        return buf.getvalue()

    def save(self, path) -> None:
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(self.to_csv())
        tmp.replace(path)

    @classmethod
    def from_csv(cls, text: str, space: ParameterSpace, n_outputs: int) -> "RunTable":
        rows = list(csv.reader(io.StringIO(text)))
        table = cls(space, n_outputs)
        if not rows:
            return table
        header, body = rows[0], rows[1:]
        if header != table.columns():
            raise ValueError("run table header does not match the campaign's parameters/outputs")
        d = space.dimension
        ids, wave, role, status, seed, stamp, fail, U, Y = [], [], [], [], [], [], [], [], []
        for r in body:
            ids.append(r[0]); wave.append(int(r[1])); role.append(r[2]); status.append(r[3])  # noqa: E702
            seed.append(int(r[4])); stamp.append(r[5])  # noqa: E702
            U.append([float(v) for v in r[6 : 6 + d]])
            Y.append([float(v) for v in r[6 + 2 * d : 6 + 2 * d + n_outputs]])
            fail.append(r[-1])
        return cls(space, n_outputs, ids, wave, role, status, seed, stamp, fail,
                   np.array(U).reshape(-1, d), np.array(Y).reshape(-1, n_outputs))

    @classmethod
    def load(cls, path, space: ParameterSpace, n_outputs: int) -> "RunTable":
        return cls.from_csv(Path(path).read_text(), space, n_outputs)


def concat(tables: Sequence[RunTable]) -> RunTable:
    first = tables[0]
    out = RunTable(first.space, first.n_outputs)
    for t in tables:
        out.run_id += t.run_id
        out.wave += t.wave
        out.role += t.role
        out.status += t.status
        out.seed += t.seed
        out.stamp += t.stamp
        out.failure += t.failure
        out.unit = np.vstack([out.unit, t.unit])
        out.outputs = np.vstack([out.outputs, t.outputs])
    out._validate()
    return out
