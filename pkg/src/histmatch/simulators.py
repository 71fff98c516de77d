"""Simulators: a closed-form synthetic luminosity function and an adapter for
external executables.

Every simulator exposes ``spec`` and ``evaluate(X)``, where ``X`` is an
``(n, d)`` array of unit-cube points.  ``evaluate`` never raises for a single
bad run; failures come back flagged in the :class:`BatchResult`.
"""
from __future__ import annotations

import enum
import json
import logging
import math
import os
import re
import subprocess
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .space import ParameterSpace

logger = logging.getLogger(__name__)

LN10 = math.log(10.0)


@dataclass(frozen=True)
class SimulatorSpec:
    output_count: int
    output_labels: tuple[str, ...]
    kind: str = "toy"

    def __post_init__(self):
        if self.output_count < 1:
            raise ValueError("simulator must produce at least one output")
        if len(self.output_labels) != self.output_count:
            raise ValueError(
                f"{len(self.output_labels)} output labels for {self.output_count} outputs"
            )
        if self.kind not in ("toy", "external"):
            raise ValueError(f"unknown simulator kind {self.kind!r}")


@dataclass
class ToyCoefficients:
    """Schechter-style log luminosity function whose shape moves linearly with x.

    amplitude A(x) = a0 + a.x, faint-end slope alpha(x) = alpha0 + b.x,
    break magnitude M*(x) = M0 + c.x, evaluated at the bin centres ``bins``.
    """

    a0: float
    a: np.ndarray
    alpha0: float
    b: np.ndarray
    M0: float
    c: np.ndarray
    bins: np.ndarray

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        self.c = np.asarray(self.c, dtype=float)
        self.bins = np.asarray(self.bins, dtype=float)
        if not (len(self.a) == len(self.b) == len(self.c)):
            raise ValueError("weight vectors a, b, c must share the input dimension")
        if len(self.bins) < 1 or np.any(np.diff(self.bins) <= 0):
            raise ValueError("bin centres must be strictly increasing")

    @property
    def dimension(self) -> int:
        return len(self.a)

    @property
    def output_count(self) -> int:
        return len(self.bins)

    def active_inputs(self) -> list[int]:
        w = (self.a != 0) | (self.b != 0) | (self.c != 0)
        return [int(k) for k in np.flatnonzero(w)]

    def to_dict(self) -> dict:
        return {
            "a0": self.a0, "a": self.a.tolist(),
            "alpha0": self.alpha0, "b": self.b.tolist(),
            "M0": self.M0, "c": self.c.tolist(),
            "bins": self.bins.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ToyCoefficients":
        return cls(**{k: d[k] for k in ("a0", "a", "alpha0", "b", "M0", "c", "bins")})


# per-vector input orderings: which input gets the largest weight, then the next...
_ORDERS = {
    "a": (0, 1, 2, 3, 4, 5, 6, 7),
    "b": (1, 0, 3, 2, 4, 6, 5, 7),
    "c": (2, 1, 0, 4, 3, 5, 7, 6),
}


def default_toy(
    dimension: int = 8,
    n_outputs: int = 11,
    n_active: int | None = None,
    decay: float | None = None,
    scales: tuple[float, float, float] = (0.30, 0.25, 0.25),
) -> ToyCoefficients:
    """Default synthetic coefficients.

    Weights fall off geometrically (ratio ``decay``, default 0.6) so roughly
    five inputs dominate.  ``n_active=k`` zeroes every weight of inputs
    ``k..d-1`` so exactly the first ``k`` inputs matter; the default decay is
    then 0.9 so every one of the ``k`` inputs visibly moves every output.
    """
    if n_active is not None and not 0 <= n_active <= dimension:
        raise ValueError("n_active must lie in [0, dimension]")
    if decay is None:
        decay = 0.6 if n_active is None else 0.9
    bins = np.linspace(-23.0, -18.0, n_outputs) if n_outputs > 1 else np.array([-20.5])
    vecs = {}
    for (key, order), scale in zip(_ORDERS.items(), scales):
        order = [k for k in order if k < dimension] + list(range(8, dimension))
        w = np.zeros(dimension)
        for pos, k in enumerate(order):
            w[k] = scale * decay**pos
        if n_active is not None:
            w[n_active:] = 0.0
        vecs[key] = w
    return ToyCoefficients(
        a0=-2.0, a=vecs["a"], alpha0=-1.0, b=vecs["b"],
        M0=float(np.median(bins)), c=vecs["c"], bins=bins,
    )


def toy_simulate(x, coeffs: ToyCoefficients) -> np.ndarray:
    """Evaluate the synthetic luminosity function.

    ``x`` may be one unit point ``(d,)`` or a batch ``(n, d)``; the result has
    matching leading shape and one column per bin.
    """
    x = np.asarray(x, dtype=float)
    A = coeffs.a0 + x @ coeffs.a
    alpha = coeffs.alpha0 + x @ coeffs.b
    mstar = coeffs.M0 + x @ coeffs.c
    log_t = 0.4 * (mstar[..., None] - coeffs.bins)
    t = 10.0**log_t
    return A[..., None] + (alpha[..., None] + 1.0) * log_t - t / LN10


class FailureKind(str, enum.Enum):
    EXIT_STATUS = "exit_status"
    TIMEOUT = "timeout"
    MISSING_OUTPUT = "missing_output"
    MALFORMED_OUTPUT = "malformed_output"
    LAUNCH = "launch"


class SimulatorFailure(RuntimeError):
    def __init__(self, kind: FailureKind, message: str):
        self.kind = FailureKind(kind)
        super().__init__(f"{self.kind.value}: {message}")


@dataclass
class BatchResult:
    outputs: np.ndarray
    ok: np.ndarray
    failures: dict[int, SimulatorFailure] = field(default_factory=dict)

    @property
    def failed_fraction(self) -> float:
        return float(1.0 - self.ok.mean()) if len(self.ok) else 0.0


class ToySimulator:
    def __init__(self, coeffs: ToyCoefficients, labels: Sequence[str] | None = None):
        self.coeffs = coeffs
        labels = tuple(labels) if labels else tuple(f"M={m:g}" for m in coeffs.bins)
        self.spec = SimulatorSpec(coeffs.output_count, labels, "toy")

    @property
    def dimension(self) -> int:
        return self.coeffs.dimension

    def evaluate(self, X) -> BatchResult:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        Y = toy_simulate(X, self.coeffs)
        return BatchResult(Y, np.ones(len(X), dtype=bool))

    def __call__(self, X) -> np.ndarray:
        return toy_simulate(X, self.coeffs)


@dataclass
class AdapterConfig:
    """How to drive an external simulator executable.

    ``command`` is an argv list; ``{input}``, ``{output}`` and ``{workdir}``
    are substituted per run.  The input file gets one ``name = raw_value``
    line per parameter.  The output file's first non-blank, non-``#`` line is
    split on commas/whitespace and ``columns`` picks the values, in order.
    """

    command: list[str]
    columns: list[int]
    input_file: str = "params.in"
    output_file: str = "outputs.txt"
    timeout: float = 3600.0
    workers: int = 1
    workdir: str | None = None
    keep_workdirs: bool = False

    @classmethod
    def from_dict(cls, d: dict) -> "AdapterConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown adapter keys: {sorted(extra)}")
        cfg = cls(**d)
        cfg.command = [str(c) for c in cfg.command]
        cfg.columns = [int(c) for c in cfg.columns]
        return cfg


_SPLIT = re.compile(r"[,\s]+")


def parse_output_file(path: Path, columns: Sequence[int]) -> np.ndarray:
    if not path.exists():
        raise SimulatorFailure(FailureKind.MISSING_OUTPUT, f"output file {path.name} not written")
    line = None
    for raw in path.read_text().splitlines():
        raw = raw.strip()
        if raw and not raw.startswith("#"):
            line = raw
            break
    if line is None:
        raise SimulatorFailure(FailureKind.MALFORMED_OUTPUT, f"{path.name} contains no data line")
    fields = [f for f in _SPLIT.split(line) if f]
    values = []
    for col in columns:
        if col >= len(fields) or col < -len(fields):
            raise SimulatorFailure(
                FailureKind.MALFORMED_OUTPUT,
                f"column {col} missing from {path.name} (line has {len(fields)} fields)",
            )
        try:
            values.append(float(fields[col]))
        except ValueError:
            raise SimulatorFailure(
                FailureKind.MALFORMED_OUTPUT, f"column {col} of {path.name} is not numeric: {fields[col]!r}"
            ) from None
    return np.array(values)


def write_input_file(path: Path, names: Sequence[str], raw: Sequence[float]) -> None:
    path.write_text("".join(f"{n} = {float(v)!r}\n" for n, v in zip(names, raw)))


def read_input_file(path) -> dict[str, float]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = float(v)
    return out


class ExternalSimulator:
    def __init__(self, space: ParameterSpace, adapter: AdapterConfig, labels: Sequence[str]):
        self.space = space
        self.adapter = adapter
        self.spec = SimulatorSpec(len(adapter.columns), tuple(labels), "external")

    @property
    def dimension(self) -> int:
        return self.space.dimension

    def run_one(self, u, tag: str = "run") -> np.ndarray:
        raw = self.space.from_unit(u)
        base = self.adapter.workdir
        if base:
            Path(base).mkdir(parents=True, exist_ok=True)
        wd = Path(tempfile.mkdtemp(prefix=f"{tag}-", dir=base))
        inp = wd / self.adapter.input_file
        out = wd / self.adapter.output_file
        write_input_file(inp, self.space.names, raw)
        argv = [a.format(input=str(inp), output=str(out), workdir=str(wd)) for a in self.adapter.command]
        try:
            proc = subprocess.run(
                argv, cwd=wd, capture_output=True, text=True, timeout=self.adapter.timeout
            )
        except subprocess.TimeoutExpired:
            raise SimulatorFailure(FailureKind.TIMEOUT, f"exceeded {self.adapter.timeout}s") from None
        except OSError as exc:
            raise SimulatorFailure(FailureKind.LAUNCH, str(exc)) from None
        if proc.returncode != 0:
            tail = (proc.stderr or "").strip().splitlines()[-1:] or [""]
            raise SimulatorFailure(FailureKind.EXIT_STATUS, f"exit status {proc.returncode} {tail[0]}".rstrip())
        values = parse_output_file(out, self.adapter.columns)
        if not self.adapter.keep_workdirs:
            for p in wd.iterdir():
                p.unlink()
            wd.rmdir()
        return values

    def evaluate(self, X, workers: int | None = None) -> BatchResult:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        n, m = len(X), self.spec.output_count
        Y = np.full((n, m), np.nan)
        ok = np.zeros(n, dtype=bool)
        failures: dict[int, SimulatorFailure] = {}

        def job(i):
            try:
                return i, self.run_one(X[i], tag=f"run{i:05d}"), None
            except SimulatorFailure as exc:
                return i, None, exc

        workers = workers or int(os.environ.get("HISTMATCH_WORKERS", self.adapter.workers))
        with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
            # results keyed by design index, so completion order does not matter
            for i, y, exc in pool.map(job, range(n)):
                if exc is None:
                    Y[i] = y
                    ok[i] = True
                else:
                    logger.warning("run %d failed: %s", i, exc)
                    failures[i] = exc
        return BatchResult(Y, ok, failures)


def external_simulate(x, space: ParameterSpace, adapter: AdapterConfig, labels=None) -> np.ndarray:
    labels = labels or [f"y{k}" for k in range(len(adapter.columns))]
    return ExternalSimulator(space, adapter, labels).run_one(x)


def synthesize_observations(x_star, coeffs: ToyCoefficients, budget, seed: int) -> np.ndarray:
    """Observation vector z = f(x*) + discrepancy draw + observation-error draw.

    Gaussian draws are a harness convenience; only their covariances matter.
    """
    f_star = toy_simulate(np.asarray(x_star, dtype=float), coeffs)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 3]))
    eps = _gaussian_draw(budget.total_discrepancy, rng, "discrepancy")
    e = _gaussian_draw(budget.total_observation, rng, "observation")
    return f_star + eps + e


def _gaussian_draw(cov: np.ndarray, rng: np.random.Generator, what: str, size=None) -> np.ndarray:
    from .budget import BudgetConfigError

    cov = np.asarray(cov, dtype=float)
    w, V = np.linalg.eigh(0.5 * (cov + cov.T))
    scale = max(1.0, float(np.abs(w).max()) if w.size else 1.0)
    if w.size and w.min() < -1e-10 * scale:
        raise BudgetConfigError(f"{what} covariance is not positive semidefinite (min eigenvalue {w.min():.3g})")
    root = V * np.sqrt(np.clip(w, 0.0, None))
    shape = (len(cov),) if size is None else (size, len(cov))
    return rng.standard_normal(shape) @ root.T


def _toy_exec_main(argv=None) -> int:
    """Command-line stand-in for an external simulator, wrapping the toy.

    usage: python -m histmatch.simulators SPEC.json INPUT OUTPUT
    SPEC.json holds {"parameters": [...], "coefficients": {...}}.
    """
    argv = sys.argv[1:] if argv is None else argv
    if len(argv) != 3:
        print("usage: python -m histmatch.simulators SPEC.json INPUT OUTPUT", file=sys.stderr)
        return 2
    spec = json.loads(Path(argv[0]).read_text())
    from .space import ParameterDef

    space = ParameterSpace(ParameterDef(p["name"], p["min"], p["max"]) for p in spec["parameters"])
    coeffs = ToyCoefficients.from_dict(spec["coefficients"])
    values = read_input_file(argv[1])
    raw = np.array([values[n] for n in space.names])
    y = toy_simulate(space.to_unit(raw), coeffs)
    Path(argv[2]).write_text(",".join(repr(float(v)) for v in y) + "\n")
    return 0


if __name__ == "__main__":
    raise SystemExit(_toy_exec_main())
