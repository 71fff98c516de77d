"""Per-output Bayes linear emulator.

Each output is modelled as a cubic (or lower) polynomial in a few active
inputs, plus a residual process with squared-exponential correlation over
the same inputs, plus an uncorrelated nugget.  The polynomial is fitted by
least squares; the residual process is then adjusted by the training runs
with the Bayes linear update.
"""
from __future__ import annotations

import itertools
import hashlib
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.linalg as sla
from scipy.spatial.distance import cdist

logger = logging.getLogger(__name__)

FORMAT = "histmatch-emulator/1"
JITTER_LEVELS = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)
_CHUNK = 4096


class FactorizationError(np.linalg.LinAlgError):
    def __init__(self, smallest_pivot: float, what: str = "matrix"):
        self.smallest_pivot = smallest_pivot
        super().__init__(f"{what} is not positive definite (smallest pivot {smallest_pivot:.6g})")


def smallest_pivot(A: np.ndarray) -> float:
    # D is block diagonal (1x1 and 2x2 pivots) with the inertia of A
    _, d, _ = sla.ldl(A, lower=True)
    return float(np.linalg.eigvalsh(d).min()) if d.size else 0.0


def cholesky(A: np.ndarray, what: str = "matrix") -> np.ndarray:
    """Lower Cholesky factor, or FactorizationError naming the smallest pivot."""
    try:
        return sla.cholesky(A, lower=True, check_finite=True)
    except np.linalg.LinAlgError:
        raise FactorizationError(smallest_pivot(A), what) from None


def cholesky_jittered(A: np.ndarray, what: str = "matrix") -> tuple[np.ndarray, float]:
    """Cholesky with escalating diagonal jitter (relative to the mean diagonal).

    Returns the factor and the absolute jitter that was added.
    """
    scale = float(np.mean(np.diag(A))) if A.size else 1.0
    if not scale > 0:
        scale = 1.0
    eye = np.eye(len(A))
    for level in JITTER_LEVELS:
        jitter = level * scale
        try:
            return sla.cholesky(A + jitter * eye, lower=True), jitter
        except np.linalg.LinAlgError:
            continue
    raise FactorizationError(smallest_pivot(A), what)


def bl_adjust(prior_mean, prior_cov, cross_cov, data_cov, data_mean, data):
    """Bayes linear adjustment of y by data z.

    E_z[y] = E(y) + Cov(y,z) Var(z)^-1 (z - E(z))
    Var_z[y] = Var(y) - Cov(y,z) Var(z)^-1 Cov(z,y)
    """
    prior_mean = np.atleast_1d(np.asarray(prior_mean, dtype=float))
    prior_cov = np.atleast_2d(np.asarray(prior_cov, dtype=float))
    data_cov = np.atleast_2d(np.asarray(data_cov, dtype=float))
    cross_cov = np.asarray(cross_cov, dtype=float).reshape(len(prior_mean), len(data_cov))
    resid = np.atleast_1d(np.asarray(data, dtype=float) - np.asarray(data_mean, dtype=float))
    L = cholesky(data_cov, "data covariance")
    w = sla.solve_triangular(L, resid, lower=True)
    V = sla.solve_triangular(L, cross_cov.T, lower=True)
    mean = prior_mean + V.T @ w
    cov = prior_cov - V.T @ V
    return mean, 0.5 * (cov + cov.T)


def correlation(X1, X2, theta: float) -> np.ndarray:
    """exp(-||x - x'||^2 / theta^2) for every pair of rows."""
    X1 = np.atleast_2d(X1)
    X2 = np.atleast_2d(X2)
    if X1.shape[1] == 0:
        return np.ones((len(X1), len(X2)))
    # direct differences keep Corr(x, x) exactly 1
    return np.exp(-cdist(X1, X2, "sqeuclidean") / theta**2)


# --- polynomial trend -----------------------------------------------------

def monomial_exponents(n_vars: int, degree: int) -> np.ndarray:
    """Exponent vectors of every monomial up to total ``degree``; constant first."""
    rows = [np.zeros(n_vars, dtype=int)]
    for deg in range(1, degree + 1):
        for combo in itertools.combinations_with_replacement(range(n_vars), deg):
            e = np.zeros(n_vars, dtype=int)
            for k in combo:
                e[k] += 1
            rows.append(e)
    return np.array(rows, dtype=int).reshape(len(rows), n_vars)


def basis_size(n_vars: int, degree: int) -> int:
    return math.comb(n_vars + degree, degree)


def basis_matrix(Xa: np.ndarray, exponents: np.ndarray) -> np.ndarray:
    Xa = np.atleast_2d(Xa)
    exponents = np.asarray(exponents, dtype=int).reshape(len(exponents), -1)
    G = np.ones((len(Xa), len(exponents)))
    if exponents.size == 0:
        return G
    top = int(exponents.max())
    powers = [np.ones_like(Xa)]
    for _ in range(top):
        powers.append(powers[-1] * Xa)
    for k in range(exponents.shape[1]):
        for p in range(1, top + 1):
            cols = np.flatnonzero(exponents[:, k] == p)
            if cols.size:
                G[:, cols] *= powers[p][:, k : k + 1]
    return G


def effective_degree(n_runs: int, n_vars: int, degree: int) -> int:
    """Highest degree <= ``degree`` with at least three runs per basis term (floor 1)."""
    for deg in range(degree, 0, -1):
        if n_runs >= 3 * basis_size(n_vars, deg):
            return deg
    return 1


@dataclass(frozen=True)
class RegressionSummary:
    residual_sd: float
    adjusted_r2: float
    r2: float
    basis_size: int
    active: tuple[int, ...]
    degree: int
    n_runs: int


@dataclass
class RegressionFit:
    coefficients: np.ndarray
    exponents: np.ndarray
    summary: RegressionSummary
    dropped: tuple[int, ...] = ()


def _r2_stats(y, fitted, n, p):
    ss_res = float(np.sum((y - fitted) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    sigma = math.sqrt(ss_res / (n - p)) if n > p else float("nan")
    if ss_tot <= 1e-300 or ss_tot <= 1e-24 * max(1.0, float(np.sum(y**2))):
        # nothing to explain
        return sigma, 0.0, 0.0
    r2 = 1.0 - ss_res / ss_tot
    adj = 1.0 - (1.0 - r2) * (n - 1) / (n - p)
    return sigma, min(r2, 1.0), min(adj, 1.0)


def fit_regression(X, y, active: Sequence[int], degree: int = 3) -> RegressionFit:
    """Least-squares polynomial over ``active`` inputs up to total ``degree``.

    Collinear columns (found by pivoted QR) are dropped with a warning; their
    coefficients are reported as zero.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    active = tuple(int(a) for a in active)
    exps = monomial_exponents(len(active), degree)
    n, p = len(y), len(exps)
    if n <= p:
        raise ValueError(f"need more runs ({n}) than basis terms ({p})")
    G = basis_matrix(X[:, list(active)], exps)
    _, R, piv = sla.qr(G, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = max(G.shape) * np.finfo(float).eps * (diag[0] if diag.size else 0.0)
    rank = int(np.sum(diag > tol))
    keep = np.sort(piv[:rank])
    dropped = tuple(int(j) for j in np.sort(piv[rank:]))
    if dropped:
        warnings.warn(f"rank-deficient basis: dropped {len(dropped)} collinear column(s)", RuntimeWarning, stacklevel=2)
    beta = np.zeros(p)
    beta[keep] = np.linalg.lstsq(G[:, keep], y, rcond=None)[0]
    sigma, r2, adj = _r2_stats(y, G @ beta, n, rank)
    summary = RegressionSummary(sigma, adj, r2, p, active, degree, n)
    return RegressionFit(beta, exps, summary, dropped)


def _adjusted_r2(X, y, active, degree):
    fit = fit_regression(X, y, active, degree)
    return fit.summary.adjusted_r2


def select_active(
    X,
    y,
    max_active: int,
    degree: int = 3,
    threshold: float = 0.01,
    auto_degree: bool = True,
    start: Sequence[int] | None = None,
) -> list[int]:
    """Forward stepwise choice of active inputs by adjusted R^2 gain.

    At every step each remaining input is tried with the full polynomial in
    (current set + candidate); the best is kept if it lifts adjusted R^2 by
    at least ``threshold``.  ``start`` seeds the set (kept unconditionally),
    which lets later waves grow the active sets found earlier.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    n, d = X.shape
    if n == 0:
        raise ValueError("select_active needs at least one run")
    if max_active > d:
        raise ValueError(f"max_active ({max_active}) exceeds input dimension ({d})")
    chosen = sorted({int(c) for c in (start or ())})
    if any(c < 0 or c >= d for c in chosen):
        raise ValueError(f"start inputs {chosen} outside 0..{d - 1}")
    current = 0.0
    if chosen:
        deg0 = effective_degree(n, len(chosen), degree) if auto_degree else degree
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            current = _adjusted_r2(X, y, chosen, deg0)
    while len(chosen) < max_active:
        k = len(chosen) + 1
        deg = effective_degree(n, k, degree) if auto_degree else degree
        if basis_size(k, deg) >= n:
            warnings.warn(
                f"stepwise step {k} skipped: {basis_size(k, deg)} basis terms for {n} runs",
                RuntimeWarning,
                stacklevel=2,
            )
            break
        best, best_adj = None, -math.inf
        for c in range(d):
            if c in chosen:
                continue
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                adj = _adjusted_r2(X, y, chosen + [c], deg)
            if adj > best_adj + 1e-15:
                best, best_adj = c, adj
        if best is None or best_adj - current < threshold:
            break
        chosen.append(best)
        current = best_adj
    return sorted(chosen)


# --- emulator ---------------------------------------------------------------

@dataclass(frozen=True)
class EmulatorConfig:
    degree: int = 3
    max_active: int = 5
    nugget_share: float = 0.05
    theta_multiplier: float = 1.0
    stepwise_threshold: float = 0.01
    auto_degree: bool = True
    active: tuple[int, ...] | None = None
    theta: float | None = None

    def __post_init__(self):
        if self.degree < 0:
            raise ValueError("degree must be >= 0")
        if not 0.0 <= self.nugget_share <= 1.0:
            raise ValueError("nugget_share must lie in [0, 1]")
        if self.theta_multiplier <= 0:
            raise ValueError("theta_multiplier must be > 0")
        if self.theta is not None and self.theta <= 0:
            raise ValueError("theta must be > 0")


@dataclass(frozen=True)
class Prediction:
    mean: float
    variance: float


def theta_rule(X_active: np.ndarray, multiplier: float = 1.0) -> float:
    """2 * (mean side length of the design's active box) / n^(1/|A|), times ``multiplier``."""
    n, k = X_active.shape
    if k == 0 or n == 0:
        return 1.0 * multiplier
    side = float(np.mean(np.ptp(X_active, axis=0)))
    if side <= 0:
        side = 2.0
    return multiplier * 2.0 * side / n ** (1.0 / k)


@dataclass
class Emulator:
    output_index: int
    active: tuple[int, ...]
    exponents: np.ndarray
    coefficients: np.ndarray
    sigma_u2: float
    sigma_w2: float
    theta: float
    X_train: np.ndarray
    residuals: np.ndarray
    summary: RegressionSummary
    run_ids: tuple[str, ...] = ()
    jitter: float | None = None
    _L: np.ndarray = field(default=None, repr=False)
    _alpha: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.active = tuple(int(a) for a in self.active)
        self.coefficients = np.asarray(self.coefficients, dtype=float)
        self.exponents = np.asarray(self.exponents, dtype=int).reshape(len(self.coefficients), len(self.active))
        self.X_train = np.atleast_2d(np.asarray(self.X_train, dtype=float))
        self.residuals = np.asarray(self.residuals, dtype=float)
        if self.sigma_u2 < 0 or self.sigma_w2 < 0 or not self.theta > 0:
            raise ValueError("need sigma_u2 >= 0, sigma_w2 >= 0, theta > 0")
        if not np.any(np.all(self.exponents == 0, axis=1)):
            raise ValueError("basis must include the constant term")
        K = self.training_covariance()
        if self.jitter is None:
            self._L, self.jitter = cholesky_jittered(K, "training covariance")
        else:
            self._L = cholesky(K + self.jitter * np.eye(len(K)), "training covariance")
        self._alpha = sla.cho_solve((self._L, True), self.residuals)

    @property
    def dimension(self) -> int:
        return self.X_train.shape[1]

    @property
    def n_train(self) -> int:
        return len(self.X_train)

    @property
    def total_prior_variance(self) -> float:
        return self.sigma_u2 + self.sigma_w2

    def training_covariance(self) -> np.ndarray:
        Xa = self.X_train[:, list(self.active)]
        K = self.sigma_u2 * correlation(Xa, Xa, self.theta)
        K[np.diag_indices_from(K)] += self.sigma_w2
        return K

    def trend(self, X) -> np.ndarray:
        X = np.atleast_2d(X)
        return basis_matrix(X[:, list(self.active)], self.exponents) @ self.coefficients

    def predict(self, X) -> tuple[np.ndarray, np.ndarray]:
        """Adjusted mean and variance at each row of ``X`` (unit coordinates)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.dimension:
            raise ValueError(f"expected {self.dimension} input coordinates, got {X.shape[1]}")
        means = np.empty(len(X))
        vars_ = np.empty(len(X))
        cols = list(self.active)
        Xa_train = self.X_train[:, cols]
        for s in range(0, len(X), _CHUNK):
            xa = X[s : s + _CHUNK][:, cols]
            k = self.sigma_u2 * correlation(xa, Xa_train, self.theta)
            means[s : s + _CHUNK] = basis_matrix(xa, self.exponents) @ self.coefficients + k @ self._alpha
            v = sla.solve_triangular(self._L, k.T, lower=True)
            vars_[s : s + _CHUNK] = self.total_prior_variance - np.sum(v * v, axis=0)
        return means, np.clip(vars_, 0.0, None)

    # --- persistence ---

    def to_dict(self) -> dict:
        s = self.summary
        return {
            "format": FORMAT,
            "output_index": self.output_index,
            "active": list(self.active),
            "exponents": self.exponents.tolist(),
            "coefficients": [float(c) for c in self.coefficients],
            "sigma_u2": float(self.sigma_u2),
            "sigma_w2": float(self.sigma_w2),
            "theta": float(self.theta),
            "jitter": float(self.jitter),
            "summary": {
                "residual_sd": s.residual_sd, "adjusted_r2": s.adjusted_r2, "r2": s.r2,
                "basis_size": s.basis_size, "active": list(s.active), "degree": s.degree,
                "n_runs": s.n_runs,
            },
            "run_ids": list(self.run_ids),
            "X_train": self.X_train.tolist(),
            "residuals": [float(r) for r in self.residuals],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Emulator":
        if d.get("format") != FORMAT:
            raise ValueError(f"unsupported emulator format {d.get('format')!r} (expected {FORMAT})")
        s = d["summary"]
        summary = RegressionSummary(
            s["residual_sd"], s["adjusted_r2"], s["r2"], s["basis_size"], tuple(s["active"]),
            s["degree"], s["n_runs"],
        )
        return cls(
            output_index=d["output_index"], active=tuple(d["active"]),
            exponents=np.array(d["exponents"], dtype=int).reshape(len(d["coefficients"]), len(d["active"])),
            coefficients=np.array(d["coefficients"]), sigma_u2=d["sigma_u2"],
            sigma_w2=d["sigma_w2"], theta=d["theta"],
            X_train=np.array(d["X_train"], dtype=float), residuals=np.array(d["residuals"]),
            summary=summary, run_ids=tuple(d["run_ids"]), jitter=d["jitter"],
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "Emulator":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _share_key(em: Emulator):
    """Emulators whose training covariances are equal up to a scale factor share a key."""
    tot = em.total_prior_variance
    if tot <= 0:
        return None
    h = hashlib.sha1(np.ascontiguousarray(em.X_train).tobytes()).hexdigest()
    return (h, em.active, em.theta, round(em.sigma_w2 / tot, 12), round(em.jitter / tot, 12))


def predict_many(emulators: Sequence[Emulator], X) -> tuple[np.ndarray, np.ndarray]:
    """Means and variances, shape ``(len(X), len(emulators))``.

    Outputs fitted on the same runs with the same active set, correlation
    length and nugget share have proportional training covariances, so one
    triangular solve serves the whole group.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    means = np.empty((len(X), len(emulators)))
    vars_ = np.empty_like(means)
    groups: dict = {}
    for k, em in enumerate(emulators):
        key = _share_key(em)
        groups.setdefault(key if key is not None else ("solo", k), []).append(k)
    for members in groups.values():
        ref = emulators[members[0]]
        if len(members) == 1:
            means[:, members[0]], vars_[:, members[0]] = ref.predict(X)
            continue
        if X.shape[1] != ref.dimension:
            raise ValueError(f"expected {ref.dimension} input coordinates, got {X.shape[1]}")
        cols = list(ref.active)
        Xa_train = ref.X_train[:, cols]
        tot0 = ref.total_prior_variance
        alphas = np.column_stack([emulators[k].sigma_u2 * emulators[k]._alpha for k in members])
        scale = np.array([emulators[k].total_prior_variance / tot0 for k in members])
        by_basis: dict = {}
        for pos, k in enumerate(members):
            by_basis.setdefault(emulators[k].exponents.tobytes(), []).append(pos)
        for s in range(0, len(X), _CHUNK):
            xa = X[s : s + _CHUNK][:, cols]
            corr = correlation(xa, Xa_train, ref.theta)
            v = sla.solve_triangular(ref._L, (ref.sigma_u2 * corr).T, lower=True)
            var0 = tot0 - np.sum(v * v, axis=0)
            block = corr @ alphas
            for pos_list in by_basis.values():
                ks = [members[p] for p in pos_list]
                G = basis_matrix(xa, emulators[ks[0]].exponents)
                B = np.column_stack([emulators[k].coefficients for k in ks])
                block[:, pos_list] += G @ B
            means[s : s + _CHUNK, members] = block
            vars_[s : s + _CHUNK, members] = np.clip(var0[:, None] * scale[None, :], 0.0, None)
    return means, vars_


def emulate(em: Emulator, x) -> Prediction:
    m, v = em.predict(np.asarray(x, dtype=float)[None, :])
    return Prediction(float(m[0]), float(v[0]))


def fit_emulator(
    X,
    y,
    config: EmulatorConfig = EmulatorConfig(),
    output_index: int = 0,
    run_ids: Sequence[str] = (),
    start_active: Sequence[int] | None = None,
) -> Emulator:
    """select_active -> fit_regression -> residual process setup.

    ``start_active`` seeds the stepwise search (ignored when ``config.active``
    fixes the set).
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    n, d = X.shape
    if n == 0:
        raise ValueError("fit_emulator needs at least one run")
    if config.active is not None:
        active = sorted(int(a) for a in config.active)
    else:
        active = select_active(
            X, y, min(config.max_active, d), config.degree, config.stepwise_threshold, config.auto_degree,
            start=start_active,
        )
    deg = effective_degree(n, len(active), config.degree) if config.auto_degree else config.degree
    if basis_size(len(active), deg) >= n:
        deg = 0 if n > 1 else deg
    with warnings.catch_warnings():
        warnings.simplefilter("default", RuntimeWarning)
        fit = fit_regression(X, y, active, deg)
    resid = y - basis_matrix(X[:, active], fit.exponents) @ fit.coefficients
    sigma2 = fit.summary.residual_sd**2
    if not np.isfinite(sigma2):
        sigma2 = float(np.var(resid))
    theta = config.theta if config.theta is not None else theta_rule(X[:, active], config.theta_multiplier)
    return Emulator(
        output_index=output_index,
        active=tuple(active),
        exponents=fit.exponents,
        coefficients=fit.coefficients,
        sigma_u2=(1.0 - config.nugget_share) * sigma2,
        sigma_w2=config.nugget_share * sigma2,
        theta=theta,
        X_train=X,
        residuals=resid,
        summary=fit.summary,
        run_ids=tuple(run_ids),
    )
