"""Two-dimensional projections of the non-implausible region.

For an axis pair (i, j) each grid cell fixes (x_i, x_j) at the cell centre
and samples the remaining "hidden" coordinates.  Two summaries per cell:

* minimised implausibility: the smallest value of a statistic (default I_2M)
  over the hidden samples;
* optical depth: the fraction of hidden samples inside the region.

Grid file layout::

    # kind=min_implausibility
    # axes=i,j
    # resolution=r
    # n_hidden=...
    # statistic=...
    <r lines of r values>

Line ``k`` holds the cells with ``x_j`` at the k-th centre (ascending from
-1); within a line ``x_i`` ascends from -1.  ``numpy.loadtxt`` reads it
directly into ``values[j_index, i_index]``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .design import _lhs_array

KINDS = ("min_implausibility", "optical_depth")
HIDDEN_BLOCK = 100  # hidden samples come in Latin hypercube blocks of this size
_BATCH_POINTS = 50_000


@dataclass
class ProjectionGrid:
    axes: tuple[int, int]
    resolution: int
    values: np.ndarray  # (resolution, resolution), rows follow axis j, columns axis i
    kind: str
    n_hidden: int
    statistic: str | None = None

    def __post_init__(self):
        self.axes = (int(self.axes[0]), int(self.axes[1]))
        self.values = np.asarray(self.values, dtype=float).reshape(self.resolution, self.resolution)
        if self.kind not in KINDS:
            raise ValueError(f"unknown grid kind {self.kind!r}")

    @property
    def centers(self) -> np.ndarray:
        return cell_centers(self.resolution)

    def to_text(self) -> str:
        lines = [
            f"# kind={self.kind}",
            f"# axes={self.axes[0]},{self.axes[1]}",
            f"# resolution={self.resolution}",
            f"# n_hidden={self.n_hidden}",
        ]
        if self.statistic is not None:
            lines.append(f"# statistic={self.statistic}")
        for row in self.values:
            lines.append(" ".join(format(float(v), ".17g") for v in row))
        return "\n".join(lines) + "\n"

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_text())
        return path

    @classmethod
    def from_text(cls, text: str) -> "ProjectionGrid":
        header = {}
        rows = []
        for line in text.splitlines():
            if line.startswith("#"):
                key, _, val = line[1:].strip().partition("=")
                header[key.strip()] = val.strip()
            elif line.strip():
                rows.append([float(v) for v in line.split()])
        r = int(header["resolution"])
        i, j = (int(v) for v in header["axes"].split(","))
        return cls((i, j), r, np.array(rows), header["kind"], int(header.get("n_hidden", 0)), header.get("statistic"))

    @classmethod
    def load(cls, path) -> "ProjectionGrid":
        return cls.from_text(Path(path).read_text())


def cell_centers(resolution: int) -> np.ndarray:
    edges = np.linspace(-1.0, 1.0, resolution + 1)
    return 0.5 * (edges[:-1] + edges[1:])


def _check(axes, resolution, n_hidden, d):
    i, j = axes
    if i == j:
        raise ValueError("projection axes must differ")
    if not (0 <= i < d and 0 <= j < d):
        raise ValueError(f"axes {axes} outside 0..{d - 1}")
    if resolution < 1:
        raise ValueError("resolution must be >= 1")
    if n_hidden < 1:
        raise ValueError("n_hidden must be >= 1")


def hidden_samples(n_hidden: int, n_dims: int, seed: int, cell: int) -> np.ndarray:
    """Hidden coordinates for one cell: LHS blocks with cell-indexed sub-seeds.

    Blocks have a fixed size, so the sample for ``n`` is a prefix of the sample
    for any larger ``n`` with the same seed.
    """
    if n_dims == 0:
        return np.empty((1, 0))
    blocks = []
    for b in range(-(-n_hidden // HIDDEN_BLOCK)):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(cell), b]))
        blocks.append(_lhs_array(HIDDEN_BLOCK, n_dims, rng))
    return np.vstack(blocks)[:n_hidden]


def _cell_points(axes, resolution, n_hidden, d, seed):
    """Yield (cell indices, stacked points, samples per cell) in memory-bounded batches."""
    i, j = axes
    hidden = [k for k in range(d) if k not in (i, j)]
    per_cell = n_hidden if hidden else 1
    centers = cell_centers(resolution)
    cells_per_batch = max(1, _BATCH_POINTS // per_cell)
    n_cells = resolution * resolution
    for start in range(0, n_cells, cells_per_batch):
        cells = range(start, min(n_cells, start + cells_per_batch))
        pts = np.empty((len(cells) * per_cell, d))
        for k, c in enumerate(cells):
            row, col = divmod(c, resolution)
            block = pts[k * per_cell : (k + 1) * per_cell]
            block[:, hidden] = hidden_samples(n_hidden, len(hidden), seed, c)
            block[:, i] = centers[col]
            block[:, j] = centers[row]
        yield list(cells), pts, per_cell


def _as_statistic(source, statistic: str, wave) -> tuple[Callable, int | None]:
    if callable(source) and not hasattr(source, "waves"):
        return source, None
    chain = source
    if not chain.waves:
        raise ValueError("projection needs a non-empty chain")
    rec = chain.waves[-1] if wave is None else chain.waves[wave - 1]

    def score(X):
        s = chain.scores(X, rec, multivariate=(statistic == "i_mv") or None)
        return s[statistic]

    return score, rec.emulators[0].dimension if rec.emulators else None


def _as_membership(source) -> tuple[Callable, int | None]:
    if callable(source) and not hasattr(source, "waves"):
        return source, None
    chain = source
    d = chain.waves[0].emulators[0].dimension if chain.waves and chain.waves[0].emulators else None
    return chain.membership, d


def min_implausibility_projection(
    source,
    axes: tuple[int, int],
    resolution: int = 40,
    n_hidden: int = 500,
    statistic: str = "i_2m",
    seed: int = 0,
    dimension: int | None = None,
    wave: int | None = None,
) -> ProjectionGrid:
    """Per-cell minimum of ``statistic`` over hidden samples.

    ``source`` is a WaveChain (scored with the emulators of ``wave``, default
    the latest) or a vectorised callable ``(m, d) -> (m,)`` with ``dimension``.
    """
    fn, d = _as_statistic(source, statistic, wave)
    d = dimension or d
    if d is None:
        raise ValueError("dimension is required for callable sources")
    _check(axes, resolution, n_hidden, d)
    out = np.empty(resolution * resolution)
    per = 1
    for cells, pts, per in _cell_points(axes, resolution, n_hidden, d, seed):
        v = np.asarray(fn(pts), dtype=float).reshape(len(cells), per)
        out[cells] = v.min(axis=1)
    return ProjectionGrid(axes, resolution, out, "min_implausibility", per, statistic)


def optical_depth(
    source,
    axes: tuple[int, int],
    resolution: int = 40,
    n_hidden: int = 500,
    seed: int = 0,
    dimension: int | None = None,
) -> ProjectionGrid:
    """Per-cell fraction of hidden samples passing membership."""
    fn, d = _as_membership(source)
    d = dimension or d
    if d is None:
        raise ValueError("dimension is required for callable sources")
    _check(axes, resolution, n_hidden, d)
    out = np.empty(resolution * resolution)
    per = 1
    for cells, pts, per in _cell_points(axes, resolution, n_hidden, d, seed):
        ok = np.asarray(fn(pts), dtype=bool).reshape(len(cells), per)
        out[cells] = ok.mean(axis=1)
    return ProjectionGrid(axes, resolution, out, "optical_depth", per)


def grid_filename(kind: str, i: int, j: int) -> str:
    return f"{kind}_{i}_{j}.grid"


def projection_pairs_report(
    chain,
    axes: Sequence[int],
    out_dir,
    resolution: int = 40,
    n_hidden: int = 500,
    statistic: str = "i_2m",
    seed: int = 0,
    names: Sequence[str] | None = None,
) -> dict:
    """Pairs-matrix data: minimised implausibility below, optical depth above the diagonal.

    Writes one grid per ordered pair and ``manifest.json`` describing the
    layout; returns the manifest.
    """
    axes = [int(a) for a in axes]
    if len(axes) < 2 or len(set(axes)) != len(axes):
        raise ValueError("need at least two distinct axes")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = []
    for a in range(len(axes)):
        for b in range(a + 1, len(axes)):
            i, j = axes[a], axes[b]
            g = min_implausibility_projection(chain, (i, j), resolution, n_hidden, statistic, seed)
            name = grid_filename(g.kind, i, j)
            g.save(out_dir / name)
            files.append({"file": name, "kind": g.kind, "axes": [i, j], "row": b, "col": a})
            g = optical_depth(chain, (i, j), resolution, n_hidden, seed)
            name = grid_filename(g.kind, i, j)
            g.save(out_dir / name)
            files.append({"file": name, "kind": g.kind, "axes": [i, j], "row": a, "col": b})
    manifest = {
        "axes": axes,
        "names": list(names) if names is not None else [str(a) for a in axes],
        "resolution": resolution,
        "n_hidden": n_hidden,
        "statistic": statistic,
        "seed": seed,
        "layout": "row/col index into axes; min_implausibility below the diagonal, optical_depth above",
        "files": files,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest
