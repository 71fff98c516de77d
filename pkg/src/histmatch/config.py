"""Campaign configuration: YAML file -> validated object graph.

Every validation failure raises :class:`ConfigError` naming the offending
key path (``waves[2].cutoffs.i_mv`` style) and the violated constraint.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .budget import BudgetComponent, BudgetConfigError, VarianceBudget, build_budget, grouped_covariance
from .emulator import EmulatorConfig
from .implausibility import STATISTICS, CutoffSet, ImplausibilityConfigError
from .simulators import AdapterConfig, SimulatorSpec, ToyCoefficients, default_toy
from .space import ParameterDef, ParameterSpace
from .waves import EngineSettings, WaveSpec


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


def _get(d: dict, key: str, path: str, default=..., kind=None):
    if key not in d:
        if default is ...:
            raise ConfigError(f"{path}.{key}" if path else key, "required key missing")
        return default
    v = d[key]
    if kind is not None and v is not None:
        try:
            v = kind(v)
        except (TypeError, ValueError):
            raise ConfigError(f"{path}.{key}" if path else key, f"expected {kind.__name__}, got {v!r}") from None
    return v


def _mapping(v, path: str) -> dict:
    if v is None:
        return {}
    if not isinstance(v, dict):
        raise ConfigError(path, f"expected a mapping, got {type(v).__name__}")
    return v


def _no_extra(d: dict, allowed, path: str):
    extra = sorted(set(d) - set(allowed))
    if extra:
        raise ConfigError(f"{path}.{extra[0]}" if path else extra[0], "unknown key")


def _outputs(v, n_out: int, path: str) -> list[int]:
    if v is None or v == "all":
        return list(range(n_out))
    try:
        out = [int(o) for o in v]
    except (TypeError, ValueError):
        raise ConfigError(path, "expected 'all' or a list of output indices") from None
    if not out:
        raise ConfigError(path, "must name at least one output")
    bad = [o for o in out if not 0 <= o < n_out]
    if bad:
        raise ConfigError(path, f"output indices {bad} outside 0..{n_out - 1}")
    if len(set(out)) != len(out):
        raise ConfigError(path, "duplicate output indices")
    return out


@dataclass
class ObservationSpec:
    source: str  # values | file | synthesize
    values: np.ndarray | None = None
    file: str | None = None
    x_star: np.ndarray | None = None  # unit coordinates
    seed: int = 0


@dataclass
class HarvestSpec:
    runs: int = 200
    cutoff_i_m: float = 2.5
    outputs: list[int] | None = None


@dataclass
class ProjectionSpec:
    axes: list[int] = field(default_factory=lambda: [0, 1])
    resolution: int = 40
    n_hidden: int = 500
    statistic: str = "i_2m"


@dataclass
class CampaignConfig:
    name: str
    seed: int
    space: ParameterSpace
    simulator: SimulatorSpec
    toy: ToyCoefficients | None
    adapter: AdapterConfig | None
    observations: ObservationSpec
    budget: VarianceBudget
    multivariate: bool
    mv_groups: list[list[int]] | None
    emulator: EmulatorConfig
    engine: EngineSettings
    waves: list[WaveSpec]
    harvest: HarvestSpec
    projection: ProjectionSpec
    raw: dict = field(repr=False, default_factory=dict)

    @property
    def n_outputs(self) -> int:
        return self.simulator.output_count

    @property
    def config_hash(self) -> str:
        return config_hash(self.raw)


def config_hash(raw: dict) -> str:
    blob = json.dumps(raw, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


# --- sections ---------------------------------------------------------------

def _parameters(v) -> ParameterSpace:
    if not isinstance(v, list) or not v:
        raise ConfigError("parameters", "expected a non-empty list of {name, min, max}")
    defs, seen = [], set()
    for k, p in enumerate(v):
        path = f"parameters[{k}]"
        p = _mapping(p, path)
        _no_extra(p, ("name", "min", "max", "description"), path)
        name = str(_get(p, "name", path))
        lo = _get(p, "min", path, kind=float)
        hi = _get(p, "max", path, kind=float)
        if name in seen:
            raise ConfigError(f"{path}.name", f"duplicate parameter name {name!r}")
        if not lo < hi:
            raise ConfigError(f"parameters.{name}", f"min ({lo}) must be < max ({hi})")
        seen.add(name)
        defs.append(ParameterDef(name, lo, hi))
    return ParameterSpace(defs)


def _simulator(v, d: int):
    v = _mapping(v, "simulator")
    _no_extra(v, ("kind", "outputs", "labels", "toy", "adapter"), "simulator")
    kind = _get(v, "kind", "simulator", "toy", str)
    if kind not in ("toy", "external"):
        raise ConfigError("simulator.kind", f"must be 'toy' or 'external', got {kind!r}")
    n_out = _get(v, "outputs", "simulator", kind=int)
    if n_out < 1:
        raise ConfigError("simulator.outputs", "must be >= 1")
    labels = v.get("labels")
    if labels is None:
        labels = [f"y{k}" for k in range(n_out)]
    if len(labels) != n_out:
        raise ConfigError("simulator.labels", f"{len(labels)} labels for {n_out} outputs")
    spec = SimulatorSpec(n_out, tuple(str(s) for s in labels), kind)
    toy = adapter = None
    if kind == "toy":
        t = _mapping(v.get("toy"), "simulator.toy")
        if "coefficients" in t:
            try:
                toy = ToyCoefficients.from_dict(t["coefficients"])
            except (KeyError, TypeError, ValueError) as exc:
                raise ConfigError("simulator.toy.coefficients", str(exc)) from None
        else:
            _no_extra(t, ("n_active", "decay", "scales"), "simulator.toy")
            scales = t.get("scales", (0.30, 0.25, 0.25))
            if len(scales) != 3:
                raise ConfigError("simulator.toy.scales", "expected three scales (amplitude, slope, break)")
            try:
                toy = default_toy(d, n_out, t.get("n_active"), t.get("decay"), tuple(float(s) for s in scales))
            except ValueError as exc:
                raise ConfigError("simulator.toy", str(exc)) from None
        if toy.dimension != d:
            raise ConfigError("simulator.toy", f"coefficients have {toy.dimension} inputs, parameters define {d}")
        if toy.output_count != n_out:
            raise ConfigError("simulator.outputs", f"toy has {toy.output_count} bins, config says {n_out}")
    else:
        a = _mapping(v.get("adapter"), "simulator.adapter")
        if not a:
            raise ConfigError("simulator.adapter", "required for external simulators")
        try:
            adapter = AdapterConfig.from_dict(a)
        except (TypeError, ValueError) as exc:
            raise ConfigError("simulator.adapter", str(exc)) from None
        if len(adapter.columns) != n_out:
            raise ConfigError("simulator.adapter.columns", f"{len(adapter.columns)} columns for {n_out} outputs")
        if not adapter.command:
            raise ConfigError("simulator.adapter.command", "must be a non-empty argv list")
    return spec, toy, adapter


def _observations(v, space: ParameterSpace, n_out: int, kind: str) -> ObservationSpec:
    v = _mapping(v, "observations")
    _no_extra(v, ("values", "file", "synthesize"), "observations")
    given = [k for k in ("values", "file", "synthesize") if k in v]
    if len(given) != 1:
        raise ConfigError("observations", "give exactly one of values, file, synthesize")
    src = given[0]
    if src == "values":
        z = np.asarray(v["values"], dtype=float)
        if z.shape != (n_out,):
            raise ConfigError("observations.values", f"expected {n_out} values, got {z.size}")
        return ObservationSpec("values", values=z)
    if src == "file":
        return ObservationSpec("file", file=str(v["file"]))
    if kind != "toy":
        raise ConfigError("observations.synthesize", "synthetic observations need the toy simulator")
    s = _mapping(v["synthesize"], "observations.synthesize")
    _no_extra(s, ("x_star", "x_star_unit", "seed"), "observations.synthesize")
    if ("x_star" in s) == ("x_star_unit" in s):
        raise ConfigError("observations.synthesize", "give exactly one of x_star (raw) or x_star_unit")
    if "x_star" in s:
        raw = s["x_star"]
        if isinstance(raw, dict):
            missing = [n for n in space.names if n not in raw]
            if missing:
                raise ConfigError(f"observations.synthesize.x_star.{missing[0]}", "required key missing")
            raw = [raw[n] for n in space.names]
        raw = np.asarray(raw, dtype=float)
        if raw.shape != (space.dimension,):
            raise ConfigError("observations.synthesize.x_star", f"expected {space.dimension} values")
        try:
            u = space.to_unit(raw)
        except ValueError as exc:
            raise ConfigError("observations.synthesize.x_star", str(exc)) from None
    else:
        u = np.asarray(s["x_star_unit"], dtype=float)
        if u.shape != (space.dimension,) or np.any(np.abs(u) > 1):
            raise ConfigError("observations.synthesize.x_star_unit", f"expected {space.dimension} values in [-1, 1]")
    return ObservationSpec("synthesize", x_star=u, seed=_get(s, "seed", "observations.synthesize", 0, int))


def _budget(v, n_out: int) -> VarianceBudget:
    v = _mapping(v, "budget")
    _no_extra(v, ("components",), "budget")
    comps = v.get("components") or []
    if not isinstance(comps, list):
        raise ConfigError("budget.components", "expected a list")
    out = []
    for k, c in enumerate(comps):
        path = f"budget.components[{k}]"
        c = _mapping(c, path)
        _no_extra(c, ("name", "kind", "sd", "groups", "cov", "description"), path)
        name = str(_get(c, "name", path))
        kind = _get(c, "kind", path, kind=str)
        try:
            if "cov" in c:
                cov = np.asarray(c["cov"], dtype=float)
            elif "sd" in c:
                groups = []
                for g in c.get("groups") or []:
                    groups.append({"outputs": _outputs(g.get("outputs"), n_out, f"{path}.groups.outputs"),
                                   "rho": g.get("rho", 0.0)})
                sd = np.asarray(c["sd"], dtype=float)
                if sd.ndim and sd.shape != (n_out,):
                    raise ConfigError(f"budget.{name}.sd", f"expected a scalar or {n_out} values")
                cov = grouped_covariance(n_out, sd, groups)
            else:
                raise ConfigError(f"budget.{name}", "give sd (with optional groups) or cov")
            comp = BudgetComponent(name, kind, cov)
        except BudgetConfigError as exc:
            raise ConfigError(f"budget.{name}", str(exc)) from None
        if comp.cov.shape != (n_out, n_out):
            raise ConfigError(f"budget.{name}.cov", f"expected {n_out}x{n_out}, got {comp.cov.shape}")
        out.append(comp)
    try:
        return build_budget(out, n_out)
    except BudgetConfigError as exc:
        raise ConfigError("budget", str(exc)) from None


def _dataclass_section(cls, v, path: str, extra: dict | None = None):
    v = _mapping(v, path)
    names = {f.name for f in fields(cls)} - set(extra or {})
    _no_extra(v, names, path)
    kw = dict(extra or {})
    for k, val in v.items():
        kw[k] = tuple(val) if isinstance(val, list) else val
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(path, str(exc)) from None


def _waves(v, n_out: int, d: int, multivariate: bool) -> list[WaveSpec]:
    if not isinstance(v, list) or not v:
        raise ConfigError("waves", "expected a non-empty list of wave specifications")
    out = []
    for k, w in enumerate(v):
        path = f"waves[{k}]"
        w = _mapping(w, path)
        _no_extra(w, ("runs", "outputs", "max_active", "cutoffs", "diagnostic_runs"), path)
        runs = _get(w, "runs", path, kind=int)
        if runs < 2:
            raise ConfigError(f"{path}.runs", "must be >= 2")
        max_active = _get(w, "max_active", path, d, int)
        if not 0 <= max_active <= d:
            raise ConfigError(f"{path}.max_active", f"must lie in 0..{d}")
        diag = _get(w, "diagnostic_runs", path, 200, int)
        if diag < 0:
            raise ConfigError(f"{path}.diagnostic_runs", "must be >= 0")
        cut = _mapping(w.get("cutoffs"), f"{path}.cutoffs")
        for key in cut:
            if key not in STATISTICS:
                raise ConfigError(f"{path}.cutoffs.{key}", f"unknown statistic; use one of {STATISTICS}")
        try:
            cutoffs = CutoffSet.from_dict(cut)
        except ImplausibilityConfigError as exc:
            raise ConfigError(f"{path}.cutoffs", str(exc)) from None
        if cutoffs.i_mv is not None and not multivariate:
            raise ConfigError(f"{path}.cutoffs.i_mv", "cutoff on i_mv requires implausibility.multivariate: true")
        outputs = _outputs(w.get("outputs"), n_out, f"{path}.outputs")
        need = {"i_2m": 2, "i_3m": 3}
        for stat, m in need.items():
            if getattr(cutoffs, stat) is not None and len(outputs) < m:
                raise ConfigError(f"{path}.cutoffs.{stat}", f"needs at least {m} emulated outputs")
        out.append(WaveSpec(runs, max_active, cutoffs, tuple(outputs), diag))
    return out


def parse_config(raw: dict) -> CampaignConfig:
    raw = _mapping(raw, "config")
    _no_extra(raw, ("name", "seed", "parameters", "simulator", "observations", "budget", "implausibility",
                    "emulator", "engine", "waves", "harvest", "projection"), "")
    space = _parameters(raw.get("parameters"))
    d = space.dimension
    spec, toy, adapter = _simulator(raw.get("simulator"), d)
    n_out = spec.output_count
    obs = _observations(raw.get("observations"), space, n_out, spec.kind)
    budget = _budget(raw.get("budget"), n_out)

    im = _mapping(raw.get("implausibility"), "implausibility")
    _no_extra(im, ("multivariate", "mv_groups"), "implausibility")
    multivariate = bool(im.get("multivariate", False))
    groups = im.get("mv_groups")
    if groups is not None:
        groups = [_outputs(g, n_out, f"implausibility.mv_groups[{k}]") for k, g in enumerate(groups)]

    emulator = _dataclass_section(EmulatorConfig, raw.get("emulator"), "emulator")
    seed = _get(raw, "seed", "", 0, int)
    engine = _dataclass_section(EngineSettings, raw.get("engine"), "engine", {"seed": seed, "emulator": emulator})
    waves = _waves(raw.get("waves"), n_out, d, multivariate)

    h = _mapping(raw.get("harvest"), "harvest")
    _no_extra(h, ("runs", "cutoff_i_m", "outputs"), "harvest")
    harvest = HarvestSpec(
        _get(h, "runs", "harvest", 200, int),
        _get(h, "cutoff_i_m", "harvest", 2.5, float),
        _outputs(h["outputs"], n_out, "harvest.outputs") if h.get("outputs") is not None else None,
    )
    if harvest.runs < 1:
        raise ConfigError("harvest.runs", "must be >= 1")
    if not harvest.cutoff_i_m > 0:
        raise ConfigError("harvest.cutoff_i_m", "must be > 0")

    p = _mapping(raw.get("projection"), "projection")
    _no_extra(p, ("axes", "resolution", "n_hidden", "statistic"), "projection")
    proj = ProjectionSpec(
        [],
        _get(p, "resolution", "projection", 40, int),
        _get(p, "n_hidden", "projection", 500, int),
        _get(p, "statistic", "projection", "i_2m", str),
    )
    try:
        proj.axes = [space.index(a) if isinstance(a, str) else int(a) for a in p.get("axes", [0, 1])]
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError("projection.axes", str(exc)) from None
    if len(proj.axes) < 2 or len(set(proj.axes)) != len(proj.axes) or not all(0 <= a < d for a in proj.axes):
        raise ConfigError("projection.axes", f"need at least two distinct axes in 0..{d - 1}")
    if proj.resolution < 1:
        raise ConfigError("projection.resolution", "must be >= 1")
    if proj.n_hidden < 1:
        raise ConfigError("projection.n_hidden", "must be >= 1")
    if proj.statistic not in STATISTICS:
        raise ConfigError("projection.statistic", f"must be one of {STATISTICS}")
    if proj.statistic == "i_mv" and not multivariate:
        raise ConfigError("projection.statistic", "i_mv requires implausibility.multivariate: true")

    return CampaignConfig(
        name=str(raw.get("name", "campaign")), seed=seed, space=space, simulator=spec, toy=toy,
        adapter=adapter, observations=obs, budget=budget, multivariate=multivariate, mv_groups=groups,
        emulator=emulator, engine=engine, waves=waves, harvest=harvest, projection=proj, raw=raw,
    )


def load_config(path) -> CampaignConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(str(path), f"cannot read config: {exc.strerror}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(str(path), f"invalid YAML: {exc}") from None
    return parse_config(raw)


def shipped_config(name: str) -> Path:
    """Path of a configuration bundled with the package (``toy``, ``galform_table``)."""
    here = Path(__file__).parent / "configs" / f"{name}.yaml"
    if not here.exists():
        raise FileNotFoundError(f"no shipped config named {name!r}")
    return here


def dump_yaml(raw: dict[str, Any]) -> str:
    return yaml.safe_dump(raw, sort_keys=False)
