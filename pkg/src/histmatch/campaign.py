"""Campaign directories: persistent, resumable history-matching experiments.

Layout::

    campaign/
      config.yaml            copy of the configuration (hashed into state.json)
      state.json             config hash, completed waves, observations
      observations.csv       z, one row per output
      budget_report.csv
      progression.csv        residual sd / adjusted R^2 per wave and output
      wave_k/runs.csv        training + diagnostic runs (role column)
      wave_k/diagnostics.csv
      wave_k/emulators/output_XXX.emu
      wave_k/record.json     written once the wave is accepted into the chain
      harvest/runs.csv, harvest/summary.json
      projection/*.grid, projection/manifest.json
"""
from __future__ import annotations

import contextlib
import csv
import io
import json
import logging
import os
import shutil
from dataclasses import replace
from pathlib import Path

import numpy as np

from .budget import budget_report_csv
from .config import CampaignConfig, ConfigError, load_config, parse_config
from .diagnostics import held_out_diagnostics, progression_csv, regression_progression
from .emulator import Emulator
from .implausibility import CutoffSet, scores_csv
from .projection import projection_pairs_report
from .runtable import RunTable, fmt
from .simulators import ExternalSimulator, ToySimulator, synthesize_observations
from .waves import (
    WaveChain,
    WaveRecord,
    derive_seed,
    fit_wave,
    harvest_acceptable,
    inherited_active,
    run_wave,
    should_terminate,
    wave_design,
)

logger = logging.getLogger(__name__)

STATE_FORMAT = "histmatch-campaign/1"
LOCK_NAME = ".lock"
_SIM_CHUNK = 64  # runs simulated between run-table saves


class CampaignError(RuntimeError):
    """Invalid campaign operation (wrong state, tampering, already complete)."""


class CampaignLocked(CampaignError):
    pass


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _pid_alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


def make_simulator(cfg: CampaignConfig):
    if cfg.simulator.kind == "toy":
        return ToySimulator(cfg.toy, cfg.simulator.output_labels)
    return ExternalSimulator(cfg.space, cfg.adapter, cfg.simulator.output_labels)


def read_observations_file(path: Path, n_out: int) -> np.ndarray:
    vals = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        for tok in line.replace(",", " ").split():
            try:
                vals.append(float(tok))
            except ValueError:
                continue  # header words
    z = np.asarray(vals, dtype=float)
    if z.shape != (n_out,):
        raise ConfigError("observations.file", f"expected {n_out} values, found {z.size}")
    return z


class Campaign:
    def __init__(self, root, config: CampaignConfig, state: dict):
        self.root = Path(root)
        self.config = config
        self.state = state
        self.z = np.asarray(state["observations"]["values"], dtype=float)
        self.simulator = make_simulator(config)
        self._chain: WaveChain | None = None

    # --- creation / opening ---

    @classmethod
    def create(cls, root, config_text: str, force: bool = False, base_dir=None) -> "Campaign":
        """New campaign directory from YAML text; observations fixed at creation.

        A relative observations file is resolved against ``base_dir`` (the
        directory of the original config file), else the working directory.
        """
        import yaml

        root = Path(root)
        raw = yaml.safe_load(config_text)
        cfg = parse_config(raw)
        if (root / "state.json").exists() and not force:
            raise CampaignError(f"{root} already holds a campaign (use --force to overwrite)")
        if force and root.exists():
            for p in root.iterdir():
                if p.name == LOCK_NAME:
                    continue
                shutil.rmtree(p) if p.is_dir() else p.unlink()
        root.mkdir(parents=True, exist_ok=True)
        obs = cfg.observations
        info: dict = {"source": obs.source}
        if obs.source == "values":
            z = obs.values
        elif obs.source == "file":
            src = Path(obs.file)
            if not src.is_absolute() and base_dir is not None:
                src = Path(base_dir) / src
            z = read_observations_file(src, cfg.n_outputs)
            info["file"] = str(src)
        else:
            z = synthesize_observations(obs.x_star, cfg.toy, cfg.budget, obs.seed)
            info["x_star_unit"] = [float(v) for v in obs.x_star]
            info["seed"] = obs.seed
        info["values"] = [float(v) for v in z]
        _write_atomic(root / "config.yaml", config_text)
        state = {
            "format": STATE_FORMAT,
            "config_hash": cfg.config_hash,
            "completed_waves": 0,
            "observations": info,
        }
        _write_atomic(root / "state.json", json.dumps(state, indent=2) + "\n")
        camp = cls(root, cfg, state)
        camp.write_observations()
        camp.write_budget_report()
        return camp

    @classmethod
    def open(cls, root) -> "Campaign":
        root = Path(root)
        state_path = root / "state.json"
        if not state_path.exists():
            raise FileNotFoundError(f"{root} is not a campaign directory (no state.json)")
        state = json.loads(state_path.read_text())
        if state.get("format") != STATE_FORMAT:
            raise CampaignError(f"unsupported campaign format {state.get('format')!r}")
        cfg = load_config(root / "config.yaml")
        if cfg.config_hash != state["config_hash"]:
            raise ConfigError("config.yaml", "configuration changed since the campaign was created (hash mismatch)")
        return cls(root, cfg, state)

    # --- bookkeeping ---

    @contextlib.contextmanager
    def lock(self):
        path = self.root / LOCK_NAME
        for _ in range(2):
            try:
                fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
                break
            except FileExistsError:
                try:
                    pid = int(path.read_text().strip() or 0)
                except (OSError, ValueError):
                    pid = 0
                if pid and _pid_alive(pid) and pid != os.getpid():
                    raise CampaignLocked(f"campaign {self.root} is in use by process {pid}") from None
                path.unlink(missing_ok=True)  # stale lock
        else:
            raise CampaignLocked(f"cannot acquire {path}")
        try:
            os.write(fd, str(os.getpid()).encode())
            os.close(fd)
            yield self
        finally:
            path.unlink(missing_ok=True)

    @property
    def completed_waves(self) -> int:
        return int(self.state["completed_waves"])

    @property
    def planned_waves(self) -> int:
        return len(self.config.waves)

    @property
    def x_star(self) -> np.ndarray | None:
        v = self.state["observations"].get("x_star_unit")
        return None if v is None else np.asarray(v, dtype=float)

    def wave_dir(self, k: int) -> Path:
        return self.root / f"wave_{k}"

    def save_state(self) -> None:
        _write_atomic(self.root / "state.json", json.dumps(self.state, indent=2) + "\n")

    def write_observations(self) -> None:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["output", "label", "z"])
        for k, (lab, v) in enumerate(zip(self.config.simulator.output_labels, self.z)):
            w.writerow([k, lab, fmt(v)])
        _write_atomic(self.root / "observations.csv", buf.getvalue())

    def write_budget_report(self) -> str:
        text = budget_report_csv(self.config.budget, list(self.config.simulator.output_labels))
        _write_atomic(self.root / "budget_report.csv", text)
        return text

    def new_chain(self) -> WaveChain:
        return WaveChain(self.config.budget, self.z, self.config.multivariate, self.config.mv_groups)

    @property
    def chain(self) -> WaveChain:
        if self._chain is None:
            chain = self.new_chain()
            for k in range(1, self.completed_waves + 1):
                chain.waves.append(self.load_record(k))
            self._chain = chain
        return self._chain

    # --- per-wave files ---

    def load_emulators(self, k: int, outputs) -> list[Emulator]:
        d = self.wave_dir(k) / "emulators"
        return [Emulator.load(d / f"output_{o:03d}.emu") for o in outputs]

    def save_emulators(self, k: int, emulators) -> None:
        d = self.wave_dir(k) / "emulators"
        if d.exists():
            shutil.rmtree(d)
        d.mkdir(parents=True)
        for em in emulators:
            em.save(d / f"output_{em.output_index:03d}.emu")

    def load_record(self, k: int) -> WaveRecord:
        info = json.loads((self.wave_dir(k) / "record.json").read_text())
        ems = self.load_emulators(k, info["outputs"])
        return WaveRecord(
            index=info["index"], emulators=ems, cutoffs=CutoffSet.from_dict(info["cutoffs"]),
            space_fraction=info["space_fraction"], space_se=info["space_se"],
            n_candidates=info["n_candidates"], n_train=info["n_train"], n_diagnostic=info["n_diagnostic"],
            diagnostics=info.get("diagnostics"), variance_ratio=info.get("variance_ratio"),
        )

    def runs_path(self, k: int) -> Path:
        return self.wave_dir(k) / "runs.csv"

    def load_runs(self, k: int) -> RunTable | None:
        p = self.runs_path(k)
        if not p.exists():
            return None
        return RunTable.load(p, self.config.space, self.config.n_outputs)

    def all_runs(self) -> list[RunTable]:
        out = []
        for k in range(1, self.planned_waves + 1):
            t = self.load_runs(k)
            if t is not None:
                out.append(t)
        h = self.root / "harvest" / "runs.csv"
        if h.exists():
            out.append(RunTable.load(h, self.config.space, self.config.n_outputs))
        return out

    def _check_wave(self, k: int, force: bool) -> None:
        if not 1 <= k <= self.planned_waves:
            raise CampaignError(f"wave {k} is not in the schedule (1..{self.planned_waves})")
        if k > self.completed_waves + 1:
            raise CampaignError(f"wave {k} needs wave {k - 1} to be complete first")
        if k <= self.completed_waves and not force:
            raise CampaignError(f"wave {k} is already complete (use --force to discard and redo it)")

    def discard_from(self, k: int) -> None:
        """Forget waves k.. (files and chain entries)."""
        for j in range(k, self.planned_waves + 1):
            d = self.wave_dir(j)
            if d.exists():
                shutil.rmtree(d)
        self.state["completed_waves"] = min(self.completed_waves, k - 1)
        self.save_state()
        self._chain = None
        for p in (self.root / "harvest", self.root / "projection"):
            if p.exists():
                shutil.rmtree(p)

    def next_wave(self) -> int:
        return self.completed_waves + 1

    # --- steps ---

    def chain_before(self, k: int) -> WaveChain:
        chain = self.new_chain()
        chain.waves = list(self.chain.waves[: k - 1])
        return chain

    def design(self, k: int) -> RunTable:
        """Training and diagnostic points for wave k (status pending); idempotent."""
        existing = self.load_runs(k)
        if existing is not None:
            return existing
        spec = self.config.waves[k - 1]
        chain = self.chain_before(k)
        settings = self.config.engine
        d = self.config.space.dimension
        table = RunTable(self.config.space, self.config.n_outputs)
        train = wave_design(chain, spec.runs, d, settings, k, "train")
        table.add_pending([f"w{k}-train-{i:04d}" for i in range(len(train.points))], k, "train",
                          train.points, train.seed)
        if spec.diagnostic_runs > 0:
            diag = wave_design(chain, spec.diagnostic_runs, d, settings, k, "diagnostic")
            table.add_pending([f"w{k}-diag-{i:04d}" for i in range(len(diag.points))], k, "diagnostic",
                              diag.points, diag.seed)
        self.wave_dir(k).mkdir(parents=True, exist_ok=True)
        table.save(self.runs_path(k))
        # continue from the stored text so resumed and uninterrupted runs see identical inputs
        return self.load_runs(k)

    def simulate(self, k: int) -> RunTable:
        """Run every pending row of wave k, saving after each chunk (resumable)."""
        table = self.design(k)
        self._simulate_table(table, self.runs_path(k))
        return table

    def _simulate_table(self, table: RunTable, path: Path) -> None:
        todo = np.flatnonzero(table.pending)
        for s in range(0, len(todo), _SIM_CHUNK):
            rows = todo[s : s + _SIM_CHUNK]
            res = self.simulator.evaluate(table.unit[rows])
            table.record(rows, res.outputs, res.ok, res.failures)
            table.save(path)

    def _split(self, table: RunTable):
        def part(role):
            t = table.where(role=role)
            fails = {i: f for i, f in enumerate(t.failure) if f}
            return t.unit, np.nan_to_num(t.outputs), t.ok, fails

        return part("train"), part("diagnostic")

    def fit(self, k: int) -> list[Emulator]:
        table = self.simulate(k)
        spec = self.config.waves[k - 1]
        tr = table.where(role="train", ok_only=True)
        if len(tr) == 0:
            raise CampaignError(f"wave {k}: no successful training runs")
        previous = inherited_active(self.chain_before(k)) if self.config.engine.inherit_active else None
        ems = fit_wave(tr.unit, tr.outputs, spec.outputs, spec.max_active, self.config.engine.emulator,
                       run_ids=tr.run_id, previous=previous)
        self.save_emulators(k, ems)
        return ems

    def diagnose(self, k: int):
        spec = self.config.waves[k - 1]
        table = self.simulate(k)
        em_dir = self.wave_dir(k) / "emulators"
        ems = self.load_emulators(k, spec.outputs) if em_dir.exists() else self.fit(k)
        dg = table.where(role="diagnostic", ok_only=True)
        st = self.config.engine
        report = held_out_diagnostics(ems, dg.unit, dg.outputs, st.diag_threshold, st.diag_max_fraction, dg.run_id)
        _write_atomic(self.wave_dir(k) / "diagnostics.csv", report.to_csv())
        return report

    def run_wave(self, k: int | None = None, force: bool = False, override: bool = False):
        """Full wave: design, simulate, fit, diagnose, cut.  Returns the WaveOutcome."""
        k = self.next_wave() if k is None else k
        self._check_wave(k, force)
        if k <= self.completed_waves:
            self.discard_from(k)
        table = self.simulate(k)
        train, diag = self._split(table)
        settings = self.config.engine
        if override:
            settings = replace(settings, override_diagnostics=True)
        chain = self.chain_before(k)
        outcome = run_wave(chain, self.config.waves[k - 1], self.simulator, settings, k,
                           train_runs=train, diag_runs=diag if len(diag[0]) else None)
        self.save_emulators(k, outcome.record.emulators)
        if outcome.report is not None:
            outcome.report.run_ids = list(table.where(role="diagnostic", ok_only=True).run_id)
            _write_atomic(self.wave_dir(k) / "diagnostics.csv", outcome.report.to_csv())
        if any(r is outcome.record for r in chain.waves):
            _write_atomic(self.wave_dir(k) / "record.json", json.dumps(outcome.record.to_dict(), indent=2) + "\n")
            self.state["completed_waves"] = k
            self.save_state()
            self._chain = chain
            self.write_progression()
        return outcome

    def resume(self, override: bool = False) -> list:
        """Run the remaining planned waves; stops at a failed gate or the termination rule."""
        outcomes = []
        while self.completed_waves < self.planned_waves:
            if self.chain.waves and should_terminate(self.chain.waves[-1], self.config.engine.termination_fraction):
                logger.info("termination rule met after wave %d", self.completed_waves)
                break
            out = self.run_wave(override=override)
            outcomes.append(out)
            if not (out.gate_passed or override):
                break
        return outcomes

    def write_progression(self) -> str:
        text = progression_csv(regression_progression(self.chain))
        _write_atomic(self.root / "progression.csv", text)
        return text

    def space(self, n_candidates: int | None = None):
        """(fraction, se) of the final chain; recomputed when ``n_candidates`` is given."""
        if not self.chain.waves:
            return 1.0, 0.0
        if n_candidates is None:
            rec = self.chain.waves[-1]
            return rec.space_fraction, rec.space_se
        from .waves import space_fraction

        return space_fraction(self.chain, n_candidates, derive_seed(self.config.seed, "space"),
                              self.config.space.dimension)

    def score(self, in_path, out_path=None) -> str:
        """Score candidate points (CSV with one raw-unit column per parameter) against the chain.

        Statistics come from the latest wave; ``pass`` is membership of the whole chain.
        """
        if not self.chain.waves:
            raise CampaignError("scoring needs at least one completed wave")
        with open(in_path, newline="") as fh:
            rows = list(csv.reader(fh))
        names = self.config.space.names
        if not rows or [h.strip() for h in rows[0]] != names:
            raise ConfigError(str(in_path), f"header must be the parameter names {names}")
        raw = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float).reshape(-1, len(names))
        X = self.config.space.to_unit(raw) if len(raw) else raw
        rec = self.chain.waves[-1]
        sc = self.chain.scores(X, rec)
        text = scores_csv(raw, sc, rec.outputs, self.chain.membership(X), names)
        if out_path is not None:
            _write_atomic(Path(out_path), text)
        return text

    def harvest(self, n_target: int | None = None, cutoff: float | None = None):
        if not self.chain.waves:
            raise CampaignError("harvest needs at least one completed wave")
        h = self.config.harvest
        res = harvest_acceptable(
            self.chain, self.simulator, n_target or h.runs, h.cutoff_i_m if cutoff is None else cutoff,
            derive_seed(self.config.seed, "harvest"), self.config.engine.oversample, h.outputs,
        )
        out = self.root / "harvest"
        out.mkdir(exist_ok=True)
        table = RunTable(self.config.space, self.config.n_outputs)
        wave = self.completed_waves + 1
        fails = {i: str(f) for i, f in res.failures.items()}
        table.append([f"harvest-{i:04d}" for i in range(len(res.X))], wave, "harvest", res.X,
                     np.nan_to_num(res.Y), res.ok, derive_seed(self.config.seed, "harvest"), fails)
        table.save(out / "runs.csv")
        summary = {
            "n_runs": int(len(res.X)),
            "n_ok": int(res.ok.sum()),
            "n_accepted": res.n_accepted,
            "cutoff_i_m": h.cutoff_i_m if cutoff is None else cutoff,
            "accepted": [table.run_id[i] for i in np.flatnonzero(res.accepted)],
            "i_m": [fmt(v) for v in res.i_m],
        }
        _write_atomic(out / "summary.json", json.dumps(summary, indent=2) + "\n")
        return res

    def project(self, axes=None, resolution=None, n_hidden=None, statistic=None) -> dict:
        if not self.chain.waves:
            raise CampaignError("projection needs at least one completed wave")
        p = self.config.projection
        axes = list(axes) if axes is not None else p.axes
        out = self.root / "projection"
        if out.exists():
            shutil.rmtree(out)
        return projection_pairs_report(
            self.chain, axes, out, resolution or p.resolution, n_hidden or p.n_hidden,
            statistic or p.statistic, derive_seed(self.config.seed, "projection"),
            [self.config.space.names[a] for a in axes],
        )
