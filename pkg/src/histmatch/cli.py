"""Command-line workbench: ``histmatch <subcommand> DIR ...``.

Exit status: 0 success, 1 validation or diagnostic failure, 2 I/O or usage error.
``HISTMATCH_WORKERS`` overrides the worker count of external simulators.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .campaign import Campaign, CampaignError
from .config import ConfigError, shipped_config
from .diagnostics import DiagnosticOverlapError
from .implausibility import ImplausibilityConfigError
from .waves import WaveAborted, should_terminate

EXIT_OK, EXIT_FAIL, EXIT_IO = 0, 1, 2

class _Failure(Exception):
    """Raised by a subcommand to exit 1 with a message."""


def _wave_arg(camp: Campaign, k: int | None) -> int:
    return camp.next_wave() if k is None else k


def _step_wave(camp: Campaign, k: int | None) -> int:
    # design/simulate/fit/diagnose act on the wave in progress unless told otherwise
    k = _wave_arg(camp, k)
    if not 1 <= k <= camp.planned_waves:
        raise CampaignError(f"wave {k} is not in the schedule (1..{camp.planned_waves})")
    if k > camp.completed_waves + 1:
        raise CampaignError(f"wave {k} needs wave {k - 1} to be complete first")
    return k


def cmd_init(args) -> int:
    src = Path(args.config) if args.config else shipped_config(args.template or "toy")
    camp = Campaign.create(args.dir, src.read_text(), force=args.force, base_dir=src.parent)
    print(f"initialised {camp.root} ({camp.planned_waves} planned waves, {camp.config.n_outputs} outputs)")
    return EXIT_OK


def cmd_design(args, camp: Campaign) -> int:
    k = _step_wave(camp, args.wave)
    t = camp.design(k)
    print(f"wave {k}: {len(t)} runs designed ({camp.runs_path(k)})")
    return EXIT_OK


def cmd_simulate(args, camp: Campaign) -> int:
    k = _step_wave(camp, args.wave)
    t = camp.simulate(k)
    n_fail = sum(st == "failed" for st in t.status)
    print(f"wave {k}: {len(t)} runs, {n_fail} failed")
    return EXIT_OK


def cmd_fit(args, camp: Campaign) -> int:
    k = _step_wave(camp, args.wave)
    if k <= camp.completed_waves:
        raise CampaignError(f"wave {k} is already complete (use `wave {k} --force` to redo it)")
    for em in camp.fit(k):
        s = em.summary
        print(f"wave {k} output {em.output_index}: active={list(em.active)} "
              f"adj_r2={s.adjusted_r2:.4f} sigma={s.residual_sd:.4g}")
    return EXIT_OK


def cmd_diagnose(args, camp: Campaign) -> int:
    k = _step_wave(camp, args.wave)
    report = camp.diagnose(k)
    for o, f in zip(report.outputs, report.exceed_fraction):
        print(f"output {o}: {f:.3f} of errors beyond |{report.threshold:g}|")
    if not report.passed:
        raise _Failure(f"wave {k}: diagnostics failed for outputs {report.flagged}")
    print(f"wave {k}: diagnostics passed")
    return EXIT_OK


def _report_outcome(camp: Campaign, k: int, out) -> None:
    rec = out.record
    accepted = camp.completed_waves >= k
    if accepted:
        print(f"wave {k}: space fraction {rec.space_fraction:.6g} (se {rec.space_se:.2g})")
    if not out.gate_passed:
        flagged = out.report.flagged if out.report else []
        msg = f"wave {k}: diagnostics failed for outputs {flagged}"
        if not accepted:
            raise _Failure(msg + "; wave not accepted (use --override to accept anyway)")
        print(msg + " (overridden)", file=sys.stderr)


def cmd_wave(args, camp: Campaign) -> int:
    k = _wave_arg(camp, args.wave)
    out = camp.run_wave(k, force=args.force, override=args.override)
    _report_outcome(camp, k, out)
    return EXIT_OK


def cmd_resume(args, camp: Campaign) -> int:
    start = camp.completed_waves
    outs = camp.resume(override=args.override)
    for i, out in enumerate(outs):
        _report_outcome(camp, start + i + 1, out)
    done = camp.completed_waves
    if done < camp.planned_waves and camp.chain.waves and should_terminate(
            camp.chain.waves[-1], camp.config.engine.termination_fraction):
        print(f"stopped after wave {done}: emulator variance is negligible against the observational budget")
    print(f"{done} of {camp.planned_waves} waves complete")
    return EXIT_OK


def cmd_space(args, camp: Campaign) -> int:
    if args.score:
        text = camp.score(args.score, args.out)
        if args.out is None:
            sys.stdout.write(text)
        return EXIT_OK
    frac, se = camp.space(args.candidates)
    print(f"fraction {frac:.17g}")
    print(f"se {se:.17g}")
    return EXIT_OK


def cmd_harvest(args, camp: Campaign) -> int:
    res = camp.harvest(args.runs, args.cutoff)
    print(f"harvested {len(res.X)} runs, {res.n_accepted} acceptable ({camp.root / 'harvest'})")
    return EXIT_OK


def cmd_project(args, camp: Campaign) -> int:
    axes = None
    if args.axes:
        names = camp.config.space.names
        axes = [names.index(a) if a in names else int(a) for a in args.axes.split(",")]
    man = camp.project(axes, args.resolution, args.n_hidden, args.statistic)
    print(f"wrote {len(man['files'])} grids to {camp.root / 'projection'}")
    return EXIT_OK


def cmd_budget_report(args, camp: Campaign) -> int:
    sys.stdout.write(camp.write_budget_report())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="histmatch", description="History matching campaigns")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("init", help="create a campaign directory")
    s.add_argument("dir")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--config", help="YAML configuration file")
    g.add_argument("--template", choices=["toy", "galform_table"], help="shipped configuration")
    s.add_argument("--force", action="store_true", help="overwrite an existing campaign")
    s.set_defaults(fn=cmd_init, needs_campaign=False)

    def add(name, fn, help_, wave=False):
        s = sub.add_parser(name, help=help_)
        s.add_argument("dir")
        if wave:
            s.add_argument("wave", nargs="?", type=int, help="wave index (default: next)")
        s.set_defaults(fn=fn, needs_campaign=True)
        return s

    add("design", cmd_design, "design runs for a wave", wave=True)
    add("simulate", cmd_simulate, "run pending simulations", wave=True)
    add("fit", cmd_fit, "fit the wave's emulators", wave=True)
    add("diagnose", cmd_diagnose, "held-out diagnostics", wave=True)
    s = add("wave", cmd_wave, "run a full wave", wave=True)
    s.add_argument("--force", action="store_true", help="redo a completed wave")
    s.add_argument("--override", action="store_true", help="accept the wave despite failed diagnostics")
    s = add("resume", cmd_resume, "run all remaining waves")
    s.add_argument("--override", action="store_true")
    s = add("space", cmd_space, "non-implausible fraction of the cube")
    s.add_argument("--candidates", type=int, help="recompute with this many Monte Carlo points")
    s.add_argument("--score", metavar="CSV", help="score candidate points (raw units, header = parameter names)")
    s.add_argument("--out", metavar="CSV", help="where to write the scores (default stdout)")
    s = add("harvest", cmd_harvest, "collect acceptable runs")
    s.add_argument("--runs", type=int)
    s.add_argument("--cutoff", type=float, help="I_M cutoff")
    s = add("project", cmd_project, "2-d projection grids")
    s.add_argument("--axes", help="comma-separated names or indices")
    s.add_argument("--resolution", type=int)
    s.add_argument("--n-hidden", type=int)
    s.add_argument("--statistic", choices=["i_m", "i_2m", "i_3m", "i_mv"])
    add("budget-report", cmd_budget_report, "variance budget table")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_IO if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if not args.needs_campaign:
            return args.fn(args)
        camp = Campaign.open(args.dir)
        with camp.lock():
            return args.fn(args, camp)
    except (ConfigError, CampaignError, WaveAborted, ImplausibilityConfigError,
            DiagnosticOverlapError, _Failure) as e:
        print(f"histmatch: {e}", file=sys.stderr)
        return EXIT_FAIL
    except (OSError, json.JSONDecodeError) as e:
        print(f"histmatch: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"histmatch: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
