"""Command-line front end: ingest, fit, synthesize, evaluate, backtest, audit.

Thread limits are applied before the numerical stack loads so that runs are
reproducible bit-for-bit at any worker count; heavyweight imports happen
inside the command handlers to keep ``--help`` fast.
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import replace
from pathlib import Path

from ._worker import limit_worker_threads

_COMMANDS = (
    ("ingest", "transform the level panel and write a series,time,y CSV"),
    ("fit-agents", "fit agent models over the expanding windows and write agent_forecasts.csv"),
    ("synth", "fit the per-series synthesizer on stored agent forecasts and write forecasts.csv"),
    ("synth-factor", "fit the joint factor synthesizer on stored agent forecasts and write forecasts.csv"),
    ("evaluate", "score stored forecasts and write scores, ratios, PIT and plot data"),
    ("reconstruct", "draw predictive samples from stored quantile forecasts"),
    ("backtest", "run the full pipeline: agents, synthesis, evaluation, artifacts"),
    ("audit-lookahead", "check that no job consumes values dated later than its target-1"),
)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="quantsynth",
        description="Expanding-window quantile forecast synthesis and evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in _COMMANDS:
        sp = sub.add_parser(name, help=help_text, description=help_text)
        sp.add_argument("--config", required=True, help="YAML run configuration file")
        sp.add_argument("--seed", type=int, default=None, help="override plan.seed")
        sp.add_argument("--tau", type=float, default=None,
                        help="restrict the stage to a single quantile level")
        sp.add_argument("--h", type=int, default=None, help="override data.h")
        sp.add_argument("--workers", type=int, default=None, help="override workers")
        sp.add_argument("--out-dir", default=None, help="override out_dir")
    return parser


def _load_config(args):
    from .config import load_config

    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, plan=replace(cfg.plan, seed=int(args.seed)))
    if args.tau is not None:
        cfg = replace(cfg, plan=replace(cfg.plan, taus=(float(args.tau),)))
    if args.h is not None:
        cfg = replace(cfg, data=replace(cfg.data, h=int(args.h)))
    if args.workers is not None:
        cfg = replace(cfg, workers=int(args.workers))
    if args.out_dir is not None:
        cfg = replace(cfg, out_dir=str(args.out_dir))
    return cfg


def _out_dir(cfg) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _cmd_ingest(cfg) -> int:
    from .pipeline import ingest, write_panel

    panel = ingest(cfg.data.panel_csv, cfg.data.h)
    out = _out_dir(cfg)
    path = out / "panel.csv"
    write_panel(panel, path)
    spans = []
    for sid in panel.series_ids:
        rec = panel.record(sid)
        spans.append(
            f"{sid}: {panel.time_label(rec.times[0])}..{panel.time_label(rec.times[-1])} "
            f"({rec.times.size} obs)"
        )
    print(f"wrote {path} with {len(panel.series_ids)} series (h={panel.h})")
    for line in spans:
        print(f"  {line}")
    return 0


def _cmd_fit_agents(cfg) -> int:
    from .pipeline import ingest, make_plan, stage_fit_agents

    panel = ingest(cfg.data.panel_csv, cfg.data.h)
    plan = make_plan(cfg, panel)
    fset, _ = stage_fit_agents(plan, panel, cfg.workers)
    out = _out_dir(cfg)
    path = out / "agent_forecasts.csv"
    fset.to_csv(path, quarterly=plan.quarterly)
    print(
        f"wrote {path}: {len(fset)} forecasts "
        f"({len(cfg.agents)} agents x {len(plan.taus)} taus x "
        f"{plan.agent_targets.size} windows x {len(panel.series_ids)} series)"
    )
    return 0


def _cmd_synth(cfg, factor: bool) -> int:
    from .agents import AgentForecastSet
    from .pipeline import ingest, make_plan, stage_synthesize, write_forecasts, write_joint_draws

    cfg = replace(cfg, plan=replace(cfg.plan, factor=factor))
    panel = ingest(cfg.data.panel_csv, cfg.data.h)
    plan = make_plan(cfg, panel)
    out = _out_dir(cfg)
    agents_path = out / "agent_forecasts.csv"
    if not agents_path.exists():
        print(f"error: {agents_path} not found; run fit-agents first", file=sys.stderr)
        return 1
    fset = AgentForecastSet.from_csv(agents_path)
    rows, joint_rows, _ = stage_synthesize(plan, panel, fset, cfg.workers)
    path = out / "forecasts.csv"
    write_forecasts(rows, path, plan.quarterly)
    print(f"wrote {path}: {len(rows)} forecast rows ({cfg.synth_model_name})")
    if joint_rows:
        jpath = out / "joint_draws.csv"
        write_joint_draws(joint_rows, jpath, plan.quarterly)
        print(f"wrote {jpath}: {len(joint_rows)} joint draw rows")
    return 0


def _cmd_evaluate(cfg) -> int:
    from .agents import AgentForecastSet
    from .pipeline import (
        emit_plots_data,
        ingest,
        make_plan,
        read_forecasts,
        stage_evaluate,
        write_pit,
        write_ratios,
        write_scores,
    )

    panel = ingest(cfg.data.panel_csv, cfg.data.h)
    plan = make_plan(cfg, panel)
    out = _out_dir(cfg)
    agents_path = out / "agent_forecasts.csv"
    forecasts_path = out / "forecasts.csv"
    for path in (agents_path, forecasts_path):
        if not path.exists():
            print(f"error: {path} not found; run the earlier stages first", file=sys.stderr)
            return 1
    fset = AgentForecastSet.from_csv(agents_path)
    synth_rows = read_forecasts(forecasts_path)
    panels, pit_rows, ratio_rows = stage_evaluate(plan, panel, fset, synth_rows)
    write_scores(panels, out / "scores.csv", plan.quarterly)
    write_ratios(ratio_rows, out / "ratios.csv", plan.quarterly)
    write_pit(pit_rows, out / "pit.csv", plan.quarterly)
    written = emit_plots_data(out, reference=cfg.reference_model)
    print(f"wrote {out / 'scores.csv'}, {out / 'ratios.csv'}, {out / 'pit.csv'}")
    for path in written:
        print(f"wrote {path}")
    return 0


def _cmd_reconstruct(cfg) -> int:
    import numpy as np

    from .evaluation import QuantileGrid, reconstruct_predictive
    from .pipeline import task_stream
    from .quarters import parse_time

    out = _out_dir(cfg)
    forecasts_path = out / "forecasts.csv"
    if not forecasts_path.exists():
        print(f"error: {forecasts_path} not found; run a synthesis stage first", file=sys.stderr)
        return 1
    groups: dict = {}
    with open(forecasts_path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            groups.setdefault((row["series"], row["time"]), {})[float(row["tau"])] = float(
                row["point"]
            )
    path = out / "reconstructed_draws.csv"
    R = cfg.evaluation.reconstruction_draws
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["series", "time", "draw", "value"])
        for (series, t_label) in sorted(groups, key=lambda k: (k[0], parse_time(k[1]))):
            curve_map = groups[(series, t_label)]
            taus = np.array(sorted(curve_map))
            curve = np.array([curve_map[t] for t in taus])
            rng = task_stream(cfg.plan.seed, "reconstruct", series, parse_time(t_label))
            try:
                rec = reconstruct_predictive(curve, QuantileGrid(taus), R=R, rng=rng)
            except ValueError as exc:
                print(
                    f"error: reconstruction failed for series {series} at {t_label}: {exc}",
                    file=sys.stderr,
                )
                return 1
            for r, value in enumerate(rec.draws):
                writer.writerow([series, t_label, r, repr(float(value))])
    print(f"wrote {path}: {len(groups)} forecast distributions x {R} draws")
    return 0


def _cmd_backtest(cfg) -> int:
    from .pipeline import run_backtest

    manifest = run_backtest(cfg)
    out = Path(cfg.out_dir)
    print(f"backtest complete: {len(manifest.windows)} jobs, outputs in {out}")
    for name in manifest.outputs:
        print(f"  {name}")
    return 0


def _cmd_audit(cfg) -> int:
    from .pipeline import audit_lookahead

    rows = audit_lookahead(cfg)
    violations = [r for r in rows if not r["ok"]]
    print(f"{len(rows)} jobs audited; {len(violations)} look-ahead violations")
    for row in violations:
        print(
            f"  VIOLATION {row['stage']} series={row['series']} model={row['model']} "
            f"target={row['target']} consumes input at {row['max_input_time']}"
        )
    return 1 if violations else 0


def main(argv=None) -> int:
    limit_worker_threads()
    args = _build_parser().parse_args(argv)
    cfg = _load_config(args)
    if args.command == "ingest":
        return _cmd_ingest(cfg)
    if args.command == "fit-agents":
        return _cmd_fit_agents(cfg)
    if args.command == "synth":
        return _cmd_synth(cfg, factor=False)
    if args.command == "synth-factor":
        return _cmd_synth(cfg, factor=True)
    if args.command == "evaluate":
        return _cmd_evaluate(cfg)
    if args.command == "reconstruct":
        return _cmd_reconstruct(cfg)
    if args.command == "backtest":
        return _cmd_backtest(cfg)
    if args.command == "audit-lookahead":
        return _cmd_audit(cfg)
    raise AssertionError(f"unhandled command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
