"""Command line driver: ``rtpos <subcommand> [options]``.

Every subcommand writes CSV files with fixed headers into ``--out-dir``.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io
from .harness import (SWEEP_DIMENSIONS, ExperimentConfig, angle_reports, cu_scene, load_config, prepare,
                      record_rows, run_pipeline, summarize_records, sweep)
from .scene import PerturbationSpec, SceneError, save_scene, with_scene
from .tracking import AngleTracker, TrackerConfig

log = logging.getLogger("rtpos")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scene", help="scene file (.yaml/.json) or bundled fixture name")
    p.add_argument("--config", help="experiment config file (.yaml/.json)")
    p.add_argument("--seed", type=int, action="append", help="Monte-Carlo seed; repeat for several")
    p.add_argument("--out-dir", default="out", help="output directory (default: out)")
    p.add_argument("--threads", type=int, default=1, help="worker threads over seeds")
    p.add_argument("--emit-cdf", action="store_true", help="also write (value, cumulative_probability) pairs")
    p.add_argument("--n-bs", type=int, help="cap on the number of RRUs per TTI")
    p.add_argument("--tti-step", type=int, help="use every k-th track point")
    p.add_argument("--max-ttis", type=int, help="stop after this many epochs")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rtpos", description="Ray-tracing based AoA positioning simulator.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, text in [("trace", "forward ray tracing, one row per propagation path"),
                       ("aoa", "angle reports per RRU and TTI"),
                       ("localize", "candidates, clusters and positions"),
                       ("track", "angle trends per RRU plus tracked positions")]:
        _common(sub.add_parser(name, help=text))
    p = sub.add_parser("sweep", help="error summaries over a parameter grid")
    _common(p)
    p.add_argument("--dimension", required=True, choices=SWEEP_DIMENSIONS)
    p.add_argument("--values", required=True, type=float, nargs="+")
    p = sub.add_parser("perturb", help="localize against a perturbed copy of the map")
    _common(p)
    p.add_argument("--wall-sigma", type=float, default=1.0, help="building offset sigma per axis (m)")
    p.add_argument("--scale-low", type=float, default=1.0, help="lower material scale factor")
    p.add_argument("--scale-high", type=float, default=1.0, help="upper material scale factor")
    return ap


def config_from_args(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    over = {}
    if args.scene:
        over["scene"] = args.scene
    if args.seed:
        over["seeds"] = tuple(args.seed)
    if args.out_dir:
        over["out_dir"] = args.out_dir
    for k in ("n_bs", "tti_step", "max_ttis"):
        if getattr(args, k) is not None:
            over[k] = getattr(args, k)
    if args.command == "track":
        over["tracking"] = True
    if args.command == "perturb":
        over["perturbation"] = PerturbationSpec(args.wall_sigma, args.scale_low, args.scale_high)
    return replace(cfg, **over)


def _write_summary(out: Path, summaries, emit_cdf: bool) -> None:
    io.write_rows(out / "summary.csv", io.SUMMARY_HEADER, [s.row() for s in summaries])
    if emit_cdf:
        for s in summaries:
            name = "cdf.csv" if len(summaries) == 1 else f"cdf_{s.label.replace('=', '_')}.csv"
            io.write_cdf(out / name, s.errors)


def cmd_trace(cfg, args, out: Path) -> None:
    run = prepare(cfg)
    rows = []
    for tti, ue in run.epochs():
        for rid, paths in sorted(run.paths(tti, ue).items()):
            rows.extend(io.path_rows(tti, rid, paths))
    io.write_rows(out / "paths.csv", io.PATH_HEADER, rows)


def _reports(cfg, run, seed):
    for tti, ue in run.epochs():
        yield tti, angle_reports(cfg, run, seed, tti, run.paths(tti, ue))


def cmd_aoa(cfg, args, out: Path) -> None:
    run = prepare(cfg)
    rows = []
    for seed in cfg.seeds:
        for _, reports in _reports(cfg, run, seed):
            rows.extend([seed, *r] for r in io.angle_rows(reports))
    io.write_rows(out / "angles.csv", ["seed", *io.ANGLE_HEADER], rows)


def _localize(cfg, args, out: Path) -> None:
    run = prepare(cfg)
    if args.threads > 1:
        records, sink = run_pipeline(cfg, run, args.threads), None
    else:
        sink = {}
        records = run_pipeline(cfg, run, 1, sink)
    io.write_rows(out / "positions.csv", io.POSITION_HEADER, record_rows(records))
    if sink is not None:
        io.write_rows(out / "candidates.csv", io.CANDIDATE_HEADER, sink.get("candidates", []))
        io.write_rows(out / "clusters.csv", io.CLUSTER_HEADER, sink.get("clusters", []))
    _write_summary(out, [summarize_records(records, args.command)], args.emit_cdf)


def cmd_localize(cfg, args, out: Path) -> None:
    _localize(cfg, args, out)


def cmd_track(cfg, args, out: Path) -> None:
    run = prepare(cfg)
    rows = []
    for seed in cfg.seeds:
        trackers: dict[tuple[int, str], AngleTracker] = {}
        for tti, reports in _reports(cfg, run, seed):
            for rep in reports:
                for axis in ("az", "el"):
                    key = (rep.rru_id, axis)
                    tr = trackers.setdefault(key, AngleTracker(TrackerConfig(wrap=axis == "az")))
                    values = [p.azimuth if axis == "az" else p.elevation for p in rep.peaks]
                    ids = tr.update(tti, values)
                    preds = {tid: (v, w) for tid, v, w in tr.predict(tti)}
                    for v, tid in zip(values, ids):
                        pv, w = preds.get(tid, (v, 0.0))
                        rows.append([seed, tti, rep.rru_id, axis, tid, np.rad2deg(v), np.rad2deg(pv), w])
    io.write_rows(out / "tracks.csv", ["seed", *io.TRACK_HEADER], rows)
    _localize(cfg, args, out)


def cmd_sweep(cfg, args, out: Path) -> None:
    summaries = sweep(cfg, args.dimension, args.values, args.threads)
    _write_summary(out, summaries, args.emit_cdf)


def cmd_perturb(cfg, args, out: Path) -> None:
    run = prepare(cfg)
    for seed in cfg.seeds:
        # the exact map the central unit localizes against for this seed
        save_scene(with_scene(run.scenario, cu_scene(cfg, run, seed)), out / f"scene_perturbed_seed{seed}.yaml")
    _localize(cfg, args, out)


COMMANDS = {"trace": cmd_trace, "aoa": cmd_aoa, "localize": cmd_localize, "track": cmd_track,
            "sweep": cmd_sweep, "perturb": cmd_perturb}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads < 1:
            raise ValueError("--threads must be >= 1")
        cfg = config_from_args(args)
        out = Path(cfg.out_dir or args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, args, out)
    except (SceneError, ValueError, KeyError, OSError) as e:
        print(f"rtpos: error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
