"""Command-line experiment runner.

Subcommands::

    varslam simulate --config exp.cfg --out runs/sim
    varslam run --config exp.cfg --out runs/full --seeds 1,2,3
    varslam eval gt.tum est.tum --align --max-dt 0.02 --out errors.csv
    varslam partition-dump --config exp.cfg --out table.txt

Exit codes: 0 success, 1 configuration error, 2 runtime or solver failure,
3 I/O error.
"""

from __future__ import annotations

import argparse
import io
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from typing import Optional, Sequence

import numpy as np

from .config import ExperimentConfig, format_manifest, load_config, parse_seeds
from .errors import ConfigError, TrajectoryParseError, VarSlamError
from .evaluate import Trajectory, ate_rmse, read_trajectory_tum, write_trajectory_tum
from .kernel import dump_partition_table, get_partition_table
from .pipeline import SequenceResult, run_sequence
from .sim import dump_observations, generate_scene, render_frame

log = logging.getLogger("varslam")

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2
EXIT_IO = 3

SUMMARY_HEADER = "seed,ate_rmse,max_ate,mean_alpha"
TRACE_HEADER = "window_index,outer_iteration,alpha,cost"


class _IOFailure(Exception):
    """Wraps an OSError with the path that caused it."""


def _resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if getattr(args, "seeds", None):
        try:
            cfg = replace(cfg, seeds=parse_seeds(args.seeds))
        except ValueError as exc:
            raise ConfigError(f"--seeds: {exc}") from None
    run = cfg.run
    if getattr(args, "align", None) is not None:
        run = replace(run, align=args.align)
    if getattr(args, "max_dt", None) is not None:
        run = replace(run, max_dt=args.max_dt)
    cfg = replace(cfg, run=run)
    if getattr(args, "out", None):
        cfg = replace(cfg, output_dir=args.out)
    cfg.validate()
    return cfg


def _write_text(path: str, text: str) -> None:
    try:
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    except OSError as exc:
        raise _IOFailure(f"cannot write {path}: {exc.strerror or exc}") from None


def _tum_text(traj: Trajectory, header: str | None = None) -> str:
    buf = io.StringIO()
    write_trajectory_tum(traj, buf, header=header)
    return buf.getvalue()


def _fmt(value: float) -> str:
    return "nan" if not math.isfinite(value) else f"{value:.9g}"


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def cmd_simulate(cfg: ExperimentConfig) -> int:
    out = cfg.output_dir
    _write_text(os.path.join(out, "manifest.cfg"), format_manifest(cfg))
    for seed in cfg.seeds:
        scene = generate_scene(replace(cfg.scene, seed=seed))
        gt = Trajectory.from_world_to_camera(scene.timestamps, scene.gt_trajectory)
        seed_dir = os.path.join(out, f"seed_{seed}")
        _write_text(os.path.join(seed_dir, "gt.tum"), _tum_text(gt, f"ground truth, seed {seed}"))
        buf = io.StringIO()
        dump_observations([render_frame(scene, f) for f in range(scene.n_frames)], buf)
        _write_text(os.path.join(seed_dir, "observations.csv"), buf.getvalue())
    return EXIT_OK


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------

def _run_one(cfg: ExperimentConfig, seed: int):
    """Run one seed; returns (seed, artifacts, summary row) or (seed, error)."""
    try:
        scene = generate_scene(replace(cfg.scene, seed=seed))
        result: SequenceResult = run_sequence(scene, cfg, seed=seed)
    except (VarSlamError, np.linalg.LinAlgError, FloatingPointError) as exc:
        return seed, None, f"{type(exc).__name__}: {exc}"
    gt_text = _tum_text(Trajectory.from_world_to_camera(scene.timestamps, scene.gt_trajectory),
                        f"ground truth, seed {seed}")
    est_text = _tum_text(result.trajectory, f"estimate, seed {seed}, ablation {cfg.ablation}")
    # score what was written so eval on the files reproduces the summary exactly
    try:
        ate = ate_rmse(read_trajectory_tum(io.StringIO(gt_text)),
                       read_trajectory_tum(io.StringIO(est_text)),
                       align=cfg.run.align, max_dt=cfg.run.max_dt)
    except VarSlamError as exc:
        return seed, None, f"{type(exc).__name__}: {exc}"
    trace = [TRACE_HEADER]
    trace += [f"{w},{o},{_fmt(a)},{_fmt(c)}" for w, o, a, c in result.alpha_rows()]
    alphas = result.final_alphas
    mean_alpha = float(np.mean(alphas)) if alphas else float("nan")
    row = f"{seed},{_fmt(ate.rmse)},{_fmt(ate.max)},{_fmt(mean_alpha)}"
    artifacts = {"gt.tum": gt_text, "est.tum": est_text,
                 "alpha_trace.csv": "\n".join(trace) + "\n",
                 "summary.csv": f"{SUMMARY_HEADER}\n{row}\n"}
    return seed, artifacts, row


def cmd_run(cfg: ExperimentConfig) -> int:
    out = cfg.output_dir
    _write_text(os.path.join(out, "manifest.cfg"), format_manifest(cfg))
    k = cfg.kernel
    get_partition_table(k.grid, k.tau, k.quad_nodes)
    jobs = [(cfg, s) for s in cfg.seeds]
    if cfg.run.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.run.workers) as pool:
            results = list(pool.map(_run_one, *zip(*jobs)))
    else:
        results = [_run_one(c, s) for c, s in jobs]

    rows, failed = [], 0
    for seed, artifacts, payload in results:
        if artifacts is None:
            failed += 1
            print(f"seed {seed}: failed: {payload}", file=sys.stderr)
            continue
        seed_dir = os.path.join(out, f"seed_{seed}")
        for name, text in artifacts.items():
            _write_text(os.path.join(seed_dir, name), text)
        rows.append(payload)
    # single writer for the merged summary, after every seed has finished
    _write_text(os.path.join(out, "summary.csv"), "\n".join([SUMMARY_HEADER] + rows) + "\n")
    for row in rows:
        print(row)
    return EXIT_RUNTIME if failed else EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _read_tum(path: str) -> Trajectory:
    try:
        with open(path, encoding="utf-8") as fh:
            return read_trajectory_tum(fh, source=path)
    except OSError as exc:
        raise _IOFailure(f"cannot read {path}: {exc.strerror or exc}") from None


def cmd_eval(gt_path: str, est_path: str, align: bool, max_dt: float,
             csv_path: Optional[str]) -> int:
    gt = _read_tum(gt_path)
    est = _read_tum(est_path)
    res = ate_rmse(gt, est, align=align, max_dt=max_dt)
    print(f"pairs  {len(res.pairs)}")
    for name in ("rmse", "mean", "median", "max"):
        print(f"{name:<6} {getattr(res, name):.6f}")
    if csv_path:
        lines = ["timestamp,error"]
        lines += [f"{gt.timestamps[i]:.6f},{err:.9g}"
                  for (i, _), err in zip(res.pairs, res.per_sample_errors)]
        _write_text(csv_path, "\n".join(lines) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# partition-dump
# ---------------------------------------------------------------------------

def cmd_partition_dump(cfg: ExperimentConfig, out: Optional[str]) -> int:
    k = cfg.kernel
    buf = io.StringIO()
    dump_partition_table(get_partition_table(k.grid, k.tau, k.quad_nodes), buf)
    if out:
        _write_text(out, buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="varslam", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="write ground truth and observation dumps")
    sim.add_argument("--config", help="experiment config file")
    sim.add_argument("--out", help="output directory (overrides experiment.output_dir)")
    sim.add_argument("--seeds", help="comma list or ranges, e.g. 1,2,5-8")

    run = sub.add_parser("run", help="track, map and score each seed")
    run.add_argument("--config", help="experiment config file")
    run.add_argument("--out", help="output directory (overrides experiment.output_dir)")
    run.add_argument("--seeds", help="comma list or ranges, e.g. 1,2,5-8")
    run.add_argument("--align", action=argparse.BooleanOptionalAction, default=None,
                     help="rigidly align before scoring (default from config)")
    run.add_argument("--max-dt", type=float, default=None, help="association window in seconds")

    ev = sub.add_parser("eval", help="ATE between two TUM trajectories")
    ev.add_argument("gt")
    ev.add_argument("est")
    ev.add_argument("--align", action="store_true", help="rigidly align before scoring")
    ev.add_argument("--max-dt", type=float, default=0.02, help="association window in seconds")
    ev.add_argument("--out", help="optional per-sample error CSV")

    pd = sub.add_parser("partition-dump", help="write the log-partition table")
    pd.add_argument("--config", help="experiment config file")
    pd.add_argument("--out", help="output file (default: stdout)")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "eval":
            return cmd_eval(args.gt, args.est, args.align, args.max_dt, args.out)
        if args.command == "partition-dump":
            cfg = load_config(args.config) if args.config else ExperimentConfig()
            return cmd_partition_dump(cfg, args.out)
        cfg = _resolve_config(args)
        if args.command == "simulate":
            return cmd_simulate(cfg)
        return cmd_run(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (_IOFailure, TrajectoryParseError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (VarSlamError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
