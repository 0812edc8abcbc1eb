"""``lrnrl`` command line: train, eval, sweep, bench, export, report.

Exit status is 0 on success, 2 for usage or configuration errors and 1 for
any other failure. File outputs are written to a temporary name and moved
into place, so a failed command never leaves a partial file behind.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import io
import json
import os
import sys
import time
from dataclasses import replace
from typing import Callable, Iterator, Sequence

from .. import harness
from ..diffmath import ContractError
from ..encoders import KINDS, ConfigError
from ..env import PlacementError
from ..ppo import PolicyModel, Trainer, TrainingAborted, build_model
from . import checkpoint as ckpt
from .config import ConfigFileError, ExperimentConfig, parse_config, serialize
from .runlog import DirectoryLock, MetricsWriter, RunLocked, read_metrics

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class UsageError(ValueError):
    pass


# helpers -----------------------------------------------------------------------------------

def parse_int_list(text: str) -> list[int]:
    """``"0..9"`` (inclusive), ``"4,8,16"`` or a mix such as ``"0..3,6"``."""
    out: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            if ".." in part:
                lo, hi = (int(x) for x in part.split(".."))
                if hi < lo:
                    raise UsageError(f"empty range {part!r}")
                out.extend(range(lo, hi + 1))
            else:
                out.append(int(part))
        except ValueError as exc:
            raise UsageError(f"cannot parse integer list {text!r}") from exc
    if not out:
        raise UsageError(f"integer list {text!r} is empty")
    return out


@contextlib.contextmanager
def atomic_text(path: str) -> Iterator[io.StringIO]:
    buf = io.StringIO()
    yield buf
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)


def load_model(path: str) -> tuple[PolicyModel, ExperimentConfig, ckpt.Checkpoint]:
    ck = ckpt.load(path)
    cfg = ck.config
    model = build_model(cfg.encoder, cfg.ppo, 2 * cfg.env.n_effectors, cfg.run.seed)
    ckpt.restore_model(model, ck.params)
    return model, cfg, ck


# training ------------------------------------------------------------------------------------

CHECKPOINT_DIR = "checkpoints"
FINAL_CHECKPOINT = "final.ckpt"


def checkpoint_path(out_dir: str, step: int | None = None) -> str:
    name = FINAL_CHECKPOINT if step is None else f"step_{step:010d}.ckpt"
    return os.path.join(out_dir, CHECKPOINT_DIR, name)


def make_trainer(cfg: ExperimentConfig) -> Trainer:
    return Trainer(cfg.env, cfg.reward, cfg.encoder, cfg.ppo, seed=cfg.run.seed, total_steps=cfg.run.total_steps)


def _truncate_metrics(path: str, last_step: int) -> None:
    if not os.path.exists(path):
        return
    kept = [r for r in read_metrics(path) if r["step"] <= last_step]
    with atomic_text(path) as fh:
        for r in kept:
            fh.write(json.dumps(r) + "\n")


def run_training(cfg: ExperimentConfig, out_dir: str, resume: str | None = None,
                 max_updates: int | None = None, log: Callable[[str], None] | None = None) -> Trainer:
    """Train to ``cfg.run.total_steps`` (or ``max_updates`` more updates), writing
    metrics, periodic checkpoints and a final checkpoint under ``out_dir``."""
    os.makedirs(os.path.join(out_dir, CHECKPOINT_DIR), exist_ok=True)
    with DirectoryLock(out_dir):
        trainer = make_trainer(cfg)
        metrics_path = os.path.join(out_dir, "metrics.jsonl")
        if resume:
            ck = ckpt.load(resume)
            ckpt.restore_trainer(trainer, ck)
            _truncate_metrics(metrics_path, trainer.global_step)
        else:
            if os.path.exists(metrics_path):
                os.remove(metrics_path)
            if cfg.run.total_steps > 0:
                ckpt.save(checkpoint_path(out_dir, 0), ckpt.from_trainer(trainer, cfg))
        with atomic_text(os.path.join(out_dir, "config.ini")) as fh:
            fh.write(serialize(cfg))
        writer = MetricsWriter(metrics_path)
        writer.last_step = trainer.global_step
        run = cfg.run
        t0 = time.perf_counter()
        done = 0
        try:
            while not trainer.done and (max_updates is None or done < max_updates):
                try:
                    rec = trainer.update()
                except TrainingAborted as exc:
                    with atomic_text(os.path.join(out_dir, "abort.json")) as fh:
                        json.dump({"message": str(exc), "step": trainer.global_step, "dump": exc.dump}, fh)
                    raise
                done += 1
                rec["wall_clock"] = time.perf_counter() - t0
                if run.eval_every and (trainer.updates % run.eval_every == 0 or trainer.done):
                    stats = harness.evaluate(trainer.model, cfg.env, run.eval_episodes, seed=run.seed + 10_000,
                                             reward_cfg=cfg.reward)
                    rec["eval_success"] = stats.mean
                    rec["eval_solved_fraction"] = stats.solved_fraction
                writer.write(rec)
                if log:
                    log(_progress_line(rec))
                if run.checkpoint_every and trainer.updates % run.checkpoint_every == 0:
                    ckpt.save(checkpoint_path(out_dir, trainer.global_step), ckpt.from_trainer(trainer, cfg))
        finally:
            writer.close()
        ckpt.save(checkpoint_path(out_dir), ckpt.from_trainer(trainer, cfg))
    return trainer


def _progress_line(rec: dict) -> str:
    parts = [f"step {rec['step']}", f"lr {rec['lr']:.3g}"]
    if rec.get("mean_success") is not None:
        parts.append(f"train_success {rec['mean_success']:.3f}")
    if "eval_success" in rec:
        parts.append(f"eval_success {rec['eval_success']:.3f}")
    parts.append(f"value_loss {rec['value_loss']:.4g}")
    return "  ".join(parts)


def cmd_train(args) -> int:
    if args.resume:
        cfg = ckpt.load(args.resume).config
    elif args.config:
        cfg = parse_config(args.config)
    else:
        cfg = ExperimentConfig().validate()
    if args.total_steps is not None:
        cfg.run.total_steps = args.total_steps
        cfg.validate()
    out = args.out or cfg.run.path
    trainer = run_training(cfg, out, resume=args.resume, log=None if args.quiet else print)
    print(f"trained to step {trainer.global_step}; final checkpoint {checkpoint_path(out)}")
    return EXIT_OK


# evaluation commands --------------------------------------------------------------------------

def _write_sweep(result: harness.SweepResult, out: str | None) -> None:
    buf = io.StringIO()
    result.write(buf)
    sys.stdout.write(buf.getvalue())
    if out:
        with atomic_text(out) as fh:
            fh.write(buf.getvalue())


def cmd_eval(args) -> int:
    if args.n < 0:
        raise UsageError("--n must be >= 0")
    model, cfg, _ = load_model(args.checkpoint)
    env = replace(cfg.env, n_cubes=args.n + 1)
    stats = harness.evaluate(model, env, args.episodes, seed=args.seed, reward_cfg=cfg.reward)
    _write_sweep(harness.SweepResult([stats]), args.out)
    return EXIT_OK


def cmd_sweep(args) -> int:
    model, cfg, _ = load_model(args.checkpoint)
    n_list = parse_int_list(args.n_list)
    if min(n_list) < 0:
        raise UsageError("--n-list entries must be >= 0")
    result = harness.generalization_sweep(model, cfg.env, n_list, args.episodes, seed=args.seed,
                                          reward_cfg=cfg.reward)
    _write_sweep(result, args.out)
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = parse_config(args.config) if args.config else ExperimentConfig().validate()
    kinds = [k.strip() for k in args.kinds.split(",") if k.strip()]
    bad = [k for k in kinds if k not in KINDS]
    if bad:
        raise UsageError(f"unknown encoder kinds {bad}; choose from {', '.join(KINDS)}")
    result = harness.scaling_bench(kinds, parse_int_list(args.k_list), args.reps, args.batch, cfg.encoder,
                                   seed=cfg.run.seed)
    buf = io.StringIO()
    result.write(buf)
    sys.stdout.write(buf.getvalue())
    if args.out:
        with atomic_text(args.out) as fh:
            fh.write(buf.getvalue())
    return EXIT_OK


def cmd_export(args) -> int:
    if args.n < 0:
        raise UsageError("--n must be >= 0")
    model, cfg, _ = load_model(args.checkpoint)
    env = replace(cfg.env, n_cubes=args.n + 1)
    names = ("z.csv", "relations.csv", "norms.csv")
    bufs = [io.StringIO() for _ in names]
    writer = harness.DiagnosticsWriter(*bufs)
    for rec in harness.export_diagnostics(model, env, args.episodes, seed=args.seed, reward_cfg=cfg.reward):
        writer.write(rec)
    os.makedirs(args.out, exist_ok=True)
    for name, buf in zip(names, bufs):
        with atomic_text(os.path.join(args.out, name)) as fh:
            fh.write(buf.getvalue())
    print(f"wrote {', '.join(os.path.join(args.out, n) for n in names)}")
    return EXIT_OK


# report ----------------------------------------------------------------------------------------

def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.4g}"
    return str(v)


def report_lines(path: str) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        head = fh.readline().strip()
    if head.startswith("{"):
        records = list(read_metrics(path))
        if not records:
            return [f"{path}: no metric records"]
        last = records[-1]
        evals = [r for r in records if r.get("eval_success") is not None]
        lines = [f"{path}: {len(records)} updates, last step {last['step']}"]
        for key in ("mean_episode_reward", "mean_success", "policy_loss", "value_loss", "entropy", "approx_kl"):
            lines.append(f"  {key:22s} {_fmt(last.get(key))}")
        if evals:
            best = max(evals, key=lambda r: r["eval_success"])
            lines.append(f"  eval_success (last)    {_fmt(evals[-1]['eval_success'])} at step {evals[-1]['step']}")
            lines.append(f"  eval_success (best)    {_fmt(best['eval_success'])} at step {best['step']}")
        return lines
    cols = next(csv.reader([head]))
    with open(path, encoding="utf-8") as fh:
        if tuple(cols) == harness.SweepResult.HEADER:
            res = harness.SweepResult.read(fh)
            lines = [f"{path}: success by distractor count", "  N  episodes  mean    std     solved"]
            for r in res.rows:
                note = f"  ({r.error})" if r.error else ""
                lines.append(f"  {r.n_distractors:<2d} {r.episodes:<9d} {r.mean:<7.3f} {r.std:<7.3f} "
                             f"{r.solved_fraction:.3f}{note}")
            return lines
        if tuple(cols) == harness.BenchResult.HEADER:
            res = harness.BenchResult.read(fh)
            lines = [f"{path}: log-log slope of encoder time against K"]
            for kind, slope in res.slopes.items():
                lines.append(f"  {kind:12s} {slope:.3f}")
            return lines
    raise UsageError(f"{path}: not a metrics, sweep or bench file")


def cmd_report(args) -> int:
    for path in args.files:
        print("\n".join(report_lines(path)))
    return EXIT_OK


# entry point -----------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lrnrl", description="Set-encoder PPO agents for planar cube transport.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train an agent from a config file")
    t.add_argument("config", nargs="?", help="INI config; omitted means all defaults")
    t.add_argument("--resume", metavar="CKPT", help="continue from a checkpoint (its config is used)")
    t.add_argument("--out", help="output directory (default: run.out_dir/run.name)")
    t.add_argument("--total-steps", type=int, help="override run.total_steps")
    t.add_argument("--quiet", action="store_true", help="no per-update progress lines")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint at one distractor count")
    e.add_argument("checkpoint")
    e.add_argument("--n", type=int, required=True, help="number of distractors")
    e.add_argument("--episodes", type=int, default=200)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", help="CSV output file")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="evaluate a checkpoint over several distractor counts")
    s.add_argument("checkpoint")
    s.add_argument("--n-list", default="0..9", help="e.g. 0..9 or 0,1,3")
    s.add_argument("--episodes", type=int, default=200)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", help="CSV output file")
    s.set_defaults(func=cmd_sweep)

    b = sub.add_parser("bench", help="time encoder forward passes against set size")
    b.add_argument("--config", help="INI config supplying encoder settings")
    b.add_argument("--kinds", default=",".join(KINDS))
    b.add_argument("--k-list", default="4,8,16,32,64")
    b.add_argument("--reps", type=int, default=100)
    b.add_argument("--batch", type=int, default=32)
    b.add_argument("--out", help="CSV output file")
    b.set_defaults(func=cmd_bench)

    x = sub.add_parser("export", help="write per-step representation diagnostics")
    x.add_argument("checkpoint")
    x.add_argument("--n", type=int, default=2, help="number of distractors")
    x.add_argument("--episodes", type=int, default=1)
    x.add_argument("--seed", type=int, default=0)
    x.add_argument("--out", required=True, help="output directory")
    x.set_defaults(func=cmd_export)

    r = sub.add_parser("report", help="summarise metrics, sweep or bench files")
    r.add_argument("files", nargs="+")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigFileError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ckpt.CheckpointError, RunLocked, PlacementError, TrainingAborted, ContractError,
            ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
