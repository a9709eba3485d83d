"""``matl`` command line: train, eval, matrix, report.

Exit codes: 0 success, 1 usage or config error, 2 runtime failure,
3 matrix finished with failed cells.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

from . import runconfig
from .checkpoint import Checkpoint, CheckpointError, atomic_write, load_checkpoint
from .envs import ConfigError, obs_dim, validate
from .numerics import UsageError
from .ppo import TrainingDivergence, TrainReport, evaluate_greedy, train
from .report import ReportError, write_reports
from .transfer import (
    MissingCheckpointError,
    TransferPlan,
    export_matrix,
    matrix_csv,
    run_eval_matrix,
    run_training_grid,
    write_resolved,
)

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_PARTIAL = 0, 1, 2, 3

logger = logging.getLogger("matl")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _flag_overrides(args, mapping: dict[str, tuple[str, str]]) -> dict[str, dict[str, str]]:
    out: dict[str, dict[str, str]] = {}
    for attr, (section, key) in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            out.setdefault(section, {})[key] = str(value)
    return out


def cmd_train(args) -> int:
    overrides = _flag_overrides(args, {
        "env": ("env", "env_kind"),
        "agents": ("env", "n_agents"),
        "seed": ("run", "seed"),
        "epochs": ("ppo", "total_epochs"),
    })
    config = runconfig.load(args.config, overrides)
    validate(config.env)
    out = Path(args.out or Path(config.run.out_dir) / "checkpoint.matl")
    result = train(config.env, config.ppo, config.run.seed, hidden=config.run.hidden,
                   embed_dim=config.run.embed_dim)
    metadata = {"seed": config.run.seed, "epochs": config.ppo.total_epochs, **runconfig.env_metadata(config.env)}
    atomic_write(out, Checkpoint(result.actor, result.critic, metadata).to_bytes())
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TrainReport.CSV_FIELDS)
    writer.writerows(r.csv_row() for r in result.reports)
    atomic_write(out.with_suffix(".log.csv"), buf.getvalue().encode("utf-8"))
    atomic_write(out.with_suffix(".resolved"), runconfig.render(config).encode("utf-8"))
    last = result.reports[-1].mean_return if result.reports else float("nan")
    print(f"wrote {out} ({config.ppo.total_epochs} epochs, final mean return {last:.3f})")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    env = runconfig.env_from_metadata(ckpt.metadata)
    env = env.replace(n_agents=args.agents if args.agents is not None else env.n_agents)
    if env.env_kind == "traffic_junction":
        env = env.replace(add_rate=env.add_rate_max)
    validate(env)
    if ckpt.actor.obs_dim != obs_dim(env):
        raise ConfigError(
            f"checkpoint actor expects observations of width {ckpt.actor.obs_dim}, "
            f"but {env.env_kind} with grid_dim={env.grid_dim} produces width {obs_dim(env)}")
    result = evaluate_greedy(ckpt.actor, env, args.episodes, args.seed)
    csv_path = Path(args.csv) if args.csv else Path(args.ckpt).with_suffix(f".eval_n{env.n_agents}.csv")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["episode", "seed", "total_reward", "success", "steps"])
    for r in result.episodes:
        writer.writerow([r.episode, r.seed, repr(r.total_reward), int(r.success), r.steps])
    atomic_write(csv_path, buf.getvalue().encode("utf-8"))
    print(f"agents={env.n_agents} episodes={args.episodes} mean_total_reward={result.mean_total_reward:.4f}", end="")
    if env.env_kind == "traffic_junction":
        print(f" success_rate={result.success_rate:.4f}", end="")
    print(f"\nper-episode results: {csv_path}")
    return EXIT_OK


def cmd_matrix(args) -> int:
    config = runconfig.load(args.config, _flag_overrides(args, {"out_dir": ("run", "out_dir")}))
    out_dir = Path(config.run.out_dir)
    plan = TransferPlan.from_run_config(config, str(out_dir))
    resolved = out_dir / "plan.resolved"
    if resolved.exists():
        if not args.resume:
            raise UsageError(f"{out_dir} already holds a run; pass --resume to continue it")
        if resolved.read_text(encoding="utf-8") != runconfig.render(config):
            raise UsageError(f"{resolved} differs from the current config; refusing to mix runs")
    write_resolved(config, out_dir)
    jobs = args.jobs if args.jobs is not None else config.run.jobs
    index = run_training_grid(plan, jobs=jobs)
    matrix = run_eval_matrix(plan, index)
    paths = export_matrix(matrix, out_dir, plan.train_seeds, plan.eval_seeds)
    write_reports(paths["matrix_long"], out_dir / "plots", metric=plan.metric)
    print(f"{plan.metric} (rows: train agents, columns: eval agents)")
    print(matrix_csv(matrix), end="")
    if not matrix.complete:
        for r in index.failures:
            print(f"FAIL n={r.n_train} seed={r.train_seed}: {r.error}", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_report(args) -> int:
    written = write_reports(args.matrix_long, args.svg_out, args.eval_count, metric=args.metric)
    for path in written:
        print(path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="matl", description="Multi-agent PPO with agent-count transfer.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--config")
    p.add_argument("--env", choices=["predator_prey", "traffic_junction"])
    p.add_argument("--agents", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", help="checkpoint path (default <out_dir>/checkpoint.matl)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="greedy evaluation of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--agents", type=int)
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv", help="per-episode CSV path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("matrix", help="train grid plus cross-count evaluation matrix")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--jobs", type=int)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_matrix)

    p = sub.add_parser("report", help="SVG plots from matrix_long.csv")
    p.add_argument("--matrix-long", required=True)
    p.add_argument("--svg-out", required=True, help="output directory")
    p.add_argument("--eval-count", type=int, action="append", help="repeatable; default all")
    p.add_argument("--metric", default="mean value", help="y-axis label")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"matl: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError, ReportError) as exc:
        print(f"matl: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, TrainingDivergence, MissingCheckpointError, OSError) as exc:
        print(f"matl: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
