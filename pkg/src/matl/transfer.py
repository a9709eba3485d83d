"""Train per (agent count, seed), then cross-evaluate every checkpoint at every agent count.

The output directory holds::

    plan.resolved            resolved run config
    checkpoints/             one checkpoint per (train count, train seed)
    logs/                    one per-epoch training CSV per checkpoint
    matrix.csv               rows = train count, columns = eval count, "mean±std"
    matrix_long.csv          one row per (train count, eval count, train seed, eval seed)
"""

from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, CheckpointError, atomic_write, load_checkpoint
from .envs import ConfigError, EnvConfig, derive_seed, validate
from .ppo import PpoConfig, TrainingDivergence, TrainReport, evaluate_greedy, train
from .runconfig import RunConfig, env_metadata, render

logger = logging.getLogger(__name__)

FAIL = "FAIL"


class MissingCheckpointError(RuntimeError):
    """An evaluation cell has no completed checkpoint to load."""


@dataclass(frozen=True)
class TransferPlan:
    env: EnvConfig
    ppo: PpoConfig
    train_agent_counts: tuple[int, ...]
    eval_agent_counts: tuple[int, ...]
    train_seeds: tuple[int, ...] = (0, 1, 2)
    eval_seeds: tuple[int, ...] = (0, 1, 2)
    episodes_per_eval: int = 100
    out_dir: str = "runs"
    base_seed: int = 0
    hidden: tuple[int, ...] = (64, 64)
    embed_dim: int = 64

    def __post_init__(self):
        for name in ("train_agent_counts", "eval_agent_counts", "train_seeds", "eval_seeds"):
            values = getattr(self, name)
            if not values:
                raise ConfigError(f"{name} must not be empty")
            if any(b <= a for a, b in zip(values, values[1:])):
                raise ConfigError(f"{name} must be strictly increasing, got {list(values)}")
        for n in (*self.train_agent_counts, *self.eval_agent_counts):
            validate(self.env.replace(n_agents=n))
        if self.episodes_per_eval < 1:
            raise ConfigError("episodes_per_eval must be positive")

    @classmethod
    def from_run_config(cls, config: RunConfig, out_dir: str | None = None) -> "TransferPlan":
        return cls(
            env=config.env,
            ppo=config.ppo,
            train_agent_counts=config.plan.train_agent_counts,
            eval_agent_counts=config.plan.eval_agent_counts,
            train_seeds=config.plan.train_seeds,
            eval_seeds=config.plan.eval_seeds,
            episodes_per_eval=config.plan.episodes_per_eval,
            out_dir=out_dir or config.run.out_dir,
            base_seed=config.run.seed,
            hidden=config.run.hidden,
            embed_dim=config.run.embed_dim,
        )

    @property
    def metric(self) -> str:
        return "success_rate" if self.env.env_kind == "traffic_junction" else "mean_total_reward"

    def checkpoint_path(self, n_train: int, train_seed: int) -> Path:
        return Path(self.out_dir) / "checkpoints" / f"n{n_train}_s{train_seed}.matl"

    def failure_path(self, n_train: int, train_seed: int) -> Path:
        return self.checkpoint_path(n_train, train_seed).with_suffix(".fail")

    def log_path(self, n_train: int, train_seed: int) -> Path:
        return Path(self.out_dir) / "logs" / f"train_n{n_train}_s{train_seed}.csv"

    def training_seed(self, n_train: int, train_seed: int) -> int:
        return derive_seed(self.base_seed, n_train, train_seed)

    def eval_seed(self, eval_seed: int, n_eval: int, n_train: int, train_seed: int) -> int:
        return derive_seed(derive_seed(self.base_seed, eval_seed), n_eval, n_train, train_seed)

    def eval_env(self, n_eval: int) -> EnvConfig:
        cfg = self.env.replace(n_agents=n_eval)
        if cfg.env_kind == "traffic_junction":
            cfg = cfg.replace(add_rate=cfg.add_rate_max)
        return cfg


@dataclass
class CheckpointRecord:
    n_train: int
    train_seed: int
    path: str
    complete: bool
    error: str = ""


@dataclass
class CheckpointIndex:
    records: list[CheckpointRecord] = field(default_factory=list)

    def get(self, n_train: int, train_seed: int) -> CheckpointRecord | None:
        for r in self.records:
            if r.n_train == n_train and r.train_seed == train_seed:
                return r
        return None

    @property
    def failures(self) -> list[CheckpointRecord]:
        return [r for r in self.records if not r.complete]


def _training_log(reports: list[TrainReport]) -> bytes:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TrainReport.CSV_FIELDS)
    for r in reports:
        writer.writerow(r.csv_row())
    return buf.getvalue().encode("utf-8")


def train_cell(plan: TransferPlan, n_train: int, train_seed: int) -> CheckpointRecord:
    """One full training run; writes checkpoint and log atomically, or a failure marker."""
    path = plan.checkpoint_path(n_train, train_seed)
    env = plan.env.replace(n_agents=n_train)
    seed = plan.training_seed(n_train, train_seed)
    try:
        result = train(env, plan.ppo, seed, hidden=plan.hidden, embed_dim=plan.embed_dim)
    except TrainingDivergence as exc:
        atomic_write(plan.failure_path(n_train, train_seed), f"{exc}\n".encode("utf-8"))
        logger.warning("training diverged for n=%d seed=%d: %s", n_train, train_seed, exc)
        return CheckpointRecord(n_train, train_seed, str(path), False, str(exc))
    metadata = {"train_seed": train_seed, "seed": seed, "epochs": plan.ppo.total_epochs, **env_metadata(env)}
    atomic_write(plan.log_path(n_train, train_seed), _training_log(result.reports))
    atomic_write(path, Checkpoint(result.actor, result.critic, metadata).to_bytes())
    plan.failure_path(n_train, train_seed).unlink(missing_ok=True)
    return CheckpointRecord(n_train, train_seed, str(path), True)


def _existing(plan: TransferPlan, n_train: int, train_seed: int) -> CheckpointRecord | None:
    path = plan.checkpoint_path(n_train, train_seed)
    if not path.exists():
        return None
    try:
        load_checkpoint(path)
    except CheckpointError as exc:
        logger.warning("ignoring unreadable checkpoint %s: %s", path, exc)
        return None
    return CheckpointRecord(n_train, train_seed, str(path), True)


def run_training_grid(plan: TransferPlan, jobs: int = 1) -> CheckpointIndex:
    """Train every missing (count, seed) pair; completed pairs on disk are skipped."""
    cells = [(n, s) for n in plan.train_agent_counts for s in plan.train_seeds]
    done = {cell: _existing(plan, *cell) for cell in cells}
    todo = [cell for cell in cells if done[cell] is None]
    if todo:
        logger.info("training %d of %d cells", len(todo), len(cells))
    if jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {cell: pool.submit(train_cell, plan, *cell) for cell in todo}
            for cell in todo:
                done[cell] = futures[cell].result()
    else:
        for cell in todo:
            done[cell] = train_cell(plan, *cell)
    return CheckpointIndex([done[cell] for cell in cells])


@dataclass
class RunResult:
    train_seed: int
    eval_seed: int
    mean: float


@dataclass
class MatrixCell:
    n_train: int
    n_eval: int
    runs: list[RunResult] = field(default_factory=list)
    failed: bool = False

    @property
    def mean(self) -> float:
        if self.failed or not self.runs:
            return math.nan
        return sum(r.mean for r in self.runs) / len(self.runs)

    @property
    def std(self) -> float:
        """Population standard deviation of the per-run means."""
        if self.failed or not self.runs:
            return math.nan
        return float(np.std([r.mean for r in self.runs], ddof=0))

    def label(self) -> str:
        return FAIL if self.failed else f"{self.mean:.2f}±{self.std:.2f}"


@dataclass
class EvalMatrix:
    train_agent_counts: tuple[int, ...]
    eval_agent_counts: tuple[int, ...]
    cells: dict[tuple[int, int], MatrixCell]
    metric: str = "mean_total_reward"

    def cell(self, n_train: int, n_eval: int) -> MatrixCell:
        return self.cells[(n_train, n_eval)]

    @property
    def complete(self) -> bool:
        return not any(c.failed for c in self.cells.values())


def _eval_cell(plan: TransferPlan, n_train: int, n_eval: int, index: CheckpointIndex,
               cache: dict) -> MatrixCell:
    cell = MatrixCell(n_train, n_eval)
    for train_seed in plan.train_seeds:
        record = index.get(n_train, train_seed)
        if record is None:
            raise MissingCheckpointError(
                f"no checkpoint for train count {n_train}, train seed {train_seed} (eval count {n_eval})")
        if not record.complete:
            cell.failed = True
            continue
        if record.path not in cache:
            try:
                cache[record.path] = load_checkpoint(record.path).actor
            except (OSError, CheckpointError) as exc:
                raise MissingCheckpointError(
                    f"checkpoint for train count {n_train}, train seed {train_seed} "
                    f"cannot be loaded from {record.path}: {exc}") from exc
        actor = cache[record.path]
        for eval_seed in plan.eval_seeds:
            seed = plan.eval_seed(eval_seed, n_eval, n_train, train_seed)
            result = evaluate_greedy(actor, plan.eval_env(n_eval), plan.episodes_per_eval, seed)
            cell.runs.append(RunResult(train_seed, eval_seed, getattr(result, plan.metric)))
    if cell.failed:
        cell.runs = []
    return cell


def run_eval_matrix(plan: TransferPlan, index: CheckpointIndex) -> EvalMatrix:
    cache: dict = {}
    cells = {}
    for n_train in plan.train_agent_counts:
        for n_eval in plan.eval_agent_counts:
            cells[(n_train, n_eval)] = _eval_cell(plan, n_train, n_eval, index, cache)
    return EvalMatrix(plan.train_agent_counts, plan.eval_agent_counts, cells, plan.metric)


def matrix_csv(matrix: EvalMatrix) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["train\\eval", *matrix.eval_agent_counts])
    for n_train in matrix.train_agent_counts:
        writer.writerow([n_train, *(matrix.cell(n_train, n_eval).label() for n_eval in matrix.eval_agent_counts)])
    return buf.getvalue()


LONG_FIELDS = ("train_count", "eval_count", "train_seed", "eval_seed", "mean")


def matrix_long_csv(matrix: EvalMatrix, train_seeds=(), eval_seeds=()) -> str:
    """One row per run; failed cells keep their rows with ``FAIL`` as the value."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(LONG_FIELDS)
    for n_train in matrix.train_agent_counts:
        for n_eval in matrix.eval_agent_counts:
            cell = matrix.cell(n_train, n_eval)
            if cell.failed:
                for ts in train_seeds:
                    for es in eval_seeds:
                        writer.writerow([n_train, n_eval, ts, es, FAIL])
                continue
            for run in cell.runs:
                writer.writerow([n_train, n_eval, run.train_seed, run.eval_seed, repr(float(run.mean))])
    return buf.getvalue()


def export_matrix(matrix: EvalMatrix, out_dir, train_seeds=(), eval_seeds=()) -> dict[str, Path]:
    out = Path(out_dir)
    paths = {"matrix": out / "matrix.csv", "matrix_long": out / "matrix_long.csv"}
    atomic_write(paths["matrix"], matrix_csv(matrix).encode("utf-8"))
    atomic_write(paths["matrix_long"], matrix_long_csv(matrix, train_seeds, eval_seeds).encode("utf-8"))
    return paths


def write_resolved(config: RunConfig, out_dir) -> Path:
    path = Path(out_dir) / "plan.resolved"
    atomic_write(path, render(config).encode("utf-8"))
    return path
