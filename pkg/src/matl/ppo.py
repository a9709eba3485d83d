"""PPO with a clipped surrogate over a shared actor and centralized critic.

Each agent's (observation, action, advantage) is an independent sample for
the shared actor; the critic regresses its per-agent values onto per-agent
returns. Both networks are updated by one Adam step on the combined loss.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import numerics as nx
from .envs import EnvConfig, derive_seed, env_reset, env_step, n_actions, obs_dim
from .networks import ActorParams, CriticParams, actor_logits, critic_forward
from .numerics import Adam, Tensor

logger = logging.getLogger(__name__)


class TrainingDivergence(RuntimeError):
    """The PPO loss became non-finite."""


@dataclass(frozen=True)
class PpoConfig:
    clip_epsilon: float = 0.2
    discount_gamma: float = 0.99
    gae_lambda: float = 0.95
    epochs_per_batch: int = 4
    minibatch_size: int = 64  # timesteps; every agent at a timestep shares the critic pass
    learning_rate: float = 3e-4
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    episodes_per_batch: int = 8
    total_epochs: int = 100
    normalize_advantages: bool = True

    def __post_init__(self):
        if not 0.0 < self.clip_epsilon < 1.0 and not math.isinf(self.clip_epsilon):
            raise ValueError(f"clip_epsilon must lie in (0, 1), got {self.clip_epsilon}")
        for name in ("discount_gamma", "gae_lambda"):
            value = getattr(self, name)
            if not 0.0 < value <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1], got {value}")
        if self.epochs_per_batch < 1 or self.minibatch_size < 1 or self.episodes_per_batch < 1:
            raise ValueError("epochs_per_batch, minibatch_size and episodes_per_batch must be positive")
        if self.total_epochs < 0:
            raise ValueError("total_epochs must be non-negative")


@dataclass
class RolloutBuffer:
    """Timestep-major arrays, all indexed [timestep, agent]."""

    observations: np.ndarray  # [T, n, d]
    actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    active: np.ndarray
    episode_returns: list[float] = field(default_factory=list)
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    def __len__(self) -> int:
        return int(self.actions.size)

    @property
    def n_steps(self) -> int:
        return self.actions.shape[0]


@dataclass
class TrainReport:
    epoch: int
    mean_return: float
    policy_loss: float
    value_loss: float
    entropy: float
    clip_fraction: float

    CSV_FIELDS = ("epoch", "mean_return", "policy_loss", "value_loss", "entropy", "clip_fraction")

    def csv_row(self) -> list[str]:
        return [str(self.epoch)] + [repr(float(getattr(self, f))) for f in self.CSV_FIELDS[1:]]


def _policy_step(actor: ActorParams, obs: np.ndarray) -> np.ndarray:
    with nx.no_grad():
        return nx.log_softmax_rows(actor_logits(actor, Tensor(obs))).data


def sample_actions(log_probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF categorical sampling, one uniform draw per row."""
    cdf = np.cumsum(np.exp(log_probs), axis=-1)
    u = rng.random(log_probs.shape[0])[:, None] * cdf[:, -1:]
    return np.minimum((cdf <= u).sum(axis=-1), log_probs.shape[-1] - 1)


def collect_rollouts(actor: ActorParams, critic: CriticParams, env_config: EnvConfig,
                     episodes_per_batch: int, rng: np.random.Generator) -> RolloutBuffer:
    if actor.obs_dim != obs_dim(env_config) or critic.obs_dim != obs_dim(env_config):
        raise nx.ShapeError(
            f"networks expect observations of width {actor.obs_dim}/{critic.obs_dim}, "
            f"environment produces {obs_dim(env_config)}")
    cols: dict[str, list] = {k: [] for k in ("obs", "act", "logp", "rew", "val", "done", "active")}
    returns = []
    for _ in range(episodes_per_batch):
        state, obs = env_reset(env_config.replace(seed=int(rng.integers(2 ** 63))))
        total, done = 0.0, False
        while not done:
            logp_all = _policy_step(actor, obs)
            actions = sample_actions(logp_all, rng)
            with nx.no_grad():
                values = critic_forward(critic, Tensor(obs)).values.data
            result = env_step(state, actions)
            cols["obs"].append(obs)
            cols["act"].append(actions)
            cols["logp"].append(logp_all[np.arange(len(actions)), actions])
            cols["rew"].append(result.rewards)
            cols["val"].append(values)
            cols["done"].append(result.info["agent_done"] | result.done)
            cols["active"].append(result.info["active"])
            total += float(result.rewards.sum())
            obs, done = result.observations, result.done
        returns.append(total)
    return RolloutBuffer(
        observations=np.stack(cols["obs"]),
        actions=np.stack(cols["act"]).astype(np.int64),
        log_probs=np.stack(cols["logp"]),
        rewards=np.stack(cols["rew"]),
        values=np.stack(cols["val"]),
        dones=np.stack(cols["done"]),
        active=np.stack(cols["active"]),
        episode_returns=returns,
    )


def gae(rewards: np.ndarray, values: np.ndarray, dones: np.ndarray,
        gamma: float, lam: float) -> np.ndarray:
    """Generalized advantage estimates along axis 0.

    ``dones[t]`` cuts both the bootstrap from ``values[t + 1]`` and the
    recursion; the step after the last one is treated as terminal.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    nonterminal = 1.0 - np.asarray(dones, dtype=np.float64)
    adv = np.zeros_like(rewards)
    running = np.zeros_like(rewards[0])
    for t in reversed(range(len(rewards))):
        next_value = values[t + 1] if t + 1 < len(rewards) else np.zeros_like(values[t])
        delta = rewards[t] + gamma * next_value * nonterminal[t] - values[t]
        running = delta + gamma * lam * nonterminal[t] * running
        adv[t] = running
    return adv


def compute_gae(buffer: RolloutBuffer, gamma: float, lam: float) -> RolloutBuffer:
    buffer.advantages = gae(buffer.rewards, buffer.values, buffer.dones, gamma, lam)
    buffer.returns = buffer.advantages + buffer.values
    return buffer


def normalize(adv: np.ndarray, mask: np.ndarray) -> np.ndarray:
    picked = adv[mask]
    if picked.size == 0:
        return adv
    return (adv - picked.mean()) / (picked.std() + 1e-8)


def ppo_loss(actor: ActorParams, critic: CriticParams, observations, actions, old_log_probs,
             advantages, returns, mask, config: PpoConfig) -> tuple[Tensor, dict]:
    """Clipped-surrogate PPO loss on a batch shaped [B, n, ...].

    Returns the scalar loss tensor and detached statistics.
    """
    obs = Tensor(observations)
    mask = np.asarray(mask, dtype=np.float64)
    count = mask.sum()
    if count == 0:
        raise nx.UsageError("minibatch contains no active agent samples")
    weights = mask / count

    log_probs = nx.log_softmax_rows(actor_logits(actor, obs))
    new_logp = nx.take_last(log_probs, actions)
    ratio = nx.exp(nx.sub(new_logp, Tensor(old_log_probs)))
    adv = Tensor(advantages)
    eps = config.clip_epsilon
    surrogate = nx.minimum(nx.mul(ratio, adv), nx.mul(nx.clip(ratio, 1.0 - eps, 1.0 + eps), adv))
    policy_loss = nx.scale(nx.sum(nx.mul(surrogate, weights)), -1.0)

    values = critic_forward(critic, obs).values
    value_loss = nx.sum(nx.mul(nx.square(nx.sub(values, Tensor(returns))), weights))

    entropy_rows = nx.scale(nx.sum(nx.mul(nx.exp(log_probs), log_probs), axis=-1), -1.0)
    entropy = nx.sum(nx.mul(entropy_rows, weights))

    loss = nx.add(nx.add(policy_loss, nx.scale(value_loss, config.value_coef)),
                  nx.scale(entropy, -config.entropy_coef))
    clipped = (np.abs(ratio.data - 1.0) > eps) & (mask > 0)
    stats = {
        "loss": loss.item(),
        "policy_loss": policy_loss.item(),
        "value_loss": value_loss.item(),
        "entropy": entropy.item(),
        "clip_fraction": float(clipped.sum() / count),
    }
    return loss, stats


def ppo_update(actor: ActorParams, critic: CriticParams, buffer: RolloutBuffer, config: PpoConfig,
               optimizer: Adam, rng: np.random.Generator, epoch: int = 0) -> TrainReport:
    if buffer.advantages is None:
        raise nx.UsageError("compute_gae must run before ppo_update")
    mask = buffer.active
    advantages = normalize(buffer.advantages, mask) if config.normalize_advantages else buffer.advantages
    sums = {"policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0, "clip_fraction": 0.0}
    updates = 0
    for _ in range(config.epochs_per_batch):
        order = rng.permutation(buffer.n_steps)
        for start in range(0, len(order), config.minibatch_size):
            idx = order[start:start + config.minibatch_size]
            if not mask[idx].any():
                continue
            loss, stats = ppo_loss(actor, critic, buffer.observations[idx], buffer.actions[idx],
                                   buffer.log_probs[idx], advantages[idx], buffer.returns[idx],
                                   mask[idx], config)
            if not math.isfinite(stats["loss"]):
                raise TrainingDivergence(f"non-finite PPO loss at epoch {epoch}: {stats}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            for k in sums:
                sums[k] += stats[k]
            updates += 1
    updates = max(updates, 1)
    return TrainReport(
        epoch=epoch,
        mean_return=float(np.mean(buffer.episode_returns)) if buffer.episode_returns else 0.0,
        policy_loss=sums["policy_loss"] / updates,
        value_loss=sums["value_loss"] / updates,
        entropy=sums["entropy"] / updates,
        clip_fraction=sums["clip_fraction"] / updates,
    )


def add_rate_for_epoch(env_config: EnvConfig, epoch: int, total_epochs: int) -> float:
    """Linear add-rate schedule from ``add_rate_max`` down to ``add_rate_min``."""
    if total_epochs <= 1:
        return env_config.add_rate_max
    frac = min(epoch / (total_epochs - 1), 1.0)
    return env_config.add_rate_max + frac * (env_config.add_rate_min - env_config.add_rate_max)


@dataclass
class TrainResult:
    actor: ActorParams
    critic: CriticParams
    reports: list[TrainReport]


def init_networks(env_config: EnvConfig, seed: int, hidden=(64, 64), embed_dim: int = 64
                  ) -> tuple[ActorParams, CriticParams]:
    d = obs_dim(env_config)
    actor = ActorParams.init(d, n_actions(env_config), hidden=hidden, seed=derive_seed(seed, 1))
    critic = CriticParams.init(d, embed_dim=embed_dim, head_hidden=(embed_dim,), seed=derive_seed(seed, 2))
    return actor, critic


def train(env_config: EnvConfig, config: PpoConfig, seed: int, hidden=(64, 64), embed_dim: int = 64,
          on_report: Callable[[TrainReport], None] | None = None) -> TrainResult:
    """Full PPO run: ``config.total_epochs`` rounds of collect + update."""
    actor, critic = init_networks(env_config, seed, hidden, embed_dim)
    optimizer = Adam(actor.parameters() + critic.parameters(), learning_rate=config.learning_rate)
    rng = np.random.default_rng(derive_seed(seed, 3))
    reports = []
    for epoch in range(config.total_epochs):
        cfg = env_config
        if env_config.env_kind == "traffic_junction":
            cfg = env_config.replace(add_rate=add_rate_for_epoch(env_config, epoch, config.total_epochs))
        buffer = collect_rollouts(actor, critic, cfg, config.episodes_per_batch, rng)
        compute_gae(buffer, config.discount_gamma, config.gae_lambda)
        report = ppo_update(actor, critic, buffer, config, optimizer, rng, epoch)
        logger.debug("epoch %d %s", epoch, asdict(report))
        reports.append(report)
        if on_report is not None:
            on_report(report)
    return TrainResult(actor, critic, reports)


@dataclass
class EpisodeRecord:
    episode: int
    seed: int
    total_reward: float
    success: bool
    steps: int


@dataclass
class EvalResult:
    mean_total_reward: float
    success_rate: float
    episodes: list[EpisodeRecord]


def _run_episodes(choose: Callable[[np.ndarray, int], np.ndarray], env_config: EnvConfig,
                  n_episodes: int, seed: int) -> EvalResult:
    records = []
    for i in range(n_episodes):
        env_seed = derive_seed(seed, i)
        state, obs = env_reset(env_config.replace(seed=env_seed))
        total, done, steps = 0.0, False, 0
        while not done:
            result = env_step(state, choose(obs, i))
            total += float(result.rewards.sum())
            obs, done = result.observations, result.done
            steps += 1
        records.append(EpisodeRecord(i, env_seed, total, bool(result.info.get("success", False)), steps))
    return EvalResult(
        mean_total_reward=float(np.mean([r.total_reward for r in records])) if records else 0.0,
        success_rate=float(np.mean([r.success for r in records])) if records else 0.0,
        episodes=records,
    )


def evaluate_greedy(actor: ActorParams, env_config: EnvConfig, n_episodes: int = 100,
                    seed: int = 0) -> EvalResult:
    """Argmax actions (ties go to the lowest index); episode i uses seed derive_seed(seed, i)."""
    return _run_episodes(lambda obs, _: np.argmax(_policy_step(actor, obs), axis=-1),
                         env_config, n_episodes, seed)


def evaluate_uniform_random(env_config: EnvConfig, n_episodes: int = 100, seed: int = 0) -> EvalResult:
    """Baseline with uniformly random actions on the same episode seeds as ``evaluate_greedy``."""
    k = n_actions(env_config)
    rngs: dict[int, np.random.Generator] = {}

    def choose(obs, episode):
        rng = rngs.setdefault(episode, np.random.default_rng(derive_seed(seed, episode, 1)))
        return rng.integers(k, size=len(obs))

    return _run_episodes(choose, env_config, n_episodes, seed)
