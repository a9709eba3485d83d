from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

ENV_KINDS = ("predator_prey", "traffic_junction")


class ConfigError(ValueError):
    """An environment configuration is invalid or exceeds capacity."""


class ActionError(ValueError):
    """An action index is outside the environment's action set."""


@dataclass(frozen=True)
class EnvConfig:
    env_kind: str = "predator_prey"
    n_agents: int = 2
    grid_dim: int = 20
    episode_length: int = 40
    seed: int = 0

    # predator-prey
    n_prey: int = 0  # 0 -> same as n_agents
    vision: int = 2
    capture_reward: float = 10.0
    step_penalty: float = -0.05
    lone_penalty: float = -0.5
    prey_flee_prob: float = 0.1  # mostly random prey; see README "Prey behaviour"

    # traffic junction
    tj_roads: int = 2  # roads per axis
    tj_two_way: bool = True
    tj_vision: int = 1
    add_rate: float = 0.05
    add_rate_max: float = 0.05
    add_rate_min: float = 0.02
    collision_reward: float = -10.0
    time_penalty: float = -0.01

    @property
    def prey_count(self) -> int:
        return self.n_prey or self.n_agents

    def replace(self, **changes) -> "EnvConfig":
        return dataclasses.replace(self, **changes)


def predator_prey_preset(n_agents: int, **overrides) -> EnvConfig:
    """The 20x20 predator-prey setting used for the full transfer grid."""
    return EnvConfig(env_kind="predator_prey", n_agents=n_agents, grid_dim=20,
                     episode_length=40).replace(**overrides)


def traffic_junction_hard(n_agents: int, **overrides) -> EnvConfig:
    """'hard' junction: 18x18, two two-way roads per axis (four junctions)."""
    return EnvConfig(env_kind="traffic_junction", n_agents=n_agents, grid_dim=18,
                     episode_length=80, tj_roads=2, tj_two_way=True, tj_vision=1,
                     add_rate=0.05, add_rate_max=0.05, add_rate_min=0.02).replace(**overrides)


TJ_MAX_CARS = 20


def capacity(config: EnvConfig) -> int:
    if config.env_kind == "predator_prey":
        return config.grid_dim * config.grid_dim // 5
    if config.env_kind == "traffic_junction":
        return TJ_MAX_CARS
    raise ConfigError(f"unknown env_kind {config.env_kind!r}; expected one of {ENV_KINDS}")


def validate(config: EnvConfig) -> None:
    cap = capacity(config)
    if config.n_agents < 1:
        raise ConfigError("n_agents must be positive")
    if config.n_agents > cap:
        raise ConfigError(
            f"{config.n_agents} agents exceed the capacity {cap} of {config.env_kind} "
            f"with grid_dim={config.grid_dim}")
    if config.grid_dim < 3:
        raise ConfigError("grid_dim must be at least 3")
    if config.episode_length < 1:
        raise ConfigError("episode_length must be positive")
    if config.env_kind == "predator_prey":
        if config.n_agents + config.prey_count > config.grid_dim ** 2:
            raise ConfigError("predators and prey do not fit on the grid without overlap")
        if config.vision < 0:
            raise ConfigError("vision must be non-negative")
        if not 0.0 <= config.prey_flee_prob <= 1.0:
            raise ConfigError("prey_flee_prob must lie in [0, 1]")
    else:
        if config.tj_roads not in (1, 2):
            raise ConfigError("tj_roads must be 1 or 2")
        if not 0.0 <= config.add_rate <= 1.0:
            raise ConfigError("add_rate must lie in [0, 1]")


def rng_for(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed) & (2 ** 64 - 1)))


def derive_seed(*parts: int) -> int:
    """Stable 63-bit seed from a tuple of non-negative integers."""
    seq = np.random.SeedSequence([int(p) & (2 ** 64 - 1) for p in parts])
    return int(seq.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
