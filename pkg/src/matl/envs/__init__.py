"""Multi-agent gridworlds behind one reset/step/observe interface."""

from __future__ import annotations

import json
from typing import IO, Iterable

import numpy as np

from . import predator_prey, traffic_junction
from .config import (
    ENV_KINDS,
    ActionError,
    ConfigError,
    EnvConfig,
    capacity,
    derive_seed,
    predator_prey_preset,
    traffic_junction_hard,
    validate,
)
from .predator_prey import PredatorPreyState
from .traffic_junction import TrafficJunctionState
from .types import StepResult

EnvState = PredatorPreyState | TrafficJunctionState

_BACKENDS = {
    "predator_prey": predator_prey,
    "traffic_junction": traffic_junction,
}


def _backend(kind: str):
    try:
        return _BACKENDS[kind]
    except KeyError:
        raise ConfigError(f"unknown env_kind {kind!r}; expected one of {ENV_KINDS}") from None


def env_reset(config: EnvConfig) -> tuple[EnvState, np.ndarray]:
    return _backend(config.env_kind).reset(config)


def env_step(state: EnvState, actions) -> StepResult:
    return _backend(state.config.env_kind).step(state, actions)


def observe(state: EnvState) -> np.ndarray:
    return _backend(state.config.env_kind).observe(state)


def obs_dim(config: EnvConfig) -> int:
    return _backend(config.env_kind).obs_dim(config)


def n_actions(config: EnvConfig) -> int:
    return _backend(config.env_kind).N_ACTIONS


def positions(state: EnvState) -> dict:
    if isinstance(state, PredatorPreyState):
        return {
            "predators": state.predators.tolist(),
            "prey": [[int(r), int(c), bool(a)] for (r, c), a in zip(state.prey, state.prey_alive)],
        }
    return {"cars": state.cells().tolist(), "active": state.active.tolist()}


def trace_record(step_index: int, state: EnvState, actions, rewards) -> dict:
    return {
        "step": int(step_index),
        "positions": positions(state),
        "actions": np.asarray(actions).tolist(),
        "rewards": np.asarray(rewards).tolist(),
    }


def write_trace(records: Iterable[dict], fh: IO[str]) -> None:
    """Line-delimited JSON episode trace, one record per step."""
    for rec in records:
        fh.write(json.dumps(rec, sort_keys=True) + "\n")


__all__ = [
    "ENV_KINDS", "ActionError", "ConfigError", "EnvConfig", "EnvState", "StepResult",
    "PredatorPreyState", "TrafficJunctionState", "capacity", "derive_seed", "env_reset",
    "env_step", "n_actions", "obs_dim", "observe", "predator_prey_preset", "trace_record",
    "traffic_junction_hard", "validate", "write_trace",
]
