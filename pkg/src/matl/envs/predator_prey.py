"""Gridworld predator-prey.

Predators are the learning agents. A prey is captured when at least two
predators stand on its cell after a step; a predator alone on a live prey's
cell pays ``lone_penalty``. Prey run a scripted escape rule: with
probability ``prey_flee_prob`` step to the reachable cell farthest (Manhattan)
from the nearest predator, otherwise take a uniformly random legal move.
Captured prey do not respawn.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ActionError, EnvConfig, rng_for, validate
from .types import StepResult

UP, DOWN, LEFT, RIGHT, STAY = range(5)
ACTION_NAMES = ("up", "down", "left", "right", "stay")
N_ACTIONS = 5
MOVES = np.array([[-1, 0], [1, 0], [0, -1], [0, 1], [0, 0]], dtype=np.int64)
# prey consider staying first so ties keep them in place
PREY_MOVES = MOVES[[STAY, UP, DOWN, LEFT, RIGHT]]

N_CHANNELS = 3  # other predators, live prey, wall


@dataclass
class PredatorPreyState:
    config: EnvConfig
    predators: np.ndarray  # [n, 2] (row, col)
    prey: np.ndarray  # [m, 2]
    prey_alive: np.ndarray  # [m] bool
    step_index: int
    rng: np.random.Generator


def obs_dim(config: EnvConfig) -> int:
    side = 2 * config.vision + 1
    return N_CHANNELS * side * side + 2


def reset(config: EnvConfig) -> tuple[PredatorPreyState, np.ndarray]:
    validate(config)
    rng = rng_for(config.seed)
    n, m, d = config.n_agents, config.prey_count, config.grid_dim
    cells = rng.choice(d * d, size=n + m, replace=False)
    coords = np.stack([cells // d, cells % d], axis=1).astype(np.int64)
    state = PredatorPreyState(
        config=config,
        predators=coords[:n].copy(),
        prey=coords[n:].copy(),
        prey_alive=np.ones(m, dtype=bool),
        step_index=0,
        rng=rng,
    )
    return state, observe(state)


def observe(state: PredatorPreyState) -> np.ndarray:
    cfg = state.config
    v, d = cfg.vision, cfg.grid_dim
    side = 2 * v + 1
    padded = d + 2 * v
    pred_grid = np.zeros((padded, padded))
    prey_grid = np.zeros((padded, padded))
    wall_grid = np.ones((padded, padded))
    wall_grid[v:v + d, v:v + d] = 0.0
    np.add.at(pred_grid, (state.predators[:, 0] + v, state.predators[:, 1] + v), 1.0)
    live = state.prey[state.prey_alive]
    np.add.at(prey_grid, (live[:, 0] + v, live[:, 1] + v), 1.0)

    n = len(state.predators)
    out = np.zeros((n, obs_dim(cfg)))
    scale = 1.0 / (d - 1)
    for i, (r, c) in enumerate(state.predators):
        window = np.stack([
            pred_grid[r:r + side, c:c + side].copy(),
            prey_grid[r:r + side, c:c + side],
            wall_grid[r:r + side, c:c + side],
        ])
        window[0, v, v] -= 1.0  # the agent itself
        out[i, :-2] = window.reshape(-1)
        out[i, -2:] = (r * scale, c * scale)
    return out


def _prey_step(state: PredatorPreyState, hunters: np.ndarray) -> None:
    d = state.config.grid_dim
    rng = state.rng
    for j in np.flatnonzero(state.prey_alive):
        cands = state.prey[j] + PREY_MOVES
        legal = cands[((cands >= 0) & (cands < d)).all(axis=1)]
        if rng.random() < state.config.prey_flee_prob:
            dist = np.abs(legal[:, None, :] - hunters[None, :, :]).sum(axis=2).min(axis=1)
            state.prey[j] = legal[int(np.argmax(dist))]
        else:
            state.prey[j] = legal[int(rng.integers(len(legal)))]


def step(state: PredatorPreyState, actions) -> StepResult:
    cfg = state.config
    actions = np.asarray(actions)
    n = len(state.predators)
    if actions.shape != (n,) or not np.issubdtype(actions.dtype, np.integer):
        raise ActionError(f"expected {n} integer actions, got {actions!r}")
    if actions.min() < 0 or actions.max() >= N_ACTIONS:
        raise ActionError(f"actions must lie in 0..{N_ACTIONS - 1}, got {actions.tolist()}")

    snapshot = state.predators.copy()
    moved = snapshot + MOVES[actions]
    inside = ((moved >= 0) & (moved < cfg.grid_dim)).all(axis=1)
    state.predators = np.where(inside[:, None], moved, snapshot)
    _prey_step(state, snapshot)

    rewards = np.full(n, cfg.step_penalty)
    captures = capturers = lone = 0
    for j in np.flatnonzero(state.prey_alive):
        here = np.flatnonzero((state.predators == state.prey[j]).all(axis=1))
        if len(here) >= 2:
            state.prey_alive[j] = False
            rewards[here] += cfg.capture_reward
            captures += 1
            capturers += len(here)
        elif len(here) == 1:
            rewards[here] += cfg.lone_penalty
            lone += 1

    state.step_index += 1
    all_caught = not state.prey_alive.any()
    done = all_caught or state.step_index >= cfg.episode_length
    info = {
        "captures": captures,
        "capturers": capturers,
        "lone_attempts": lone,
        "collisions": 0,
        "active": np.ones(n, dtype=bool),
        "agent_done": np.full(n, done),
    }
    if done:
        info["success"] = all_caught
    return StepResult(observe(state), rewards, done, info)
