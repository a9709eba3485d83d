"""Traffic junction: cars follow fixed routes through crossing roads.

Roads run across the whole grid; ``tj_roads`` roads per axis cross at
``tj_roads ** 2`` junctions. Two-way roads carry one lane per direction
(right-hand traffic). A route enters at a lane's first cell and either goes
straight or turns once onto a crossing lane at the shared cell. Agent slots
are cars: a slot is empty until a car spawns into it and empties again when
the car leaves the grid.

Actions: 0 = gas (advance one cell along the route), 1 = brake (stay).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .config import ActionError, EnvConfig, rng_for, validate
from .types import StepResult

GAS, BRAKE = 0, 1
ACTION_NAMES = ("gas", "brake")
N_ACTIONS = 2


def road_lines(dim: int, roads: int, two_way: bool) -> list[int]:
    """First row (or column) index of each road."""
    width = 2 if two_way else 1
    if roads == 1:
        return [dim // 2 - (width - 1)]
    return [round(dim * (k + 1) / (roads + 1)) - 1 for k in range(roads)]


@lru_cache(maxsize=None)
def _lanes(dim: int, roads: int, two_way: bool) -> tuple[tuple[tuple[int, int], ...], ...]:
    lanes = []
    for a in road_lines(dim, roads, two_way):
        east_row = a + 1 if two_way else a
        lanes.append(tuple((east_row, c) for c in range(dim)))
        if two_way:
            lanes.append(tuple((a, c) for c in reversed(range(dim))))
    horizontal = len(lanes)
    for b in road_lines(dim, roads, two_way):
        lanes.append(tuple((r, b) for r in range(dim)))
        if two_way:
            lanes.append(tuple((r, b + 1) for r in reversed(range(dim))))
    return tuple(lanes[:horizontal]), tuple(lanes[horizontal:])


@lru_cache(maxsize=None)
def build_routes(dim: int, roads: int, two_way: bool) -> tuple[tuple[tuple[int, int], ...], ...]:
    """All routes, grouped by entry lane in a fixed order."""
    horizontal, vertical = _lanes(dim, roads, two_way)
    routes = []
    for lane, crossing in [(h, vertical) for h in horizontal] + [(v, horizontal) for v in vertical]:
        routes.append(lane)
        for other in crossing:
            shared = set(lane) & set(other)
            (cell,) = shared
            head = lane[:lane.index(cell) + 1]
            tail = other[other.index(cell) + 1:]
            routes.append(head + tail)
    return tuple(routes)


@lru_cache(maxsize=None)
def _entry_groups(dim: int, roads: int, two_way: bool) -> tuple[tuple[int, ...], ...]:
    groups: dict[tuple[int, int], list[int]] = {}
    for idx, route in enumerate(build_routes(dim, roads, two_way)):
        groups.setdefault(route[0], []).append(idx)
    return tuple(tuple(g) for g in groups.values())


def routes_by_entry(config: EnvConfig) -> tuple[tuple[int, ...], ...]:
    """Route ids grouped by entry cell, in lane order."""
    return _entry_groups(config.grid_dim, config.tj_roads, config.tj_two_way)


def n_routes(config: EnvConfig) -> int:
    return len(build_routes(config.grid_dim, config.tj_roads, config.tj_two_way))


def obs_dim(config: EnvConfig) -> int:
    side = 2 * config.tj_vision + 1
    return 2 + n_routes(config) + side * side + 1


@dataclass
class TrafficJunctionState:
    config: EnvConfig
    route: np.ndarray  # [n] route id per slot (-1 when empty)
    position: np.ndarray  # [n] index along the route
    tau: np.ndarray  # [n] steps spent in the system
    active: np.ndarray  # [n] bool
    step_index: int
    add_rate: float
    collision_happened: bool
    rng: np.random.Generator

    def cells(self) -> np.ndarray:
        """[n, 2] grid cell of every slot; empty slots read (-1, -1)."""
        routes = build_routes(self.config.grid_dim, self.config.tj_roads, self.config.tj_two_way)
        out = np.full((len(self.active), 2), -1, dtype=np.int64)
        for i in np.flatnonzero(self.active):
            out[i] = routes[self.route[i]][self.position[i]]
        return out


def reset(config: EnvConfig) -> tuple[TrafficJunctionState, np.ndarray]:
    validate(config)
    n = config.n_agents
    state = TrafficJunctionState(
        config=config,
        route=np.full(n, -1, dtype=np.int64),
        position=np.zeros(n, dtype=np.int64),
        tau=np.zeros(n, dtype=np.int64),
        active=np.zeros(n, dtype=bool),
        step_index=0,
        add_rate=config.add_rate,
        collision_happened=False,
        rng=rng_for(config.seed),
    )
    return state, observe(state)


def observe(state: TrafficJunctionState) -> np.ndarray:
    cfg = state.config
    d, v = cfg.grid_dim, cfg.tj_vision
    side = 2 * v + 1
    r_count = n_routes(cfg)
    cells = state.cells()
    occupancy = np.zeros((d + 2 * v, d + 2 * v))
    live = cells[state.active]
    np.add.at(occupancy, (live[:, 0] + v, live[:, 1] + v), 1.0)

    out = np.zeros((len(state.active), obs_dim(cfg)))
    scale = 1.0 / (d - 1)
    for i in np.flatnonzero(state.active):
        r, c = cells[i]
        window = occupancy[r:r + side, c:c + side].copy()
        window[v, v] -= 1.0
        row = out[i]
        row[0:2] = (r * scale, c * scale)
        row[2 + state.route[i]] = 1.0
        row[2 + r_count:2 + r_count + side * side] = window.reshape(-1)
        row[-1] = 1.0
    return out


def _spawn(state: TrafficJunctionState) -> int:
    cfg = state.config
    routes = build_routes(cfg.grid_dim, cfg.tj_roads, cfg.tj_two_way)
    spawned = 0
    occupied = {tuple(c) for c in state.cells()[state.active]}
    for group in routes_by_entry(cfg):
        draw = state.rng.random()
        pick = int(state.rng.integers(len(group)))
        entry = routes[group[0]][0]
        if draw >= state.add_rate or entry in occupied:
            continue
        free = np.flatnonzero(~state.active)
        if len(free) == 0:
            continue
        slot = free[0]
        state.route[slot] = group[pick]
        state.position[slot] = 0
        state.tau[slot] = 0
        state.active[slot] = True
        occupied.add(entry)
        spawned += 1
    return spawned


def step(state: TrafficJunctionState, actions) -> StepResult:
    cfg = state.config
    routes = build_routes(cfg.grid_dim, cfg.tj_roads, cfg.tj_two_way)
    actions = np.asarray(actions)
    n = len(state.active)
    if actions.shape != (n,) or not np.issubdtype(actions.dtype, np.integer):
        raise ActionError(f"expected {n} integer actions, got {actions!r}")
    if actions.min() < 0 or actions.max() >= N_ACTIONS:
        raise ActionError(f"actions must lie in 0..{N_ACTIONS - 1}, got {actions.tolist()}")

    acting = state.active.copy()
    rewards = np.zeros(n)
    exited = np.zeros(n, dtype=bool)
    for i in np.flatnonzero(acting):
        state.tau[i] += 1
        rewards[i] += cfg.time_penalty * state.tau[i]
        if actions[i] == GAS:
            state.position[i] += 1
            if state.position[i] >= len(routes[state.route[i]]):
                state.active[i] = False
                state.route[i] = -1
                state.position[i] = 0
                exited[i] = True

    collisions = 0
    cells = state.cells()
    live = np.flatnonzero(state.active)
    if len(live) > 1:
        _, inverse, counts = np.unique(cells[live], axis=0, return_inverse=True, return_counts=True)
        crowded = live[counts[inverse.reshape(-1)] > 1]
        if len(crowded):
            rewards[crowded] += cfg.collision_reward
            collisions = int((counts > 1).sum())
            state.collision_happened = True

    spawned = _spawn(state)
    state.step_index += 1
    done = state.step_index >= cfg.episode_length
    info = {
        "captures": 0,
        "collisions": collisions,
        "spawned": spawned,
        "active": acting,
        "agent_done": exited | (acting & done),
    }
    if done:
        info["success"] = not state.collision_happened
    return StepResult(observe(state), rewards, done, info)
