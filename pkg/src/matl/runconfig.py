"""Sectioned key=value run configuration with strict keys and exact echo-back.

A config file looks like::

    [env]
    env_kind = predator_prey
    grid_dim = 7

    [ppo]
    total_epochs = 200

    [plan]
    train_agent_counts = 2,3

    [run]
    seed = 0

Every key has a default. Unknown sections or keys are rejected. ``parse_text``
fills in defaults and ``render`` writes the fully resolved config back in a
fixed order, so the echo parses to the same ``RunConfig``.
"""

from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field, fields

from .envs import ConfigError, EnvConfig, predator_prey_preset, traffic_junction_hard
from .ppo import PpoConfig

SEED_ENV_VAR = "MATL_SEED"

PLAN_DEFAULTS = {
    "predator_prey": ((2, 5, 10, 20, 50, 80), (2, 5, 10, 20, 50, 80)),
    "traffic_junction": ((3, 5, 10, 15, 20), (3, 5, 10, 15, 20)),
}


@dataclass(frozen=True)
class PlanSection:
    train_agent_counts: tuple[int, ...] = ()  # empty -> per-env default
    eval_agent_counts: tuple[int, ...] = ()
    train_seeds: tuple[int, ...] = (0, 1, 2)
    eval_seeds: tuple[int, ...] = (0, 1, 2)
    episodes_per_eval: int = 100


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    hidden: tuple[int, ...] = (64, 64)
    embed_dim: int = 64
    out_dir: str = "runs"
    jobs: int = 1


@dataclass(frozen=True)
class RunConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    plan: PlanSection = field(default_factory=PlanSection)
    run: RunSection = field(default_factory=RunSection)


SECTIONS = {"env": EnvConfig, "ppo": PpoConfig, "plan": PlanSection, "run": RunSection}


def _parse_value(raw: str, default, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = raw.lower()
            if lowered in ("true", "yes", "1", "on"):
                return True
            if lowered in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(p) for p in raw.split(",") if p.strip())
    except ValueError:
        raise ConfigError(f"cannot parse {key} = {raw!r} as {type(default).__name__}") from None
    return raw


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def _env_base(kind: str) -> EnvConfig:
    if kind == "traffic_junction":
        return traffic_junction_hard(3)
    if kind == "predator_prey":
        return predator_prey_preset(2)
    raise ConfigError(f"unknown env_kind {kind!r}")


def parse_text(text: str, overrides: dict[str, dict[str, str]] | None = None) -> RunConfig:
    """Parse config text; ``overrides`` maps section -> key -> raw string (flags win)."""
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    raw: dict[str, dict[str, str]] = {name: {} for name in SECTIONS}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}]; expected one of {sorted(SECTIONS)}")
        raw[section].update(parser.items(section))
    for section, values in (overrides or {}).items():
        raw[section].update(values)

    for section, values in raw.items():
        known = {f.name for f in fields(SECTIONS[section])}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")

    kind = raw["env"].get("env_kind", "predator_prey").strip()
    bases = {"env": _env_base(kind), "ppo": PpoConfig(), "plan": PlanSection(), "run": RunSection()}
    built = {}
    for section, base in bases.items():
        changes = {key: _parse_value(value, getattr(base, key), f"{section}.{key}")
                   for key, value in raw[section].items()}
        try:
            built[section] = dataclasses.replace(base, **changes)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{section}]: {exc}") from None

    seed = os.environ.get(SEED_ENV_VAR)
    if seed is not None:
        built["run"] = dataclasses.replace(built["run"], seed=_parse_value(seed, 0, SEED_ENV_VAR))

    plan = built["plan"]
    tac_default, eac_default = PLAN_DEFAULTS[kind]
    built["plan"] = dataclasses.replace(
        plan,
        train_agent_counts=plan.train_agent_counts or tac_default,
        eval_agent_counts=plan.eval_agent_counts or eac_default,
    )
    return RunConfig(**built)


def load(path: str | os.PathLike | None, overrides: dict[str, dict[str, str]] | None = None) -> RunConfig:
    text = ""
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_text(text, overrides)


def render(config: RunConfig) -> str:
    """Every key of every section, in declaration order."""
    lines = []
    for section in SECTIONS:
        lines.append(f"[{section}]")
        obj = getattr(config, section)
        for f in fields(obj):
            lines.append(f"{f.name} = {_format_value(getattr(obj, f.name))}")
        lines.append("")
    return "\n".join(lines)


def env_metadata(env: EnvConfig) -> dict[str, str]:
    """Checkpoint metadata entries that rebuild ``env`` via ``env_from_metadata``."""
    return {f"env.{f.name}": _format_value(getattr(env, f.name)) for f in fields(env)}


def env_from_metadata(metadata: dict[str, str]) -> EnvConfig:
    base = EnvConfig()
    changes = {}
    for f in fields(base):
        key = f"env.{f.name}"
        if key in metadata:
            changes[f.name] = _parse_value(metadata[key], getattr(base, f.name), key)
    if "env_kind" not in changes:
        raise ConfigError("checkpoint metadata does not record an environment")
    return dataclasses.replace(base, **changes)
