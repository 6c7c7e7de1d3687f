"""Plain-text experiment configuration.

An INI-style file with one section per config object; keys are the field
names of the matching dataclass and values are Python literals::

    [env]
    n_agents = 7
    comm_range = 3.0
    destination = (0, 10)

    [train]
    gamma = 0.8
    lam = 0.95

Missing sections or keys keep their defaults.
"""

from __future__ import annotations

import ast
import configparser
from dataclasses import dataclass, field, fields
from pathlib import Path

from .comm import TriggerConfig
from .env import EnvConfig
from .losses import LossConfig
from .mappo import TrainConfig
from .nets import NetConfig

SECTIONS = {
    "env": EnvConfig,
    "net": NetConfig,
    "train": TrainConfig,
    "loss": LossConfig,
    "trigger": TriggerConfig,
}


class ConfigError(ValueError):
    pass


@dataclass
class Configs:
    env: EnvConfig = field(default_factory=EnvConfig)
    net: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    trigger: TriggerConfig = field(default_factory=TriggerConfig)
    experiment: dict = field(default_factory=dict)

    def __post_init__(self):
        # the network sizes follow the environment
        if self.net.n_agents != self.env.n_agents or self.net.accel_max != self.env.accel_max:
            self.net = NetConfig(
                **{**_asdict(self.net), "n_agents": self.env.n_agents, "accel_max": self.env.accel_max}
            )


def _asdict(obj) -> dict:
    return {f.name: getattr(obj, f.name) for f in fields(obj)}


def _literal(raw: str):
    try:
        return ast.literal_eval(raw)
    except (ValueError, SyntaxError):
        return raw.strip()


def parse_config_text(text: str) -> Configs:
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    built = {}
    for name in parser.sections():
        values = {k: _literal(v) for k, v in parser.items(name)}
        if name == "experiment":
            built[name] = values
            continue
        if name not in SECTIONS:
            raise ConfigError(f"unknown section [{name}]")
        cls = SECTIONS[name]
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown keys in [{name}]: {sorted(unknown)}")
        try:
            built[name] = cls(**values)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{name}]: {exc}") from exc
    return Configs(**built)


def load_config(path: str | Path | None) -> Configs:
    if path is None:
        return Configs()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text())


def dump_config(cfgs: Configs) -> str:
    lines = []
    for name in SECTIONS:
        lines.append(f"[{name}]")
        for k, v in _asdict(getattr(cfgs, name)).items():
            lines.append(f"{k} = {v!r}")
        lines.append("")
    if cfgs.experiment:
        lines.append("[experiment]")
        lines += [f"{k} = {v!r}" for k, v in cfgs.experiment.items()]
        lines.append("")
    return "\n".join(lines)
