"""Experiment configuration: JSON documents, presets, and flag overrides.

A config file looks like::

    {
      "preset": "desk-scale",
      "env": {"kind": "gridworld", "width": 10, "height": 10, "start": [0, 0],
              "goal": [9, 9], "penalties": [[0, 4], [1, 4]],
              "rewards": {"step": -0.05, "goal": 1.0, "penalty": -1.0},
              "max_steps": 1000},
      "agent": {"variant": "ctdl-discrete", "tau": 0.0003},
      "experiment": {"population": 6, "episodes": 400, "checkpoint_every": 200,
                     "seed": 0}
    }

Values missing from the file come from the preset for the environment kind;
``agent`` and ``experiment`` keys are validated against the dataclass fields.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

from . import env as envs
from .agent import AgentConfig
from .errors import ConfigurationError

PRESETS = ("desk-scale", "paper-scale")
GROUPS = ("none", "explanation", "shuffled")

DEFAULT_GRID = {
    "kind": "gridworld",
    "width": 10,
    "height": 10,
    "start": [0, 0],
    "goal": [9, 9],
    "penalties": [[x, 4] for x in range(8)] + [[9, 7], [8, 7]],
    "rewards": {"step": -0.05, "goal": 1.0, "penalty": -1.0},
    "max_steps": 1000,
}

AGENT_DEFAULTS = {
    "gridworld": {
        "variant": "ctdl-discrete",
        "tau": 0.0003,
    },
    "mountain_car": {
        "variant": "ctdl-continuous",
        "hidden": [32, 32],
        "tau": 0.005,
        "init_log_std": 1.0,
    },
}

EXPERIMENT_DEFAULTS = {
    ("gridworld", "paper-scale"): {"population": 12, "episodes": 1000, "checkpoint_every": 200,
                                   "test_episodes": 1, "selection": "test_trial"},
    ("gridworld", "desk-scale"): {"population": 6, "episodes": 400, "checkpoint_every": 200,
                                  "test_episodes": 1, "selection": "test_trial"},
    ("mountain_car", "paper-scale"): {"population": 50, "episodes": 1000, "checkpoint_every": None,
                                      "test_episodes": 20, "test_stochastic": True, "selection": "final_episode"},
    ("mountain_car", "desk-scale"): {"population": 6, "episodes": 300, "checkpoint_every": None,
                                     "test_episodes": 20, "test_stochastic": True, "selection": "final_episode"},
}

DESK_AGENT = {"gridworld": {"hidden": [64, 64]}, "mountain_car": {}}


@dataclass
class ExperimentConfig:
    env: object
    agent: AgentConfig
    population: int = 12
    episodes: int = 1000
    checkpoint_every: Optional[int] = 200
    threshold: float = 0.5
    group: str = "none"
    explanation_files: list = field(default_factory=list)
    test_episodes: int = 1
    test_stochastic: bool = False
    selection: str = "test_trial"
    seed: int = 0
    smoothing_window: int = 5
    n_jobs: int = 1
    preset: str = "paper-scale"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.population < 1 or self.episodes < 1 or self.test_episodes < 1:
            raise ConfigurationError("population, episodes and test_episodes must be positive")
        if self.checkpoint_every is not None:
            if self.checkpoint_every < 1 or self.episodes % self.checkpoint_every:
                raise ConfigurationError(
                    f"checkpoint_every={self.checkpoint_every} must divide episodes={self.episodes}")
        if not 0 < self.threshold < 1:
            raise ConfigurationError(f"threshold must lie in (0, 1), got {self.threshold}")
        if self.group not in GROUPS:
            raise ConfigurationError(f"unknown group {self.group!r}")
        if self.group != "none" and not self.explanation_files:
            raise ConfigurationError(f"group {self.group!r} needs explanation_files")
        if self.selection not in ("test_trial", "final_episode"):
            raise ConfigurationError(f"unknown selection rule {self.selection!r}")
        if self.preset not in PRESETS:
            raise ConfigurationError(f"unknown preset {self.preset!r}")
        if self.seed < 0:
            raise ConfigurationError("seed must be non-negative")

    @property
    def checkpoints(self) -> list[int]:
        if self.checkpoint_every is None:
            return [self.episodes]
        return list(range(self.checkpoint_every, self.episodes + 1, self.checkpoint_every))

    def to_dict(self) -> dict:
        exp = {k: v for k, v in asdict(self).items() if k not in ("env", "agent", "preset")}
        exp["explanation_files"] = [str(p) for p in self.explanation_files]
        return {"preset": self.preset, "env": self.env.to_dict(), "agent": self.agent.to_dict(), "experiment": exp}

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def replace(self, **changes) -> "ExperimentConfig":
        d = copy.deepcopy(self.__dict__)
        d.update(changes)
        return ExperimentConfig(**d)


def _merge(base: dict, top: dict) -> dict:
    out = dict(base)
    out.update(top)
    return out


def config_from_dict(d: dict) -> ExperimentConfig:
    unknown = set(d) - {"preset", "env", "agent", "experiment"}
    if unknown:
        raise ConfigurationError(f"unknown top-level config keys {sorted(unknown)}")
    preset = d.get("preset", "desk-scale")
    if preset not in PRESETS:
        raise ConfigurationError(f"unknown preset {preset!r}")
    env_d = d.get("env", DEFAULT_GRID)
    kind = env_d.get("kind", "gridworld")
    spec = envs.spec_from_dict(env_d)
    agent_d = _merge(AGENT_DEFAULTS[kind], DESK_AGENT[kind] if preset == "desk-scale" else {})
    agent_d = _merge(agent_d, d.get("agent", {}))
    agent = AgentConfig.from_dict(agent_d)
    exp_d = _merge(EXPERIMENT_DEFAULTS[(kind, preset)], d.get("experiment", {}))
    known = set(ExperimentConfig.__dataclass_fields__) - {"env", "agent", "preset"}
    bad = set(exp_d) - known
    if bad:
        raise ConfigurationError(f"unknown experiment keys {sorted(bad)}")
    return ExperimentConfig(env=spec, agent=agent, preset=preset, **exp_d)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"{path}: invalid JSON at line {e.lineno} col {e.colno}: {e.msg}") from None
    return config_from_dict(d)


def apply_overrides(cfg: ExperimentConfig, **overrides) -> ExperimentConfig:
    """Field-by-field overrides; ``None`` values are ignored."""
    d = cfg.to_dict()
    for key, value in overrides.items():
        if value is None:
            continue
        if key in ExperimentConfig.__dataclass_fields__ and key not in ("env", "agent", "preset"):
            d["experiment"][key] = value
        elif key in AgentConfig.__dataclass_fields__:
            d["agent"][key] = value
        elif key == "preset":
            d["preset"] = value
        else:
            raise ConfigurationError(f"unknown override {key!r}")
    return config_from_dict(d)


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2))
