"""Experiment configuration: YAML file -> typed config bundle.

Every section is optional; omitted fields keep the defaults baked into the
dataclasses. See README for the documented schema.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields

import yaml

from .agent import AgentConfig, VARIANTS
from .controllers import IdmParams, PiParams
from .dynamics import RolloutConfig
from .env import RewardConfig
from .networks import ScenarioConfig
from .trpo import TrpoConfig


@dataclass
class RunConfig:
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    iterations: int = 200
    out_dir: str = "out"
    save_every: int = 50
    eval_episodes: int = 3
    workers: int = 1
    record_timings: bool = False

    def validate(self) -> None:
        if not self.seeds:
            raise ValueError("need at least one seed")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


@dataclass
class ExperimentConfig:
    agent: AgentConfig = field(default_factory=AgentConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def validate(self) -> None:
        self.agent.validate()
        self.run.validate()


_SCENARIO_DEFAULTS = {
    "ring": ScenarioConfig.ring,
    "figure-eight": ScenarioConfig.figure_eight,
    "merge": ScenarioConfig.merge,
}


def _fill(cls, data: dict, instance=None):
    obj = instance if instance is not None else cls()
    valid = {f.name for f in fields(cls)}
    for key, value in data.items():
        name = key.replace("-", "_")
        if name not in valid:
            raise ValueError(f"unknown {cls.__name__} field {key!r}")
        current = getattr(obj, name)
        if isinstance(current, tuple) and isinstance(value, (list, tuple)):
            value = tuple(value)
        setattr(obj, name, value)
    return obj


def experiment_from_dict(data: dict) -> ExperimentConfig:
    data = dict(data or {})
    scenario_data = dict(data.pop("scenario", {}) or {})
    kind = scenario_data.pop("kind", "ring")
    if kind not in _SCENARIO_DEFAULTS:
        raise ValueError(f"unknown scenario kind {kind!r}")
    scenario = _fill(ScenarioConfig, scenario_data, _SCENARIO_DEFAULTS[kind]())

    agent_data = dict(data.pop("agent", {}) or {})
    variant = agent_data.pop("variant", "proposed")
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    agent = _fill(AgentConfig, agent_data)
    agent.variant = variant
    agent.scenario = scenario
    agent.reward = _fill(RewardConfig, dict(data.pop("reward", {}) or {}))
    agent.idm = _fill(IdmParams, dict(data.pop("idm", {}) or {}))
    agent.pi = _fill(PiParams, dict(data.pop("pi", {}) or {}))
    agent.trpo = _fill(TrpoConfig, dict(data.pop("trpo", {}) or {}))
    agent.rollout = _fill(RolloutConfig, dict(data.pop("rollout", {}) or {}))

    run = _fill(RunConfig, dict(data.pop("run", {}) or {}))
    if data:
        raise ValueError(f"unknown top-level config sections: {sorted(data)}")
    cfg = ExperimentConfig(agent=agent, run=run)
    cfg.validate()
    return cfg


def load_experiment(path: str) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ValueError(f"config root must be a mapping, got {type(data).__name__}")
    return experiment_from_dict(data)
