"""Run configuration: a sectioned TOML file resolved against defaults.

Unknown sections or keys are rejected.  The resolved configuration is
written next to every command's outputs as ``config.resolved.json``.
"""
from __future__ import annotations

import dataclasses
import json
import sys
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .counterfactual import PolicyConfig
from .estimation import TrainingConfig
from .policies import POLICY_KINDS
from .simulator import ExperimentArm, WorldConfig


class ConfigError(ValueError):
    pass


def default_training() -> TrainingConfig:
    return TrainingConfig(max_len=4, optimizer="adam", learning_rate=0.01, lr_decay=0.97, epochs=80,
                          batch_size=512, beta_pooling=30.0)


def default_recmodel() -> TrainingConfig:
    return TrainingConfig(max_len=4, optimizer="adam", learning_rate=0.01, epochs=5,
                          batch_size=512, holdout="none")


@dataclasses.dataclass
class PolicySection:
    kinds: tuple[str, ...] = ("current", "random", "popularity", "mf")
    exploration_rate: float = 0.2
    ranking_noise: float = 0.5
    mf_rank: int = 10
    n_placebo: int = 10
    imputation: str = "recmodel"

    def __post_init__(self):
        self.kinds = tuple(self.kinds)
        bad = [k for k in self.kinds if k not in POLICY_KINDS]
        if bad:
            raise ConfigError(f"unknown policies {bad}; expected a subset of {POLICY_KINDS}")
        if self.imputation not in ("recmodel", "utility"):
            raise ConfigError("policies.imputation must be 'recmodel' or 'utility'")

    def policy_config(self) -> PolicyConfig:
        return PolicyConfig(self.exploration_rate, self.mf_rank, self.ranking_noise)


@dataclasses.dataclass
class ExogSection:
    raw_dim: int = 256
    noise_scale: float = 0.1
    proj_hidden: int = 32
    activation: str = "tanh"
    out_fraction: float = 0.5
    new_goods: int = 0


@dataclasses.dataclass
class IncrementalitySection:
    mode: str = "existing"
    targets: tuple[int, ...] = ()  # good ids (1-based)

    def __post_init__(self):
        self.targets = tuple(int(t) for t in self.targets)
        if self.mode not in ("existing", "new"):
            raise ConfigError("incrementality.mode must be 'existing' or 'new'")


@dataclasses.dataclass
class PathsSection:
    out_dir: str = "out"


@dataclasses.dataclass
class RunConfig:
    seed: int = 0
    world: WorldConfig = dataclasses.field(default_factory=WorldConfig)
    training: TrainingConfig = dataclasses.field(default_factory=default_training)
    recmodel: TrainingConfig = dataclasses.field(default_factory=default_recmodel)
    arms: tuple[ExperimentArm, ...] = ()
    policies: PolicySection = dataclasses.field(default_factory=PolicySection)
    exog: ExogSection = dataclasses.field(default_factory=ExogSection)
    incrementality: IncrementalitySection = dataclasses.field(default_factory=IncrementalitySection)
    paths: PathsSection = dataclasses.field(default_factory=PathsSection)

    def with_seed(self, seed: int) -> "RunConfig":
        """Copy with the run seed propagated to the world and both training configs."""
        return dataclasses.replace(
            self, seed=seed, world=dataclasses.replace(self.world, seed=seed),
            training=dataclasses.replace(self.training, seed=seed),
            recmodel=dataclasses.replace(self.recmodel, seed=seed))

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["arms"] = [dataclasses.asdict(a) for a in self.arms]
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


SECTIONS = {"world": WorldConfig, "policies": PolicySection, "exog": ExogSection,
            "incrementality": IncrementalitySection, "paths": PathsSection}


def _section(cls, values: dict, name: str):
    if not isinstance(values, dict):
        raise ConfigError(f"[{name}] must be a table")
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - allowed)
    if unknown:
        raise ConfigError(f"unknown keys in [{name}]: {', '.join(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}]: {exc}") from None


def _training(values: dict, name: str, base: TrainingConfig) -> TrainingConfig:
    if not isinstance(values, dict):
        raise ConfigError(f"[{name}] must be a table")
    unknown = sorted(set(values) - {f.name for f in dataclasses.fields(TrainingConfig)})
    if unknown:
        raise ConfigError(f"unknown keys in [{name}]: {', '.join(unknown)}")
    try:
        return dataclasses.replace(base, **values).validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}]: {exc}") from None


def config_from_dict(data: dict) -> RunConfig:
    known = {"seed", "arms", "training", "recmodel", *SECTIONS}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config sections or keys: {', '.join(unknown)}")
    kwargs = {}
    if "seed" in data:
        if not isinstance(data["seed"], int) or data["seed"] < 0:
            raise ConfigError("seed must be a non-negative integer")
        kwargs["seed"] = data["seed"]
    for name, cls in SECTIONS.items():
        if name in data:
            kwargs[name] = _section(cls, data[name], name)
    if "training" in data:
        kwargs["training"] = _training(data["training"], "training", default_training())
    if "recmodel" in data:
        kwargs["recmodel"] = _training(data["recmodel"], "recmodel", default_recmodel())
    if "arms" in data:
        arms = data["arms"]
        if not isinstance(arms, list):
            raise ConfigError("arms must be an array of tables ([[arms]])")
        kwargs["arms"] = tuple(_section(ExperimentArm, a, "arms") for a in arms)
        ids = [a.arm_id for a in kwargs["arms"]]
        if len(set(ids)) != len(ids):
            raise ConfigError("arm ids must be unique")
    config = RunConfig(**kwargs)
    return config.with_seed(config.seed)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        data = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(data)
