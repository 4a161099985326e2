"""Run configuration: one JSON document drives every pipeline stage.

Parsing is strict (unknown keys are config errors) and round-trips:
parse -> serialize -> parse yields an identical RunConfig.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .harness import ATTACK_ROWS, DEFENSE_COLS


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    kind: str = "synthetic"  # synthetic | idx
    train_per_class: int = 500
    test_per_class: int = 100
    noise: float = 0.15
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""


@dataclass
class TrainSection:
    epochs: int = 4
    batch_size: int = 64
    learning_rate: float = 0.08


@dataclass
class PoisonSection:
    target_label: int = 0
    rate: float = 0.10


@dataclass
class AttackSection:
    eps: float = 0.15
    alpha: float = 0.15 / 8
    iterations: int = 20
    transform_prob: float = 0.5
    transform_min_scale: float = 0.85
    patches: int = 3
    patch_size: int = 3
    population: int = 20
    generations: int = 30
    location_jitter: int = 2


@dataclass
class DefenseSection:
    compress_weak_quality: int = 25
    compress_strong_quality: int = 5
    diffusion_weak_sigma: float = 0.1
    diffusion_strong_sigma: float = 0.3
    diffusion_steps: int = 20
    denoiser_epochs: int = 2
    denoiser_batch: int = 32
    denoiser_lr: float = 0.05


@dataclass
class AgentSection:
    backend: str = "oracle"  # oracle | replay | remote
    endpoint: str = ""
    model: str = ""
    token_env: str = "ILLUSIONLAB_API_TOKEN"
    timeout: float = 30.0
    retries: int = 2
    request_delay: float = 0.0
    fixture_dir: str = ""


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/desk"
    per_class: int = 10
    attacks: list = field(default_factory=lambda: list(ATTACK_ROWS))
    defenses: list = field(default_factory=lambda: list(DEFENSE_COLS))
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainSection = field(default_factory=TrainSection)
    poison: PoisonSection = field(default_factory=PoisonSection)
    attack_params: AttackSection = field(default_factory=AttackSection)
    defense_params: DefenseSection = field(default_factory=DefenseSection)
    agent: AgentSection = field(default_factory=AgentSection)

    def __post_init__(self):
        for name in self.attacks:
            if name not in ATTACK_ROWS:
                raise ConfigError(f"unknown attack {name!r} (choices: {ATTACK_ROWS})")
        for name in self.defenses:
            if name not in DEFENSE_COLS:
                raise ConfigError(f"unknown defense {name!r} (choices: {DEFENSE_COLS})")
        if self.agent.backend not in ("oracle", "replay", "remote"):
            raise ConfigError(f"unknown agent backend {self.agent.backend!r}")
        if self.data.kind not in ("synthetic", "idx"):
            raise ConfigError(f"unknown dataset kind {self.data.kind!r}")


_SECTIONS = {
    "data": DataConfig,
    "train": TrainSection,
    "poison": PoisonSection,
    "attack_params": AttackSection,
    "defense_params": DefenseSection,
    "agent": AgentSection,
}


def _build_section(cls, doc: dict, where: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    return cls(**doc)


def config_from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError(f"config root must be an object, got {type(doc).__name__}")
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    kwargs = {}
    for key, value in doc.items():
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"section {key!r} must be an object")
            kwargs[key] = _build_section(_SECTIONS[key], value, key)
        else:
            kwargs[key] = value
    try:
        return RunConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def config_to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return config_from_dict(doc)


def save_config(cfg: RunConfig, path):
    with open(path, "w") as fh:
        json.dump(config_to_dict(cfg), fh, indent=1, sort_keys=True)
