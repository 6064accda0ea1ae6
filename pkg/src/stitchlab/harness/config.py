"""Experiment configuration: a JSON document with a versioned schema.

Any key can be overridden from the command line with its dotted path, e.g.
``--stitch.epochs=5`` or ``--data.n_train=2000``.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from ..errors import ConfigError
from ..nnet.train import TrainConfig
from ..stitch import StitchTrainConfig

SCHEMA_VERSION = 1
EXPERIMENTS = (
    "Exp1_Match", "Exp2_Width", "Exp3_IndicesDuringTraining", "Exp4_CkaPenalty", "Exp5_InitSensitivity",
    "Exp6_ModeConnect", "Exp7_Sparsity", "Exp8_LowRank", "AppB_Weighted", "AppC1_Grid",
)
SHORT_NAMES = {name.split("_", 1)[0].lower(): name for name in EXPERIMENTS}


@dataclass
class DataConfig:
    seed: int = 0
    n_train: int = 20_000
    n_test: int = 4_000
    classes: int = 10
    noise: float = 0.3


@dataclass
class ExperimentConfig:
    experiment: str
    model: str = "micro10"  # spec preset
    width_multiplier: int = 1
    model_files: list = field(default_factory=list)  # explicit .mdl paths instead of cached twins
    train_on_demand: bool = True
    model_seeds: list = field(default_factory=lambda: [1, 2])
    layers: list | None = None  # default: every tap of the network
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    data: DataConfig = field(default_factory=DataConfig)
    train: dict = field(default_factory=dict)  # TrainConfig overrides
    stitch: dict = field(default_factory=dict)  # StitchTrainConfig overrides
    params: dict = field(default_factory=dict)  # experiment-specific knobs
    output_dir: str = "runs"
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if isinstance(self.data, dict):
            self.data = DataConfig(**self.data)
        self.validate()

    def validate(self) -> None:
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; choose from {', '.join(EXPERIMENTS)}")
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"config schema version {self.schema_version} is not {SCHEMA_VERSION}")
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        if len(self.model_seeds) != 2:
            raise ConfigError("model_seeds names exactly two networks")
        for path in self.model_files:
            if not Path(path).exists() and not self.train_on_demand:
                raise ConfigError(f"model file {path} does not exist and train_on_demand is off")
        if self.model_files and len(self.model_files) != 2:
            raise ConfigError("model_files names exactly two networks")
        try:
            self.train_config(0)
            self.stitch_config()
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(**{**self.train, "seed": seed})

    def stitch_config(self, **extra) -> StitchTrainConfig:
        return StitchTrainConfig(**{**self.stitch, **extra})

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "experiment" not in d:
            raise ConfigError("config needs an 'experiment' key")
        try:
            return cls(**copy.deepcopy(d))
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


def resolve_name(name: str) -> str:
    if name in EXPERIMENTS:
        return name
    short = SHORT_NAMES.get(name.lower())
    if short is None:
        raise ConfigError(f"unknown experiment {name!r}")
    return short


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(d: dict, overrides) -> dict:
    """Set dotted-path keys: ``["stitch.epochs=5", "seeds=[0,1]"]``."""
    d = copy.deepcopy(d)
    for item in overrides:
        key, sep, value = item.lstrip("-").partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not of the form key.path=value")
        parts = key.split(".")
        node = d
        for part in parts[:-1]:
            if node.get(part) is None:
                node[part] = {}
            node = node[part]
            if not isinstance(node, dict):
                raise ConfigError(f"{key}: {part} is not a mapping")
        node[parts[-1]] = _parse_value(value)
    return d


def load_config(path=None, experiment: str | None = None, overrides=()) -> ExperimentConfig:
    d: dict = {}
    if path is not None:
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    if experiment is not None:
        d["experiment"] = resolve_name(experiment)
    d = apply_overrides(d, overrides)
    if isinstance(d.get("data"), DataConfig):
        d["data"] = asdict(d["data"])
    return ExperimentConfig.from_dict(d)
