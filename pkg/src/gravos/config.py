"""Experiment configuration: dataclasses plus a fail-closed YAML reader.

The file mirrors ``ExperimentConfig`` section by section.  Unknown keys,
wrong types and out-of-range values are rejected with the dotted key path.
``GRAVOS_SEED`` and ``GRAVOS_OUT`` override the seed and the output
directory.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields, replace

import yaml

from .detector.model import ArchConfig
from .detector.train import TrainConfig
from .metrics import DEFAULT_THRESHOLDS, MatchConfig
from .scene import SynthConfig
from .selector import SelectionConfig
from .voxelizer import GridSpec

SELECTORS = ("gravos", "dropout", "bg_sampling", "inv_freq")
ENV_SEED = "GRAVOS_SEED"
ENV_OUT = "GRAVOS_OUT"
SEED_LIMIT = 1 << 64


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key path."""


@dataclass(frozen=True)
class DatasetConfig:
    source: str = "synth"
    path: str | None = None
    n_train: int = 200
    n_eval: int = 50
    synth: SynthConfig = field(default_factory=SynthConfig)

    def __post_init__(self):
        if self.source not in ("synth", "files"):
            raise ValueError(f"source must be synth or files, got {self.source!r}")
        if self.source == "files" and not self.path:
            raise ValueError("source 'files' needs a path")
        if self.n_train < 0 or self.n_eval < 0:
            raise ValueError("scene counts must be non-negative")


@dataclass(frozen=True)
class FinetuneConfig:
    phase1_epochs: int = 20
    phase2_epochs: int = 10
    # None: reuse the pretraining learning rate
    phase1_lr: float | None = None
    phase2_lr: float = 1e-2
    phase2_step_size: int = 5
    phase2_gamma: float = 0.1
    momentum: float = 0.9

    def __post_init__(self):
        if self.phase1_epochs < 0 or self.phase2_epochs < 0:
            raise ValueError("fine-tune epoch counts must be non-negative")
        if self.phase1_lr is not None and self.phase1_lr <= 0:
            raise ValueError("phase1_lr must be positive")
        if self.phase2_lr <= 0:
            raise ValueError("phase2_lr must be positive")
        if self.phase2_step_size < 1:
            raise ValueError("phase2_step_size must be at least 1")
        if not 0.0 < self.phase2_gamma <= 1.0:
            raise ValueError("phase2_gamma must lie in (0, 1]")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")

    @property
    def epochs(self):
        return self.phase1_epochs + self.phase2_epochs


@dataclass(frozen=True)
class EvalConfig:
    thresholds: dict = field(default_factory=lambda: dict(DEFAULT_THRESHOLDS))
    score_threshold: float = 0.3
    nms_iou: float = 0.5
    pre_nms_top: int = 256

    def __post_init__(self):
        MatchConfig(dict(self.thresholds))
        if not 0.0 <= self.nms_iou <= 1.0:
            raise ValueError("nms_iou must lie in [0, 1]")
        if self.pre_nms_top < 1:
            raise ValueError("pre_nms_top must be at least 1")

    def match(self, mode):
        return MatchConfig(dict(self.thresholds), mode)


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    grid: GridSpec = field(default_factory=GridSpec)
    detector: ArchConfig = field(default_factory=ArchConfig)
    pretrain: TrainConfig = field(default_factory=TrainConfig)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    selector: str = "gravos"
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    max_points: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.selector not in SELECTORS:
            raise ValueError(f"selector must be one of {SELECTORS}, got {self.selector!r}")
        if self.max_points < 1:
            raise ValueError("max_points must be at least 1")
        if not 0 <= self.seed < SEED_LIMIT:
            raise ValueError("seed must be an unsigned 64-bit integer")
        # the root seed is the only seed; sub-config seeds follow it
        if self.pretrain.seed != self.seed:
            object.__setattr__(self, "pretrain", replace(self.pretrain, seed=self.seed))
        if self.selection.seed != self.seed:
            object.__setattr__(self, "selection", replace(self.selection, seed=self.seed))

    def with_seed(self, seed):
        return replace(self, seed=int(seed))


# Sub-config fields that are derived rather than configured.
_HIDDEN = {SynthConfig: {"seed"}, TrainConfig: {"seed"}, SelectionConfig: {"seed"}}
_SECTIONS = {
    ExperimentConfig: {"dataset": DatasetConfig, "grid": GridSpec, "detector": ArchConfig,
                       "pretrain": TrainConfig, "selection": SelectionConfig,
                       "finetune": FinetuneConfig, "eval": EvalConfig},
    DatasetConfig: {"synth": SynthConfig},
}


def _visible_fields(cls):
    hidden = _HIDDEN.get(cls, set())
    return [f for f in fields(cls) if f.name not in hidden]


def _tupled(value):
    if isinstance(value, (list, tuple)):
        return tuple(_tupled(v) for v in value)
    return value


def _coerce(value, annotation, path):
    optional = annotation.endswith("| None")
    base = annotation.replace("| None", "").strip()
    if value is None:
        if optional:
            return None
        raise ConfigError(f"{path}: value required")
    if base == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if base == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if base == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if base == "tuple":
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return _tupled(value)
    if base == "dict":
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a mapping, got {value!r}")
        for k, v in value.items():
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"{path}.{k}: expected a number, got {v!r}")
        return dict(value)
    raise ConfigError(f"{path}: unsupported field type {annotation}")


def _build(cls, data, path):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    allowed = {f.name: f for f in _visible_fields(cls)}
    for key in data:
        if key not in allowed:
            where = f"{path}.{key}" if path else str(key)
            raise ConfigError(f"unknown key '{where}'")
    kwargs = {}
    sections = _SECTIONS.get(cls, {})
    for name, value in data.items():
        where = f"{path}.{name}" if path else name
        if name in sections:
            kwargs[name] = _build(sections[name], value, where)
        else:
            kwargs[name] = _coerce(value, allowed[name].type, where)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def parse_config(data):
    """ExperimentConfig from a parsed mapping (fail-closed)."""
    return _build(ExperimentConfig, data, "")


def load_config(path, env=None):
    """Read a YAML config file and apply the seed environment override."""
    env = os.environ if env is None else env
    try:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from exc
    config = parse_config(data)
    if env.get(ENV_SEED):
        config = config.with_seed(parse_seed(env[ENV_SEED], ENV_SEED))
    return config


def parse_seed(text, what="seed"):
    try:
        seed = int(str(text), 0)
    except ValueError as exc:
        raise ConfigError(f"{what}: expected an unsigned 64-bit integer, got {text!r}") from exc
    if not 0 <= seed < SEED_LIMIT:
        raise ConfigError(f"{what}: {seed} is outside the unsigned 64-bit range")
    return seed


def output_dir(cli_value, env=None):
    env = os.environ if env is None else env
    return cli_value or env.get(ENV_OUT) or None


def _plain(value):
    if dataclasses.is_dataclass(value):
        return config_to_dict(value)
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    return value


def config_to_dict(config):
    return {f.name: _plain(getattr(config, f.name)) for f in _visible_fields(type(config))}


def dump_config(config):
    """Resolved configuration as YAML; parse_config(yaml.safe_load(...)) round-trips."""
    return yaml.safe_dump(config_to_dict(config), sort_keys=False, default_flow_style=None)
