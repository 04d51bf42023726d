"""
Configuration Module
Training hyperparameters, task presets, the hyperparameter grid and flat KEY=value config files.
"""

import logging
import os
from dataclasses import asdict, dataclass, fields, replace
from itertools import product
from typing import Dict, List, Optional, Tuple

from dotenv import dotenv_values, load_dotenv

from sketch_extract import SketchKind
from utils import ConfigError, validate_probability

load_dotenv()

logger = logging.getLogger(__name__)

# Application settings
APP_TITLE = "Coarse2Fine: sketch-first semantic parsing"
DEFAULT_LOG_LEVEL = os.getenv("C2F_LOG_LEVEL", "INFO")
DEFAULT_SEED = int(os.getenv("C2F_SEED", "1"))

TASK_KINDS: Dict[str, SketchKind] = {
    "geo": SketchKind.LAMBDA,
    "atis": SketchKind.LAMBDA,
    "django": SketchKind.CODE,
    "wikisql": SketchKind.SQL,
}

# hyperparameter grid
HIDDEN_GRID = (250, 300)
EMBEDDING_GRID = (150, 200, 250, 300)
DROPOUT_GRID = (0.3, 0.5)
LEARNING_RATE_GRID = (0.002, 0.005)

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


@dataclass(frozen=True)
class TrainConfig:
    """Every hyperparameter and feature flag of one training run."""

    task: str = "geo"
    hidden_size: int = 250
    embedding_size: int = 150
    dropout: float = 0.3
    label_smoothing: float = 0.0
    learning_rate: float = 0.005
    batch_size: int = 64
    scoring_hidden: int = 64
    pos_size: int = 10
    max_epochs: int = 100
    patience: int = 5
    seed: int = DEFAULT_SEED
    dev_fraction: float = 0.1
    min_freq: int = 1
    max_decode_len: int = 100
    max_conditions: int = 4
    init_range: float = 0.08
    rmsprop_rho: float = 0.95
    rmsprop_eps: float = 1e-8
    clip_norm: float = 5.0
    parent_feeding: bool = False
    copy_gate: bool = False
    sketch_encoder: bool = True
    table_aware: bool = False
    onestage: bool = False
    embedding_file: Optional[str] = None

    @property
    def kind(self) -> SketchKind:
        return TASK_KINDS[self.task]

    def to_dict(self) -> Dict:
        return asdict(self)


PRESETS: Dict[str, Dict] = {
    "geo": {"label_smoothing": 0.1, "parent_feeding": True},
    "atis": {"label_smoothing": 0.1, "parent_feeding": True},
    "django": {"copy_gate": True},
    "wikisql": {"batch_size": 200, "table_aware": True},
}


def validate_config(config: TrainConfig) -> Tuple[bool, Optional[str]]:
    """
    Validate a training configuration.

    Args:
        config: Configuration to check

    Returns:
        Tuple of (is_valid, error_message)
    """
    if config.task not in TASK_KINDS:
        return False, f"Unknown task '{config.task}' (expected one of {', '.join(TASK_KINDS)})"

    if config.hidden_size <= 0 or config.hidden_size % 2:
        return False, f"hidden_size must be a positive even number, got {config.hidden_size}"

    for name in ("embedding_size", "batch_size", "scoring_hidden", "max_epochs", "max_decode_len", "min_freq"):
        if getattr(config, name) <= 0:
            return False, f"{name} must be positive, got {getattr(config, name)}"

    for name in ("dropout", "label_smoothing", "dev_fraction"):
        is_valid, error = validate_probability(getattr(config, name), name)
        if not is_valid:
            return False, error

    if config.learning_rate <= 0:
        return False, f"learning_rate must be positive, got {config.learning_rate}"

    if config.patience < 1 or config.max_conditions < 1:
        return False, "patience and max_conditions must be at least 1"

    if config.table_aware and config.kind is not SketchKind.SQL:
        return False, "the table-aware encoder only applies to the wikisql task"

    if config.onestage and config.kind is SketchKind.SQL:
        return False, "the one-stage decoder is not defined for the wikisql task"

    return True, None


def _check(config: TrainConfig) -> TrainConfig:
    is_valid, error = validate_config(config)
    if not is_valid:
        raise ConfigError(error)
    if config.copy_gate and config.kind is not SketchKind.CODE:
        logger.warning(f"copy_gate is set for task '{config.task}'; it only changes the code decoder")
    return config


def preset(task: str, **overrides) -> TrainConfig:
    """Defaults for a task, with optional field overrides."""
    if task not in PRESETS:
        raise ConfigError(f"Unknown task '{task}' (expected one of {', '.join(PRESETS)})")
    values = dict(PRESETS[task])
    values.update(overrides)
    return _check(TrainConfig(task=task, **values))


def with_overrides(config: TrainConfig, **overrides) -> TrainConfig:
    """Copy of a configuration with some fields replaced; None values are ignored."""
    overrides = {k: v for k, v in overrides.items() if v is not None}
    return _check(replace(config, **overrides))


def _coerce(name: str, raw: str, kind: type):
    text = raw.strip()
    try:
        if kind is bool:
            if text.lower() in _TRUE:
                return True
            if text.lower() in _FALSE:
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
    except ValueError as e:
        raise ConfigError(f"Bad value for {name}: {e}") from e
    return text or None


def load_config(path: str, base: Optional[TrainConfig] = None) -> TrainConfig:
    """
    Read a flat KEY=value config file on top of a base configuration.

    Keys are TrainConfig field names in either case; a "task" key switches
    to that task's preset before the other keys apply.

    Args:
        path: Config file path
        base: Configuration the file's values override

    Returns:
        Validated TrainConfig
    """
    if not os.path.exists(path):
        raise ConfigError(f"Config file not found: {path}")

    raw = {key.lower(): value for key, value in dotenv_values(path).items() if value is not None}
    known = {f.name: f for f in fields(TrainConfig)}

    unknown = sorted(set(raw) - set(known))
    for key in unknown:
        logger.warning(f"Ignoring unknown config key '{key}' in {path}")

    config = base or TrainConfig()
    if "task" in raw and raw["task"].strip() != config.task:
        config = preset(raw["task"].strip())

    values = {}
    for name, value in raw.items():
        if name in known and name != "task":
            kind = known[name].type if known[name].type in (bool, int, float) else str
            values[name] = _coerce(name, value, kind)

    logger.info(f"Loaded {len(values)} setting(s) from {path}")
    return _check(replace(config, **values))


def grid(config: TrainConfig) -> List[TrainConfig]:
    """Every combination of hidden size, embedding size, dropout and learning rate."""
    return [
        replace(config, hidden_size=h, embedding_size=e, dropout=d, learning_rate=lr)
        for h, e, d, lr in product(HIDDEN_GRID, EMBEDDING_GRID, DROPOUT_GRID, LEARNING_RATE_GRID)
    ]


if __name__ == "__main__":
    for task in PRESETS:
        print(task, preset(task))
    print(f"Grid size: {len(grid(preset('geo')))}")
