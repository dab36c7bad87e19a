"""Run configuration: one section per module, loaded from JSON or TOML.

Every field is optional. Unknown keys raise ConfigError naming the dotted path
(``tracker.lstm_hiden``). The effective config, defaults filled in, is what
gets embedded in output provenance.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Union

from tagstrain.errors import ConfigError
from tagstrain.evaluation import ReviewThresholds
from tagstrain.models.localizer import LocalizerConfig
from tagstrain.models.tracker import TrackerConfig
from tagstrain.phantom import DatasetRanges, PhantomSpec, SplitFractions
from tagstrain.preprocess import PreprocConfig
from tagstrain.registration import SSDConfig
from tagstrain.schema import from_dict, to_dict

try:
    import tomllib
except ImportError:  # pragma: no cover - Python < 3.11
    import toml as tomllib  # type: ignore[no-redef]

logger = logging.getLogger(__name__)

THREADS_ENV = "TAGSTRAIN_THREADS"


@dataclass(frozen=True)
class PhantomSection:
    spec: PhantomSpec = field(default_factory=PhantomSpec)
    ranges: DatasetRanges = field(default_factory=DatasetRanges)
    splits: SplitFractions = field(default_factory=SplitFractions)


@dataclass(frozen=True)
class LossConfig:
    omega: float = 1.0

    def __post_init__(self) -> None:
        if self.omega < 0:
            raise ConfigError(f"loss.omega must be >= 0, got {self.omega}")


@dataclass(frozen=True)
class EvalConfig:
    reference_group: str = "reference"
    review: ReviewThresholds = field(default_factory=ReviewThresholds)


@dataclass(frozen=True)
class RunConfig:
    phantom: PhantomSection = field(default_factory=PhantomSection)
    preprocess: PreprocConfig = field(default_factory=PreprocConfig)
    localizer: LocalizerConfig = field(default_factory=LocalizerConfig)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    baseline: SSDConfig = field(default_factory=SSDConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    threads: Optional[int] = None

    def to_dict(self) -> Dict[str, Any]:
        return to_dict(self)


def parse_config(data: Dict[str, Any]) -> RunConfig:
    return from_dict(RunConfig, data)


def _parse_text(text: str, suffix: str, path: Path) -> Dict[str, Any]:
    try:
        if suffix == ".toml":
            return tomllib.loads(text)
        return json.loads(text)
    except (ValueError, TypeError) as exc:
        # tomllib.TOMLDecodeError, toml.TomlDecodeError and JSONDecodeError are all ValueErrors
        raise ConfigError(f"{path}: cannot parse config: {exc}") from exc


def load_config(path: Optional[Union[str, Path]] = None) -> RunConfig:
    """Load a config file; with no path, return the defaults."""
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    data = _parse_text(text, path.suffix.lower(), path)
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object/table")
    cfg = parse_config(data)
    logger.debug("loaded config from %s", path)
    return cfg


def resolve_threads(cfg: RunConfig, override: Optional[int] = None) -> int:
    """Worker thread cap: CLI flag, then config, then TAGSTRAIN_THREADS, then cpu count."""
    for value, source in ((override, "--threads"), (cfg.threads, "threads")):
        if value is not None:
            if value < 1:
                raise ConfigError(f"{source} must be >= 1, got {value}")
            return value
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            value = int(env)
        except ValueError as exc:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {env!r}") from exc
        if value < 1:
            raise ConfigError(f"{THREADS_ENV} must be >= 1, got {value}")
        return value
    return os.cpu_count() or 1
