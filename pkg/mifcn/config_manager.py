"""
Run configuration: layered sources, validation and OmegaConf access.

A run configuration is built from the packaged ``mifcn/config/default.yaml`` and any
number of override sources (YAML, JSON or flat ``key=value`` text). Sources are
merged in order, then every validator reports its problems at once.

Copyright 2025 The MIFCN Authors

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
"""

import json
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import yaml
from omegaconf import DictConfig, OmegaConf

from .errors import DataError, UsageError

logger = logging.getLogger(__name__)

DEFAULT_CONFIG_DIR = Path(str(resources.files("mifcn").joinpath("config")))
DEFAULT_SECTION = "training"
REQUIRED_SECTIONS = ("model", "training", "dataset", "evaluation")


class ConfigFormat(Enum):
    """Supported configuration formats."""

    YAML = "yaml"
    JSON = "json"
    KEYVALUE = "keyvalue"

    @classmethod
    def from_path(cls, path: Union[str, Path]) -> "ConfigFormat":
        suffix = Path(path).suffix.lower()
        if suffix in (".yaml", ".yml"):
            return cls.YAML
        if suffix == ".json":
            return cls.JSON
        return cls.KEYVALUE


@dataclass
class ConfigSource:
    """Configuration source definition."""

    name: str
    path: Union[str, Path]
    format: ConfigFormat
    required: bool = True


class ConfigValidator(ABC):
    """Abstract base class for configuration validators."""

    @abstractmethod
    def validate(self, config: Dict[str, Any]) -> List[str]:
        """
        Validate configuration and return list of error messages.

        Args:
            config: Configuration dictionary to validate

        Returns:
            List of error messages (empty if valid)
        """


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _is_int(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


class MifcnConfigValidator(ConfigValidator):
    """Validator for the model, training, dataset, evaluation, inference and gradcheck sections."""

    def validate(self, config: Dict[str, Any]) -> List[str]:
        errors = []

        for section in REQUIRED_SECTIONS:
            if section not in config:
                errors.append(f"Missing required section: {section}")
            elif not isinstance(config[section], dict):
                errors.append(f"Section {section} must be a mapping")

        model = config.get("model") if isinstance(config.get("model"), dict) else {}
        for key, minimum in (("T", 1), ("C", 1), ("A", 1), ("B", 0)):
            if key in model and not (_is_int(model[key]) and model[key] >= minimum):
                errors.append(f"model.{key} must be an integer >= {minimum}")
        if model.get("dilations") is not None:
            dilations = model["dilations"]
            if not isinstance(dilations, list) or not all(_is_int(d) and d >= 1 for d in dilations):
                errors.append("model.dilations must be a list of integers >= 1")
            elif _is_int(model.get("A")) and len(dilations) != model["A"]:
                errors.append(f"model.dilations must list A={model['A']} values")
        if "h" in model and not (_is_number(model["h"]) and model["h"] > 0):
            errors.append("model.h must be a positive number")
        if "alpha" in model and not (_is_number(model["alpha"]) and 0 <= model["alpha"] < 1):
            errors.append("model.alpha must lie in [0, 1)")

        training = config.get("training") if isinstance(config.get("training"), dict) else {}
        for key in ("epochs", "batch", "lr_decay_epoch"):
            if key in training and not (_is_int(training[key]) and training[key] >= 1):
                errors.append(f"training.{key} must be an integer >= 1")
        for key in ("lr1", "lr2", "eps"):
            if key in training and not (_is_number(training[key]) and training[key] > 0):
                errors.append(f"training.{key} must be a positive number")
        if "seed" in training and not _is_int(training["seed"]):
            errors.append("training.seed must be an integer")
        if "augment" in training and not isinstance(training["augment"], bool):
            errors.append("training.augment must be true or false")

        dataset = config.get("dataset") if isinstance(config.get("dataset"), dict) else {}
        for key in ("patch_size", "budget", "workers"):
            if key in dataset and not (_is_int(dataset[key]) and dataset[key] >= 1):
                errors.append(f"dataset.{key} must be an integer >= 1")

        evaluation = config.get("evaluation") if isinstance(config.get("evaluation"), dict) else {}
        if "peak" in evaluation and not (_is_number(evaluation["peak"]) and evaluation["peak"] > 0):
            errors.append("evaluation.peak must be a positive number")
        grid = evaluation.get("h_grid")
        if grid is not None and not (
            isinstance(grid, list) and grid and all(_is_number(h) and h > 0 for h in grid)
        ):
            errors.append("evaluation.h_grid must be a non-empty list of positive numbers")

        inference = config.get("inference") if isinstance(config.get("inference"), dict) else {}
        if inference.get("h") is not None and not (_is_number(inference["h"]) and inference["h"] > 0):
            errors.append("inference.h must be null or a positive number")
        if "workers" in inference and not (_is_int(inference["workers"]) and inference["workers"] >= 1):
            errors.append("inference.workers must be an integer >= 1")

        gradcheck = config.get("gradcheck") if isinstance(config.get("gradcheck"), dict) else {}
        for key in ("conv_cases", "instances"):
            if key in gradcheck and not (_is_int(gradcheck[key]) and gradcheck[key] >= 1):
                errors.append(f"gradcheck.{key} must be an integer >= 1")
        if "seed" in gradcheck and not _is_int(gradcheck["seed"]):
            errors.append("gradcheck.seed must be an integer")
        if "tolerance" in gradcheck and not (_is_number(gradcheck["tolerance"]) and gradcheck["tolerance"] > 0):
            errors.append("gradcheck.tolerance must be a positive number")
        coords = gradcheck.get("coords_per_tensor")
        if coords is not None and not (_is_int(coords) and coords >= 1):
            errors.append("gradcheck.coords_per_tensor must be null or an integer >= 1")

        return errors


def parse_scalar(text: str) -> Any:
    """Interpret a ``key=value`` right-hand side with YAML scalar rules."""
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


def parse_keyvalue(text: str, default_section: str = DEFAULT_SECTION) -> Dict[str, Any]:
    """Parse flat ``key=value`` lines into a nested dictionary.

    Dotted keys address sections (``model.h=100``); bare keys land in
    ``default_section``. Blank lines and ``#`` comments are skipped.

    Raises:
        ValueError: On a line without ``=``
    """
    result: Dict[str, Any] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {number}: expected key=value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        keys = key.split(".") if "." in key else [default_section, key]
        target = result
        for k in keys[:-1]:
            target = target.setdefault(k, {})
        target[keys[-1]] = parse_scalar(value)
    return result


@dataclass
class ConfigManager:
    """
    Layered configuration with validation.

    Features:
    - Multiple configuration sources merged in order
    - YAML, JSON and flat key=value formats
    - All validation errors reported together
    """

    sources: List[ConfigSource] = field(default_factory=list)
    validators: List[ConfigValidator] = field(default_factory=list)

    def __post_init__(self):
        self.config: Dict[str, Any] = {}

    def add_source(self, source: ConfigSource) -> None:
        """Add a configuration source."""
        self.sources.append(source)

    def add_validator(self, validator: ConfigValidator) -> None:
        """Add a configuration validator."""
        self.validators.append(validator)

    def load(self) -> Dict[str, Any]:
        """Load, merge and validate every source.

        Raises:
            DataError: If a required source is missing or unreadable
            UsageError: If the merged configuration fails validation
        """
        merged_config: Dict[str, Any] = {}

        for source in self.sources:
            try:
                source_config = self._load_source(source)
            except (OSError, ValueError, yaml.YAMLError) as e:
                if source.required:
                    raise DataError(f"Failed to load required config source {source.name}: {e}") from e
                logger.warning(f"Failed to load optional config source {source.name}: {e}")
                continue
            merged_config = self._merge_configs(merged_config, source_config)
            logger.debug(f"Loaded config from {source.name}")

        self._validate_config(merged_config)
        self.config = merged_config
        return self.config

    def _load_source(self, source: ConfigSource) -> Dict[str, Any]:
        """Load configuration from a single source."""
        path = Path(source.path)

        if not path.exists():
            if source.required:
                raise FileNotFoundError(f"Required config file not found: {path}")
            return {}

        with open(path, "r") as f:
            if source.format == ConfigFormat.YAML:
                loaded = yaml.safe_load(f) or {}
            elif source.format == ConfigFormat.JSON:
                loaded = json.load(f)
            elif source.format == ConfigFormat.KEYVALUE:
                loaded = parse_keyvalue(f.read())
            else:
                raise ValueError(f"Unsupported config format: {source.format}")

        if not isinstance(loaded, dict):
            raise ValueError(f"{path} does not hold a mapping")
        return loaded

    def _merge_configs(self, base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
        """Recursively merge configuration dictionaries."""
        result = base.copy()

        for key, value in override.items():
            if key in result and isinstance(result[key], dict) and isinstance(value, dict):
                result[key] = self._merge_configs(result[key], value)
            else:
                result[key] = value

        return result

    def _validate_config(self, config: Dict[str, Any]) -> None:
        """Validate configuration using all validators."""
        all_errors = []

        for validator in self.validators:
            all_errors.extend(validator.validate(config))

        if all_errors:
            error_msg = "Configuration validation failed:\n" + "\n".join(
                f"  - {error}" for error in all_errors
            )
            raise UsageError(error_msg)


def create_mifcn_config_manager(
    config_dir: Union[str, Path] = DEFAULT_CONFIG_DIR,
    config_name: str = "default",
    overrides: Optional[List[Union[str, Path]]] = None,
) -> ConfigManager:
    """
    Create a configuration manager for a MIFCN run.

    Args:
        config_dir: Directory containing the base configuration
        config_name: Base configuration file name (without extension)
        overrides: Extra files merged over the base, format chosen by suffix

    Returns:
        Configured ConfigManager instance
    """
    config_manager = ConfigManager()
    config_manager.add_source(
        ConfigSource(name="main", path=Path(config_dir) / f"{config_name}.yaml", format=ConfigFormat.YAML)
    )
    for path in overrides or []:
        config_manager.add_source(
            ConfigSource(name=Path(path).name, path=path, format=ConfigFormat.from_path(path))
        )
    config_manager.add_validator(MifcnConfigValidator())
    return config_manager


def load_cfg(
    config_name: str = "default",
    config_dir: Union[str, Path] = DEFAULT_CONFIG_DIR,
    overrides: Optional[List[Union[str, Path]]] = None,
) -> DictConfig:
    """Load and validate a run configuration as an OmegaConf object."""
    config_manager = create_mifcn_config_manager(config_dir, config_name, overrides)
    return OmegaConf.create(config_manager.load())


def merge_overrides(cfg: DictConfig, overrides: Dict[str, Any]) -> DictConfig:
    """Merge dotted-key overrides (``{"model.h": 100}``) and re-validate.

    None values are skipped, so unset command-line flags keep the configured value.

    Raises:
        UsageError: If the merged configuration fails validation
    """
    nested: Dict[str, Any] = {}
    for key, value in overrides.items():
        if value is None:
            continue
        keys = key.split(".")
        target = nested
        for k in keys[:-1]:
            target = target.setdefault(k, {})
        target[keys[-1]] = value
    merged = OmegaConf.merge(cfg, OmegaConf.create(nested))
    manager = ConfigManager(validators=[MifcnConfigValidator()])
    manager._validate_config(OmegaConf.to_container(merged, resolve=True))
    return merged
