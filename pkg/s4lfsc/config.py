import copy
import json
import os
from pathlib import Path
from typing import Any, Literal, Optional

from pydantic import ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from s4lfsc.exceptions import ConfigError
from s4lfsc.schemas import ExperimentConfig


class Settings(BaseSettings):
    """Process settings loaded from environment variables (prefix S4LFSC_)"""

    model_config = SettingsConfigDict(
        env_prefix="S4LFSC_",
        env_file=".env",
        case_sensitive=False,
        extra="ignore",
    )

    # Logging settings
    log_level: str = "INFO"
    log_format: Literal["plain", "json"] = "plain"

    # Data settings
    data_root: Optional[str] = None
    output_dir: str = "outputs"

    # Compute settings
    device: str = "cpu"
    num_threads: Optional[int] = None


def get_settings() -> Settings:
    """Get application settings"""
    return Settings()


# Global settings instance
settings = get_settings()


# Per-dataset defaults of the published experimental settings
_SHARED_STAGES: dict[str, dict[str, Any]] = {
    "spatial": {"stage": "spatial", "episodes": 1100, "lr": 0.001, "rm_batch": 128},
    "spectral": {
        "stage": "spectral",
        "lr": 0.001,
        "mr_batch": 1024,
        "mask_ratio": 0.75,
        "min_class_items": 400,
        "items_per_class": 400,
    },
    "finetune": {"stage": "finetune", "episodes": 1000, "lr": 0.001},
}

DATASET_PRESETS: dict[str, dict[str, Any]] = {
    "UP": {"spectral": {"episodes": 700}, "finetune": {"eval_every": 20, "sslcl_dropout": 0.15}},
    "IP": {"spectral": {"episodes": 500}, "finetune": {"eval_every": 50, "sslcl_dropout": 0.28}},
    "SA": {"spectral": {"episodes": 700}, "finetune": {"eval_every": 50, "sslcl_dropout": 0.28}},
    "HC": {
        "subsample_fraction": 0.15,
        "spectral": {"episodes": 700},
        "finetune": {"eval_every": 20, "sslcl_dropout": 0.28},
    },
}

# Class counts of the recognized targets
DATASET_CLASSES: dict[str, int] = {"UP": 9, "IP": 16, "SA": 16, "HC": 16}


def deep_merge(base: dict[str, Any], override: dict[str, Any]) -> dict[str, Any]:
    """Recursively merge override into a copy of base"""
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def preset_for(target: str) -> dict[str, Any]:
    """Default config dict for a target name (shared defaults for custom)"""
    preset: dict[str, Any] = {"target": target}
    preset = deep_merge(preset, {k: dict(v) for k, v in _SHARED_STAGES.items()})
    if target not in DATASET_PRESETS:
        preset["spectral"]["episodes"] = 700
        return preset
    return deep_merge(preset, DATASET_PRESETS[target])


def parse_overrides(tokens: list[str]) -> dict[str, Any]:
    """
    Turn `--a.b value` flag pairs into a nested override dict

    Values are decoded as JSON when possible (numbers, booleans, lists),
    otherwise kept as strings.

    Raises:
        ConfigError: If a flag has no value or a token is not a flag
    """
    overrides: dict[str, Any] = {}
    index = 0
    while index < len(tokens):
        token = tokens[index]
        if not token.startswith("--"):
            raise ConfigError(f"Unexpected argument: {token}", key=token)
        if "=" in token:
            key, raw = token[2:].split("=", 1)
            index += 1
        else:
            if index + 1 >= len(tokens):
                raise ConfigError(f"Missing value for {token}", key=token[2:])
            key, raw = token[2:], tokens[index + 1]
            index += 2
        try:
            value: Any = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        cursor = overrides
        parts = key.replace("-", "_").split(".")
        for part in parts[:-1]:
            cursor = cursor.setdefault(part, {})
        cursor[parts[-1]] = value
    return overrides


def resolve_data_path(path: Optional[str], data_root: Optional[str] = None) -> Optional[str]:
    """Prefix relative dataset paths with the data root"""
    if path is None:
        return None
    root = data_root if data_root is not None else settings.data_root
    candidate = Path(path)
    if root and not candidate.is_absolute():
        candidate = Path(root) / candidate
    return str(candidate)


def resolve_experiment_config(
    config_path: Optional[str] = None,
    overrides: Optional[dict[str, Any]] = None,
    data_root: Optional[str] = None,
) -> ExperimentConfig:
    """
    Resolve an experiment config with precedence flags > file > presets

    Args:
        config_path: Optional JSON config file
        overrides: Nested override dict (from CLI flags)
        data_root: Prefix for relative dataset paths (defaults to settings)

    Returns:
        Validated ExperimentConfig with absolute dataset paths

    Raises:
        ConfigError: If the file cannot be parsed or validation fails
    """
    file_values: dict[str, Any] = {}
    if config_path is not None:
        try:
            file_values = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"Config file not found: {config_path}", key="config")
        except json.JSONDecodeError as e:
            raise ConfigError(f"Config file is not valid JSON: {e}", key="config")
        if not isinstance(file_values, dict):
            raise ConfigError("Config file must hold a JSON object", key="config")

    overrides = overrides or {}
    target = overrides.get("target", file_values.get("target", "custom"))
    merged = deep_merge(deep_merge(preset_for(str(target)), file_values), overrides)

    try:
        config = ExperimentConfig.model_validate(merged)
    except ValidationError as e:
        error = e.errors()[0]
        key = ".".join(str(part) for part in error["loc"]) or "config"
        raise ConfigError(f"Invalid config value for '{key}': {error['msg']}", key=key)

    resolved_paths = {
        name: resolve_data_path(value, data_root)
        for name, value in config.paths.model_dump().items()
    }
    config.paths = config.paths.model_copy(update=resolved_paths)
    if config.spatial_backbone_weights is not None:
        config.spatial_backbone_weights = resolve_data_path(
            config.spatial_backbone_weights, data_root
        )
    return config


def require_paths(config: ExperimentConfig, keys: list[str]) -> None:
    """
    Check that the given dataset paths are set and exist

    Raises:
        ConfigError: Naming the first missing key
    """
    for key in keys:
        value = getattr(config.paths, key)
        if value is None:
            raise ConfigError(f"Missing required path 'paths.{key}'", key=f"paths.{key}")
        if not os.path.exists(value):
            raise ConfigError(f"Path for 'paths.{key}' does not exist: {value}", key=f"paths.{key}")
