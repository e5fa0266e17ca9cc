"""Configuration validation utilities."""

import json
from pathlib import Path
from typing import Any, Dict, List

from .errors import ConfigError

ANCHOR_SOURCES = ("adversarial", "seed", "new")
TRAIN_PRESETS = ("paper", "bench")

# Field -> (kind, constraint). Kinds: "int", "float", "bool", "str", "choice".
# Constraints: ">=N" / ">N" bound, "[0,1]" closed interval, or a choice tuple.
SECTION_RULES: Dict[str, Dict[str, tuple]] = {
    "stream": {
        "num_tasks": ("int", ">=1"),
        "classes_per_task": ("int", ">=1"),
        "train_per_class": ("int", ">=1"),
        "test_per_class": ("int", ">=1"),
        "input_dim": ("int", ">=1"),
        "cluster_spread": ("float", ">=0"),
        "overlap": ("float", "[0,1]"),
        "pretrain_classes": ("int", ">=2"),
        "pretrain_per_class": ("int", ">=1"),
        "seed": ("int", None),
    },
    "model": {
        "input_dim": ("int", ">=1"),
        "raw_dim": ("int", ">=1"),
        "joint_dim": ("int", ">=1"),
        "hidden_dim": ("int", ">=1"),
        "lora_rank": ("int", ">=1"),
        "class_token_dim": ("int", ">=1"),
        "temperature": ("float", ">0"),
        "lora_scale": ("float", ">0"),
    },
    "pretrain": {
        "steps": ("int", ">=0"),
        "learning_rate": ("float", ">=0"),
        "batch_size": ("int", ">=1"),
    },
    "train": {
        "epochs": ("int", ">=1"),
        "batch_size": ("int", ">=1"),
        "anchor_batch_size": ("int", ">=1"),
        "learning_rate": ("float", ">=0"),
        "cosine_decay": ("bool", None),
        "lambda_acgd": ("float", ">=0"),
        "lambda_gr": ("float", ">=0"),
        "tau_a": ("float", ">0"),
        "tau_t": ("float", ">0"),
        "k": ("int", ">=1"),
        "temperature": ("float", ">0"),
    },
    "dpgd": {
        "epsilon": ("float", ">0"),
        "step_size": ("float", ">0"),
        "iterations": ("int", ">=0"),
        "lambda_p": ("float", ">=0"),
        "seeds_per_class": ("int", ">=1"),
        "temperature": ("float", ">0"),
    },
    "flags": {
        "acgd": ("bool", None),
        "tsgr": ("bool", None),
        "prototype_transfer": ("bool", None),
        "visual_branch": ("bool", None),
        "anchor_source": ("choice", ANCHOR_SOURCES),
    },
    "inference": {
        "beta": ("float", ">=0"),
    },
    "run": {
        "seed": ("int", None),
        "output_dir": ("str", None),
        "label": ("str", None),
        "workers": ("int", ">=1"),
        "drift_probe": ("bool", None),
        "verbose": ("bool", None),
        "preset": ("choice", TRAIN_PRESETS),
        "pretrained_path": ("str", None),
    },
}


def _is_int(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


class ConfigValidator:
    """Validates configuration sections and files."""

    @staticmethod
    def validate_value(section: str, key: str, value: Any) -> List[str]:
        """Validate one field against its rule."""
        path = f"{section}.{key}"
        kind, constraint = SECTION_RULES[section][key]

        if kind == "bool":
            return [] if isinstance(value, bool) else [f"Invalid {path}: must be true or false"]
        if kind == "str":
            return [] if isinstance(value, str) else [f"Invalid {path}: must be a string"]
        if kind == "choice":
            return [] if value in constraint else [f"Invalid {path}: must be one of {', '.join(constraint)}"]
        if kind == "int" and not _is_int(value):
            return [f"Invalid {path}: must be an integer"]
        if kind == "float" and not _is_number(value):
            return [f"Invalid {path}: must be a number"]

        if constraint == "[0,1]" and not 0.0 <= value <= 1.0:
            return [f"Invalid {path}: must lie in [0, 1]"]
        if constraint and constraint.startswith(">="):
            bound = float(constraint[2:])
            if value < bound:
                return [f"Invalid {path}: must be >= {constraint[2:]}"]
        elif constraint and constraint.startswith(">"):
            bound = float(constraint[1:])
            if value <= bound:
                return [f"Invalid {path}: must be > {constraint[1:]}"]
        return []

    @staticmethod
    def validate_section(section: str, data: Dict[str, Any]) -> List[str]:
        """Validate one configuration section."""
        if section not in SECTION_RULES:
            return [f"Unknown section: {section}"]
        if not isinstance(data, dict):
            return [f"Invalid {section}: must be object"]

        errors = []
        rules = SECTION_RULES[section]
        for key in data:
            if key not in rules:
                errors.append(f"Unknown key: {section}.{key}")
        for key in rules:
            if key in data:
                errors.extend(ConfigValidator.validate_value(section, key, data[key]))

        if section == "model" and not errors:
            limit = min(data.get("hidden_dim", 1), data.get("raw_dim", 1), data.get("joint_dim", 1))
            if data.get("lora_rank", 1) > limit:
                errors.append("Invalid model.lora_rank: must not exceed the adapted layer dims")
        return errors

    @staticmethod
    def validate_all(config: Dict[str, Any]) -> Dict[str, List[str]]:
        """Validate every section of a merged configuration."""
        all_errors = {}
        for section, data in config.items():
            errors = ConfigValidator.validate_section(section, data)
            if errors:
                all_errors[section] = errors
        return all_errors

    @staticmethod
    def validate_file(config_path: str) -> Dict[str, List[str]]:
        """Validate a configuration file without merging defaults."""
        path = Path(config_path)
        if not path.exists():
            return {str(path): ["File not found"]}
        try:
            with open(path) as f:
                config = json.load(f)
        except json.JSONDecodeError as e:
            return {str(path): [f"Invalid JSON: {e}"]}
        if not isinstance(config, dict):
            return {str(path): ["Top level must be an object"]}
        return ConfigValidator.validate_all(config)

    @staticmethod
    def check(section: str, data: Dict[str, Any]):
        """Raise ConfigError if the section has any problem."""
        errors = ConfigValidator.validate_section(section, data)
        if errors:
            raise ConfigError(errors)
