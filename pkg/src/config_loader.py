import copy
import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, Optional

from .anchorforge import DpgdConfig
from .duotower import ModelConfig, PretrainConfig
from .errors import ConfigError
from .protopath import InferenceConfig
from .segp_train import TrainConfig
from .streambench import TRAIN_PRESETS, ExperimentSettings, MethodFlags, RunOptions, StreamSpec
from .validator import SECTION_RULES, ConfigValidator

logger = logging.getLogger(__name__)

SECTION_TYPES = {
    "stream": StreamSpec,
    "model": ModelConfig,
    "pretrain": PretrainConfig,
    "train": TrainConfig,
    "dpgd": DpgdConfig,
    "flags": MethodFlags,
    "inference": InferenceConfig,
    "run": RunOptions,
}


def default_config() -> Dict[str, Dict[str, Any]]:
    """Every section with its built-in defaults."""
    return ExperimentSettings().as_dict()


def parse_override(text: str) -> tuple:
    """Split ``section.key=value``; the value is read as JSON when possible."""
    if "=" not in text or "." not in text.split("=", 1)[0]:
        raise ConfigError([f"Invalid override '{text}': expected section.key=value"])
    path, raw = text.split("=", 1)
    section, key = path.strip().split(".", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return section, key, value


class ConfigLoader:
    """Loads the run configuration: defaults, then the JSON file, then overrides.

    ``run.preset`` lays its training values over every train key that the
    file and the overrides leave unset.
    """

    def __init__(self, config_path: Optional[str] = None, overrides: Iterable[str] = ()):
        self.config_path = Path(config_path) if config_path else None
        self.config = default_config()
        self.explicit = set()
        if self.config_path is not None:
            self._merge(self._load_json(self.config_path))
        for text in overrides:
            self.set(*parse_override(text))
        self._validate()

    def _load_json(self, filepath: Path) -> Dict[str, Any]:
        """Load a JSON configuration file."""
        if not filepath.exists():
            raise FileNotFoundError(f"Configuration file not found: {filepath}")
        with open(filepath, "r") as f:
            try:
                data = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError([f"Invalid JSON in {filepath}: {e}"]) from e
        if not isinstance(data, dict):
            raise ConfigError([f"{filepath}: top level must be an object"])
        return data

    def _merge(self, data: Dict[str, Any]):
        errors = []
        for section, values in data.items():
            if section not in SECTION_RULES:
                errors.append(f"Unknown section: {section}")
            elif not isinstance(values, dict):
                errors.append(f"Invalid {section}: must be object")
            else:
                self.config[section].update(values)
                self.explicit.update((section, key) for key in values)
        if errors:
            raise ConfigError(errors)

    def _validate(self):
        all_errors = ConfigValidator.validate_all(self.config)
        if all_errors:
            raise ConfigError([msg for section in all_errors for msg in all_errors[section]])

    def set(self, section: str, key: str, value: Any):
        """Apply one override; CLI flags go through here last."""
        if section not in SECTION_RULES:
            raise ConfigError([f"Unknown section: {section}"])
        if key not in SECTION_RULES[section]:
            raise ConfigError([f"Unknown key: {section}.{key}"])
        # Integers are accepted where floats are expected.
        if SECTION_RULES[section][key][0] == "float" and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        logger.debug("override %s.%s = %r", section, key, value)
        self.config[section][key] = value
        self.explicit.add((section, key))
        errors = ConfigValidator.validate_value(section, key, value)
        if errors:
            raise ConfigError(errors)

    def as_dict(self) -> Dict[str, Dict[str, Any]]:
        return copy.deepcopy(self.config)

    def _section(self, name: str):
        return SECTION_TYPES[name](**self.config[name])

    def get_stream_spec(self) -> StreamSpec:
        return self._section("stream")

    def get_model_config(self) -> ModelConfig:
        return self._section("model")

    def get_pretrain_config(self) -> PretrainConfig:
        return self._section("pretrain")

    def is_explicit(self, section: str, key: str) -> bool:
        """Whether the file or an override set this key."""
        return (section, key) in self.explicit

    def get_train_config(self) -> TrainConfig:
        values = dict(self.config["train"])
        for key, value in TRAIN_PRESETS[self.config["run"]["preset"]].items():
            if not self.is_explicit("train", key):
                values[key] = value
        return TrainConfig(**values)

    def get_dpgd_config(self) -> DpgdConfig:
        return self._section("dpgd")

    def get_method_flags(self) -> MethodFlags:
        return self._section("flags")

    def get_inference_config(self) -> InferenceConfig:
        return self._section("inference")

    def get_run_options(self) -> RunOptions:
        return self._section("run")

    def get_settings(self) -> ExperimentSettings:
        """All sections as one settings bundle."""
        sections = {name: self._section(name) for name in SECTION_TYPES if name != "train"}
        return ExperimentSettings(train=self.get_train_config(), **sections)
