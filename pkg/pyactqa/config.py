"""
Module for run configuration files.

A config file is TOML or JSON (by extension) with the tables [model], [train], [synth] and [qa], each mirroring the
matching settings dataclass. [train] may name a `preset`; its other keys override the preset. A top-level
`freeze_below` names the highest layer to keep fixed while training.
"""
import json
import logging
import tomllib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from pyactqa.dataset import SynthSpec
from pyactqa.exceptions import ConfigurationException, FileException
from pyactqa.model import ModelConfig
from pyactqa.qa import QaConfig
from pyactqa.trainer import TrainConfig, preset

logger = logging.getLogger("config")

SECTIONS = {"model": ModelConfig, "train": TrainConfig, "synth": SynthSpec, "qa": QaConfig}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)
    qa: QaConfig = field(default_factory=QaConfig)
    freeze_below: Optional[str] = None

    def validate(self) -> "RunConfig":
        for section in SECTIONS:
            getattr(self, section).validate()
        return self

    def with_seed(self, seed: int) -> "RunConfig":
        """
        Copy with every seed replaced by :param seed:
        """
        return RunConfig(replace(self.model, seed=seed), replace(self.train, seed=seed),
                         replace(self.synth, seed=seed), replace(self.qa, seed=seed), self.freeze_below)

    def to_dict(self) -> dict:
        record = {section: asdict(getattr(self, section)) for section in SECTIONS}
        record["freeze_below"] = self.freeze_below
        return record


def read_config_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileException("Invalid file path specified!", path)

    try:
        if path.suffix == ".toml":
            with open(path, "rb") as file:
                return tomllib.load(file)
        if path.suffix == ".json":
            return json.loads(path.read_text(encoding="utf-8"))
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as error:
        raise ConfigurationException(f"Cannot parse {path.name}: {error}", path) from error

    raise ConfigurationException(f"Config files must be .toml or .json, got {path.suffix or 'no extension'}", path)


def _section(name: str, values) -> object:
    cls = SECTIONS[name]
    if not isinstance(values, dict):
        raise ConfigurationException(f"[{name}] must be a table", name)

    values = dict(values)
    base = cls()
    if name == "train" and "preset" in values:
        base = preset(values.pop("preset"))

    unknown = set(values) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigurationException(f"Unknown [{name}] settings {sorted(unknown)}", sorted(unknown))

    try:
        return replace(base, **values).validate()
    except TypeError as error:
        raise ConfigurationException(f"Invalid [{name}] settings: {error}", name) from error


def parse_config(values: dict) -> RunConfig:
    """
    Build a validated RunConfig from a parsed config document. Missing tables take their defaults; a [model] table
    without `num_classes` follows [synth].
    """
    unknown = set(values) - set(SECTIONS) - {"freeze_below"}
    if unknown:
        raise ConfigurationException(f"Unknown config tables {sorted(unknown)}", sorted(unknown))

    sections = {name: _section(name, values.get(name, {})) for name in SECTIONS}
    if "num_classes" not in values.get("model", {}):
        sections["model"] = replace(sections["model"], num_classes=sections["synth"].num_classes).validate()

    return RunConfig(**sections, freeze_below=values.get("freeze_below"))


def load_config(path=None, seed: Optional[int] = None) -> RunConfig:
    """
    :param path: Config file, or None for the defaults
    :param seed: Overrides every seed in the file
    """
    config = parse_config(read_config_file(path) if path is not None else {})
    if seed is not None:
        config = config.with_seed(seed)

    logger.debug("Resolved config: %s", config.to_dict())
    return config
