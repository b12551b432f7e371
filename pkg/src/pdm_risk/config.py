"""Line-oriented ``key = value`` config files and their mapping onto the dataclass configs.

Keys may be qualified (``model.hidden_size``) or bare when the name is unique
across sections; a bare ``seed`` sets the global seed. Precedence is
defaults < config file < command-line flags.
"""

from __future__ import annotations

import ast
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .nn import DESK_MODEL, ModelConfig
from .pipeline import BoostSchedule, EnsembleConfig, RunOptions
from .synth import SynthConfig

SECTIONS = {
    "synth": SynthConfig,
    "model": ModelConfig,
    "boost": BoostSchedule,
    "ensemble": EnsembleConfig,
    "run": RunOptions,
}


def parse_value(text: str):
    text = text.strip()
    low = text.lower()
    if low in ("none", "null", ""):
        return None
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if "," in text and not text.startswith(("[", "(")):
        return tuple(parse_value(p) for p in text.split(",") if p.strip())
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def read_config_file(path) -> dict[str, object]:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        out[key] = parse_value(value)
    return out


def _field_names(cls) -> set[str]:
    return {f.name for f in fields(cls)}


@dataclass
class Settings:
    seed: int = 7
    synth: dict = field(default_factory=dict)
    model: dict = field(default_factory=lambda: dict(DESK_MODEL))
    boost: dict = field(default_factory=dict)
    ensemble: dict = field(default_factory=dict)
    run: dict = field(default_factory=dict)

    def update(self, values: dict[str, object]) -> None:
        for key, value in values.items():
            if value is None and "." not in key and key != "seed":
                continue
            if key == "seed":
                self.seed = int(value)
                continue
            if "." in key:
                section, name = key.split(".", 1)
                if section not in SECTIONS or name not in _field_names(SECTIONS[section]):
                    raise ConfigError(f"unknown config key {key!r}")
                getattr(self, section)[name] = value
                continue
            owners = [s for s, cls in SECTIONS.items() if key in _field_names(cls)]
            if not owners:
                raise ConfigError(f"unknown config key {key!r}")
            if len(owners) > 1:
                raise ConfigError(f"ambiguous key {key!r}; qualify it as one of {[f'{o}.{key}' for o in owners]}")
            getattr(self, owners[0])[key] = value

    def synth_config(self) -> SynthConfig:
        return SynthConfig(**{"seed": self.seed, **self.synth})

    def model_config(self, input_size: int = 1) -> ModelConfig:
        return ModelConfig(**{"seed": self.seed, "input_size": input_size, **self.model})

    def schedule(self) -> BoostSchedule:
        values = dict(self.boost)
        if "depths" in values:
            depths = values["depths"]
            values["depths"] = tuple(depths) if isinstance(depths, (tuple, list)) else (int(depths),)
            values.setdefault("n_iterations", len(values["depths"]))
        elif "n_iterations" in values:
            n = int(values["n_iterations"])
            values["depths"] = tuple(2 * (k + 1) for k in range(n))
        return BoostSchedule(**values)

    def ensemble_config(self) -> EnsembleConfig:
        return EnsembleConfig(**{"base_seed": self.seed, **self.ensemble})

    def run_options(self) -> RunOptions:
        return RunOptions(**self.run)

    def as_dict(self) -> dict:
        return {"seed": self.seed, **{s: dict(getattr(self, s)) for s in SECTIONS}}
