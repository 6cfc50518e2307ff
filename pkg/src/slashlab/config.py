"""Experiment configuration: flat key=value INI with strict sections.

One file drives a whole run: model dimensions, kernel variant, losses,
optimizer schedule, dataset recipe, and run-loop cadence. Unknown sections
or keys are errors, never silently ignored, and command-line overrides go
through the same coercion as file values so the resolved config echoed into
the run manifest is the single source of truth.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from . import model as md
from . import training as tr
from .errors import ConfigError


@dataclass(frozen=True)
class DataConfig:
    num_samples: int = 512
    val_samples: int = 64
    seed: int = 0
    difficulty: str = "stripes"
    image_fraction: float = 0.10
    object_fraction: float = 0.75
    annotation_seed: int = 0
    dataset_dir: str = ""   # when set, load this directory instead of generating


@dataclass(frozen=True)
class RunConfig:
    steps: int = 1000
    batch_size: int = 16
    eval_every: int = 0
    checkpoint_every: int = 0
    eval_samples: int = 100

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError("steps must be nonnegative")
        for name in ("eval_every", "checkpoint_every"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")


@dataclass
class ExperimentConfig:
    model: md.ModelConfig = field(default_factory=md.ModelConfig)
    loss: tr.LossConfig = field(default_factory=tr.LossConfig)
    optimizer: tr.OptimizerConfig = field(default_factory=tr.OptimizerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def to_dict(self) -> dict:
        return {"model": md.config_to_dict(self.model),
                "loss": dataclasses.asdict(self.loss),
                "optimizer": dataclasses.asdict(self.optimizer),
                "data": dataclasses.asdict(self.data),
                "run": dataclasses.asdict(self.run)}


# INI key -> ModelConfig/KernelVariant constructor argument. Everything else
# maps by identical name.
_MODEL_KEYS = {"h": "H", "w": "W", "k": "K", "d_slot": "D_slot",
               "d_enc": "D_enc", "d": "D", "t": "T",
               "ippe_enabled": "ippe_enabled",
               "ippe_every_iteration": "ippe_every_iteration",
               "ws_init_enabled": "ws_init_enabled"}
_KERNEL_KEYS = ("kind", "size", "tau", "gaussian_sigma")

_BOOL_STRINGS = {"true": True, "1": True, "yes": True, "on": True,
                 "false": False, "0": False, "no": False, "off": False}


def _coerce(section: str, key: str, raw, default):
    if not isinstance(raw, str):
        return raw
    kind = type(default)
    try:
        if kind is bool:
            try:
                return _BOOL_STRINGS[raw.strip().lower()]
            except KeyError:
                raise ValueError(f"not a boolean: {raw!r}") from None
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key} = {raw!r}: {exc}") from None


def _defaults() -> dict:
    """The full schema as {section: {key: default_value}}."""
    m = md.ModelConfig()
    kv = md.KernelVariant()
    return {
        "model": {k: getattr(m, attr) for k, attr in _MODEL_KEYS.items()},
        "kernel": {k: getattr(kv, k) for k in _KERNEL_KEYS},
        "loss": dataclasses.asdict(tr.LossConfig()),
        "optimizer": dataclasses.asdict(tr.OptimizerConfig()),
        "data": dataclasses.asdict(DataConfig()),
        "run": dataclasses.asdict(RunConfig()),
    }


def _build(values: dict) -> ExperimentConfig:
    kernel = md.KernelVariant(**values["kernel"])
    model = md.ModelConfig(kernel_variant=kernel,
                           **{attr: values["model"][k]
                              for k, attr in _MODEL_KEYS.items()})
    return ExperimentConfig(model=model,
                            loss=tr.LossConfig(**values["loss"]),
                            optimizer=tr.OptimizerConfig(**values["optimizer"]),
                            data=DataConfig(**values["data"]),
                            run=RunConfig(**values["run"]))


def load_config(path=None, overrides=None) -> ExperimentConfig:
    """Defaults <- INI file (optional) <- override pairs (optional)."""
    values = _defaults()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"no config file at {path}")
        parser = configparser.ConfigParser()
        try:
            parser.read_string(path.read_text(), source=str(path))
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
        for section in parser.sections():
            if section not in values:
                raise ConfigError(
                    f"unknown section [{section}] in {path}; "
                    f"known: {sorted(values)}")
            for key, raw in parser.items(section):
                if key not in values[section]:
                    raise ConfigError(
                        f"unknown key {key!r} in [{section}] of {path}; "
                        f"known: {sorted(values[section])}")
                values[section][key] = _coerce(section, key, raw,
                                               values[section][key])
    for section, key, raw in parse_overrides(overrides or []):
        if section not in values:
            raise ConfigError(f"unknown section [{section}] in override; "
                              f"known: {sorted(values)}")
        if key not in values[section]:
            raise ConfigError(f"unknown key {key!r} in [{section}] override; "
                              f"known: {sorted(values[section])}")
        values[section][key] = _coerce(section, key, raw, values[section][key])
    return _build(values)


def parse_overrides(pairs) -> list:
    """["section.key=value", ...] -> [(section, key, value), ...]."""
    out = []
    for pair in pairs:
        head, sep, value = pair.partition("=")
        if not sep:
            raise ConfigError(f"override {pair!r} is not section.key=value")
        section, dot, key = head.partition(".")
        if not dot or not section or not key:
            raise ConfigError(f"override {pair!r} is not section.key=value")
        out.append((section.strip(), key.strip(), value.strip()))
    return out


def to_ini(config: ExperimentConfig) -> str:
    """Resolved config as INI text (the echo written next to run outputs)."""
    values = {
        "model": {k: getattr(config.model, attr) for k, attr in _MODEL_KEYS.items()},
        "kernel": {k: getattr(config.model.kernel_variant, k) for k in _KERNEL_KEYS},
        "loss": dataclasses.asdict(config.loss),
        "optimizer": dataclasses.asdict(config.optimizer),
        "data": dataclasses.asdict(config.data),
        "run": dataclasses.asdict(config.run),
    }
    lines = []
    for section, body in values.items():
        lines.append(f"[{section}]")
        for key, v in body.items():
            lines.append(f"{key} = {v}")
        lines.append("")
    return "\n".join(lines)
