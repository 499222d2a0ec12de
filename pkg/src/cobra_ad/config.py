"""Experiment configuration: sectioned YAML with strict keys and dotted overrides."""
from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .attacks import AttackConfig
from .augment import TransformSpec, default_bank
from .crafter import CrafterConfig
from .data import ProtocolSpec
from .evalkit import SCORE_VARIANTS, Condition
from .nets import ModelConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


def _default_bank_dicts() -> list[dict]:
    return [t.to_dict() for t in default_bank()]


def _default_conditions() -> list[dict]:
    return [{"name": "clean"},
            {"name": "pgd", "attack": {"epsilon": 4 / 255, "steps": 100, "restarts": 3}}]


@dataclass
class CrafterSection(CrafterConfig):
    bank: list = field(default_factory=_default_bank_dicts)

    def __post_init__(self):
        self.bank = [TransformSpec.from_dict(b).to_dict() if isinstance(b, dict) else TransformSpec(b).to_dict()
                     for b in self.bank]
        if len(self.bank) < 2:
            raise ConfigError("the transform bank needs at least two entries")

    def crafter_config(self) -> CrafterConfig:
        return CrafterConfig(**{f.name: getattr(self, f.name) for f in dataclasses.fields(CrafterConfig)})

    def transform_bank(self) -> list[TransformSpec]:
        return [TransformSpec.from_dict(b) for b in self.bank]


@dataclass
class EvalSection:
    conditions: list = field(default_factory=_default_conditions)
    score_variants: list = field(default_factory=lambda: ["A"])
    batch_size: int = 256
    transcripts: bool = True

    def __post_init__(self):
        for c in self.conditions:
            if not isinstance(c, dict):
                raise ConfigError(f"eval condition must be a mapping, got {c!r}")
            self.condition(c)
        bad = [v for v in self.score_variants if v not in SCORE_VARIANTS]
        if bad:
            raise ConfigError(f"unknown score variants {bad}; choose from {SCORE_VARIANTS}")

    @staticmethod
    def condition(d: dict) -> Condition:
        unknown = set(d) - {"name", "attack", "queries"}
        if unknown:
            raise ConfigError(f"unknown condition keys {sorted(unknown)}")
        attack = d.get("attack")
        if attack is not None:
            attack = _build(AttackConfig, attack, "eval.conditions.attack")
        return Condition(d.get("name", "clean"), attack, int(d.get("queries", 0)))

    def build_conditions(self) -> list[Condition]:
        return [self.condition(c) for c in self.conditions]


@dataclass
class ExperimentConfig:
    run_id: str = "run"
    output_dir: str = "runs"
    data: ProtocolSpec = field(default_factory=ProtocolSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    crafter: CrafterSection = field(default_factory=CrafterSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSection = field(default_factory=EvalSection)

    def __post_init__(self):
        # the network input always follows the data section
        shape = (self.data.channels, self.data.resolution, self.data.resolution)
        if tuple(self.model.input_shape) != shape:
            self.model = dataclasses.replace(self.model, input_shape=shape)

    @property
    def run_dir(self) -> Path:
        return Path(self.output_dir) / self.run_id

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


def _plain(v):
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


def _is_dataclass_type(tp) -> bool:
    return isinstance(tp, type) and dataclasses.is_dataclass(tp)


def _unwrap_optional(tp):
    if typing.get_origin(tp) in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if len(args) == 1:
            return args[0]
    return tp


def _build(cls, values: Any, path: str):
    """Construct dataclass ``cls`` from a mapping, rejecting unknown keys at any depth."""
    if values is None:
        values = {}
    if not isinstance(values, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(values).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for k, v in values.items():
        tp = _unwrap_optional(hints[k])
        sub = f"{path}.{k}" if path else k
        if _is_dataclass_type(tp) and (isinstance(v, dict) or v is None):
            kwargs[k] = _build(tp, v, sub)
        else:
            kwargs[k] = v
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path or 'config'}: {e}") from e


def _set_dotted(d: dict, dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    cur = d
    for k in keys[:-1]:
        nxt = cur.get(k)
        if nxt is None:
            nxt = cur[k] = {}
        if not isinstance(nxt, dict):
            raise ConfigError(f"override {dotted}: {k} is not a section")
        cur = nxt
    cur[keys[-1]] = value


def parse_overrides(items: list[str]) -> list[tuple[str, Any]]:
    """Parse ``section.key=value`` strings; values are read as YAML scalars or lists."""
    out = []
    for item in items:
        key, sep, raw = item.lstrip("-").partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        try:
            out.append((key, yaml.safe_load(raw)))
        except yaml.YAMLError as e:
            raise ConfigError(f"override {item!r}: {e}") from e
    return out


def load_config(path=None, overrides: list[str] | None = None) -> ExperimentConfig:
    raw: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"config file not found: {p}")
        try:
            raw = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"{p}: {e}") from e
    for key, value in parse_overrides(overrides or []):
        _set_dotted(raw, key, value)
    return _build(ExperimentConfig, raw, "")


def config_from_dict(d: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, d, "")
