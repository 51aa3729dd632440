"""Flat ``key = value`` run configuration with dotted namespaces."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .data import SyntheticSpec
from .model import ModelConfig
from .training import DecodeConfig, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    train: str = "train.tsv"
    valid: str = "valid.tsv"
    test: str = "test.tsv"
    vocab_size: int = 7000


@dataclass
class EvalConfig:
    blacklist: str = ""


SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "data": DataConfig,
    "decode": DecodeConfig,
    "synth": SyntheticSpec,
    "eval": EvalConfig,
}


def _coerce(raw: str, typ, key: str):
    typ = typ if isinstance(typ, str) else typ.__name__
    try:
        if typ == "bool":
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if typ == "int":
            value = float(raw)
            if value != int(value):
                raise ValueError(raw)
            return int(value)
        if typ == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {typ}") from None
    return raw.strip()


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    synth: SyntheticSpec = field(default_factory=SyntheticSpec)
    eval: EvalConfig = field(default_factory=EvalConfig)
    base_dir: Path = field(default_factory=Path.cwd, compare=False)

    @staticmethod
    def keys() -> list[str]:
        return [f"{s}.{f.name}" for s, cls in SECTIONS.items() for f in dataclasses.fields(cls)]

    def set(self, key: str, raw) -> None:
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigError(f"unknown config key {key!r}")
        types = {f.name: f.type for f in dataclasses.fields(SECTIONS[section])}
        if name not in types:
            raise ConfigError(f"unknown config key {key!r}")
        value = raw if not isinstance(raw, str) else _coerce(raw, types[name], key)
        setattr(getattr(self, section), name, value)

    def get(self, key: str):
        section, _, name = key.partition(".")
        return getattr(getattr(self, section), name)

    def update(self, pairs) -> "RunConfig":
        for k, v in (pairs.items() if isinstance(pairs, dict) else pairs):
            self.set(k, v)
        return self

    def path(self, value: str) -> Path:
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    def dumps(self) -> str:
        lines = []
        for section in SECTIONS:
            for f in dataclasses.fields(SECTIONS[section]):
                value = getattr(getattr(self, section), f.name)
                if f.name in ("train", "valid", "test") and section == "data":
                    value = self.path(value)
                elif section == "eval" and value:
                    value = self.path(value)
                lines.append(f"{section}.{f.name} = {value}")
        return "\n".join(lines) + "\n"

    def copy(self) -> "RunConfig":
        return RunConfig(*(dataclasses.replace(getattr(self, s)) for s in SECTIONS),
                         base_dir=self.base_dir)

    def validate(self) -> "RunConfig":
        try:
            self.model.validate()
            self.train.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.decode.beam < 1 or self.decode.max_len < 1:
            raise ConfigError("decode.beam and decode.max_len must be >= 1")
        return self


def parse_pairs(text: str, source: str = "<config>") -> list[tuple[str, str]]:
    pairs = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        k, v = line.split("=", 1)
        pairs.append((k.strip(), v.strip()))
    return pairs


def load_config(path=None, overrides=()) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        cfg.base_dir = path.resolve().parent
        cfg.update(parse_pairs(text, str(path)))
    cfg.update(overrides)
    return cfg


@dataclass
class SweepSpec:
    axes: list[tuple[str, list[str]]]

    @classmethod
    def parse(cls, text: str) -> "SweepSpec":
        axes = []
        known = set(RunConfig.keys())
        for k, v in parse_pairs(text, "<sweep>"):
            if k not in known:
                raise ConfigError(f"unknown sweep key {k!r}")
            values = [x.strip() for x in v.split(",") if x.strip()]
            if not values:
                raise ConfigError(f"sweep key {k!r} has no candidate values")
            axes.append((k, values))
        return cls(axes)
