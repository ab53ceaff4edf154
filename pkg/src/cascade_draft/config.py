"""Run configuration: a flat ``section.key = value`` text format.

Example::

    seed = 3
    model.hidden_dim = 64
    drafter.depth = 4      # levels in the cascade
    train.steps = 2000
    paths.target = runs/target.fegl

Unknown sections or keys are rejected, and :meth:`RunConfig.dump` writes a
fully resolved file that parses back to an equal configuration.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .drafter import DrafterConfig
from .engine import GenerationConfig
from .numerics import ParameterError
from .target_model import ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class PretrainConfig:
    """Target pre-training on the synthetic successor language (steps=0 keeps random init)."""
    steps: int = 600
    batch_size: int = 16
    seq_len: int = 33
    lr: float = 3e-3
    language_seed: int = 0


@dataclass
class DataConfig:
    n_examples: int = 256
    n_prompts: int = 256
    prompt_len: int = 8
    continuation_len: int = 40
    align: str = "high"


@dataclass
class EvalConfig:
    """Held-out prompt set used by ``generate`` (when no prompt file is given) and ``bench``."""
    n_prompts: int = 20
    prompt_len: int = 8
    prompt_seed: int = 777


@dataclass
class LosslessConfig:
    n_prompts: int = 100
    max_new_tokens: int = 64
    mc_trials: int = 200_000


@dataclass
class PathsConfig:
    target: str = "target.fegl"
    drafter: str = "drafter.fegl"
    data: str = "train.fegd"
    prompts: str = ""
    out_dir: str = "."


SECTIONS = {
    "model": ModelConfig,
    "drafter": DrafterConfig,
    "train": TrainConfig,
    "gen": GenerationConfig,
    "pretrain": PretrainConfig,
    "data": DataConfig,
    "eval": EvalConfig,
    "lossless": LosslessConfig,
    "paths": PathsConfig,
}


@dataclass
class RunConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    drafter: DrafterConfig = field(default_factory=DrafterConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    gen: GenerationConfig = field(default_factory=GenerationConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    lossless: LosslessConfig = field(default_factory=LosslessConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    @classmethod
    def parse(cls, text: str, overrides: dict | None = None) -> "RunConfig":
        values: dict[str, dict[str, str]] = {}
        seed = None
        items = []
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            items.append((lineno, key, value))
        for key, value in (overrides or {}).items():
            items.append((0, key, str(value)))
        for lineno, key, value in items:
            where = f"line {lineno}" if lineno else "override"
            if key == "seed":
                seed = _coerce("int", value, key)
                continue
            section, _, name = key.partition(".")
            if section not in SECTIONS:
                raise ConfigError(f"{where}: unknown section in key {key!r}")
            known = {f.name: f.type for f in dataclasses.fields(SECTIONS[section])}
            if name not in known:
                raise ConfigError(f"{where}: unknown key {key!r}")
            values.setdefault(section, {})[name] = _coerce(known[name], value, key)
        kwargs = {}
        for section, kind in SECTIONS.items():
            try:
                kwargs[section] = kind(**values.get(section, {}))
            except (ValueError, ParameterError) as exc:
                raise ConfigError(f"[{section}] {exc}") from exc
        return cls(seed=0 if seed is None else seed, **kwargs)

    @classmethod
    def load(cls, path, overrides: dict | None = None) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.parse(fh.read(), overrides)

    def dump(self) -> str:
        lines = [f"seed = {self.seed}"]
        for section in SECTIONS:
            obj = getattr(self, section)
            for f in dataclasses.fields(obj):
                lines.append(f"{section}.{f.name} = {_format(getattr(obj, f.name))}")
        return "\n".join(lines) + "\n"

    def check_compatible(self) -> None:
        """Cross-section checks that single dataclasses cannot make on their own."""
        if self.drafter.hidden_dim != self.model.hidden_dim:
            raise ConfigError(f"drafter.hidden_dim {self.drafter.hidden_dim} != model.hidden_dim "
                              f"{self.model.hidden_dim}; the LM head is shared")
        if self.gen.draft_depth > self.drafter.depth:
            raise ConfigError(f"gen.draft_depth {self.gen.draft_depth} exceeds drafter.depth {self.drafter.depth}")


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(repr(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(kind: str, value: str, key: str):
    kind = kind.replace(" ", "")
    try:
        if kind.endswith("|None"):
            if value.lower() == "none":
                return None
            kind = kind[:-len("|None")]
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
        if kind == "bool":
            low = value.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        if kind == "str":
            return value
        if kind.startswith("tuple"):
            return tuple(float(v) for v in value.split(","))
    except ValueError:
        raise ConfigError(f"{key}: cannot read {value!r} as {kind}") from None
    raise ConfigError(f"{key}: unsupported field type {kind}")
