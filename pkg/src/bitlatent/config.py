"""Run configuration: a versioned key-value text file (TOML) plus overrides.

Schema (version 1): top-level ``schema`` and ``seed``; tables ``train``,
``data``, ``tokenizer``, ``model``, ``condition`` and ``sampler`` whose keys
mirror the dataclass fields below. Unknown keys are rejected. CLI overrides
are dotted keys, e.g. ``--override train.steps=10``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from .tokenizer import TokenizerConfig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    stage: int = 1
    steps: int = 100
    batch_size: int = 16
    lr: float = 1e-4
    warmup_steps: int = 0
    grad_clip: float = 1.0
    tau: float = -1.0           # < 0 means: use the stage default
    perceptual_weight: float = 0.5
    perceptual: bool = True
    log_every: int = 10
    checkpoint_every: int = 0   # 0 = final checkpoint only
    val_every: int = 0          # 0 = validate at the end only
    val_size: int = 64
    init_from: str = ""         # prior-stage or tokenizer checkpoint
    resume: str = ""

    def __post_init__(self):
        if self.stage not in (1, 2, 3):
            raise ConfigError(f"train.stage must be 1, 2 or 3, got {self.stage}")
        if self.steps < 1:
            raise ConfigError("train.steps must be >= 1")
        if self.warmup_steps > self.steps:
            raise ConfigError("train.warmup_steps must not exceed train.steps")
        if self.grad_clip <= 0:
            raise ConfigError("train.grad_clip must be > 0")
        if self.lr <= 0:
            raise ConfigError("train.lr must be > 0")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")


@dataclass(frozen=True)
class DataConfig:
    kind: str = "shapes"        # "shapes" | "idx-bits"
    images: str = ""            # IDX image file (idx-bits)
    labels: str = ""            # IDX label file (idx-bits, optional)
    grid: int = 16              # binarization grid for idx-bits
    threshold: float = 0.5
    val_count: int = 256        # held-out tail (idx-bits) / index count (shapes)

    def __post_init__(self):
        if self.kind not in ("shapes", "idx-bits"):
            raise ConfigError(f"data.kind must be 'shapes' or 'idx-bits', got {self.kind!r}")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError("data.threshold must lie in (0, 1)")


@dataclass(frozen=True)
class ModelConfig:
    tokens: int = 16
    code_bits: int = 16
    hidden: int = 256
    depth: int = 6
    heads: int = 8

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ConfigError("model.hidden must be divisible by model.heads")


@dataclass(frozen=True)
class ConditionConfig:
    mode: str = "class-label"
    num_classes: int = 10
    vocab_file: str = ""
    max_len: int = 16
    dropout: float = 0.10

    def __post_init__(self):
        if not 0.0 <= self.dropout <= 1.0:
            raise ConfigError("condition.dropout must lie in [0, 1]")


@dataclass(frozen=True)
class SamplerConfig:
    alpha: float = 7.5
    temperature: float = 0.75
    steps: int = 20
    algorithm: int = 2

    def __post_init__(self):
        if self.algorithm not in (1, 2):
            raise ConfigError("sampler.algorithm must be 1 or 2")
        if self.temperature <= 0:
            raise ConfigError("sampler.temperature must be > 0")
        if self.steps < 1:
            raise ConfigError("sampler.steps must be >= 1")
        if self.alpha < 0:
            raise ConfigError("sampler.alpha must be >= 0")


@dataclass(frozen=True)
class RunConfig:
    schema: int = SCHEMA_VERSION
    seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    condition: ConditionConfig = field(default_factory=ConditionConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)

    def __post_init__(self):
        if self.schema != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema version {self.schema}")


_SECTIONS = {f.name: f.type for f in fields(RunConfig) if f.name not in ("schema", "seed")}


def _coerce(cls, section: str, raw: dict):
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key not in known:
            raise ConfigError(f"unknown config key '{section}.{key}'")
        ftype = known[key].type
        if isinstance(value, bool):
            pass
        elif ftype in ("float", float) and isinstance(value, int):
            value = float(value)
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [{section}] section: {exc}") from exc


def config_from_dict(raw: dict) -> RunConfig:
    raw = dict(raw)
    kwargs = {}
    for key in ("schema", "seed"):
        if key in raw:
            kwargs[key] = raw.pop(key)
    for name in list(raw):
        if name not in _SECTIONS:
            raise ConfigError(f"unknown config section or key '{name}'")
        section = raw.pop(name)
        if not isinstance(section, dict):
            raise ConfigError(f"'{name}' must be a table")
        cls = {"train": TrainConfig, "data": DataConfig, "tokenizer": TokenizerConfig,
               "model": ModelConfig, "condition": ConditionConfig, "sampler": SamplerConfig}[name]
        kwargs[name] = _coerce(cls, name, section)
    try:
        return RunConfig(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def parse_override(text: str) -> tuple[list[str], object]:
    """Parse 'a.b=value'; the value uses TOML syntax with bare-string fallback."""
    key, eq, raw = text.partition("=")
    if not eq or not key.strip():
        raise ConfigError(f"override must look like key=value, got {text!r}")
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw
    return key.strip().split("."), value


def apply_overrides(raw: dict, overrides) -> dict:
    for text in overrides:
        path, value = parse_override(text)
        node = raw
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {text!r} walks through a non-table key")
        node[path[-1]] = value
    return raw


def load_config(path, overrides=()) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(apply_overrides(raw, overrides))


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, (tuple, list)):
        return "[" + ", ".join(_format_value(v) for v in value) + "]"
    raise ConfigError(f"cannot serialize config value {value!r}")


def config_to_toml(cfg: RunConfig) -> str:
    lines = [f"schema = {cfg.schema}", f"seed = {cfg.seed}"]
    for name in _SECTIONS:
        section = getattr(cfg, name)
        lines.append("")
        lines.append(f"[{name}]")
        for f in fields(section):
            lines.append(f"{f.name} = {_format_value(getattr(section, f.name))}")
    return "\n".join(lines) + "\n"


def save_config(cfg: RunConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(config_to_toml(cfg))


def flatten_config(cfg: RunConfig, prefix: str = "cfg") -> dict:
    """Dotted-key view of a config with TOML-formatted values (for headers)."""
    flat = {f"{prefix}.schema": str(cfg.schema), f"{prefix}.seed": str(cfg.seed)}
    for name in _SECTIONS:
        section = getattr(cfg, name)
        for f in fields(section):
            flat[f"{prefix}.{name}.{f.name}"] = _format_value(getattr(section, f.name))
    return flat


def config_from_flat(flat: dict, prefix: str = "cfg") -> RunConfig:
    raw: dict = {}
    for key, value in flat.items():
        if not key.startswith(prefix + "."):
            continue
        path = key[len(prefix) + 1:].split(".")
        try:
            value = tomllib.loads(f"v = {value}")["v"]
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"bad header value for {key}: {value!r}") from exc
        node = raw
        for part in path[:-1]:
            node = node.setdefault(part, {})
        node[path[-1]] = value
    return config_from_dict(raw)
