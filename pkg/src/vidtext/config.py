"""Experiment configuration: sectioned key-value files plus flag overrides.

File format is INI-style::

    [train]
    batch_size = 16
    [flags]
    fusion = true

Every key is unique across sections, so command-line overrides can use the
bare key (``--batch-size 8``). Unknown keys are errors.
"""
import configparser
import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from vidtext.errors import ConfigError
from vidtext.model import ModelConfig
from vidtext.objectives import DistillConfig


@dataclass(frozen=True)
class DataConfig:
    n_angles: int = 4
    n_blob_counts: int = 4
    n_shades: int = 4
    n_concepts: int = 0  # 0: every attribute combination
    samples_per_concept: int = 1
    synonyms: int = 2
    jitter: float = 0.03
    data_seed: int = 0
    holdout_fraction: float = 0.0


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    epochs: int = 100
    K: int = 3
    lr_base: float = 1e-3
    lr_new: float = 3e-4
    seed: int = 0
    eval_every: int = 10
    stop_r1: float = 0.0  # 0 disables early stopping
    literal_vtm: bool = False


@dataclass(frozen=True)
class Flags:
    temporal: bool = False
    distill: bool = False
    fusion: bool = False
    dual_softmax: bool = False

    def label(self):
        parts = ["Base"]
        if self.temporal:
            parts.append("Temp")
        if self.distill:
            parts.append("M&D")
        if self.fusion:
            parts.append("Fusion")
        if self.dual_softmax:
            parts.append("Dual")
        return "+".join(parts)


@dataclass(frozen=True)
class Paths:
    out_dir: str = "runs/default"
    dataset: str = ""


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    flags: Flags = field(default_factory=Flags)
    paths: Paths = field(default_factory=Paths)

    def __post_init__(self):
        t = self.train
        if t.K < 1 or t.K > t.batch_size - 1:
            raise ConfigError("K", f"must satisfy 1 <= K <= batch_size - 1 (K={t.K}, batch_size={t.batch_size})")
        if t.batch_size < 2:
            raise ConfigError("batch_size", "must be >= 2")
        for key in ("lr_base", "lr_new"):
            if getattr(t, key) <= 0:
                raise ConfigError(key, "learning rates must be positive")
        if t.epochs < 1:
            raise ConfigError("epochs", "must be >= 1")
        if not 0.0 <= self.data.holdout_fraction < 1.0:
            raise ConfigError("holdout_fraction", "must be in [0, 1)")

    def to_dict(self):
        return {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}

    def replace(self, **sections):
        return dataclasses.replace(self, **sections)

    def with_flags(self, **flags):
        return dataclasses.replace(self, flags=dataclasses.replace(self.flags, **flags))


SECTIONS = {
    "model": ModelConfig,
    "data": DataConfig,
    "distill": DistillConfig,
    "train": TrainConfig,
    "flags": Flags,
    "paths": Paths,
}


def _key_index():
    index = {}
    for section, cls in SECTIONS.items():
        for f in dataclasses.fields(cls):
            assert f.name not in index, f"duplicate config key {f.name}"
            index[f.name] = (section, f)
    return index


KEYS = _key_index()


def field_type(cls, f):
    hint = typing.get_type_hints(cls)[f.name]
    if isinstance(hint, types.UnionType) or typing.get_origin(hint) is typing.Union:
        hint = next(a for a in typing.get_args(hint) if a is not type(None))
    return hint


def _coerce(key, raw, typ):
    if not isinstance(raw, str):
        raw_val = raw
        if typ is bool and isinstance(raw_val, bool) or typ in (int, float, str) and isinstance(raw_val, typ):
            return raw_val
        raw = str(raw)
    text = raw.strip()
    try:
        if typ is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(key, f"expected {typ.__name__}, got {raw!r}") from None


def parse_config(path=None, overrides=None):
    """Build an ExperimentConfig from an optional file and flag overrides.

    ``overrides`` maps bare keys (or ``section.key``) to string values and
    wins over the file.
    """
    values = {s: {} for s in SECTIONS}
    if path is not None:
        text = Path(path).read_text()
        parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
        parser.optionxform = str
        try:
            parser.read_string(text, source=str(path))
        except configparser.Error as exc:
            raise ConfigError("<file>", str(exc)) from exc
        for section in parser.sections():
            if section not in SECTIONS:
                raise ConfigError(section, "unknown section")
            for key, raw in parser.items(section):
                _assign(values, key, raw, section)
    for key, raw in (overrides or {}).items():
        section = None
        if "." in key:
            section, key = key.split(".", 1)
        _assign(values, key.replace("-", "_"), raw, section)

    built = {}
    for section, cls in SECTIONS.items():
        try:
            built[section] = cls(**values[section])
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(section, str(exc)) from exc
    return ExperimentConfig(**built)


def _assign(values, key, raw, section=None):
    if key not in KEYS:
        raise ConfigError(key, "unknown key")
    owner, f = KEYS[key]
    if section is not None and section != owner:
        raise ConfigError(key, f"belongs in section [{owner}], not [{section}]")
    values[owner][key] = _coerce(key, raw, field_type(SECTIONS[owner], f))


def config_from_dict(d):
    """Inverse of ``ExperimentConfig.to_dict``."""
    overrides = {}
    for section, entries in d.items():
        if section not in SECTIONS:
            raise ConfigError(section, "unknown section")
        for key, value in entries.items():
            overrides[f"{section}.{key}"] = value
    return parse_config(None, overrides)


def dump_config(cfg):
    """Render a config as the sectioned text format."""
    lines = []
    for section, entries in cfg.to_dict().items():
        lines.append(f"[{section}]")
        lines += [f"{k} = {v}" for k, v in entries.items()]
        lines.append("")
    return "\n".join(lines)
