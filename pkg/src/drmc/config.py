"""Run configuration: a YAML document with data/model/train/analysis/io
sections. Unknown keys are rejected, and the parsed result always carries
every default explicitly so a resolved echo can be written next to outputs.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .errors import ConfigError
from .model import GATE_KINDS


@dataclass
class DataSection:
    centers: object = "default"  # "default" or list of CenterSpec dicts
    unknown_centers: object = "default"
    shape: list = field(default_factory=lambda: [24, 24, 24])
    n_train: int = 8
    n_test: int = 4
    seed: int = 0


@dataclass
class ModelSection:
    channels: int = 16
    n_experts: int = 3
    n_blocks: int = 3
    router_hidden: object = None
    gate: str = "relu"


@dataclass
class TrainSection:
    lr: float = 1e-4
    epochs: int = 30
    patch_size: int = 12
    patches_per_center: int = 32
    batch_per_center: int = 8
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    charbonnier_eps: float = 1e-3
    seed: int = 0
    checkpoint_every: int = 0  # 0 = only at the end


@dataclass
class AnalysisSection:
    lam: float = 1e-4
    n_batches: int = 20
    batch_size: int = 2
    groups: str = "per_block"


@dataclass
class IOSection:
    out_dir: str = "out"


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)
    io: IOSection = field(default_factory=IOSection)


_SECTIONS = {f.name: f.type for f in fields(RunConfig)}


def _fill_section(cls, raw: dict, path: str):
    allowed = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key not in allowed:
            raise ConfigError(
                f"unknown key {path}.{key}; allowed: {sorted(allowed)}"
            )
        default = getattr(cls(), key)
        if default is not None and not isinstance(default, str) and isinstance(value, str):
            raise ConfigError(f"type mismatch at {path}.{key}: got string {value!r}")
        if isinstance(default, bool) != isinstance(value, bool) and isinstance(
            default, bool
        ):
            raise ConfigError(f"type mismatch at {path}.{key}: expected boolean")
        kwargs[key] = value
    return cls(**kwargs)


def _validate(cfg: RunConfig):
    if cfg.model.gate not in GATE_KINDS:
        raise ConfigError(
            f"model.gate must be one of {list(GATE_KINDS)}, got {cfg.model.gate!r}"
        )
    for key in ("channels", "n_experts", "n_blocks"):
        if int(getattr(cfg.model, key)) < 1:
            raise ConfigError(f"model.{key} must be >= 1")
    if cfg.model.gate == "top2" and cfg.model.n_experts < 2:
        raise ConfigError("model.gate=top2 requires model.n_experts >= 2")
    if len(cfg.data.shape) != 3 or any(int(s) < 16 for s in cfg.data.shape):
        raise ConfigError(f"data.shape must be 3 dims each >= 16, got {cfg.data.shape}")
    if cfg.train.patch_size > min(int(s) for s in cfg.data.shape):
        raise ConfigError("train.patch_size exceeds data.shape")
    if cfg.analysis.groups not in ("per_block", "all"):
        raise ConfigError(
            f"analysis.groups must be 'per_block' or 'all', got {cfg.analysis.groups!r}"
        )


def parse_config_text(text: str, source: str = "<string>") -> RunConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        where = f" at line {mark.line + 1}" if mark else ""
        raise ConfigError(f"cannot parse {source}{where}: {e}") from None
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    kwargs = {}
    for key, value in raw.items():
        if key not in _SECTIONS:
            raise ConfigError(f"unknown section {key!r}; allowed: {sorted(_SECTIONS)}")
        if value is None:
            continue
        if not isinstance(value, dict):
            raise ConfigError(f"section {key!r} must be a mapping")
        factory = {f.name: f.default_factory for f in fields(RunConfig)}[key]
        kwargs[key] = _fill_section(type(factory()), value, key)
    cfg = RunConfig(**kwargs)
    _validate(cfg)
    return cfg


def parse_config(path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    return parse_config_text(p.read_text(), source=str(p))


def emit_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(asdict(cfg), sort_keys=False)


def write_resolved_config(cfg: RunConfig, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.yaml").write_text(emit_config(cfg))
