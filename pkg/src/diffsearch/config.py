"""Run configuration: schema-validated dataclasses, file loading, overrides.

Unknown keys are rejected; every artifact records the config hash so runs
stay traceable.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path

import yaml

from .errors import ConfigError
from .schedule import NoiseConfig

CONFIG_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 64
    levels: int = 3
    stem_width: int = 24
    pool_size: int = 7
    num_heads: int = 4
    time_dim: int = 128
    n_train: int = 300
    n_test: int = 300
    use_self_attention: bool = True
    use_dynamic_conv: bool = True
    use_cross_attention: bool = True
    cascaded: bool = True
    cascade_concat: bool = True

    def __post_init__(self):
        if self.pool_size < 1:
            raise ConfigError(f"pool_size must be >= 1, got {self.pool_size}")
        if self.channels % self.num_heads:
            raise ConfigError("channels must be divisible by num_heads")
        if self.n_train < 1 or self.n_test < 1:
            raise ConfigError("set sizes must be positive")


@dataclass(frozen=True)
class LossConfig:
    cls: float = 2.0
    l1: float = 5.0
    giou: float = 2.0
    reid: float = 5.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0

    def __post_init__(self):
        if not 0 < self.focal_alpha < 1:
            raise ConfigError(f"focal_alpha must lie in (0, 1), got {self.focal_alpha}")
        if self.focal_gamma < 0:
            raise ConfigError(f"focal_gamma must be >= 0, got {self.focal_gamma}")


@dataclass(frozen=True)
class SamplerConfig:
    """Iterative inference settings; the timestep grid is derived from T."""

    steps: int = 8
    eta: float = 0.0
    renewal: bool = False
    renewal_thresh: float = 0.5
    score_thresh: float = 0.5
    nms_iou: float = 0.5
    nms: bool = True

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if not 0 <= self.score_thresh <= 1 or not 0 <= self.nms_iou <= 1:
            raise ConfigError("thresholds must lie in [0, 1]")

    def time_grid(self, T: int) -> tuple:
        """K timesteps T, T-d, ..., d with d = T/K, rounded to integers."""
        delta = T / self.steps
        grid = [max(1, round(T - k * delta)) for k in range(self.steps)]
        if len(set(grid)) != len(grid):
            raise ConfigError(f"steps={self.steps} too large for T={T}: grid collides")
        return tuple(grid)


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 8
    lr: float = 2.5e-5
    weight_decay: float = 1e-4
    # step decay x0.1 at these fractions of total iterations
    milestones: tuple = (0.78, 0.93)
    grad_clip: float = 1.0
    image_size: int = 0  # 0 = keep the native scene size
    checkpoint_every: int = 0  # 0 = final checkpoint only
    log_every: int = 50

    def __post_init__(self):
        if self.iterations < 1 or self.batch_size < 1:
            raise ConfigError("iterations and batch_size must be positive")


@dataclass(frozen=True)
class SynthConfig:
    """Synthetic benchmark generator parameters."""

    n_identities: int = 20
    train_scenes: int = 500
    test_scenes: int = 100
    scene_size: int = 64
    persons_min: int = 1
    persons_max: int = 3
    person_height: tuple = (14, 30)
    occlusion_rate: float = 0.1
    jitter: float = 0.15
    unlabeled_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_identities < 2:
            raise ConfigError("need at least two identities")
        if not 1 <= self.persons_min <= self.persons_max:
            raise ConfigError("invalid persons-per-scene range")
        if self.person_height[1] >= self.scene_size:
            raise ConfigError("persons taller than the scene are unsatisfiable")


@dataclass(frozen=True)
class EvalConfig:
    cmc_ks: tuple = (1, 5, 10)
    gallery_sizes: tuple = ()
    per_step: bool = False


@dataclass(frozen=True)
class TeacherConfig:
    kind: str = "oracle"  # oracle | crop_encoder
    seed: int = 0
    epochs: int = 8

    def __post_init__(self):
        if self.kind not in ("oracle", "crop_encoder"):
            raise ConfigError(f"unknown teacher kind {self.kind!r}")


@dataclass(frozen=True)
class DataConfig:
    root: str = ""
    format: str = "native"

    def __post_init__(self):
        if self.format not in ("native", "cuhk_sysu", "prw"):
            raise ConfigError(f"unknown dataset format {self.format!r}")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    version: int = CONFIG_VERSION
    data: DataConfig = field(default_factory=DataConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    diffusion: NoiseConfig = field(default_factory=NoiseConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)


def _build(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        target = hints.get(name)
        sub = path + "." + name if path else name
        if isinstance(target, type) and is_dataclass(target):
            kwargs[name] = _build(target, value, sub)
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "")


def config_to_dict(cfg) -> dict:
    out = {}
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if is_dataclass(value):
            out[f.name] = config_to_dict(value)
        elif isinstance(value, tuple):
            out[f.name] = list(value)
        else:
            out[f.name] = value
    return out


def load_config(path: str | Path | None = None, overrides: list[str] = ()) -> RunConfig:
    """Load a YAML/JSON config file and apply dotted key=value overrides."""
    data: dict = {}
    if path is not None:
        text = Path(path).read_text()
        loaded = yaml.safe_load(text)
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: config root must be a mapping")
        data = loaded
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        dotted, raw = item.split("=", 1)
        keys = dotted.split(".")
        node = data
        for key in keys[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r} descends into a non-mapping")
        node[keys[-1]] = yaml.safe_load(raw)
    return config_from_dict(data)


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(config_to_dict(cfg), indent=1, sort_keys=True))


def config_hash(cfg: RunConfig) -> str:
    blob = json.dumps(config_to_dict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def replace_section(cfg: RunConfig, **sections) -> RunConfig:
    """Return a copy of cfg with whole sections replaced."""
    return dataclasses.replace(cfg, **sections)
