"""Run configuration: nested dataclasses with JSON round-trip and a stable hash."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from .diffusion import SamplerConfig
from .gate import GateLossWeights, SlicedAlignConfig
from .unet import UNetConfig


@dataclass
class DataConfig:
    n_subjects: int = 200
    image_size: int = 32
    split_ratios: tuple = (0.80, 0.05, 0.15)
    min_gap: float = 5.0          # evaluation pairs need at least this age gap

    def __post_init__(self):
        self.split_ratios = tuple(self.split_ratios)
        if self.n_subjects < 3:
            raise ValueError("need at least 3 subjects for three splits")
        if self.image_size % 4 or self.image_size < 8:
            raise ValueError("image size must be a multiple of 4 and >= 8")


@dataclass
class GateConfig:
    latent_channels: int = 4
    width: int = 16
    iterations: int = 2000
    batch_size: int = 8
    lr: float = 1e-4
    checkpoint_every: int = 500
    weights: GateLossWeights = field(default_factory=GateLossWeights)
    sliced: SlicedAlignConfig = field(default_factory=SlicedAlignConfig)


@dataclass
class ScheduleConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2


@dataclass
class DiffusionConfig:
    stage1_iterations: int = 1500
    stage2_iterations: int = 1000
    batch_size: int = 16
    lr: float = 1e-4
    checkpoint_every: int = 250


@dataclass
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    gate: GateConfig = field(default_factory=GateConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    unet: UNetConfig = field(default_factory=UNetConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    output_dir: str = "runs/default"

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _build(cls, d)

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_json(cls, path: str | Path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _build(cls, d: dict):
    if not isinstance(d, dict):
        raise TypeError(f"expected a mapping for {cls.__name__}, got {type(d).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = set(d) - set(known)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in d.items():
        current = getattr(defaults, name)
        kwargs[name] = _build(type(current), value) if is_dataclass(current) else value
    return cls(**kwargs)
