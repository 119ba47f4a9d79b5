"""Pipeline configuration with the published defaults baked in.

The on-disk format is YAML with one mapping per section; any key left out
keeps its default.  Unknown keys are rejected so typos surface early.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Optional

import yaml


class ConfigError(ValueError):
    pass


@dataclass
class AlphaSchedule:
    threshold_px: int = 2000
    small: float = 1.2
    large: float = 1.05
    growth: float = 1.1
    max_retries: int = 5

    def initial(self, n_pixels: int) -> float:
        return self.small if n_pixels < self.threshold_px else self.large


@dataclass
class LossWeights:
    omega1: float = 2.0
    omega2: float = 2.0
    lambda_m: float = 1.0
    stage_lambdas: tuple = (4 / 7, 2 / 7, 1 / 7)


@dataclass
class PoolThresholds:
    car: int = 20
    pedestrian: int = 10

    def admits(self, cls: str, n_points: int) -> bool:
        return n_points > getattr(self, cls)


@dataclass
class GTConfig:
    iou_term_sign: str = "complement"
    epsilon_threshold: int = 10
    alpha_override: Optional[float] = None
    borrow: bool = True


@dataclass
class FrustumConfig:
    bins: int = 8
    bandwidth: Optional[float] = None
    levels: int = 10
    threshold: float = 0.5
    emphasis: str = "dense"
    prior_width: dict = field(default_factory=lambda: {"car": 1.8, "pedestrian": 0.6})
    depth_extent: dict = field(default_factory=lambda: {"car": 5.0, "pedestrian": 1.5})
    band: tuple = (0.3, 3.0)
    boundary_floor: float = 0.5
    boundary_reach: float = 0.5


@dataclass
class DensifyConfig:
    chunks: int = 4
    feature_dim: int = 32
    max_iters: int = 150
    step: float = 0.1
    max_halvings: int = 20
    tol: float = 1e-6
    window: int = 10


@dataclass
class PipelineConfig:
    alpha: AlphaSchedule = field(default_factory=AlphaSchedule)
    loss: LossWeights = field(default_factory=LossWeights)
    pool: PoolThresholds = field(default_factory=PoolThresholds)
    gt: GTConfig = field(default_factory=GTConfig)
    frustum: FrustumConfig = field(default_factory=FrustumConfig)
    densify: DensifyConfig = field(default_factory=DensifyConfig)

    def validate(self) -> "PipelineConfig":
        a = self.alpha
        if a.threshold_px < 1:
            raise ConfigError("alpha.threshold_px must be >= 1")
        for name in ("small", "large", "growth"):
            if not getattr(a, name) > 0:
                raise ConfigError(f"alpha.{name} must be positive")
        if a.max_retries < 0:
            raise ConfigError("alpha.max_retries must be >= 0")
        lw = self.loss
        if min(lw.omega1, lw.omega2, lw.lambda_m) < 0 or len(lw.stage_lambdas) != 3 or min(lw.stage_lambdas) < 0:
            raise ConfigError("loss weights must be non-negative with three stage lambdas")
        if self.pool.car < 0 or self.pool.pedestrian < 0:
            raise ConfigError("pool thresholds must be non-negative")
        if self.gt.iou_term_sign not in ("complement", "additive"):
            raise ConfigError("gt.iou_term_sign must be 'complement' or 'additive'")
        f = self.frustum
        if f.bins < 1 or f.levels < 1 or (f.bandwidth is not None and f.bandwidth <= 0):
            raise ConfigError("frustum.bins/levels must be >= 1 and bandwidth positive")
        if f.emphasis not in ("dense", "sparse"):
            raise ConfigError("frustum.emphasis must be 'dense' or 'sparse'")
        d = self.densify
        if d.chunks < 1 or d.feature_dim < 1 or d.max_iters < 1 or d.step <= 0:
            raise ConfigError("densify.chunks/feature_dim/max_iters must be >= 1 and step positive")
        return self

    def to_dict(self) -> dict:
        out = asdict(self)
        out["loss"]["stage_lambdas"] = list(self.loss.stage_lambdas)
        out["frustum"]["band"] = list(self.frustum.band)
        return out

    @classmethod
    def from_dict(cls, data: dict | None) -> "PipelineConfig":
        cfg = cls()
        for section, values in (data or {}).items():
            if not hasattr(cfg, section) or not is_dataclass(getattr(cfg, section)):
                raise ConfigError(f"unknown config section {section!r}")
            if values is None:
                continue
            if not isinstance(values, dict):
                raise ConfigError(f"section {section!r} must be a mapping")
            target = getattr(cfg, section)
            known = {f.name for f in fields(target)}
            for key, value in values.items():
                if key not in known:
                    raise ConfigError(f"unknown key {section}.{key}")
                if isinstance(getattr(target, key), tuple):
                    value = tuple(value)
                setattr(target, key, value)
        return cfg.validate()

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = yaml.safe_load(path.read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        if data is not None and not isinstance(data, dict):
            raise ConfigError(f"{path} must contain a mapping")
        return cls.from_dict(data)
