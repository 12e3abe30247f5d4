"""Strict JSON experiment configuration.

Every default lives in the models below.  Unknown keys, wrong types and
out-of-range values are rejected; :class:`ConfigError` lists each problem with
its dotted field path.
"""
from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from ..dataset import CurriculumConfig, training_worlds
from ..mdn import ModelConfig
from ..road_graph import GeoPoint, RoadGraph, WorldSpec, build_world, loads_graph, parse_osm
from ..sim import GpsNoise, ObservationNoise
from ..train import TrainConfig

EXPERIMENTS = ("calibration", "localization", "confusion", "matching", "drive")
UTILITIES = ("world", "simulate", "train")


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("invalid configuration:\n  " + "\n  ".join(problems))
        self.problems = problems


class MissingArtifactError(FileNotFoundError):
    """A checkpoint or input file an evaluation run depends on does not exist."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", strict=True, frozen=True)


class WorldConfig(_Strict):
    kind: Literal["grid", "four-way", "t-junction", "fork", "roundabout", "composite"]
    extents: float = Field(200.0, gt=0)
    block_size: float = Field(50.0, gt=0)
    seed: int = 0
    # optional road network file (OSM XML or native graph JSON); replaces the generated world
    source: Optional[str] = None
    origin: tuple[float, float] = (0.0, 0.0)    # lat, lon of the planar origin for OSM input

    @model_validator(mode="after")
    def _extents_cover_block(self):
        if self.extents < self.block_size:
            raise ValueError("extents must be >= block_size")
        return self

    def spec(self) -> WorldSpec:
        return WorldSpec(self.kind, self.extents, self.block_size, self.seed)

    def graph(self, base: Path = Path(".")) -> RoadGraph:
        if self.source is None:
            return build_world(self.spec())
        path = base / self.source
        if not path.is_file():
            raise MissingArtifactError(f"road network file {path} not found")
        text = path.read_text()
        if path.suffix.lower() in (".osm", ".xml"):
            return parse_osm(text, GeoPoint(*self.origin))
        return loads_graph(text)


class SimConfig(_Strict):
    speed: float = Field(5.0, gt=0)
    dt: float = Field(0.1, gt=0)
    lookahead: float = Field(8.0, gt=0)
    kappa_max: float = Field(0.2, gt=0)
    obs_lateral_sigma: float = Field(0.5, ge=0)
    obs_heading_sigma: float = Field(0.05, ge=0)
    obs_dropout: float = Field(0.1, ge=0, le=1)
    gps_sigma: float = Field(2.0, ge=0)
    route_length: float = Field(400.0, gt=0)

    def obs_noise(self) -> ObservationNoise:
        return ObservationNoise(self.obs_lateral_sigma, self.obs_heading_sigma, self.obs_dropout)

    def gps_noise(self) -> GpsNoise:
        return GpsNoise(self.gps_sigma, 0.0)


class ModelSettings(_Strict):
    n_components: int = Field(3, ge=1)
    sigma_center: float = math.log(0.02)
    lambda_phi: float = Field(0.01, ge=0)
    lambda_sigma: float = Field(0.05, ge=0)
    eps: float = Field(1e-6, gt=0)
    sigma_min: float = Field(1e-3, gt=0)
    sigma_max: float = Field(1.0, gt=0)
    sigma_bias_init: float = math.log(0.05)
    mu_spread_init: float = Field(0.5, ge=0, lt=1)
    size: int = Field(64, ge=8)
    obs_kernels: tuple[int, int] = (4, 4)
    obs_channels: tuple[int, int] = (8, 16)
    map_kernel: int = Field(8, ge=1)
    map_channels: int = Field(8, ge=1)
    route_kernel: int = Field(8, ge=1)
    route_channels: int = Field(8, ge=1)
    trunk: tuple[int, int] = (64, 32)
    det_hidden: int = Field(32, ge=1)

    def model_config_for(self, kappa_max: float) -> ModelConfig:
        return ModelConfig(kappa_max=kappa_max, **self.model_dump())


class TrainSettings(_Strict):
    n_samples: int = Field(10_000, ge=1)
    learning_rate: float = Field(0.01, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    epochs: int = Field(60, ge=0)
    batch_size: int = Field(64, ge=1)
    clip_norm: Optional[float] = Field(5.0, gt=0)
    det_lr_scale: float = Field(30.0, gt=0)
    lr_decay: float = Field(0.1, gt=0, le=1)
    mirror: bool = True

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(learning_rate=self.learning_rate, momentum=self.momentum, epochs=self.epochs,
                           batch_size=self.batch_size, seed=seed, clip_norm=self.clip_norm,
                           det_lr_scale=self.det_lr_scale, lr_decay=self.lr_decay, mirror=self.mirror)

    def curriculum(self, sim: SimConfig, seed: int, size: int) -> CurriculumConfig:
        return CurriculumConfig(n_samples=self.n_samples, worlds=tuple(training_worlds()), obs_noise=sim.obs_noise(),
                                speed=sim.speed, dt=sim.dt, lookahead=sim.lookahead, kappa_max=sim.kappa_max,
                                size=size, seed=seed)


class CalibrationSettings(_Strict):
    z_grid: tuple[float, ...] = (0.5, 1.0, 2.0, 3.0)
    n_samples: int = Field(2000, ge=1)
    phi_min: float = Field(0.05, ge=0, le=1)
    resamples: int = Field(20, ge=1)     # self-consistency draws per sample


class LocalizationSettings(_Strict):
    sigma_xy_levels: tuple[float, ...] = (1.0, 2.0, 4.0)
    sigma_alpha_levels: tuple[float, ...] = (0.4, 0.8)
    n_samples: int = Field(200, ge=1)
    n_hypotheses: int = Field(64, ge=1)
    junction_window: float = Field(15.0, gt=0)
    mode: Literal["observed-steering", "paper-literal"] = "observed-steering"
    sigma_meas: float = Field(0.005, gt=0)
    n_steer: int = Field(129, ge=2)


class ConfusionSettings(_Strict):
    n_seeds: int = Field(5, ge=1)


class MatchingSettings(_Strict):
    gps_sigmas: tuple[float, ...] = (1.0, 3.0, 5.0)
    n_routes: int = Field(10, ge=1)
    sigma_emit: float = Field(4.07, gt=0)
    beta: float = Field(3.0, gt=0)
    radius: float = Field(60.0, gt=0)


class DriveSettings(_Strict):
    n_seeds: int = Field(10, ge=1)
    min_junctions: int = Field(1, ge=0)   # junctions the drawn route must pass, when the world allows it
    gps_sigma: float = Field(0.0, ge=0)


class ExperimentConfig(_Strict):
    experiment: str
    world: WorldConfig
    sim: SimConfig = SimConfig()
    model: ModelSettings = ModelSettings()
    train: TrainSettings = TrainSettings()
    calibration: CalibrationSettings = CalibrationSettings()
    localization: LocalizationSettings = LocalizationSettings()
    confusion: ConfusionSettings = ConfusionSettings()
    matching: MatchingSettings = MatchingSettings()
    drive: DriveSettings = DriveSettings()
    checkpoint: Optional[str] = None
    seed: int = 0
    output_dir: str = "topo-nav-out"

    @model_validator(mode="after")
    def _known_experiment(self):
        if self.experiment not in EXPERIMENTS + UTILITIES:
            raise ValueError(f"unknown experiment {self.experiment!r}; expected one of "
                             f"{', '.join(EXPERIMENTS + UTILITIES)}")
        return self

    def model_config_obj(self) -> ModelConfig:
        return self.model.model_config_for(self.sim.kappa_max)


def _problems(err: ValidationError) -> list[str]:
    out = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        out.append(f"{loc}: {e['msg']}")
    return out


def parse_config(text: str) -> ExperimentConfig:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([f"<json>: {exc}"]) from None
    if not isinstance(doc, dict):
        raise ConfigError(["<root>: configuration must be a JSON object"])
    try:
        cfg = _validate(doc)
    except ValidationError as exc:
        raise ConfigError(_problems(exc)) from None
    # nested ModelConfig checks (divisibility of strides and so on)
    try:
        cfg.model_config_obj()
    except ValueError as exc:
        raise ConfigError([f"model: {exc}"]) from None
    return cfg


def _validate(doc: dict) -> ExperimentConfig:
    # JSON has no tuples; validate in JSON mode so arrays fill tuple fields under strict typing
    return ExperimentConfig.model_validate_json(json.dumps(doc))


def dump_config(cfg: ExperimentConfig) -> str:
    return json.dumps(cfg.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"


def config_hash(cfg: ExperimentConfig) -> str:
    """SHA-256 of the canonical config with ``output_dir`` left out."""
    doc = cfg.model_dump(mode="json")
    doc.pop("output_dir", None)
    return hashlib.sha256(json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()).hexdigest()
