import configparser
import json
import math
import os
from types import UnionType
from typing import Literal, Union, get_args, get_origin

from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from afrd.errors import ConfigError

DEFECT_KINDS = ("bump", "dent", "scratch", "stain")


class Settings(BaseSettings):
    threads: int = 1  # caps every worker pool (AFRD_THREADS)
    log_level: str = "INFO"

    model_config = SettingsConfigDict(
        env_prefix="AFRD_", env_file=".env", env_file_encoding="utf-8", extra="ignore"
    )


settings = Settings()


def worker_count(requested: int | None = None) -> int:
    cap = max(1, settings.threads)
    if requested is None:
        return cap
    return max(1, min(requested, cap))


def default_light_directions(n: int, elevation_deg: float = 35.0) -> list[tuple[float, float, float]]:
    """Equally spaced azimuths at one elevation; with six lightings the last is near-vertical."""
    ring = n - 1 if n == 6 else n
    step = 2 * math.pi / ring if ring >= 3 else math.pi / 2
    elev = math.radians(elevation_deg)
    dirs = [
        (math.cos(elev) * math.cos(k * step), math.cos(elev) * math.sin(k * step), math.sin(elev))
        for k in range(ring)
    ]
    if n == 6:
        top = math.radians(80.0)
        dirs.append((math.cos(top), 0.0, math.sin(top)))
    return dirs


class SceneSpec(BaseModel):
    n_lightings: int = Field(6, ge=1)
    image_size: int = Field(64, ge=16)
    light_directions: list[tuple[float, float, float]] | None = None
    elevation_deg: float = Field(35.0, gt=0, lt=90)
    n_train: int = Field(150, ge=0)
    n_test_normal: int = Field(30, ge=0)
    n_test_anomalous: int = Field(30, ge=0)
    anomaly_rate: float = Field(0.5, ge=0, le=1)  # anomalous share when only a test total is given
    defect_kinds: list[Literal["bump", "dent", "scratch", "stain"]] = Field(
        default_factory=lambda: list(DEFECT_KINDS)
    )
    category: Literal["dome", "ridge", "ring"] = "dome"
    ambient: float = Field(0.05, ge=0, le=0.5)
    albedo_range: tuple[float, float] = (0.55, 0.8)
    min_contrast_ratio: float = Field(2.0, ge=1)
    seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _lights(self) -> "SceneSpec":
        if self.light_directions is None:
            self.light_directions = default_light_directions(self.n_lightings, self.elevation_deg)
        if len(self.light_directions) != self.n_lightings:
            raise ValueError(
                f"n_lightings={self.n_lightings} but {len(self.light_directions)} light directions given"
            )
        for d in self.light_directions:
            norm = math.sqrt(sum(c * c for c in d))
            if abs(norm - 1.0) > 1e-6:
                raise ValueError(f"light direction {d} is not unit-norm (|l|={norm:.6f})")
        if not self.defect_kinds:
            raise ValueError("defect_kinds must not be empty")
        lo, hi = self.albedo_range
        if not 0 < lo <= hi or hi + self.ambient > 1:
            raise ValueError("albedo_range must satisfy 0 < lo <= hi and hi + ambient <= 1")
        return self


class ModelConfig(BaseModel):
    image_size: int = 64
    n_lightings: int = Field(6, ge=1)
    lightings: list[int] | None = None  # dataset lighting indices fed to the model
    stem_channels: int = Field(32, ge=1)
    channels: list[int] = Field(default_factory=lambda: [64, 128, 256])
    embed_channels: int | None = None
    fusion: Literal["attention", "mean"] = "attention"
    attention_input: Literal["pooled", "literal"] = "pooled"
    teacher_seed: int = Field(0, ge=0)
    teacher_checkpoint: str | None = None
    normalize_input: bool = False

    @field_validator("channels")
    @classmethod
    def _channels(cls, v: list[int]) -> list[int]:
        if not v or any(c < 1 for c in v):
            raise ValueError(f"channel widths must be positive, got {v}")
        return v

    @model_validator(mode="after")
    def _shape_contract(self) -> "ModelConfig":
        divisor = 2 ** (len(self.channels) + 1)
        if self.image_size < divisor or self.image_size % divisor:
            raise ValueError(f"image_size must be a positive multiple of {divisor}, got {self.image_size}")
        if self.embed_channels is not None and self.embed_channels < 1:
            raise ValueError("embed_channels must be positive")
        if self.lightings is not None:
            if len(self.lightings) != self.n_lightings:
                raise ValueError(f"lightings {self.lightings} do not match n_lightings={self.n_lightings}")
            if len(set(self.lightings)) != len(self.lightings) or min(self.lightings) < 0:
                raise ValueError(f"lightings must be distinct non-negative indices, got {self.lightings}")
        return self

    @property
    def levels(self) -> int:
        return len(self.channels)

    @property
    def embed(self) -> int:
        return self.embed_channels or self.channels[-1]

    def level_shapes(self) -> list[tuple[int, int, int]]:
        return [
            (c, self.image_size // 2 ** (l + 2), self.image_size // 2 ** (l + 2))
            for l, c in enumerate(self.channels)
        ]


class TrainConfig(BaseModel):
    learning_rate: float = Field(4e-4, gt=0)
    batch_size: int = Field(8, ge=1)
    epochs: int = Field(20, ge=0)
    weight_decay: float = Field(0.01, ge=0)
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = Field(1e-8, gt=0)
    seed: int = Field(0, ge=0)
    level_weights: list[float] | None = None
    cache_teacher: bool = True


class ScoreConfig(BaseModel):
    smooth_sigma: float = Field(4.0, ge=0)
    image_score: Literal["max", "topk"] = "max"
    topk: int = Field(10, ge=1)


class PathsConfig(BaseModel):
    data: list[str] = Field(default_factory=list)
    out: str | None = None
    out_ckpt: str | None = None
    ckpt: str | None = None
    report: str | None = None
    maps_dir: str | None = None


class RunConfig(BaseModel):
    scene: SceneSpec = Field(default_factory=SceneSpec)
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    score: ScoreConfig = Field(default_factory=ScoreConfig)
    paths: PathsConfig = Field(default_factory=PathsConfig)


_SECTION_MODELS = {
    "scene": SceneSpec,
    "model": ModelConfig,
    "train": TrainConfig,
    "score": ScoreConfig,
    "paths": PathsConfig,
}
_SECTIONS = tuple(_SECTION_MODELS)
_PATH_KEYS = {("paths", k) for k in PathsConfig.model_fields} | {("model", "teacher_checkpoint")}


def _is_sequence(section: str, key: str) -> bool:
    field = _SECTION_MODELS[section].model_fields.get(key)
    if field is None:
        return False
    annotation = field.annotation
    options = get_args(annotation) if get_origin(annotation) in (Union, UnionType) else (annotation,)
    return any(get_origin(option) in (list, tuple) for option in options)


def _parse_value(raw: str, sequence: bool = False):
    """JSON when it parses; otherwise a comma-separated list for sequence fields, else the raw string."""
    raw = raw.strip()
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        pass
    if sequence:
        return [_parse_value(part) for part in raw.split(",") if part.strip()]
    return raw


def _resolve(value, base: str):
    if value is None:
        return None
    if isinstance(value, list):
        return [_resolve(v, base) for v in value]
    value = str(value)
    return value if os.path.isabs(value) else os.path.normpath(os.path.join(base, value))


def read_config_file(path: str) -> dict:
    """Parse a sectioned `key = value` file into nested dicts with paths made absolute."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, encoding="utf-8") as f:
            parser.read_file(f)
    except (OSError, configparser.Error) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e

    base = os.path.dirname(os.path.abspath(path))
    tree: dict[str, dict] = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"{path}: unknown section [{section}]")
        values = {}
        for key, raw in parser.items(section):
            value = _parse_value(raw, _is_sequence(section, key))
            if (section, key) in _PATH_KEYS:
                if section == "paths" and key == "data" and not isinstance(value, list):
                    value = [value]
                value = _resolve(value, base)
            values[key] = value
        tree[section] = values
    return tree


def _merge(base: dict, overrides: dict) -> dict:
    merged = {k: dict(v) for k, v in base.items()}
    for section, values in overrides.items():
        for key, value in values.items():
            if value is not None:
                merged.setdefault(section, {})[key] = value
    return merged


def build_run_config(config_path: str | None = None, overrides: dict | None = None) -> RunConfig:
    tree = read_config_file(config_path) if config_path else {}
    tree = _merge(tree, overrides or {})
    try:
        return RunConfig.model_validate(tree)
    except ValidationError as e:
        raise ConfigError(f"invalid configuration: {e}") from e


def _format_value(value) -> str:
    if isinstance(value, str):
        return value
    return json.dumps(value)


def write_effective_config(config: RunConfig, path: str) -> str:
    """Echo the validated config; paths are rewritten relative to the echo file."""
    base = os.path.dirname(os.path.abspath(path))
    parser = configparser.ConfigParser(interpolation=None)
    dumped = config.model_dump(mode="json")
    for section in _SECTIONS:
        parser.add_section(section)
        for key, value in dumped[section].items():
            if value is None or value == []:
                continue
            if (section, key) in _PATH_KEYS:
                if isinstance(value, list):
                    value = [os.path.relpath(os.path.abspath(v), base) for v in value]
                else:
                    value = os.path.relpath(os.path.abspath(value), base)
            parser.set(section, key, _format_value(value))
    os.makedirs(base, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        parser.write(f)
    return path
