import logging
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Literal, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from core import ConfigError

logger = logging.getLogger(__name__)

load_dotenv()

Range = tuple[float, float]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


def _ordered(value):
    lo, hi = value
    if lo > hi:
        raise ValueError(f"range lower bound {lo} exceeds upper bound {hi}")
    return value


class AugmentConfig(_Section):
    """Parameter ranges for every transform; the defaults are stated, not learned."""

    train_side: int = Field(256, ge=8)
    variants: int = Field(19, ge=0)
    select_every: int = Field(10, ge=1)
    probability: float = Field(0.25, ge=0.0, le=1.0)
    probabilities: dict[str, float] = Field(default_factory=dict)

    crop_scale: Range = (0.3, 1.0)
    crop_ratio: Range = (0.75, 4.0 / 3.0)
    rotation_degrees: Range = (-45.0, 45.0)
    discrete_rotation_share: float = Field(0.5, ge=0.0, le=1.0)
    pixelization_ratio: Range = (0.1, 0.5)
    shuffle_grid: int = Field(8, ge=1)
    perspective_distortion: Range = (0.1, 0.5)
    padding_fraction: Range = (0.05, 0.3)
    underlay_scale: Range = (0.4, 0.8)
    jitter_brightness: float = Field(0.4, ge=0.0)
    jitter_contrast: float = Field(0.4, ge=0.0)
    jitter_saturation: float = Field(0.4, ge=0.0)
    blur_sigma: Range = (0.5, 2.0)
    emoji_scale: Range = (0.1, 0.3)
    text_length: tuple[int, int] = (3, 10)
    text_scale: Range = (0.03, 0.08)
    overlay_scale: Range = (0.3, 0.6)

    super_blur_sigma: Range = (2.0, 8.0)
    super_color_factor: float = Field(2.0, ge=1.0)
    super_dark_factor: Range = (0.1, 0.5)
    super_face_scale: Range = (0.2, 0.5)
    super_opaque_alpha: Range = (0.35, 0.65)
    super_occlude_count: tuple[int, int] = (1, 4)
    super_occlude_area: Range = (0.05, 0.25)

    face_dir: Optional[Path] = None
    underlay_dir: Optional[Path] = None
    overlay_dir: Optional[Path] = None
    black_white_sets: tuple[str, ...] = ("basic", "basic+super-blur", "basic+super-color", "basic+super-face")

    @field_validator(
        "crop_scale", "crop_ratio", "rotation_degrees", "pixelization_ratio", "perspective_distortion",
        "padding_fraction", "underlay_scale", "blur_sigma", "emoji_scale", "text_length", "text_scale",
        "overlay_scale", "super_blur_sigma", "super_dark_factor", "super_face_scale", "super_opaque_alpha",
        "super_occlude_count", "super_occlude_area",
    )
    @classmethod
    def _check_range(cls, value):
        return _ordered(value)


class PatchConfig(_Section):
    query_plan: list[str] = ["identity", "rotate:90", "rotate:180", "rotate:270", "center:exact",
                             "center:third", "proposals:8", "detector"]
    reference_plan: list[str] = ["identity", "rotate:90", "rotate:180", "rotate:270", "grid:2", "grid:3",
                                 "center:exact", "center:third"]
    min_side: int = Field(32, ge=1)
    exact_ratio: float = Field(0.5, gt=0.0, le=1.0)
    third_ratio: float = Field(1.0 / 3.0, gt=0.0, le=1.0)
    proposal_min_side: int = Field(32, ge=1)
    detections: Optional[Path] = None
    overlay_detector: Literal["none", "edges"] = "edges"


class FeatureConfig(_Section):
    models: list[str] = ["tiled:8"]
    scales: list[int] = [200, 256, 320]
    pca: dict[str, Path] = Field(default_factory=dict)
    pca_dim: Optional[int] = Field(None, ge=1)
    whiten: bool = False

    @field_validator("scales")
    @classmethod
    def _positive_scales(cls, value):
        if not value or any(s < 8 for s in value):
            raise ValueError("scales must be a non-empty list of sides >= 8 px")
        return value


class EnsembleSpecConfig(_Section):
    criterion: Literal["confidence", "completeness"]
    models: list[str]
    thresholds: list[float] = Field(default_factory=list)
    strategy: Literal["all", "global-local", "local-global"] = "all"

    @model_validator(mode="after")
    def _thresholds_match(self):
        if not self.models:
            raise ValueError("an ensemble spec needs at least one model")
        if self.criterion == "confidence" and len(self.thresholds) != len(self.models):
            raise ValueError("confidence criterion needs exactly one threshold per model")
        if self.criterion == "completeness" and self.thresholds:
            raise ValueError("completeness criterion takes no thresholds")
        return self


class TrickSettings(_Section):
    partial_penalty: float = Field(0.95, gt=0.0, le=1.0)
    top2_average: bool = False
    face_list: Optional[Path] = None


class MatchConfig(_Section):
    mode: Literal["global-global", "global-local", "local-global", "both"] = "both"
    top_t: Optional[int] = Field(50, ge=1)
    block_size: int = Field(1024, ge=1)
    local_global_models: Optional[list[str]] = None
    local_global_scales: Optional[list[int]] = None


class PipelineConfig(_Section):
    seed: int = 0
    jobs: Optional[int] = Field(None, ge=1)
    augment: AugmentConfig = AugmentConfig()
    patches: PatchConfig = PatchConfig()
    features: FeatureConfig = FeatureConfig()
    match: MatchConfig = MatchConfig()
    tricks: TrickSettings = TrickSettings()
    ensemble: list[EnsembleSpecConfig] = Field(default_factory=list)


def _read_toml(path):
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    with open(path, "rb") as f:
        try:
            return tomllib.load(f)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc


def _validate(model, data, source):
    try:
        return model.model_validate(data)
    except ValidationError as exc:
        first = exc.errors()[0]
        where = ".".join(str(p) for p in first["loc"])
        raise ConfigError(f"{source}: {where}: {first['msg']}") from exc


def load_config(path=None, **overrides):
    """Load a PipelineConfig from TOML, then apply non-None top-level overrides."""
    data = _read_toml(path) if path else {}
    for key, value in overrides.items():
        if value is not None:
            data[key] = value
    if data.get("jobs") is None and os.getenv("D2LV_JOBS"):
        data["jobs"] = int(os.environ["D2LV_JOBS"])
    return _validate(PipelineConfig, data, path or "<defaults>")


def load_ensemble_specs(path):
    """Read `[[ensemble]]` tables from a standalone spec file."""
    data = _read_toml(path)
    specs = data.get("ensemble", [])
    return [_validate(EnsembleSpecConfig, spec, path) for spec in specs]


def with_section(cfg, section, **changes):
    """Copy of `cfg` with fields of one section replaced and the section validated again."""
    current = getattr(cfg, section)
    updated = _validate(type(current), {**current.model_dump(), **changes}, f"[{section}] override")
    return cfg.model_copy(update={section: updated})
