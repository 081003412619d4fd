from __future__ import annotations

import hashlib
from typing import Literal, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


def _split_csv(value: object) -> object:
    if isinstance(value, str):
        return tuple(token.strip() for token in value.split(",") if token.strip())
    return value


def config_hash(config: BaseModel) -> str:
    """Stable short digest of a config model."""
    payload = config.model_dump_json()
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


# --------------------------------------------------------------------- #
# Synthetic scenes                                                      #
# --------------------------------------------------------------------- #


class CurveConfig(_Strict):
    control_points: int = Field(4, ge=2, le=12)
    # radial wobble of control points around the base arc, relative to the arc radius
    smoothness: float = Field(0.25, gt=0.0, le=1.0)


class CorruptionConfig(_Strict):
    occlusion_frac: float = Field(0.0, ge=0.0, le=1.0)
    specular_count: int = Field(0, ge=0)
    blur_sigma: float = Field(0.0, ge=0.0)

    @classmethod
    def easy(cls) -> "CorruptionConfig":
        return cls()

    @classmethod
    def hard(cls) -> "CorruptionConfig":
        return cls(occlusion_frac=0.3, specular_count=3, blur_sigma=1.0)


class SceneConfig(_Strict):
    image_size: int = Field(128, ge=32)
    n_landmarks: Tuple[int, int] = (2, 12)
    curve: CurveConfig = CurveConfig()
    landmark_radius: Tuple[float, float] = (3.0, 5.0)
    corruption: CorruptionConfig = CorruptionConfig()
    seed: int = Field(0, ge=0)

    @field_validator("n_landmarks", "landmark_radius", mode="before")
    @classmethod
    def split_ranges(cls, value: object) -> object:
        return _split_csv(value)

    @model_validator(mode="after")
    def check_ranges(self) -> "SceneConfig":
        low, high = self.n_landmarks
        if not 2 <= low <= high <= 12:
            raise ValueError("n_landmarks must satisfy 2 <= low <= high <= 12")
        r_low, r_high = self.landmark_radius
        if not 0 < r_low <= r_high:
            raise ValueError("landmark_radius must satisfy 0 < low <= high")
        if self.image_size % 4:
            raise ValueError("image_size must be divisible by 4")
        return self


# --------------------------------------------------------------------- #
# Models                                                                #
# --------------------------------------------------------------------- #


class DetectorConfig(_Strict):
    stem_width: int = Field(16, ge=1)
    stage_widths: Tuple[int, int] = (32, 64)
    residual_blocks: int = Field(2, ge=0)
    head_width: int = Field(64, ge=1)
    heatmap_prior: float = Field(0.1, gt=0.0, lt=1.0)

    @field_validator("stage_widths", mode="before")
    @classmethod
    def split_widths(cls, value: object) -> object:
        return _split_csv(value)

    @property
    def downsample(self) -> int:
        return 2 ** len(self.stage_widths)


class GCEConfig(_Strict):
    widths: Tuple[int, int, int, int] = (16, 32, 64, 64)
    negative_slope: float = Field(0.2, ge=0.0)

    @field_validator("widths", mode="before")
    @classmethod
    def split_widths(cls, value: object) -> object:
        return _split_csv(value)

    @property
    def min_grid(self) -> int:
        # the last stride-2 block must leave more than one cell for instance norm
        return 2 ** (len(self.widths) + 1)


# --------------------------------------------------------------------- #
# Training                                                              #
# --------------------------------------------------------------------- #


class LossWeights(_Strict):
    alpha_s: float = Field(0.1, ge=0.0)
    alpha_o: float = Field(0.1, ge=0.0)
    alpha_r: float = Field(1.0, ge=0.0)
    lambda_f: float = Field(1.0 / 3.0, ge=0.0)
    lambda_i: float = Field(0.1, ge=0.0)
    alpha_e: float = Field(0.1, ge=0.0)
    gamma: float = Field(2.0, ge=0.0)
    focal_form: Literal["penalty_reduced", "literal"] = "penalty_reduced"


class AugConfig(_Strict):
    hflip_prob: float = Field(0.5, ge=0.0, le=1.0)
    scale_range: Tuple[float, float] = (0.6, 1.4)
    shift_range: Tuple[float, float] = (0.6, 1.4)
    color_jitter: float = Field(0.2, ge=0.0, lt=1.0)
    crop: bool = True
    crop_size: int = Field(128, ge=8)

    @field_validator("scale_range", "shift_range", mode="before")
    @classmethod
    def split_ranges(cls, value: object) -> object:
        return _split_csv(value)

    @model_validator(mode="after")
    def check_ranges(self) -> "AugConfig":
        for name in ("scale_range", "shift_range"):
            low, high = getattr(self, name)
            if not 0 < low <= high:
                raise ValueError(f"{name} must satisfy 0 < low <= high")
        if self.crop_size % 4:
            raise ValueError("crop_size must be divisible by 4")
        return self

    @classmethod
    def identity(cls) -> "AugConfig":
        return cls(
            hflip_prob=0.0,
            scale_range=(1.0, 1.0),
            shift_range=(1.0, 1.0),
            color_jitter=0.0,
            crop=False,
        )


class OptimizerConfig(_Strict):
    name: Literal["adam"] = "adam"
    lr: float = Field(5e-4, gt=0.0)
    batch_size: int = Field(8, ge=1)


class TrainConfig(_Strict):
    epochs_per_step: int = Field(10, ge=1)
    optimizer: OptimizerConfig = OptimizerConfig()
    weights: LossWeights = LossWeights()
    gce_period: int = Field(3, ge=1)
    seed: int = Field(0, ge=0)
    augmentation: AugConfig = AugConfig()
    detector: DetectorConfig = DetectorConfig()
    gce: GCEConfig = GCEConfig()
    top_k: int = Field(20, ge=1)

    @property
    def total_epochs(self) -> int:
        return 3 * self.epochs_per_step
