from __future__ import annotations

from typing import Dict, List, Optional

from pydantic import BaseModel, Field, field_validator, model_validator


class SceneMetaEntry(BaseModel):
    """Corruption bookkeeping of a generated scene."""

    n_occluded: int = Field(0, ge=0)
    occluded: List[int] = Field(default_factory=list)
    specular_count: int = Field(0, ge=0)
    blur_sigma: float = Field(0.0, ge=0.0)
    attempts: int = Field(1, ge=1)


class ImageEntry(BaseModel):
    id: int = Field(..., ge=0)
    file: str = Field(..., min_length=1)
    width: int = Field(..., gt=0)
    height: int = Field(..., gt=0)
    meta: Optional[SceneMetaEntry] = None


class AnnotationEntry(BaseModel):
    image_id: int = Field(..., ge=0)
    bbox: List[float] = Field(..., min_length=4, max_length=4)
    center: List[float] = Field(..., min_length=2, max_length=2)

    @field_validator("bbox")
    @classmethod
    def validate_bbox(cls, value: List[float]) -> List[float]:
        if value[2] < 0 or value[3] < 0:
            raise ValueError("bbox width and height must be non-negative.")
        return value


class AnnotationDocument(BaseModel):
    """annotations.json: the image table plus one entry per landmark."""

    images: List[ImageEntry] = Field(default_factory=list)
    annotations: List[AnnotationEntry] = Field(default_factory=list)

    @model_validator(mode="after")
    def validate_references(self) -> "AnnotationDocument":
        ids = [image.id for image in self.images]
        if len(ids) != len(set(ids)):
            raise ValueError("image ids must be unique.")
        known = set(ids)
        for index, annotation in enumerate(self.annotations):
            if annotation.image_id not in known:
                raise ValueError(f"annotations[{index}].image_id {annotation.image_id} has no image.")
        return self

    def image(self, image_id: int) -> ImageEntry:
        for image in self.images:
            if image.id == image_id:
                return image
        raise KeyError(image_id)

    def by_image(self) -> Dict[int, List[AnnotationEntry]]:
        grouped: Dict[int, List[AnnotationEntry]] = {image.id: [] for image in self.images}
        for annotation in self.annotations:
            grouped[annotation.image_id].append(annotation)
        return grouped

    def restricted_to(self, image_ids: List[int]) -> "AnnotationDocument":
        wanted = set(image_ids)
        return AnnotationDocument(
            images=[image for image in self.images if image.id in wanted],
            annotations=[a for a in self.annotations if a.image_id in wanted],
        )
