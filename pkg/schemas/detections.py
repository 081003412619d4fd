from __future__ import annotations

from typing import List, Optional

from pydantic import BaseModel, Field, TypeAdapter


class DetectionRecord(BaseModel):
    """One decoded landmark; bbox is [x, y, w, h] with top-left origin."""

    image_id: int = Field(..., ge=0)
    bbox: List[float] = Field(..., min_length=4, max_length=4)
    score: float = Field(..., ge=0.0, le=1.0)


DetectionList = TypeAdapter(List[DetectionRecord])


class ImageTiming(BaseModel):
    image_id: int
    file: str
    preprocess_ms: float
    forward_ms: float
    decode_ms: float

    @property
    def total_ms(self) -> float:
        return self.preprocess_ms + self.forward_ms + self.decode_ms


class TimingReport(BaseModel):
    images: List[ImageTiming] = Field(default_factory=list)
    mean_ms: Optional[float] = None


class BoundaryRecord(BaseModel):
    image_id: int
    file: str
    conf_threshold: float
    polyline: List[List[float]] = Field(default_factory=list)
