from __future__ import annotations

from typing import List, Optional

from pydantic import BaseModel, Field

from schemas.dataset import AnnotationDocument
from schemas.detections import DetectionRecord


class DetectRequest(BaseModel):
    """POST /api/detect request payload."""

    image_png_base64: str = Field(..., min_length=1)
    conf: float = Field(0.1, ge=0.0, le=1.0)
    top_k: int = Field(20, ge=1, le=200)


class DetectedBox(BaseModel):
    bbox: List[float]
    score: float


class DetectResponse(BaseModel):
    detections: List[DetectedBox]
    elapsed_ms: float


class BoundaryRequest(BaseModel):
    """POST /api/boundary request payload."""

    image_png_base64: str = Field(..., min_length=1)
    conf: float = Field(0.2, ge=0.0, le=1.0)


class BoundaryResponse(BaseModel):
    polyline: List[List[float]]
    num_detections: int


class EvaluateRequest(BaseModel):
    """POST /api/evaluate request payload."""

    detections: List[DetectionRecord]
    ground_truth: AnnotationDocument
    speed_ms: Optional[float] = None
