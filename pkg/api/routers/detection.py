from __future__ import annotations

import base64
import binascii
import io

import numpy as np
from fastapi import APIRouter, Depends
from PIL import Image, UnidentifiedImageError

from api.dependencies import get_inference_service
from common.errors import BaseAppError, ValidationError, to_http_exception
from schemas.api import BoundaryRequest, BoundaryResponse, DetectedBox, DetectRequest, DetectResponse
from services.inference_service import InferenceService

router = APIRouter(prefix="/api", tags=["detection"])


def _decode_png(payload: str) -> np.ndarray:
    try:
        raw = base64.b64decode(payload, validate=True)
        with Image.open(io.BytesIO(raw)) as handle:
            return np.asarray(handle.convert("RGB"), dtype=np.float32) / 255.0
    except (binascii.Error, UnidentifiedImageError, OSError) as exc:
        raise ValidationError("image_png_base64 is not a decodable image.") from exc


def _service() -> InferenceService:
    # resolve lazily so a missing checkpoint maps to a 503 instead of a crash
    try:
        return get_inference_service()
    except BaseAppError as exc:
        raise to_http_exception(exc)


@router.post("/detect", response_model=DetectResponse)
def detect(payload: DetectRequest, service: InferenceService = Depends(_service)) -> DetectResponse:
    try:
        result = service.detect(_decode_png(payload.image_png_base64), conf=payload.conf, top_k=payload.top_k)
    except BaseAppError as exc:
        raise to_http_exception(exc)

    return DetectResponse(
        detections=[DetectedBox(bbox=list(d.bbox), score=d.score) for d in result.detections],
        elapsed_ms=result.total_ms,
    )


@router.post("/boundary", response_model=BoundaryResponse)
def boundary(payload: BoundaryRequest, service: InferenceService = Depends(_service)) -> BoundaryResponse:
    try:
        polyline, _ = service.boundary(_decode_png(payload.image_png_base64), conf=payload.conf)
    except BaseAppError as exc:
        raise to_http_exception(exc)

    return BoundaryResponse(polyline=[[p.x, p.y] for p in polyline], num_detections=len(polyline))
