from __future__ import annotations

from fastapi import APIRouter, Depends

from api.dependencies import get_evaluation_service
from common.errors import BaseAppError, to_http_exception
from schemas.api import EvaluateRequest
from schemas.metrics import MetricsReport
from services.evaluation_service import EvaluationService

router = APIRouter(prefix="/api", tags=["evaluation"])


@router.post("/evaluate", response_model=MetricsReport)
def evaluate(
    payload: EvaluateRequest,
    service: EvaluationService = Depends(get_evaluation_service),
) -> MetricsReport:
    try:
        return service.evaluate(payload.detections, payload.ground_truth, speed_ms=payload.speed_ms)
    except BaseAppError as exc:
        raise to_http_exception(exc)
