from __future__ import annotations

from functools import lru_cache

from common.config import get_settings
from common.errors import ServiceUnavailableError
from services.evaluation_service import EvaluationService
from services.inference_service import InferenceService, load_detector


@lru_cache()
def _build_inference_service() -> InferenceService:
    settings = get_settings()
    checkpoint = settings.serving.checkpoint_path
    if checkpoint is None:
        raise ServiceUnavailableError("LANDMARK_CHECKPOINT is not configured.")
    return InferenceService(load_detector(checkpoint))


def get_inference_service() -> InferenceService:
    return _build_inference_service()


def get_evaluation_service() -> EvaluationService:
    return EvaluationService()
