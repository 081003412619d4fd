from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from pydantic import ValidationError as PydanticValidationError

from common.errors import DatasetError, NotFoundError
from core.evaluation import ImageEval, Metrics, ScoredBox, evaluate_images
from repositories.dataset_repo import load_annotation_file, read_fold_manifests
from schemas.dataset import AnnotationDocument
from schemas.detections import DetectionList, DetectionRecord
from schemas.metrics import FoldMetrics, MetricsReport, MetricsSummary

logger = logging.getLogger(__name__)


def load_detections(path: Path) -> List[DetectionRecord]:
    path = Path(path)
    if not path.exists():
        raise NotFoundError(f"Detections file '{path}' does not exist.", details={"path": str(path)})
    try:
        return DetectionList.validate_json(path.read_bytes())
    except PydanticValidationError as exc:
        first = exc.errors()[0]
        field = ".".join(str(part) for part in first["loc"]) or "<document>"
        raise DatasetError(
            f"Invalid detection field '{field}': {first['msg']}",
            details={"file": str(path), "field": field},
        ) from exc


def build_image_evals(
    detections: Sequence[DetectionRecord],
    ground_truth: AnnotationDocument,
    image_ids: Optional[Sequence[int]] = None,
) -> List[ImageEval]:
    """Pair detections with ground truth per image, in image id order."""
    grouped_gt = ground_truth.by_image()
    grouped_det: Dict[int, List[ScoredBox]] = {}
    for index, record in enumerate(detections):
        if record.image_id not in grouped_gt:
            raise DatasetError(
                f"Detection {index} refers to unknown image id {record.image_id}.",
                details={"image_id": record.image_id},
            )
        grouped_det.setdefault(record.image_id, []).append(ScoredBox(bbox=tuple(record.bbox), score=record.score))

    wanted = sorted(grouped_gt) if image_ids is None else sorted(image_ids)
    return [
        ImageEval(
            image_id=image_id,
            detections=tuple(grouped_det.get(image_id, [])),
            ground_truth=tuple(tuple(entry.bbox) for entry in grouped_gt.get(image_id, [])),
        )
        for image_id in wanted
    ]


def _summary(metrics: Metrics) -> Dict[str, object]:
    return {
        "ap": metrics.ap,
        "ap50": metrics.ap50,
        "recall": metrics.recall,
        "num_images": metrics.num_images,
        "num_gt": metrics.num_gt,
        "num_det": metrics.num_det,
    }


class EvaluationService:
    def evaluate(
        self,
        detections: Sequence[DetectionRecord],
        ground_truth: AnnotationDocument,
        *,
        folds: Optional[Sequence[Sequence[int]]] = None,
        speed_ms: Optional[float] = None,
    ) -> MetricsReport:
        pooled = evaluate_images(build_image_evals(detections, ground_truth))
        per_fold = None
        if folds is not None:
            per_fold = [
                FoldMetrics(fold=k, **_summary(evaluate_images(build_image_evals(detections, ground_truth, fold))))
                for k, fold in enumerate(folds)
            ]
        report = MetricsReport(**_summary(pooled), per_fold=per_fold, speed_ms=speed_ms)
        logger.info("Evaluated %d images: AP=%s AP50=%s recall=%s", report.num_images, report.ap, report.ap50, report.recall)
        return report

    def summarize(self, detections: Sequence[DetectionRecord], ground_truth: AnnotationDocument) -> MetricsSummary:
        return MetricsSummary(**_summary(evaluate_images(build_image_evals(detections, ground_truth))))

    def evaluate_files(
        self,
        detections_path: Path,
        ground_truth_path: Path,
        *,
        folds_dir: Optional[Path] = None,
        speed_ms: Optional[float] = None,
    ) -> MetricsReport:
        ground_truth = load_annotation_file(Path(ground_truth_path))
        folds = None
        if folds_dir is not None:
            folds = read_fold_manifests(Path(folds_dir), {image.id for image in ground_truth.images})
        return self.evaluate(load_detections(detections_path), ground_truth, folds=folds, speed_ms=speed_ms)


def write_report(report: MetricsReport, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report.model_dump(mode="json"), indent=2) + "\n", encoding="utf-8")
    return path
