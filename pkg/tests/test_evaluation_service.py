from __future__ import annotations

import json
import shutil

import pytest

from common.errors import DatasetError
from repositories.dataset_repo import DatasetRepository
from services.evaluation_service import EvaluationService


def _identity_detections(dataset_dir, path):
    document = DatasetRepository(dataset_dir).load_annotations()
    records = [{"image_id": a.image_id, "bbox": a.bbox, "score": 1.0} for a in document.annotations]
    path.write_text(json.dumps(records))
    return path


def test_folds_are_checked_against_the_given_ground_truth_file(dataset_dir, tmp_path):
    gt_dir = tmp_path / "gt"
    gt_dir.mkdir()
    ground_truth = gt_dir / "ground_truth.json"
    shutil.copy(dataset_dir / "annotations.json", ground_truth)
    dets = _identity_detections(dataset_dir, tmp_path / "dets.json")

    report = EvaluationService().evaluate_files(dets, ground_truth, folds_dir=dataset_dir / "folds")

    assert report.ap == 1.0
    assert len(report.per_fold) == 5
    assert sum(fold.num_images for fold in report.per_fold) == report.num_images


def test_fold_ids_missing_from_ground_truth_are_rejected(dataset_dir, tmp_path):
    folds = tmp_path / "folds"
    folds.mkdir()
    (folds / "fold_0.txt").write_text("0\n99\n")
    dets = _identity_detections(dataset_dir, tmp_path / "dets.json")

    with pytest.raises(DatasetError) as excinfo:
        EvaluationService().evaluate_files(dets, dataset_dir / "annotations.json", folds_dir=folds)

    assert excinfo.value.meta.details["line"] == 2
