"""Synthetic dataset generation and ground-truth relation map export."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import List, Sequence

import numpy as np

from common.errors import ValidationError
from core.heatmap_codec import GridSpec, encode_targets
from core.synthetic_scenes import generate_scene, scene_rng
from repositories.dataset_repo import DatasetRepository, landmarks_from_entries, write_gray16
from schemas.config import SceneConfig
from schemas.dataset import AnnotationDocument, AnnotationEntry, ImageEntry, SceneMetaEntry

logger = logging.getLogger(__name__)


def split_folds(image_ids: Sequence[int], folds: int, seed: int) -> List[List[int]]:
    """Shuffle ids with ``seed`` and cut them into ``folds`` near-equal sorted folds."""
    if not 1 <= folds <= len(image_ids):
        raise ValidationError(
            "Fold count must lie between 1 and the number of images.",
            details={"folds": folds, "images": len(image_ids)},
        )
    order = np.random.default_rng(seed).permutation(np.asarray(image_ids, dtype=np.int64))
    return [sorted(int(i) for i in chunk) for chunk in np.array_split(order, folds)]


def train_val_split(folds: Sequence[Sequence[int]], held_out: int) -> tuple[List[int], List[int]]:
    if not 0 <= held_out < len(folds):
        raise ValidationError("Fold index out of range.", details={"fold": held_out, "folds": len(folds)})
    train = sorted(i for k, fold in enumerate(folds) if k != held_out for i in fold)
    return train, sorted(folds[held_out])


class DatasetService:
    def __init__(self, repository: DatasetRepository) -> None:
        self._repository = repository

    def generate(self, cfg: SceneConfig, count: int, *, folds: int = 5) -> AnnotationDocument:
        """Render ``count`` scenes, write them with their annotations and fold lists."""
        if count < 1:
            raise ValidationError("count must be >= 1.", details={"count": count})

        images: List[ImageEntry] = []
        annotations: List[AnnotationEntry] = []
        for image_id in range(count):
            sample = generate_scene(cfg, scene_rng(cfg.seed, image_id))
            file_name = self._repository.save_image(image_id, sample.image)
            height, width = sample.image.shape[:2]
            images.append(
                ImageEntry(
                    id=image_id,
                    file=file_name,
                    width=width,
                    height=height,
                    meta=SceneMetaEntry(**sample.meta.as_dict()),
                )
            )
            for (cx, cy), (w, h) in zip(sample.landmarks.points.tolist(), sample.landmarks.boxes.tolist()):
                annotations.append(
                    AnnotationEntry(image_id=image_id, bbox=[cx - w / 2.0, cy - h / 2.0, w, h], center=[cx, cy])
                )

        document = AnnotationDocument(images=images, annotations=annotations)
        self._repository.save_annotations(document)
        self._repository.save_folds(split_folds(list(range(count)), min(folds, count), cfg.seed))
        logger.info("Generated %d scenes with %d landmarks under %s", count, len(annotations), self._repository.root)
        return document

    def export_relation_maps(self, out_dir: Path, *, downsample: int = 4) -> List[Path]:
        """Write each image's ground-truth relation heatmap as a 16-bit PNG."""
        document = self._repository.load_annotations()
        grouped = document.by_image()
        written: List[Path] = []
        for entry in document.images:
            grid = GridSpec(input_w=entry.width, input_h=entry.height, downsample=downsample)
            targets = encode_targets(landmarks_from_entries(grouped[entry.id]), grid)
            path = Path(out_dir) / f"{Path(entry.file).stem}_relation.png"
            write_gray16(path, targets.r_map[0])
            written.append(path)
        logger.info("Exported %d relation maps to %s", len(written), out_dir)
        return written


def generate_dataset(cfg: SceneConfig, count: int, out_dir: Path, *, folds: int = 5) -> AnnotationDocument:
    return DatasetService(DatasetRepository(out_dir)).generate(cfg, count, folds=folds)
