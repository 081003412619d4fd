"""On-disk dataset layout: PNG images, one annotation document, fold lists.

    <root>/images/00000.png ...
    <root>/annotations.json
    <root>/folds/fold_0.txt ...   (one image id per line)
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Collection, Dict, List, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError
from pydantic import ValidationError as PydanticValidationError

from common.errors import DatasetError, NotFoundError
from core.relation_geometry import LandmarkSet
from schemas.dataset import AnnotationDocument, AnnotationEntry

ANNOTATION_FILE = "annotations.json"
IMAGE_DIR = "images"
FOLD_DIR = "folds"
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


@dataclass(frozen=True)
class DatasetItem:
    image_id: int
    file: str
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    landmarks: LandmarkSet


def image_file_name(image_id: int) -> str:
    return f"{IMAGE_DIR}/{image_id:05d}.png"


def read_image(path: Path) -> np.ndarray:
    """Decode an image file into an (H, W, 3) float32 array in [0, 1]."""
    if not path.exists():
        raise NotFoundError(f"Image '{path}' does not exist.", details={"path": str(path)})
    try:
        with Image.open(path) as handle:
            rgb = np.asarray(handle.convert("RGB"), dtype=np.float32)
    except (UnidentifiedImageError, OSError) as exc:
        raise DatasetError(f"Image '{path}' could not be decoded.", details={"path": str(path)}) from exc
    return rgb / 255.0


def write_image(path: Path, image: np.ndarray) -> None:
    """Write an (H, W, 3) array in [0, 1] as an 8-bit RGB PNG."""
    path.parent.mkdir(parents=True, exist_ok=True)
    pixels = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(pixels).save(path, format="PNG")


def write_gray16(path: Path, values: np.ndarray) -> None:
    """Write an (H, W) array in [0, 1] as a 16-bit grayscale PNG."""
    path.parent.mkdir(parents=True, exist_ok=True)
    pixels = np.clip(np.rint(np.asarray(values, dtype=np.float64) * 65535.0), 0, 65535).astype(np.uint16)
    Image.fromarray(pixels).save(path, format="PNG")


def list_images(directory: Path) -> List[Path]:
    if not directory.is_dir():
        raise NotFoundError(f"Image directory '{directory}' does not exist.", details={"path": str(directory)})
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def landmarks_from_entries(entries: Sequence[AnnotationEntry]) -> LandmarkSet:
    return LandmarkSet.from_points(
        [entry.center for entry in entries],
        [entry.bbox[2:] for entry in entries],
    )


class DatasetRepository:
    """Reads and writes one dataset directory."""

    def __init__(self, root: Path) -> None:
        self._root = Path(root)

    @property
    def root(self) -> Path:
        return self._root

    @property
    def annotation_path(self) -> Path:
        return self._root / ANNOTATION_FILE

    # --------------------------------------------------------------------- #
    # Write side                                                            #
    # --------------------------------------------------------------------- #

    def save_image(self, image_id: int, image: np.ndarray) -> str:
        name = image_file_name(image_id)
        write_image(self._root / name, image)
        return name

    def save_annotations(self, document: AnnotationDocument) -> Path:
        self._root.mkdir(parents=True, exist_ok=True)
        payload = document.model_dump(mode="json", exclude_none=True)
        self.annotation_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return self.annotation_path

    def save_folds(self, folds: Sequence[Sequence[int]]) -> List[Path]:
        directory = self._root / FOLD_DIR
        directory.mkdir(parents=True, exist_ok=True)
        for stale in directory.glob("fold_*.txt"):
            stale.unlink()
        paths = []
        for index, fold in enumerate(folds):
            path = directory / f"fold_{index}.txt"
            path.write_text("".join(f"{image_id}\n" for image_id in fold), encoding="utf-8")
            paths.append(path)
        return paths

    # --------------------------------------------------------------------- #
    # Read side                                                             #
    # --------------------------------------------------------------------- #

    def load_annotations(self) -> AnnotationDocument:
        return load_annotation_file(self.annotation_path)

    def load_folds(self, directory: Path | None = None) -> List[List[int]]:
        """Fold lists in fold-index order, checked against the annotation document."""
        directory = Path(directory) if directory is not None else self._root / FOLD_DIR
        return read_fold_manifests(directory, {image.id for image in self.load_annotations().images})

    def load_items(self, image_ids: Sequence[int] | None = None) -> List[DatasetItem]:
        document = self.load_annotations()
        grouped = document.by_image()
        wanted = [image.id for image in document.images] if image_ids is None else list(image_ids)

        items: List[DatasetItem] = []
        for image_id in wanted:
            try:
                entry = document.image(image_id)
            except KeyError as exc:
                raise DatasetError(f"Image id {image_id} is not annotated.", details={"image_id": image_id}) from exc
            image = read_image(self._root / entry.file)
            if image.shape[:2] != (entry.height, entry.width):
                raise DatasetError(
                    "Image size disagrees with the annotation document.",
                    details={"file": entry.file, "annotated": [entry.width, entry.height]},
                )
            items.append(
                DatasetItem(
                    image_id=image_id,
                    file=entry.file,
                    image=image,
                    landmarks=landmarks_from_entries(grouped[image_id]),
                )
            )
        return items


def load_annotation_file(path: Path) -> AnnotationDocument:
    """Parse an annotation document, naming the offending field on failure."""
    if not path.exists():
        raise NotFoundError(f"Annotation file '{path}' does not exist.", details={"path": str(path)})
    try:
        return AnnotationDocument.model_validate_json(path.read_text(encoding="utf-8"))
    except PydanticValidationError as exc:
        first = exc.errors()[0]
        field = ".".join(str(part) for part in first["loc"]) or "<document>"
        raise DatasetError(
            f"Invalid annotation field '{field}': {first['msg']}",
            details={"file": str(path), "field": field},
        ) from exc


def annotations_by_id(document: AnnotationDocument) -> Dict[int, LandmarkSet]:
    return {image_id: landmarks_from_entries(entries) for image_id, entries in document.by_image().items()}


def _fold_index(path: Path) -> int:
    try:
        return int(path.stem.split("_", 1)[1])
    except (IndexError, ValueError) as exc:
        raise DatasetError(f"Malformed fold manifest name '{path.name}'.", details={"file": str(path)}) from exc


def read_fold_manifests(directory: Path, known_ids: Collection[int]) -> List[List[int]]:
    """Fold lists in fold-index order; every id must be one of ``known_ids``."""
    directory = Path(directory)
    files = sorted(directory.glob("fold_*.txt"), key=_fold_index) if directory.is_dir() else []
    if not files:
        raise NotFoundError(f"No fold manifests under '{directory}'.", details={"path": str(directory)})

    folds: List[List[int]] = []
    for path in files:
        ids: List[int] = []
        for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
            token = line.strip()
            if not token:
                continue
            if not token.isdigit() or int(token) not in known_ids:
                raise DatasetError(
                    f"Unknown image id '{token}' in fold manifest.",
                    details={"file": str(path), "line": line_no},
                )
            ids.append(int(token))
        folds.append(ids)
    return folds
