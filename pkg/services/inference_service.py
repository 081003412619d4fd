"""Checkpoint loading, timed single-image detection and overlay rendering."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np
import torch
from PIL import Image, ImageDraw

from common.errors import CheckpointError
from core.detector_model import LandmarkDetector, image_to_tensor
from core.gce_model import GroupedConsistencyEvaluator
from core.heatmap_codec import DEFAULT_TOP_K, Detection, GridSpec, decode
from core.params import load_param_store
from core.relation_geometry import Point2, boundary_polyline
from repositories.checkpoint_repo import load_checkpoint
from repositories.dataset_repo import list_images, read_image
from schemas.config import DetectorConfig, GCEConfig, config_hash
from schemas.detections import BoundaryRecord, DetectionList, DetectionRecord, ImageTiming, TimingReport

logger = logging.getLogger(__name__)

DETECT_CONF = 0.1
BOUNDARY_CONF = 0.2
BOX_RGB = (255, 0, 0)
LINE_RGB = (255, 255, 0)


def load_detector(path: Path) -> LandmarkDetector:
    store = load_checkpoint(path)
    if store.kind != "detector":
        raise CheckpointError("Checkpoint does not hold a detector.", details={"kind": store.kind})
    config = DetectorConfig.model_validate_json(store.config_json)
    model = LandmarkDetector(config)
    load_param_store(model, store, expected_hash=config_hash(config))
    return model.eval()


def load_gce(path: Path) -> GroupedConsistencyEvaluator:
    store = load_checkpoint(path)
    if store.kind != "gce":
        raise CheckpointError("Checkpoint does not hold an evaluator.", details={"kind": store.kind})
    config = GCEConfig.model_validate_json(store.config_json)
    model = GroupedConsistencyEvaluator(config)
    load_param_store(model, store, expected_hash=config_hash(config))
    return model.eval()


def image_id_for(path: Path, position: int) -> int:
    # dataset images are named by their numeric id
    return int(path.stem) if path.stem.isdigit() else position


def to_record(image_id: int, detection: Detection) -> DetectionRecord:
    return DetectionRecord(image_id=image_id, bbox=list(detection.bbox), score=min(max(detection.score, 0.0), 1.0))


@dataclass(frozen=True)
class TimedDetections:
    detections: List[Detection]
    preprocess_ms: float
    forward_ms: float
    decode_ms: float

    @property
    def total_ms(self) -> float:
        return self.preprocess_ms + self.forward_ms + self.decode_ms


class InferenceService:
    """Runs a loaded detector on images and renders the results."""

    def __init__(self, detector: LandmarkDetector) -> None:
        self._detector = detector.eval()

    @property
    def downsample(self) -> int:
        return self._detector.downsample

    def _prepare(self, image: np.ndarray) -> Tuple[torch.Tensor, GridSpec]:
        # zero-pad bottom/right up to the detector stride
        height, width = image.shape[:2]
        d = self.downsample
        pad_h, pad_w = (-height) % d, (-width) % d
        if pad_h or pad_w:
            image = np.pad(image, ((0, pad_h), (0, pad_w), (0, 0)))
        return image_to_tensor(image), GridSpec(input_w=width + pad_w, input_h=height + pad_h, downsample=d)

    def detect(self, image: np.ndarray, *, conf: float = DETECT_CONF, top_k: int = DEFAULT_TOP_K) -> TimedDetections:
        start = time.perf_counter()
        tensor, grid = self._prepare(image)
        prepared = time.perf_counter()
        with torch.no_grad():
            output = self._detector(tensor)
        forwarded = time.perf_counter()
        detections = [d for d in decode(output, grid, top_k) if d.score >= conf]
        decoded = time.perf_counter()
        return TimedDetections(
            detections=detections,
            preprocess_ms=1000.0 * (prepared - start),
            forward_ms=1000.0 * (forwarded - prepared),
            decode_ms=1000.0 * (decoded - forwarded),
        )

    def boundary(self, image: np.ndarray, *, conf: float = BOUNDARY_CONF) -> Tuple[List[Point2], List[Detection]]:
        detections = self.detect(image, conf=0.0).detections
        return boundary_polyline(detections, conf), detections

    # --------------------------------------------------------------------- #
    # Directory runs                                                        #
    # --------------------------------------------------------------------- #

    def detect_directory(
        self,
        images_dir: Path,
        out_dir: Path,
        *,
        conf: float = DETECT_CONF,
        top_k: int = DEFAULT_TOP_K,
    ) -> Tuple[List[DetectionRecord], TimingReport, List[Path]]:
        out_dir = Path(out_dir)
        records: List[DetectionRecord] = []
        timings: List[ImageTiming] = []
        written: List[Path] = []
        for position, path in enumerate(list_images(Path(images_dir))):
            image_id = image_id_for(path, position)
            image = read_image(path)
            result = self.detect(image, conf=conf, top_k=top_k)
            logger.debug("%s: %d detections in %.2f ms", path.name, len(result.detections), result.total_ms)

            records.extend(to_record(image_id, d) for d in result.detections)
            timings.append(
                ImageTiming(
                    image_id=image_id,
                    file=path.name,
                    preprocess_ms=result.preprocess_ms,
                    forward_ms=result.forward_ms,
                    decode_ms=result.decode_ms,
                )
            )
            written.append(draw_boxes(image, result.detections, out_dir / "overlays" / f"{path.stem}.png"))

        report = TimingReport(
            images=timings,
            mean_ms=float(np.mean([t.total_ms for t in timings])) if timings else None,
        )
        if report.mean_ms is not None:
            logger.info("Mean inference time %.2f ms over %d images", report.mean_ms, len(timings))

        out_dir.mkdir(parents=True, exist_ok=True)
        detections_path = out_dir / "detections.json"
        detections_path.write_bytes(DetectionList.dump_json(records, indent=2) + b"\n")
        timing_path = out_dir / "timing.json"
        timing_path.write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")
        return records, report, [detections_path, timing_path, *written]

    def boundary_directory(
        self,
        images_dir: Path,
        out_dir: Path,
        *,
        conf: float = BOUNDARY_CONF,
    ) -> Tuple[List[BoundaryRecord], List[Path]]:
        out_dir = Path(out_dir)
        records: List[BoundaryRecord] = []
        written: List[Path] = []
        for position, path in enumerate(list_images(Path(images_dir))):
            image = read_image(path)
            polyline, _ = self.boundary(image, conf=conf)
            records.append(
                BoundaryRecord(
                    image_id=image_id_for(path, position),
                    file=path.name,
                    conf_threshold=conf,
                    polyline=[[p.x, p.y] for p in polyline],
                )
            )
            written.append(draw_polyline(image, polyline, out_dir / "overlays" / f"{path.stem}.png"))

        out_dir.mkdir(parents=True, exist_ok=True)
        boundary_path = out_dir / "boundaries.json"
        boundary_path.write_text(
            json.dumps([r.model_dump(mode="json") for r in records], indent=2) + "\n", encoding="utf-8"
        )
        return records, [boundary_path, *written]


def _canvas(image: np.ndarray) -> Image.Image:
    return Image.fromarray(np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8))


def draw_boxes(image: np.ndarray, detections: Sequence[Detection], path: Path) -> Path:
    canvas = _canvas(image)
    draw = ImageDraw.Draw(canvas)
    for detection in detections:
        x, y, w, h = detection.bbox
        draw.rectangle([x, y, x + w, y + h], outline=BOX_RGB, width=1)
    path.parent.mkdir(parents=True, exist_ok=True)
    canvas.save(path, format="PNG")
    return path


def draw_polyline(image: np.ndarray, polyline: Sequence[Point2], path: Path) -> Path:
    canvas = _canvas(image)
    draw = ImageDraw.Draw(canvas)
    points = [p.as_tuple() for p in polyline]
    if len(points) > 1:
        draw.line(points, fill=LINE_RGB, width=2)
    for x, y in points:
        draw.ellipse([x - 2, y - 2, x + 2, y + 2], outline=LINE_RGB)
    path.parent.mkdir(parents=True, exist_ok=True)
    canvas.save(path, format="PNG")
    return path

