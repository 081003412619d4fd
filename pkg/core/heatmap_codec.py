"""Target encoding and peak decoding on the downsampled prediction grid.

Maps are laid out channel-first, ``(C, H/d, W/d)`` per image, so they stack
directly into the ``(B, C, H/d, W/d)`` tensors the detector produces.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Dict, List, Sequence, Tuple

import numpy as np
import torch
from scipy.ndimage import maximum_filter

from common.errors import ValidationError
from core.relation_geometry import LandmarkSet, midpoints, order_landmarks

if TYPE_CHECKING:
    from core.detector_model import NetworkOutput

logger = logging.getLogger(__name__)

DEFAULT_MIN_IOU = 0.7
DEFAULT_TOP_K = 20


@dataclass(frozen=True)
class GridSpec:
    input_w: int
    input_h: int
    downsample: int = 4

    def __post_init__(self) -> None:
        if self.downsample < 1:
            raise ValidationError("downsample must be >= 1.", details={"downsample": self.downsample})
        if self.input_w % self.downsample or self.input_h % self.downsample:
            raise ValidationError(
                "Input size must be divisible by the downsample rate.",
                details={"input_w": self.input_w, "input_h": self.input_h, "downsample": self.downsample},
            )

    @property
    def out_w(self) -> int:
        return self.input_w // self.downsample

    @property
    def out_h(self) -> int:
        return self.input_h // self.downsample

    @classmethod
    def square(cls, size: int, downsample: int = 4) -> "GridSpec":
        return cls(input_w=size, input_h=size, downsample=downsample)


@dataclass(frozen=True)
class TargetMaps:
    y_map: np.ndarray  # (1, h, w) landmark heatmap
    s_map: np.ndarray  # (2, h, w) box (w, h) in input pixels
    o_map: np.ndarray  # (2, h, w) fractional center offsets
    r_map: np.ndarray  # (1, h, w) relation heatmap
    pos_mask: np.ndarray  # (1, h, w) landmark center cells
    encoded: LandmarkSet

    @property
    def num_positives(self) -> int:
        return int(self.pos_mask.sum())


@dataclass(frozen=True)
class Detection:
    cx: float
    cy: float
    w: float
    h: float
    score: float

    @property
    def bbox(self) -> Tuple[float, float, float, float]:
        """Top-left ``[x, y, w, h]`` box in input pixels."""
        return (self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.w, self.h)


def gaussian_radius(box_w: float, box_h: float, min_iou: float = DEFAULT_MIN_IOU) -> float:
    """Smallest corner-shift radius keeping IoU >= ``min_iou``, floored at one cell.

    Takes the minimum over the three corner configurations (one corner inside,
    both inside, both outside the ground-truth box).
    """
    if box_w < 0 or box_h < 0:
        raise ValidationError("Box size must be non-negative.", details={"w": box_w, "h": box_h})
    if not 0.0 < min_iou < 1.0:
        raise ValidationError("min_iou must lie in (0, 1).", details={"min_iou": min_iou})

    height, width = float(box_h), float(box_w)

    b1 = height + width
    c1 = width * height * (1 - min_iou) / (1 + min_iou)
    r1 = (b1 - math.sqrt(b1**2 - 4 * c1)) / 2

    a2 = 4.0
    b2 = 2 * (height + width)
    c2 = (1 - min_iou) * width * height
    r2 = (b2 - math.sqrt(b2**2 - 4 * a2 * c2)) / (2 * a2)

    a3 = 4 * min_iou
    b3 = -2 * min_iou * (height + width)
    c3 = (min_iou - 1) * width * height
    r3 = (b3 + math.sqrt(b3**2 - 4 * a3 * c3)) / (2 * a3)

    return max(min(r1, r2, r3), 1.0)


def _kernel(radius: int) -> np.ndarray:
    sigma = radius / 3.0
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    sq = offsets[None, :] ** 2 + offsets[:, None] ** 2
    return np.exp(-sq / (2.0 * sigma * sigma))


def render_gaussian(heatmap: np.ndarray, center: Tuple[int, int], radius: int) -> np.ndarray:
    """Max-composite a Gaussian bump (sigma = radius / 3) onto ``heatmap`` in place."""
    height, width = heatmap.shape[-2:]
    u, v = int(center[0]), int(center[1])
    if not (0 <= u < width and 0 <= v < height):
        raise ValidationError("Gaussian center lies outside the grid.", details={"center": (u, v)})

    radius = max(int(radius), 1)
    kernel = _kernel(radius)

    left, right = min(u, radius), min(width - u, radius + 1)
    top, bottom = min(v, radius), min(height - v, radius + 1)

    window = heatmap[..., v - top : v + bottom, u - left : u + right]
    patch = kernel[radius - top : radius + bottom, radius - left : radius + right]
    np.maximum(window, patch, out=window)
    return heatmap


def _grid_radius(box_w: float, box_h: float, downsample: int) -> int:
    return max(1, int(gaussian_radius(box_w / downsample, box_h / downsample)))


def encode_targets(landmarks: LandmarkSet, grid: GridSpec) -> TargetMaps:
    """Render the landmark, size, offset and relation targets for one image."""
    if landmarks.boxes is None:
        raise ValidationError("Landmark boxes are required to encode targets.")

    points, boxes = landmarks.points, landmarks.boxes
    inside = (
        (points[:, 0] >= 0)
        & (points[:, 0] < grid.input_w)
        & (points[:, 1] >= 0)
        & (points[:, 1] < grid.input_h)
    )
    if not np.all(inside):
        bad = int(np.flatnonzero(~inside)[0])
        raise ValidationError(
            "Landmark center lies outside the image.",
            details={"index": bad, "center": points[bad].tolist()},
        )

    d = grid.downsample
    h, w = grid.out_h, grid.out_w
    y_map = np.zeros((1, h, w), dtype=np.float32)
    s_map = np.zeros((2, h, w), dtype=np.float32)
    o_map = np.zeros((2, h, w), dtype=np.float32)
    r_map = np.zeros((1, h, w), dtype=np.float32)
    pos_mask = np.zeros((1, h, w), dtype=np.float32)

    scaled = points / d
    cells = np.floor(scaled).astype(np.int64)

    owner: Dict[Tuple[int, int], int] = {}
    for index, (u, v) in enumerate(cells.tolist()):
        key = (u, v)
        current = owner.get(key)
        if current is None:
            owner[key] = index
            continue
        logger.warning("Landmarks %d and %d share grid cell %s; keeping the larger box.", current, index, key)
        if boxes[index].prod() > boxes[current].prod():
            owner[key] = index

    keep = np.array(sorted(owner.values()), dtype=np.int64)
    encoded = landmarks.subset(keep)
    radii: List[int] = []
    for index in keep.tolist():
        u, v = cells[index]
        radius = _grid_radius(boxes[index, 0], boxes[index, 1], d)
        radii.append(radius)
        render_gaussian(y_map[0], (u, v), radius)
        s_map[:, v, u] = boxes[index]
        o_map[:, v, u] = scaled[index] - cells[index]
        pos_mask[0, v, u] = 1.0

    path = order_landmarks(encoded)
    relation = midpoints(encoded, path)
    for (i, j), mid in zip(path.edges, relation.points):
        u, v = np.floor(mid / d).astype(np.int64)
        render_gaussian(r_map[0], (int(u), int(v)), min(radii[i], radii[j]))

    return TargetMaps(
        y_map=y_map,
        s_map=s_map,
        o_map=o_map,
        r_map=r_map,
        pos_mask=pos_mask,
        encoded=encoded,
    )


def collate_targets(targets: Sequence[TargetMaps]) -> Dict[str, torch.Tensor]:
    """Stack per-image targets into batched tensors keyed by map name."""
    names = ("y_map", "s_map", "o_map", "r_map", "pos_mask")
    return {name: torch.from_numpy(np.stack([getattr(t, name) for t in targets])) for name in names}


def _decode_maps(
    heat: np.ndarray, size: np.ndarray, offset: np.ndarray, downsample: int, top_k: int
) -> List[Detection]:
    pooled = maximum_filter(heat, size=3, mode="constant", cval=-np.inf)
    flat = heat.ravel()
    peaks = np.flatnonzero(heat.ravel() >= pooled.ravel())
    # stable sort keeps row-major order among equal scores
    ranked = peaks[np.argsort(-flat[peaks], kind="stable")][:top_k]

    width = heat.shape[1]
    detections: List[Detection] = []
    for index in ranked.tolist():
        v, u = divmod(index, width)
        detections.append(
            Detection(
                cx=(u + float(offset[0, v, u])) * downsample,
                cy=(v + float(offset[1, v, u])) * downsample,
                w=max(float(size[0, v, u]), 0.0),
                h=max(float(size[1, v, u]), 0.0),
                score=float(flat[index]),
            )
        )
    return detections


def decode(
    output: "NetworkOutput",
    grid: GridSpec,
    top_k: int = DEFAULT_TOP_K,
    *,
    batch_index: int = 0,
) -> List[Detection]:
    """Keep 8-neighbourhood peaks of the landmark heatmap, best ``top_k`` first."""
    if top_k < 1:
        raise ValidationError("top_k must be >= 1.", details={"top_k": top_k})

    heat = output.y_hat[batch_index, 0].detach().cpu().numpy()
    if heat.shape != (grid.out_h, grid.out_w):
        raise ValidationError(
            "Network output does not match the grid.",
            details={"output": list(heat.shape), "grid": [grid.out_h, grid.out_w]},
        )
    size = output.s_hat[batch_index].detach().cpu().numpy()
    offset = output.o_hat[batch_index].detach().cpu().numpy()
    return _decode_maps(heat, size, offset, grid.downsample, top_k)


def decode_batch(output: "NetworkOutput", grid: GridSpec, top_k: int = DEFAULT_TOP_K) -> List[List[Detection]]:
    return [decode(output, grid, top_k, batch_index=i) for i in range(output.y_hat.shape[0])]
