"""Random flip / rescale / shift / colour jitter followed by a crop.

Pixel ``i`` is centred on coordinate ``i``, so a horizontal flip maps
``x -> (W - 1) - x``. Relation targets are never warped: they are regenerated
from the surviving landmarks when targets are encoded.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import affine_transform

from core.relation_geometry import LandmarkSet
from schemas.config import AugConfig


@dataclass(frozen=True)
class LabeledImage:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    landmarks: LandmarkSet


def _warp(image: np.ndarray, scale: float, src_center: np.ndarray, out_shape: tuple[int, int]) -> np.ndarray:
    out_h, out_w = out_shape
    out_center = np.array([(out_h - 1) / 2.0, (out_w - 1) / 2.0])
    src_rc = np.array([src_center[1], src_center[0]])
    matrix = np.array([1.0 / scale, 1.0 / scale])
    offset = src_rc - out_center / scale
    channels = [
        affine_transform(image[..., c], matrix, offset=offset, output_shape=out_shape, order=1, mode="constant", cval=0.0)
        for c in range(image.shape[2])
    ]
    return np.stack(channels, axis=-1)


def augment(sample: LabeledImage, cfg: AugConfig, rng: np.random.Generator) -> LabeledImage:
    """Apply the random geometric and photometric augmentation to one sample.

    Horizontal flip maps ``x -> (W - 1) - x``: on a 128-px image x=10 lands on 117.
    Random draws happen in a fixed order regardless of which steps are active,
    so the result depends only on the generator state.
    """
    image = np.asarray(sample.image, dtype=np.float32)
    height, width = image.shape[:2]
    points = sample.landmarks.points.copy()
    boxes = None if sample.landmarks.boxes is None else sample.landmarks.boxes.copy()

    flip = rng.random() < cfg.hflip_prob
    scale = float(rng.uniform(*cfg.scale_range))
    shift = rng.uniform(cfg.shift_range[0], cfg.shift_range[1], size=2)
    jitter = 1.0 + rng.uniform(-cfg.color_jitter, cfg.color_jitter, size=3)

    if flip:
        image = image[:, ::-1]
        points[:, 0] = (width - 1) - points[:, 0]

    out_h, out_w = (cfg.crop_size, cfg.crop_size) if cfg.crop else (height, width)
    src_center = np.array([(width - 1) / 2.0, (height - 1) / 2.0]) * shift
    out_center = np.array([(out_w - 1) / 2.0, (out_h - 1) / 2.0])

    if scale != 1.0 or (out_h, out_w) != (height, width) or not np.array_equal(src_center, out_center):
        image = _warp(image, scale, src_center, (out_h, out_w))
        points = (points - src_center) * scale + out_center
        if boxes is not None:
            boxes = boxes * scale

    if cfg.color_jitter > 0:
        image = np.clip(image * jitter[None, None, :], 0.0, 1.0)

    inside = (points[:, 0] >= 0) & (points[:, 0] < out_w) & (points[:, 1] >= 0) & (points[:, 1] < out_h)
    landmarks = LandmarkSet(points=points[inside], boxes=None if boxes is None else boxes[inside])
    return LabeledImage(image=np.ascontiguousarray(image, dtype=np.float32), landmarks=landmarks)
