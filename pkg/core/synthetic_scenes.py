"""Procedural endoscopy-like scenes with marked dots along a lesion boundary.

Each scene places dark dots at jittered arc-length positions on a smooth open
curve, over a textured tissue background, and then applies the three
corruptions that make real frames hard: blood covering some dots, specular
highlights and a full-frame blur. Every dot stays annotated whether or not it
is covered.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.ndimage import gaussian_filter
from scipy.spatial.distance import pdist, squareform
from shapely.geometry import LineString

from common.errors import SceneGenerationError
from core.relation_geometry import LandmarkSet
from schemas.config import SceneConfig

logger = logging.getLogger(__name__)

MAX_ATTEMPTS = 100
BOX_SCALE = 2.5
CURVE_SAMPLES = 256

TISSUE_RGB = np.array([0.80, 0.46, 0.40])
DOT_RGB = np.array([0.10, 0.07, 0.07])
BLOOD_RGB = np.array([0.55, 0.03, 0.03])
SPECULAR_RGB = np.array([1.0, 1.0, 1.0])


@dataclass(frozen=True)
class SceneMeta:
    n_occluded: int
    occluded: Tuple[int, ...]
    specular_count: int
    blur_sigma: float
    attempts: int

    def as_dict(self) -> Dict[str, object]:
        return {
            "n_occluded": self.n_occluded,
            "occluded": list(self.occluded),
            "specular_count": self.specular_count,
            "blur_sigma": self.blur_sigma,
            "attempts": self.attempts,
        }


@dataclass(frozen=True)
class SceneSample:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    landmarks: LandmarkSet  # in arc-length order along the generating curve
    meta: SceneMeta


def scene_rng(seed: int, index: int) -> np.random.Generator:
    """Independent random stream for scene ``index`` of a dataset seeded with ``seed``."""
    return np.random.default_rng([seed, index])


def _disc_coverage(xx: np.ndarray, yy: np.ndarray, center: np.ndarray, radius: float) -> np.ndarray:
    dist = np.hypot(xx - center[0], yy - center[1])
    return np.clip(radius + 0.5 - dist, 0.0, 1.0)


def _ellipse_coverage(
    xx: np.ndarray,
    yy: np.ndarray,
    center: np.ndarray,
    axes: Tuple[float, float],
    angle: float,
) -> np.ndarray:
    dx, dy = xx - center[0], yy - center[1]
    cos, sin = math.cos(angle), math.sin(angle)
    u = (dx * cos + dy * sin) / axes[0]
    v = (-dx * sin + dy * cos) / axes[1]
    q = np.sqrt(u * u + v * v)
    return np.clip((1.0 - q) * min(axes) + 0.5, 0.0, 1.0)


def _paint(image: np.ndarray, coverage: np.ndarray, rgb: np.ndarray, alpha: float = 1.0) -> np.ndarray:
    weight = (alpha * coverage)[..., None]
    return image * (1.0 - weight) + rgb[None, None, :] * weight


def _sample_curve(cfg: SceneConfig, n: int, radii: np.ndarray, rng: np.random.Generator) -> Optional[np.ndarray]:
    """One rejection-sampling attempt. Returns landmark centers or None."""
    size = cfg.image_size
    k = cfg.curve.control_points
    margin = BOX_SCALE * float(radii.max()) / 2.0 + 1.0

    arc_radius = rng.uniform(0.2, 0.3) * size
    needed = float(np.sum(2.0 * radii + 1.0)) * rng.uniform(1.3, 1.8)
    span = min(1.5 * math.pi, max(0.4 * math.pi, needed / arc_radius))
    start = rng.uniform(0.0, 2.0 * math.pi)
    center = size / 2.0 + rng.uniform(-0.05, 0.05, size=2) * size
    wobble = 1.0 + rng.uniform(-cfg.curve.smoothness, cfg.curve.smoothness, size=k)
    jitter = rng.uniform(-0.15, 0.15, size=n)

    angles = start + np.linspace(0.0, span, k)
    control = center + (arc_radius * wobble)[:, None] * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    spline = CubicSpline(np.linspace(0.0, 1.0, k), control, axis=0, bc_type="natural")
    dense = spline(np.linspace(0.0, 1.0, CURVE_SAMPLES))

    if dense.min() < margin or dense.max() > size - 1 - margin:
        return None
    if not LineString(dense).is_simple:
        return None

    arc = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(dense, axis=0), axis=1))])
    gap = arc[-1] / n
    positions = (np.arange(n) + 0.5 + jitter) * gap
    points = np.stack([np.interp(positions, arc, dense[:, 0]), np.interp(positions, arc, dense[:, 1])], axis=1)

    if n > 1:
        dist = squareform(pdist(points))
        clearance = radii[:, None] + radii[None, :] + 1.0
        np.fill_diagonal(dist, np.inf)
        if np.any(dist < clearance):
            return None
    return points


def _render_background(size: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    texture = gaussian_filter(rng.standard_normal((size, size)), sigma=4.0)
    texture /= max(float(texture.std()), 1e-6)
    light = rng.uniform(0.3, 0.7, size=2) * size
    shading = 1.0 - 0.3 * ((xx - light[0]) ** 2 + (yy - light[1]) ** 2) / (size * size)
    image = TISSUE_RGB[None, None, :] * (shading + 0.04 * texture)[..., None]
    return image, xx, yy


def generate_scene(cfg: SceneConfig, rng: np.random.Generator) -> SceneSample:
    """Render one scene. Raises SceneGenerationError if no valid curve is found."""
    size = cfg.image_size
    n = int(rng.integers(cfg.n_landmarks[0], cfg.n_landmarks[1] + 1))
    radii = rng.uniform(cfg.landmark_radius[0], cfg.landmark_radius[1], size=n)

    points = None
    attempts = 0
    while points is None:
        if attempts == MAX_ATTEMPTS:
            raise SceneGenerationError(
                "Could not place landmarks on a simple curve.",
                details={"attempts": MAX_ATTEMPTS, "n_landmarks": n, "image_size": size},
            )
        attempts += 1
        points = _sample_curve(cfg, n, radii, rng)

    image, xx, yy = _render_background(size, rng)
    for point, radius in zip(points, radii):
        image = _paint(image, _disc_coverage(xx, yy, point, radius), DOT_RGB)

    corruption = cfg.corruption
    n_occluded = int(round(corruption.occlusion_frac * n))
    occluded = np.sort(rng.choice(n, size=n_occluded, replace=False)) if n_occluded else np.empty(0, dtype=int)
    for index in occluded:
        radius = radii[index]
        blob_center = points[index] + rng.uniform(-0.5, 0.5, size=2) * radius
        axes = tuple(radius * rng.uniform(1.6, 2.6, size=2))
        image = _paint(image, _ellipse_coverage(xx, yy, blob_center, axes, rng.uniform(0.0, math.pi)), BLOOD_RGB, 0.9)

    for _ in range(corruption.specular_count):
        glint_center = rng.uniform(0.0, size, size=2)
        axes = (float(rng.uniform(2.0, 6.0)), float(rng.uniform(1.5, 4.0)))
        image = _paint(image, _ellipse_coverage(xx, yy, glint_center, axes, rng.uniform(0.0, math.pi)), SPECULAR_RGB, 0.95)

    if corruption.blur_sigma > 0:
        image = gaussian_filter(image, sigma=(corruption.blur_sigma, corruption.blur_sigma, 0.0))

    if attempts > 1:
        logger.debug("Scene needed %d curve attempts", attempts)

    boxes = np.repeat((BOX_SCALE * radii)[:, None], 2, axis=1)
    return SceneSample(
        image=np.clip(image, 0.0, 1.0).astype(np.float32),
        landmarks=LandmarkSet(points=points, boxes=boxes),
        meta=SceneMeta(
            n_occluded=n_occluded,
            occluded=tuple(int(i) for i in occluded),
            specular_count=corruption.specular_count,
            blur_sigma=corruption.blur_sigma,
            attempts=attempts,
        ),
    )
