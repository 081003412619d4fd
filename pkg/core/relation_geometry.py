"""Spatial ordering of landmarks along the cutting curve.

Landmarks are joined into a simple open path by a greedy rule: start from the
globally closest pair, then repeatedly attach the unpaired point that is closest
to either end of the current path. The midpoints of the path edges are the
relation keypoints used as auxiliary supervision, and the same ordering turns
confident detections into a boundary polyline.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Protocol, Sequence, Tuple

import numpy as np
from scipy.spatial.distance import cdist

from common.errors import ValidationError

Edge = Tuple[int, int]


@dataclass(frozen=True)
class Point2:
    x: float
    y: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValidationError("Point coordinates must be finite.", details={"x": self.x, "y": self.y})

    def as_tuple(self) -> Tuple[float, float]:
        return (self.x, self.y)


@dataclass(frozen=True)
class LandmarkSet:
    """Landmark centers (n, 2) in input pixels, optionally with (w, h) boxes."""

    points: np.ndarray
    boxes: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if not np.all(np.isfinite(points)):
            raise ValidationError("Landmark coordinates must be finite.")
        object.__setattr__(self, "points", points)

        if self.boxes is not None:
            boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 2)
            if boxes.shape[0] != points.shape[0]:
                raise ValidationError(
                    "Boxes must align with points.",
                    details={"points": points.shape[0], "boxes": boxes.shape[0]},
                )
            if not np.all(np.isfinite(boxes)) or np.any(boxes < 0):
                raise ValidationError("Box sizes must be finite and non-negative.")
            object.__setattr__(self, "boxes", boxes)

    @classmethod
    def from_points(
        cls,
        points: Iterable[Sequence[float]],
        boxes: Optional[Iterable[Sequence[float]]] = None,
    ) -> "LandmarkSet":
        return cls(
            points=np.array(list(points), dtype=np.float64).reshape(-1, 2),
            boxes=None if boxes is None else np.array(list(boxes), dtype=np.float64).reshape(-1, 2),
        )

    def __len__(self) -> int:
        return int(self.points.shape[0])

    def subset(self, keep: np.ndarray) -> "LandmarkSet":
        return LandmarkSet(
            points=self.points[keep],
            boxes=None if self.boxes is None else self.boxes[keep],
        )


@dataclass(frozen=True)
class CurvePath:
    edges: List[Edge] = field(default_factory=list)
    order: List[int] = field(default_factory=list)


@dataclass(frozen=True)
class MidpointSet:
    points: np.ndarray

    def __len__(self) -> int:
        return int(self.points.shape[0])


class ScoredCenter(Protocol):
    cx: float
    cy: float
    score: float


def _edge(i: int, j: int) -> Edge:
    return (i, j) if i < j else (j, i)


def order_landmarks(landmarks: LandmarkSet) -> CurvePath:
    """Greedily build a simple path over the landmarks.

    Ties in distance go to the lexicographically smallest (min index, max index)
    edge, so the result is deterministic for coincident or symmetric points.
    """
    n = len(landmarks)
    if n < 2:
        return CurvePath(edges=[], order=list(range(n)))

    dist = cdist(landmarks.points, landmarks.points)

    best: Optional[Tuple[float, Edge]] = None
    for i in range(n):
        for j in range(i + 1, n):
            candidate = (float(dist[i, j]), (i, j))
            if best is None or candidate < best:
                best = candidate
    assert best is not None
    first = best[1]

    edges: List[Edge] = [first]
    path = deque(first)
    unpaired = set(range(n)) - set(first)

    while unpaired:
        head, tail = path[0], path[-1]
        choice: Optional[Tuple[float, Edge, int, int]] = None
        for point in unpaired:
            for end in (head, tail):
                candidate = (float(dist[point, end]), _edge(point, end), point, end)
                if choice is None or candidate[:2] < choice[:2]:
                    choice = candidate
        assert choice is not None
        _, edge, point, end = choice

        edges.append(edge)
        if end == head:
            path.appendleft(point)
        else:
            path.append(point)
        unpaired.discard(point)

    return CurvePath(edges=edges, order=list(path))


def midpoints(landmarks: LandmarkSet, path: CurvePath) -> MidpointSet:
    """Relation keypoints: one midpoint per path edge, in edge order."""
    if not path.edges:
        return MidpointSet(points=np.zeros((0, 2), dtype=np.float64))

    index = np.asarray(path.edges, dtype=np.int64)
    pts = landmarks.points
    return MidpointSet(points=(pts[index[:, 0]] + pts[index[:, 1]]) / 2.0)


def boundary_polyline(detections: Sequence[ScoredCenter], conf_threshold: float = 0.2) -> List[Point2]:
    """Order confident detection centers into the lesion boundary polyline."""
    if not 0.0 <= conf_threshold <= 1.0:
        raise ValidationError(
            "conf_threshold must lie in [0, 1].", details={"conf_threshold": conf_threshold}
        )

    kept = [det for det in detections if det.score >= conf_threshold]
    centers = [Point2(float(det.cx), float(det.cy)) for det in kept]
    if len(centers) < 2:
        return centers

    path = order_landmarks(LandmarkSet.from_points(p.as_tuple() for p in centers))
    return [centers[i] for i in path.order]
