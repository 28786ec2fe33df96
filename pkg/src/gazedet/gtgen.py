"""Ground-truth heatmap construction for head-target instances.

Point and box annotations are converted into the dense targets the model
regresses against: one Gaussian head map and one Gaussian gaze map per
instance, a connection map tracing the head-to-target segment, and a single
per-scene head detection map covering every head.

Conventions used throughout the package:
  * points are (x, y) in normalized [0, 1]^2 coordinates, x along width
  * heatmaps are numpy arrays of shape (height n, width m), indexed [row, col]
  * pixel centers sit at ((col + 0.5) / m, (row + 0.5) / n)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

Point = tuple[float, float]
Box = tuple[float, float, float, float]  # x0, y0, x1, y1 normalized

DEFAULT_HEATMAP_SIZE = (64, 64)  # (m, n) = (width, height)
DEFAULT_SIGMA = 3.0  # pixels at 64x64
DEFAULT_CONNECTION_POINTS = 50


@dataclass(frozen=True)
class Annotation:
    """One head-target instance: a head box plus where that head is looking.

    ``gaze_point`` is present iff the target is inside the frame. When a head
    carries several annotated gaze points (multi-annotator datasets),
    ``gaze_candidates`` holds all of them and ``gaze_point`` is the primary
    one used for training targets.
    """

    head_box: Box
    gaze_point: Point | None
    out_of_frame: bool
    gaze_candidates: tuple[Point, ...] = ()

    def __post_init__(self):
        x0, y0, x1, y1 = self.head_box
        if not all(math.isfinite(v) for v in self.head_box):
            raise ValueError(f"non-finite head box {self.head_box}")
        if not (0.0 <= x0 < x1 <= 1.0 and 0.0 <= y0 < y1 <= 1.0):
            raise ValueError(
                f"head box must lie in [0,1]^2 with positive extent, got {self.head_box}"
            )
        if self.out_of_frame != (self.gaze_point is None):
            raise ValueError("gaze_point must be present iff the target is in-frame")
        if self.gaze_point is not None:
            gx, gy = self.gaze_point
            if not (0.0 <= gx <= 1.0 and 0.0 <= gy <= 1.0):
                raise ValueError(f"gaze point {self.gaze_point} outside [0,1]^2")
        if not self.gaze_candidates and self.gaze_point is not None:
            object.__setattr__(self, "gaze_candidates", (self.gaze_point,))

    @property
    def head_center(self) -> Point:
        x0, y0, x1, y1 = self.head_box
        return ((x0 + x1) / 2.0, (y0 + y1) / 2.0)


@dataclass(frozen=True)
class GroundTruthConfig:
    heatmap_size: tuple[int, int] = DEFAULT_HEATMAP_SIZE  # (m, n)
    sigma: float = DEFAULT_SIGMA
    connection_points: int = DEFAULT_CONNECTION_POINTS


@dataclass
class GroundTruthMaps:
    """Dense targets for one scene with M instances.

    ``head_maps``, ``gaze_maps`` and ``connection_maps`` are (M, n, m) arrays;
    ``detection_map`` is a single (n, m) map covering all heads. Out-of-frame
    instances have identically-zero gaze and connection maps.
    """

    head_maps: np.ndarray
    gaze_maps: np.ndarray
    connection_maps: np.ndarray
    detection_map: np.ndarray
    oof_labels: np.ndarray  # (M,) bool
    annotations: list[Annotation] = field(default_factory=list)

    @property
    def num_instances(self) -> int:
        return int(self.head_maps.shape[0])


def point_to_pixel(point: Point, size: tuple[int, int]) -> tuple[int, int]:
    """Map a normalized point to its nearest pixel (col, row).

    Uses the pixel-center convention: the point (c+0.5)/m lands exactly on
    column c. Results are clipped into the grid.
    """
    m, n = size
    col = int(np.clip(np.rint(point[0] * m - 0.5), 0, m - 1))
    row = int(np.clip(np.rint(point[1] * n - 0.5), 0, n - 1))
    return col, row


def pixel_to_point(col: int, row: int, size: tuple[int, int]) -> Point:
    """Center coordinates of pixel (col, row) in normalized space."""
    m, n = size
    return ((col + 0.5) / m, (row + 0.5) / n)


def _check_point(point: Point, name: str = "point") -> None:
    x, y = float(point[0]), float(point[1])
    if not (math.isfinite(x) and math.isfinite(y)):
        raise ValueError(f"{name} must be finite, got {point}")
    if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
        raise ValueError(f"{name} {point} outside [0,1]^2")


def make_gaussian_map(
    center: Point,
    sigma: float = DEFAULT_SIGMA,
    size: tuple[int, int] = DEFAULT_HEATMAP_SIZE,
) -> np.ndarray:
    """Peak-normalized Gaussian centered at the pixel nearest ``center``.

    The center is snapped to its nearest pixel before evaluating
    exp(-d^2 / (2 sigma^2)), so the peak value is exactly 1.0 at that pixel.
    No normalization to unit sum. ``sigma`` is in pixels of the output grid.
    """
    if not (math.isfinite(sigma) and sigma > 0):
        raise ValueError(f"sigma must be positive and finite, got {sigma}")
    _check_point(center, "center")
    m, n = size
    c_col, c_row = point_to_pixel(center, size)
    cols = np.arange(m, dtype=np.float64)
    rows = np.arange(n, dtype=np.float64)
    d2 = (cols[None, :] - c_col) ** 2 + (rows[:, None] - c_row) ** 2
    return np.exp(-d2 / (2.0 * sigma * sigma)).astype(np.float32)


def make_connection_map(
    head_center: Point,
    gaze_point: Point,
    sigma: float = DEFAULT_SIGMA,
    num_points: int = DEFAULT_CONNECTION_POINTS,
    size: tuple[int, int] = DEFAULT_HEATMAP_SIZE,
) -> np.ndarray:
    """Pixelwise maximum of Gaussians sampled along the head-to-gaze segment.

    ``num_points`` samples are placed uniformly on the segment, inclusive of
    both endpoints, and each contributes a peak-1 Gaussian; combining by max
    keeps every value in [0, 1] and the ridge along the segment at 1.0.
    """
    if num_points < 2:
        raise ValueError(f"num_points must be >= 2, got {num_points}")
    if not (math.isfinite(sigma) and sigma > 0):
        raise ValueError(f"sigma must be positive and finite, got {sigma}")
    _check_point(head_center, "head_center")
    _check_point(gaze_point, "gaze_point")
    m, n = size
    t = np.linspace(0.0, 1.0, num_points)
    xs = head_center[0] + t * (gaze_point[0] - head_center[0])
    ys = head_center[1] + t * (gaze_point[1] - head_center[1])
    # Snap each sample to its pixel, as make_gaussian_map does, then take the
    # max of the per-sample Gaussians. max(exp(-d^2)) == exp(-min(d^2)).
    s_cols = np.clip(np.rint(xs * m - 0.5), 0, m - 1)
    s_rows = np.clip(np.rint(ys * n - 0.5), 0, n - 1)
    samples = np.unique(np.stack([s_cols, s_rows], axis=1), axis=0)
    cols = np.arange(m, dtype=np.float64)
    rows = np.arange(n, dtype=np.float64)
    d2 = (cols[None, None, :] - samples[:, 0, None, None]) ** 2 + (
        rows[None, :, None] - samples[:, 1, None, None]
    ) ** 2
    return np.exp(-d2.min(axis=0) / (2.0 * sigma * sigma)).astype(np.float32)


def make_ground_truth(
    annotations: list[Annotation],
    config: GroundTruthConfig = GroundTruthConfig(),
) -> GroundTruthMaps:
    """Build the full target set for one scene.

    Head maps use head-box centers; the detection map is the pixelwise max of
    all head Gaussians so that every head in the scene is covered. Out-of-frame
    instances get zero gaze and connection maps.
    """
    m, n = config.heatmap_size
    num = len(annotations)
    head_maps = np.zeros((num, n, m), dtype=np.float32)
    gaze_maps = np.zeros((num, n, m), dtype=np.float32)
    conn_maps = np.zeros((num, n, m), dtype=np.float32)
    oof = np.zeros(num, dtype=bool)
    for k, ann in enumerate(annotations):
        head_maps[k] = make_gaussian_map(ann.head_center, config.sigma, config.heatmap_size)
        oof[k] = ann.out_of_frame
        if not ann.out_of_frame:
            gaze_maps[k] = make_gaussian_map(ann.gaze_point, config.sigma, config.heatmap_size)
            conn_maps[k] = make_connection_map(
                ann.head_center,
                ann.gaze_point,
                config.sigma,
                config.connection_points,
                config.heatmap_size,
            )
    detection = head_maps.max(axis=0) if num else np.zeros((n, m), dtype=np.float32)
    return GroundTruthMaps(
        head_maps=head_maps,
        gaze_maps=gaze_maps,
        connection_maps=conn_maps,
        detection_map=detection,
        oof_labels=oof,
        annotations=list(annotations),
    )
