"""
modules/pointcloud.py · Point clouds and the cylindrical range view for ConDA Desk

Covers the raw sample (PointCloud), its 6-channel range-view projection
(RangeImage), per-pixel class grids (LabelMap), point-cloud augmentation
and range-view occupancy statistics.

Projection contract (bit-exact, shared with the tests):
    u = floor(0.5 * (1 - atan2(y, x) / pi) * w)                clamp [0, w-1]
    v = floor((1 - (asin(z / r) - fov_down) / (fov_up - fov_down)) * h)
                                                                clamp [0, h-1]
On a pixel collision the point closest to the sensor wins; equal ranges
resolve to the lower point id. Out-of-FOV points clamp to the border rows.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import pandas as pd

from utils.errors import ConfigError, DataError, ShapeError

logger = logging.getLogger(__name__)

IGNORE = -1          # label sentinel, never a class id
EMPTY = -1           # point_index sentinel for unoccupied pixels

CHANNELS = ("x", "y", "z", "intensity", "range", "mask")
CH_RANGE = 4
CH_MASK = 5


# ── Domain types ───────────────────────────────────────────────────────────────
@dataclass
class PointCloud:
    points: np.ndarray                    # (N, 4) x, y, z [m], intensity [0, 1]
    labels: Optional[np.ndarray] = None   # (N,) class id or IGNORE

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 4)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)

    def __len__(self):
        return self.points.shape[0]

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def intensity(self) -> np.ndarray:
        return self.points[:, 3]

    def validate(self) -> "PointCloud":
        if not np.all(np.isfinite(self.points)):
            raise DataError("point cloud contains non-finite values")
        it = self.intensity
        if it.size and (it.min() < 0.0 or it.max() > 1.0):
            raise DataError(f"intensity outside [0, 1]: [{it.min():.4g}, {it.max():.4g}]")
        if self.labels is not None and self.labels.shape[0] != len(self):
            raise ShapeError(f"{self.labels.shape[0]} labels for {len(self)} points")
        return self


@dataclass
class RangeImage:
    channels: np.ndarray       # (6, h, w)
    point_index: np.ndarray    # (h, w) originating point id or EMPTY
    fov_up: float
    fov_down: float

    @property
    def h(self) -> int:
        return self.channels.shape[1]

    @property
    def w(self) -> int:
        return self.channels.shape[2]

    @property
    def mask(self) -> np.ndarray:
        return self.channels[CH_MASK]


@dataclass
class LabelMap:
    grid: np.ndarray           # (h, w) class id or IGNORE

    @property
    def shape(self) -> tuple:
        return self.grid.shape


@dataclass(frozen=True)
class RVSensor:
    """Projection geometry shared by every range image of a run."""

    h: int = 32
    w: int = 256
    fov_up: float = 0.1745
    fov_down: float = -0.5236
    max_range: float = 60.0

    def project(self, cloud: "PointCloud"):
        return project_to_rv(cloud, self.h, self.w, self.fov_up, self.fov_down)

    def project_batch(self, clouds: list):
        return project_batch(clouds, self.h, self.w, self.fov_up, self.fov_down)

    def encode(self, clouds: list):
        """Normalized network inputs and projected labels (None for unlabeled clouds)."""
        images, labels = self.project_batch(clouds)
        return normalize_channels(images, self.max_range), labels


@dataclass
class AugmentConfig:
    """Bounds for each transform. Applied in the order yaw → jitter → flip → scale."""

    yaw_range: tuple = (-np.pi, np.pi)     # radians, uniform
    jitter_sigma: float = 0.01             # meters, per coordinate
    flip_x: float = 0.5                    # probability of x → -x
    flip_y: float = 0.5                    # probability of y → -y
    scale_range: tuple = (0.95, 1.05)      # uniform, strictly positive

    def validate(self) -> "AugmentConfig":
        lo, hi = self.scale_range
        if lo <= 0 or hi <= 0:
            raise ConfigError(f"scale range must be strictly positive, got {self.scale_range}")
        if lo > hi or self.yaw_range[0] > self.yaw_range[1]:
            raise ConfigError("range bounds must be ordered (lo, hi)")
        if self.jitter_sigma < 0:
            raise ConfigError(f"jitter sigma must be >= 0, got {self.jitter_sigma}")
        for p in (self.flip_x, self.flip_y):
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"flip probability outside [0, 1]: {p}")
        return self

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(yaw_range=(0.0, 0.0), jitter_sigma=0.0, flip_x=0.0, flip_y=0.0,
                   scale_range=(1.0, 1.0))


# ── Projection ─────────────────────────────────────────────────────────────────
def pixel_coords(xyz: np.ndarray, h: int, w: int, fov_up: float, fov_down: float):
    """Row/column of every point under the projection contract. Returns (v, u, range)."""
    x, y, z = xyz[:, 0], xyz[:, 1], xyz[:, 2]
    rng = np.sqrt(x * x + y * y + z * z)
    if np.any(rng == 0.0):
        raise DataError("point at the sensor origin cannot be projected")

    u = np.floor(0.5 * (1.0 - np.arctan2(y, x) / np.pi) * w)
    u = np.clip(u, 0, w - 1).astype(np.int64)

    elev = np.arcsin(np.clip(z / rng, -1.0, 1.0))
    v = np.floor((1.0 - (elev - fov_down) / (fov_up - fov_down)) * h)
    v = np.clip(v, 0, h - 1).astype(np.int64)
    return v, u, rng


def _check_sensor(h, w, fov_up, fov_down):
    if h < 1 or w < 1:
        raise ConfigError(f"range image must be at least 1x1, got {h}x{w}")
    if not fov_up > fov_down:
        raise ConfigError(f"fov_up ({fov_up}) must exceed fov_down ({fov_down})")


def project_to_rv(cloud: PointCloud, h: int, w: int, fov_up: float, fov_down: float):
    """
    Project a cloud onto an h×w cylindrical range image.

    Returns (RangeImage, LabelMap | None); the label map is produced only
    for labeled clouds and follows the same collision winner.
    """
    _check_sensor(h, w, fov_up, fov_down)
    cloud.validate()

    channels = np.zeros((len(CHANNELS), h, w), dtype=np.float64)
    point_index = np.full((h, w), EMPTY, dtype=np.int64)
    grid = np.full((h, w), IGNORE, dtype=np.int64) if cloud.labels is not None else None

    if len(cloud) > 0:
        v, u, rng = pixel_coords(cloud.xyz, h, w, fov_up, fov_down)
        pix = v * w + u
        ids = np.arange(len(cloud))
        # closest first within each pixel, lower id on ties
        order = np.lexsort((ids, rng, pix))
        _, first = np.unique(pix[order], return_index=True)
        win = order[first]
        wv, wu = v[win], u[win]

        channels[0:3, wv, wu] = cloud.xyz[win].T
        channels[3, wv, wu] = cloud.intensity[win]
        channels[CH_RANGE, wv, wu] = rng[win]
        channels[CH_MASK, wv, wu] = 1.0
        point_index[wv, wu] = win
        if grid is not None:
            grid[wv, wu] = cloud.labels[win]

    ri = RangeImage(channels=channels, point_index=point_index, fov_up=fov_up, fov_down=fov_down)
    return ri, (LabelMap(grid) if grid is not None else None)


def backproject_labels(lm: LabelMap, ri: RangeImage, cloud: PointCloud) -> np.ndarray:
    """Per-point labels read from the pixel each point projects to, occluded points included."""
    if lm.grid.shape != (ri.h, ri.w):
        raise ShapeError(f"label map {lm.grid.shape} does not match range image {(ri.h, ri.w)}")
    if len(cloud) == 0:
        return np.zeros(0, dtype=np.int64)
    v, u, _ = pixel_coords(cloud.xyz, ri.h, ri.w, ri.fov_up, ri.fov_down)
    return lm.grid[v, u].astype(np.int64)


def project_batch(clouds: list, h: int, w: int, fov_up: float, fov_down: float):
    """Stack projections: channels (b, 6, h, w) and labels (b, h, w) or None if any cloud is unlabeled."""
    images = np.zeros((len(clouds), len(CHANNELS), h, w), dtype=np.float64)
    labels = np.full((len(clouds), h, w), IGNORE, dtype=np.int64)
    labeled = True
    for i, cloud in enumerate(clouds):
        ri, lm = project_to_rv(cloud, h, w, fov_up, fov_down)
        images[i] = ri.channels
        if lm is None:
            labeled = False
        else:
            labels[i] = lm.grid
    return images, (labels if labeled else None)


def normalize_channels(channels: np.ndarray, max_range: float) -> np.ndarray:
    """Network inputs: x, y, z and range scaled by 1/max_range; intensity and mask untouched."""
    out = np.array(channels, dtype=np.float64, copy=True)
    out[..., [0, 1, 2, CH_RANGE], :, :] /= max_range
    return out


# ── Augmentation ───────────────────────────────────────────────────────────────
def augment_cloud(cloud: PointCloud, rng_seed: int, params: AugmentConfig) -> PointCloud:
    """Seeded yaw → jitter → flip → scale. Labels and intensity are carried unchanged."""
    params.validate()
    rng = np.random.default_rng(rng_seed)
    xyz = cloud.xyz.copy()

    # every draw happens regardless of params so the stream is layout-stable
    yaw = rng.uniform(*params.yaw_range)
    jitter = rng.normal(0.0, 1.0, size=xyz.shape) * params.jitter_sigma
    fx, fy = rng.random(), rng.random()
    scale = rng.uniform(*params.scale_range)

    c, s = np.cos(yaw), np.sin(yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    xyz = xyz @ rot.T
    xyz = xyz + jitter
    if fx < params.flip_x:
        xyz[:, 0] = -xyz[:, 0]
    if fy < params.flip_y:
        xyz[:, 1] = -xyz[:, 1]
    xyz = xyz * scale

    points = np.column_stack([xyz, cloud.intensity])
    labels = None if cloud.labels is None else cloud.labels.copy()
    return PointCloud(points=points, labels=labels)


# ── Occupancy ──────────────────────────────────────────────────────────────────
def region_bounds(size: int, parts: int) -> list:
    """Split [0, size) into `parts` bands of size//parts; the remainder goes to the last band."""
    step = size // parts
    bounds = [(i * step, (i + 1) * step) for i in range(parts)]
    bounds[-1] = (bounds[-1][0], size)
    return bounds


def occupancy_stats(ri: RangeImage, split: tuple = (1, 1), lm: Optional[LabelMap] = None,
                    num_classes: Optional[int] = None) -> dict:
    """
    Empty-pixel fraction and, with a label map, per-region class histograms.

    histogram has shape (m, n, C) with C = num_classes or max label + 1;
    IGNORE pixels are not counted.
    """
    m, n = split
    if m < 1 or n < 1 or m > ri.h or n > ri.w:
        raise ConfigError(f"region grid {split} does not fit a {ri.h}x{ri.w} image")
    occupied = ri.mask > 0.5
    stats = {"empty_fraction": float(1.0 - occupied.sum() / occupied.size)}

    if lm is not None:
        if lm.grid.shape != (ri.h, ri.w):
            raise ShapeError(f"label map {lm.grid.shape} does not match range image {(ri.h, ri.w)}")
        c = num_classes if num_classes is not None else int(max(lm.grid.max(), -1)) + 1
        hist = np.zeros((m, n, max(c, 1)), dtype=np.int64)
        for i, (r0, r1) in enumerate(region_bounds(ri.h, m)):
            for j, (c0, c1) in enumerate(region_bounds(ri.w, n)):
                cell = lm.grid[r0:r1, c0:c1]
                cell = cell[cell != IGNORE]
                hist[i, j] = np.bincount(cell, minlength=hist.shape[2])[: hist.shape[2]]
        stats["histogram"] = hist
    return stats


def occupancy_report(images: np.ndarray, labels: Optional[np.ndarray], split: tuple,
                     num_classes: int) -> pd.DataFrame:
    """
    Aggregate occupancy over a batch of projected channels.

    One row per region: empty fraction of the region and each class's share
    of the region's labeled pixels.
    """
    m, n = split
    h, w = images.shape[2], images.shape[3]
    rows = []
    for i, (r0, r1) in enumerate(region_bounds(h, m)):
        for j, (c0, c1) in enumerate(region_bounds(w, n)):
            mask = images[:, CH_MASK, r0:r1, c0:c1] > 0.5
            row = {"row_band": i, "col_band": j, "empty_fraction": float(1.0 - mask.mean())}
            if labels is not None:
                cell = labels[:, r0:r1, c0:c1]
                cell = cell[cell != IGNORE]
                counts = np.bincount(cell, minlength=num_classes)[:num_classes]
                total = max(int(counts.sum()), 1)
                for c in range(num_classes):
                    row[f"class_{c}"] = counts[c] / total
            rows.append(row)

    ri_all = images[:, CH_MASK] > 0.5
    logger.info("occupancy: %.2f%% of %d range-view cells empty",
                100.0 * (1.0 - ri_all.mean()), ri_all.size)
    return pd.DataFrame(rows)
