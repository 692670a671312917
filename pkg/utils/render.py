"""
utils/render.py · PPM (P6) renderings of range images, labels and overlays

    "P6\\n" width " " height "\\n255\\n" then height·width RGB byte triples, row-major.

Empty pixels are drawn in the background color. `row_scale` repeats rows
so 32-ring images stay legible.
"""

from pathlib import Path

import numpy as np

from modules.pointcloud import CH_MASK, CH_RANGE, IGNORE
from utils.charts import BG, CLASS_COLORS, MUTED
from utils.errors import ShapeError

CORRECT = "#10b981"
WRONG = "#ef4444"
SOURCE_TINT = "#3b82f6"
TARGET_TINT = "#f59e0b"


def hex_to_rgb(color: str) -> tuple:
    color = color.lstrip("#")
    return tuple(int(color[i : i + 2], 16) for i in (0, 2, 4))


PALETTE = np.array([hex_to_rgb(c) for c in CLASS_COLORS.values()], dtype=np.uint8)
BACKGROUND = np.array(hex_to_rgb(BG), dtype=np.uint8)


def encode_ppm(rgb: np.ndarray, row_scale: int = 1) -> bytes:
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ShapeError(f"expected (h, w, 3) pixels, got {rgb.shape}")
    rgb = np.repeat(rgb.astype(np.uint8), row_scale, axis=0)
    h, w = rgb.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(rgb).tobytes()


def decode_ppm(buf: bytes) -> np.ndarray:
    parts = buf.split(b"\n", 3)
    if parts[0] != b"P6" or parts[2] != b"255":
        raise ShapeError("not an 8-bit P6 image")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=h * w * 3).reshape(h, w, 3)


def write_ppm(path, rgb: np.ndarray, row_scale: int = 1) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_ppm(rgb, row_scale))
    return path


def render_labels(grid: np.ndarray) -> np.ndarray:
    """Class colors; IGNORE in the background color."""
    grid = np.asarray(grid)
    rgb = np.empty(grid.shape + (3,), dtype=np.uint8)
    rgb[:] = BACKGROUND
    valid = grid != IGNORE
    rgb[valid] = PALETTE[grid[valid] % len(PALETTE)]
    return rgb


def render_range(channels: np.ndarray, max_range: float) -> np.ndarray:
    """Near is bright. `channels` is one (6, h, w) range image."""
    occupied = channels[CH_MASK] > 0.5
    level = np.clip(1.0 - channels[CH_RANGE] / max_range, 0.0, 1.0)
    gray = (40 + 215 * level).astype(np.uint8)
    rgb = np.empty(occupied.shape + (3,), dtype=np.uint8)
    rgb[:] = BACKGROUND
    rgb[occupied] = np.stack([gray[occupied]] * 3, axis=-1)
    return rgb


def render_correctness(truth: np.ndarray, pred: np.ndarray, mask: np.ndarray) -> tuple:
    """Green where pred == truth, red elsewhere, on occupied pixels. Returns (rgb, painted pixel count)."""
    if truth.shape != pred.shape or truth.shape != mask.shape:
        raise ShapeError(f"overlay inputs differ in shape: {truth.shape}, {pred.shape}, {mask.shape}")
    occupied = mask.astype(bool)
    rgb = np.empty(truth.shape + (3,), dtype=np.uint8)
    rgb[:] = BACKGROUND
    scored = occupied & (truth != IGNORE)
    rgb[scored & (truth == pred)] = hex_to_rgb(CORRECT)
    rgb[scored & (truth != pred)] = hex_to_rgb(WRONG)
    rgb[occupied & (truth == IGNORE)] = hex_to_rgb(MUTED)
    return rgb, int(occupied.sum())


def render_domains(domain: np.ndarray) -> np.ndarray:
    """Per-pixel donor domain of a concatenated sample: 0 source, 1 target."""
    rgb = np.empty(domain.shape + (3,), dtype=np.uint8)
    rgb[domain == 0] = hex_to_rgb(SOURCE_TINT)
    rgb[domain == 1] = hex_to_rgb(TARGET_TINT)
    return rgb


def stack_rows(*images: np.ndarray, gap: int = 2) -> np.ndarray:
    """Stack (h, w, 3) images vertically with a background strip between them."""
    w = images[0].shape[1]
    strip = np.empty((gap, w, 3), dtype=np.uint8)
    strip[:] = BACKGROUND
    parts = []
    for i, img in enumerate(images):
        if i:
            parts.append(strip)
        parts.append(img)
    return np.concatenate(parts, axis=0)
