"""
modules/concat.py · Range-view domain concatenation for ConDA Desk

Builds the intermediate domain: the h×w grid is cut into m row bands
(near-far) × n column bands (bearing around the ego-vehicle), and every
output sample copies each region verbatim, at the same coordinates, from a
source or a target donor. Labels travel with their pixels.

Output k of a (b_s, b_t) pair of batches:
    k <  b_s : source donor k,            target donor perm_t[k % b_t]
    k >= b_s : source donor perm_s[...],  target donor k - b_s
with perm_s / perm_t drawn from the seeded shuffle.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from modules.pointcloud import LabelMap, RangeImage, region_bounds
from utils.errors import ConfigError, DataError, ShapeError

logger = logging.getLogger(__name__)

SOURCE, TARGET = 0, 1

PATTERNS = ("checkerboard", "inverse-checkerboard", "rows", "cols", "random", "all-source", "all-target")


@dataclass(frozen=True)
class ConcatTemplate:
    m: int = 2                    # near-far splits (row bands)
    n: int = 2                    # bearing splits (column bands)
    pattern: str = "checkerboard"

    def validate(self, h: Optional[int] = None, w: Optional[int] = None) -> "ConcatTemplate":
        if self.m < 1 or self.n < 1:
            raise ConfigError(f"template needs m >= 1 and n >= 1, got ({self.m}, {self.n})")
        if self.pattern not in PATTERNS:
            raise ConfigError(f"unknown assignment pattern {self.pattern!r}; choose from {PATTERNS}")
        if h is not None and self.m > h:
            raise ConfigError(f"m={self.m} exceeds {h} rows")
        if w is not None and self.n > w:
            raise ConfigError(f"n={self.n} exceeds {w} columns")
        return self

    def row_bands(self, h: int) -> list:
        return region_bounds(h, self.m)

    def col_bands(self, w: int) -> list:
        return region_bounds(w, self.n)


@dataclass
class Assignment:
    """Per output sample: an m×n grid of SOURCE/TARGET and the donor's within-batch index."""

    domain: np.ndarray     # (b, m, n) int, SOURCE | TARGET
    donor: np.ndarray      # (b, m, n) int, index into the named batch

    def validate(self, b_s: int, b_t: int) -> "Assignment":
        if self.domain.shape != self.donor.shape:
            raise ShapeError("assignment domain and donor grids differ in shape")
        limit = np.where(self.domain == SOURCE, b_s, b_t)
        if np.any(self.donor < 0) or np.any(self.donor >= limit):
            raise DataError("assignment references a donor outside its batch")
        return self


@dataclass
class Stripe:
    sample: int
    region: tuple          # (row band i, column band j)
    rows: tuple            # [r0, r1)
    cols: tuple            # [c0, c1)
    channels: np.ndarray
    labels: np.ndarray


@dataclass
class RVBatch:
    images: np.ndarray     # (b, 6, h, w)
    labels: np.ndarray     # (b, h, w), IGNORE allowed

    def __len__(self):
        return self.images.shape[0]


# ── Slicing ────────────────────────────────────────────────────────────────────
def slice_regions(ri: RangeImage, lm: LabelMap, t: ConcatTemplate, sample: int = 0) -> list:
    """The m·n stripes of one sample, each tagged with its band location."""
    if lm.grid.shape != (ri.h, ri.w):
        raise ShapeError(f"label map {lm.grid.shape} does not match range image {(ri.h, ri.w)}")
    t.validate(ri.h, ri.w)
    stripes = []
    for i, (r0, r1) in enumerate(t.row_bands(ri.h)):
        for j, (c0, c1) in enumerate(t.col_bands(ri.w)):
            stripes.append(Stripe(sample, (i, j), (r0, r1), (c0, c1),
                                  ri.channels[:, r0:r1, c0:c1], lm.grid[r0:r1, c0:c1]))
    return stripes


def slice_batch(batch: RVBatch, t: ConcatTemplate) -> list:
    h, w = batch.images.shape[2:]
    t.validate(h, w)
    stripes = []
    for b in range(len(batch)):
        for i, (r0, r1) in enumerate(t.row_bands(h)):
            for j, (c0, c1) in enumerate(t.col_bands(w)):
                stripes.append(Stripe(b, (i, j), (r0, r1), (c0, c1),
                                      batch.images[b, :, r0:r1, c0:c1], batch.labels[b, r0:r1, c0:c1]))
    return stripes


# ── Assignment ─────────────────────────────────────────────────────────────────
def _pattern_grid(t: ConcatTemplate, rng: np.random.Generator, b: int) -> np.ndarray:
    i, j = np.meshgrid(np.arange(t.m), np.arange(t.n), indexing="ij")
    if t.pattern == "checkerboard":
        grid = (i + j) % 2
    elif t.pattern == "inverse-checkerboard":
        grid = 1 - (i + j) % 2
    elif t.pattern == "rows":
        grid = i % 2
    elif t.pattern == "cols":
        grid = j % 2
    elif t.pattern == "all-source":
        grid = np.zeros_like(i)
    elif t.pattern == "all-target":
        grid = np.ones_like(i)
    else:
        return rng.integers(0, 2, size=(b, t.m, t.n))
    return np.broadcast_to(grid, (b, t.m, t.n)).copy()


def make_assignment(t: ConcatTemplate, b_s: int, b_t: int, seed) -> Assignment:
    """Seeded donor pairing plus the template's SOURCE/TARGET pattern for b_s + b_t outputs."""
    if b_s < 1 or b_t < 1:
        raise DataError(f"concatenation needs non-empty batches, got b_s={b_s}, b_t={b_t}")
    t.validate()
    rng = np.random.default_rng(seed)
    perm_s = rng.permutation(b_s)
    perm_t = rng.permutation(b_t)
    b = b_s + b_t

    k = np.arange(b)
    src_donor = np.where(k < b_s, k, perm_s[(k - b_s) % b_s])
    tgt_donor = np.where(k < b_s, perm_t[k % b_t], k - b_s)

    domain = _pattern_grid(t, rng, b)
    donor = np.where(domain == SOURCE, src_donor[:, None, None], tgt_donor[:, None, None])
    return Assignment(domain=domain.astype(np.int64), donor=donor.astype(np.int64))


def donor_map(a: Assignment, t: ConcatTemplate, h: int, w: int):
    """Per-pixel (domain, donor) grids of shape (b, h, w)."""
    rows = np.zeros(h, dtype=np.int64)
    for i, (r0, r1) in enumerate(t.row_bands(h)):
        rows[r0:r1] = i
    cols = np.zeros(w, dtype=np.int64)
    for j, (c0, c1) in enumerate(t.col_bands(w)):
        cols[c0:c1] = j
    return a.domain[:, rows][:, :, cols], a.donor[:, rows][:, :, cols]


# ── Concatenation ──────────────────────────────────────────────────────────────
def concatenate(source: RVBatch, target: RVBatch, t: ConcatTemplate, rng_seed,
                assignment: Optional[Assignment] = None) -> RVBatch:
    """
    Intermediate-domain batch of b_s + b_t samples.

    Every output pixel is a verbatim copy of the same pixel of the donor its
    region names; labels follow the channel donor.
    """
    b_s, b_t = len(source), len(target)
    if b_s == 0 or b_t == 0:
        raise DataError(f"concatenation needs non-empty batches, got b_s={b_s}, b_t={b_t}")
    if source.images.shape[1:] != target.images.shape[1:]:
        raise ShapeError(f"source {source.images.shape[1:]} and target {target.images.shape[1:]} differ")
    if source.labels.shape[1:] != source.images.shape[2:] or target.labels.shape[1:] != target.images.shape[2:]:
        raise ShapeError("label grids do not match their images")

    h, w = source.images.shape[2:]
    t.validate(h, w)
    a = assignment if assignment is not None else make_assignment(t, b_s, b_t, rng_seed)
    a.validate(b_s, b_t)
    if a.domain.shape != (b_s + b_t, t.m, t.n):
        raise ShapeError(f"assignment shape {a.domain.shape} does not match template and batches")

    images = np.empty((b_s + b_t,) + source.images.shape[1:], dtype=source.images.dtype)
    labels = np.empty((b_s + b_t, h, w), dtype=source.labels.dtype)
    donors = (source, target)
    for k in range(b_s + b_t):
        for i, (r0, r1) in enumerate(t.row_bands(h)):
            for j, (c0, c1) in enumerate(t.col_bands(w)):
                batch = donors[a.domain[k, i, j]]
                d = a.donor[k, i, j]
                images[k, :, r0:r1, c0:c1] = batch.images[d, :, r0:r1, c0:c1]
                labels[k, r0:r1, c0:c1] = batch.labels[d, r0:r1, c0:c1]
    return RVBatch(images=images, labels=labels)


# ── Strategy catalog ───────────────────────────────────────────────────────────
DEFAULT_STRATEGY = "front-back-near-far"

# family → ordered presets, strictly increasing in m·n
FAMILIES = {
    "near-far": [("near-far-2", 2, 1), ("near-far-4", 4, 1), ("near-far-8", 8, 1)],
    "bearing": [("bearing-2", 1, 2), ("bearing-4", 1, 4), ("bearing-8", 1, 8)],
    "joint": [("front-back-near-far", 2, 2), ("grid-4x2", 4, 2), ("grid-4x4", 4, 4),
              ("grid-8x4", 8, 4), ("grid-8x8", 8, 8)],
}


def strategy_catalog() -> dict:
    """Named templates spanning the near-far, bearing and joint sweep axes."""
    catalog = {"whole-image": ConcatTemplate(1, 1)}
    for presets in FAMILIES.values():
        for name, m, n in presets:
            catalog[name] = ConcatTemplate(m, n)
    return catalog


def get_strategy(name: str) -> ConcatTemplate:
    catalog = strategy_catalog()
    if name not in catalog:
        raise ConfigError(f"unknown concatenation strategy {name!r}; known: {sorted(catalog)}")
    return catalog[name]


def resolve_template(spec) -> ConcatTemplate:
    """Template from a preset name or a {"m", "n", "pattern"} mapping."""
    if isinstance(spec, ConcatTemplate):
        return spec.validate()
    if isinstance(spec, str):
        return get_strategy(spec)
    try:
        return ConcatTemplate(int(spec["m"]), int(spec["n"]), spec.get("pattern", "checkerboard")).validate()
    except (KeyError, TypeError) as e:
        raise ConfigError(f"bad concat template {spec!r}: {e}") from e
