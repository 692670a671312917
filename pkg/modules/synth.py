"""
modules/synth.py · Synthetic driving scenes in two shifted domains for ConDA Desk

A scene is an analytic ray cast from a sensor at the origin against a ground
square plus boxes and vertical cylinders. Rays sit on range-view pixel
centers, so a scene projects onto the range image without collisions.
Everything is a pure function of (spec, seed).
"""

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from modules.pointcloud import PointCloud
from utils.errors import CapabilityError, ConfigError, DataError

logger = logging.getLogger(__name__)

# ── Scene vocabulary ───────────────────────────────────────────────────────────
GROUND, VEHICLE, POLE, WALL, VEGETATION = range(5)
CLASS_NAMES = ("ground", "vehicle", "pole", "wall", "vegetation")

# base return intensity per class, before the domain shift
CLASS_INTENSITY = {GROUND: 0.30, VEHICLE: 0.60, POLE: 0.45, WALL: 0.50, VEGETATION: 0.35}
INTENSITY_FALLOFF = 0.002     # per meter
INTENSITY_NOISE = 0.02

MIN_OBJECT_DIST = 6.0
MAX_OBJECT_DIST = 30.0


@dataclass(frozen=True)
class DomainSpec:
    class_mixture: tuple = (0.0, 0.4, 0.2, 0.2, 0.2)
    intensity_shift: float = 0.0
    noise_sigma: float = 0.02
    object_density: float = 6.0
    num_classes: int = 5

    def validate(self) -> "DomainSpec":
        w = np.asarray(self.class_mixture, dtype=np.float64)
        if self.num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.num_classes}")
        if w.shape != (self.num_classes,):
            raise ConfigError(f"class_mixture has {w.size} weights for {self.num_classes} classes")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-6:
            raise ConfigError(f"class_mixture must be non-negative and sum to 1, got {self.class_mixture}")
        if self.noise_sigma < 0 or self.object_density < 0:
            raise ConfigError("noise_sigma and object_density must be >= 0")
        return self


@dataclass(frozen=True)
class DomainShift:
    """Declared deltas from source to target."""

    intensity_shift: float = 0.0
    noise_sigma: float = 0.0
    density_factor: float = 1.0
    class_mixture: Optional[tuple] = None

    def apply(self, spec: DomainSpec) -> DomainSpec:
        return replace(
            spec,
            intensity_shift=spec.intensity_shift + self.intensity_shift,
            noise_sigma=spec.noise_sigma + self.noise_sigma,
            object_density=spec.object_density * self.density_factor,
            class_mixture=tuple(self.class_mixture) if self.class_mixture is not None else spec.class_mixture,
        ).validate()


@dataclass(frozen=True)
class Sensor:
    rings: int = 32
    azimuth_bins: int = 256
    fov_up: float = 0.1745        # +10 deg
    fov_down: float = -0.5236     # -30 deg
    height: float = 1.8           # meters above ground
    max_range: float = 60.0


@dataclass(frozen=True)
class Primitive:
    class_id: int
    kind: str          # "box" | "cylinder"
    size: tuple        # box (length, width, height); cylinder (radius, height)
    pose: tuple        # (x, y, yaw); objects stand on the ground

    def validate(self, extent: float) -> "Primitive":
        if self.kind not in ("box", "cylinder"):
            raise ConfigError(f"unknown primitive kind {self.kind!r}")
        if min(self.size) <= 0:
            raise ConfigError(f"degenerate primitive size {self.size}")
        if extent > 0 and max(abs(self.pose[0]), abs(self.pose[1])) > extent:
            raise ConfigError(f"primitive pose {self.pose} outside ground extent {extent}")
        return self


@dataclass(frozen=True)
class SceneRecipe:
    extent: float = 40.0                  # half-size of the ground square
    primitives: tuple = ()
    sensor: Sensor = field(default_factory=Sensor)


@dataclass
class SceneSet:
    """Clouds of one domain. Labels of an `eval_only` set never reach training."""

    domain: str
    clouds: list
    eval_only: bool = False

    def __len__(self):
        return len(self.clouds)

    def input_cloud(self, i: int) -> PointCloud:
        return PointCloud(points=self.clouds[i].points)

    def training_cloud(self, i: int) -> PointCloud:
        if self.eval_only:
            raise CapabilityError(f"labels of domain {self.domain!r} are evaluation-only")
        return self.clouds[i]

    def evaluation_labels(self, i: int) -> np.ndarray:
        labels = self.clouds[i].labels
        if labels is None:
            raise DataError(f"domain {self.domain!r} sample {i} carries no labels")
        return labels

    def inputs(self) -> list:
        return [self.input_cloud(i) for i in range(len(self))]

    def training_clouds(self) -> list:
        return [self.training_cloud(i) for i in range(len(self))]


# ── Ray casting ────────────────────────────────────────────────────────────────
def ray_directions(sensor: Sensor):
    """Unit directions through every range-view pixel center, row-major (rings × bins)."""
    h, w = sensor.rings, sensor.azimuth_bins
    fov = sensor.fov_up - sensor.fov_down
    elev = sensor.fov_up - (np.arange(h) + 0.5) * fov / h
    azim = np.pi * (1.0 - 2.0 * (np.arange(w) + 0.5) / w)
    e, a = np.meshgrid(elev, azim, indexing="ij")
    d = np.stack([np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)], axis=-1)
    return d.reshape(-1, 3)


def _hit_ground(d, sensor, extent):
    t = np.full(d.shape[0], np.inf)
    if extent <= 0:
        return t
    down = d[:, 2] < 0
    tg = -sensor.height / d[down, 2]
    x, y = tg * d[down, 0], tg * d[down, 1]
    inside = (np.abs(x) <= extent) & (np.abs(y) <= extent)
    t[np.flatnonzero(down)[inside]] = tg[inside]
    return t


def _hit_box(d, prim, sensor):
    length, width, height = prim.size
    px, py, yaw = prim.pose
    c, s = np.cos(-yaw), np.sin(-yaw)
    # ray origin (0,0,0) and directions in the box frame
    center = np.array([px, py, -sensor.height + height / 2.0])
    o = np.array([c * -center[0] - s * -center[1], s * -center[0] + c * -center[1], -center[2]])
    dl = np.column_stack([c * d[:, 0] - s * d[:, 1], s * d[:, 0] + c * d[:, 1], d[:, 2]])
    half = np.array([length, width, height]) / 2.0

    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - o) / dl
        t2 = (half - o) / dl
    lo = np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2))
    hi = np.where(np.isnan(t2), np.inf, np.maximum(t1, t2))
    # parallel to a slab and outside it: no hit
    parallel_out = (dl == 0) & ((o < -half) | (o > half))
    tmin, tmax = lo.max(axis=1), hi.min(axis=1)
    ok = (tmax >= tmin) & (tmin > 0) & ~parallel_out.any(axis=1)
    return np.where(ok, tmin, np.inf)


def _hit_cylinder(d, prim, sensor):
    radius, height = prim.size
    px, py, _ = prim.pose
    z0, z1 = -sensor.height, -sensor.height + height
    dx, dy, dz = d[:, 0], d[:, 1], d[:, 2]
    a = dx * dx + dy * dy
    b = -2.0 * (dx * px + dy * py)
    cc = px * px + py * py - radius * radius
    disc = b * b - 4.0 * a * cc
    t = np.full(d.shape[0], np.inf)

    ok = (disc >= 0) & (a > 0)
    ts = np.where(ok, (-b - np.sqrt(np.where(ok, disc, 0.0))) / np.where(a > 0, 2.0 * a, 1.0), np.inf)
    z = ts * dz
    side = ok & (ts > 0) & (z >= z0) & (z <= z1)
    t[side] = ts[side]

    # top cap, seen from above
    with np.errstate(divide="ignore", invalid="ignore"):
        tc = np.where(dz < 0, z1 / dz, np.inf)
    cap = (tc > 0) & np.isfinite(tc)
    rx, ry = tc * dx - px, tc * dy - py
    cap &= (rx * rx + ry * ry) <= radius * radius
    t = np.where(cap, np.minimum(t, tc), t)
    return t


def cast_scene(recipe: SceneRecipe, spec: DomainSpec, rng: np.random.Generator) -> PointCloud:
    """Closest-surface ray cast of a recipe; every return is labeled by the surface it hit."""
    if recipe.extent <= 0 and not recipe.primitives:
        raise DataError("scene recipe has neither a ground plane nor primitives")
    sensor = recipe.sensor
    d = ray_directions(sensor)

    hits = [(_hit_ground(d, sensor, recipe.extent), GROUND)]
    for prim in recipe.primitives:
        prim.validate(recipe.extent)
        fn = _hit_box if prim.kind == "box" else _hit_cylinder
        hits.append((fn(d, prim, sensor), prim.class_id))

    ts = np.stack([t for t, _ in hits])
    classes = np.array([c for _, c in hits])
    nearest = ts.argmin(axis=0)
    t = ts[nearest, np.arange(d.shape[0])]
    keep = np.isfinite(t) & (t <= sensor.max_range)

    t, d, labels = t[keep], d[keep], classes[nearest[keep]]
    # noise draws cover every ray so the stream does not depend on hit counts
    range_noise = rng.normal(0.0, 1.0, size=keep.size)[keep] * spec.noise_sigma
    int_noise = rng.normal(0.0, INTENSITY_NOISE, size=keep.size)[keep]

    r = np.maximum(t + range_noise, 0.1)
    xyz = d * r[:, None]
    base = np.array([CLASS_INTENSITY.get(int(c), 0.4) for c in range(max(classes.max() + 1, 5))])
    intensity = base[labels] - INTENSITY_FALLOFF * t + spec.intensity_shift + int_noise
    intensity = np.clip(intensity, 0.0, 1.0)

    return PointCloud(points=np.column_stack([xyz, intensity]), labels=labels.astype(np.int64))


def _object_primitive(class_id: int, x: float, y: float, rng: np.random.Generator) -> Primitive:
    yaw = rng.uniform(-np.pi, np.pi)
    if class_id == VEHICLE:
        return Primitive(class_id, "box", (4.5, 1.8, 1.5), (x, y, yaw))
    if class_id == POLE:
        return Primitive(class_id, "cylinder", (0.15, 4.0), (x, y, 0.0))
    if class_id == WALL:
        return Primitive(class_id, "box", (rng.uniform(6.0, 12.0), 0.4, 2.5), (x, y, yaw))
    return Primitive(class_id, "cylinder", (rng.uniform(1.0, 2.0), rng.uniform(1.0, 3.0)), (x, y, 0.0))


def sample_recipe(spec: DomainSpec, base: SceneRecipe, rng: np.random.Generator) -> SceneRecipe:
    """Draw Poisson(object_density) objects with classes from the non-ground mixture."""
    w = np.asarray(spec.class_mixture, dtype=np.float64).copy()
    w[GROUND] = 0.0
    count = rng.poisson(spec.object_density)
    if w.sum() <= 0:
        count = 0

    reach = min(MAX_OBJECT_DIST, base.extent) if base.extent > 0 else MAX_OBJECT_DIST
    prims = list(base.primitives)
    for _ in range(count):
        cls = int(rng.choice(len(w), p=w / w.sum()))
        dist = rng.uniform(MIN_OBJECT_DIST, max(reach, MIN_OBJECT_DIST))
        bearing = rng.uniform(-np.pi, np.pi)
        prims.append(_object_primitive(cls, dist * np.cos(bearing), dist * np.sin(bearing), rng))
    return replace(base, primitives=tuple(prims))


def generate_scene(spec: DomainSpec, seed, base: Optional[SceneRecipe] = None) -> PointCloud:
    """Labeled scene, deterministic in (spec, seed). `seed` may be an int or a SeedSequence."""
    spec.validate()
    base = base if base is not None else SceneRecipe()
    rng = np.random.default_rng(seed)
    recipe = sample_recipe(spec, base, rng)
    return cast_scene(recipe, spec, rng)


def make_domain_pair(base: SceneRecipe, source: DomainSpec, shift: DomainShift, count: int, seed: int):
    """
    Source and target scene sets. The target differs by `shift` only; its
    labels are kept for evaluation and flagged evaluation-only.
    """
    if count < 0:
        raise ConfigError(f"scene count must be >= 0, got {count}")
    source = source.validate()
    target = shift.apply(source)
    src_seq, tgt_seq = np.random.SeedSequence(seed).spawn(2)

    src = [generate_scene(source, s, base) for s in src_seq.spawn(count)]
    tgt = [generate_scene(target, s, base) for s in tgt_seq.spawn(count)]
    logger.info("generated %d source and %d target scenes (seed %d)", len(src), len(tgt), seed)
    return SceneSet("source", src, eval_only=False), SceneSet("target", tgt, eval_only=True)


# ── Persistence ────────────────────────────────────────────────────────────────
def save_scene_set(scenes: SceneSet, directory) -> dict:
    """Write one PCRV file per scene plus `manifest.json`; returns the manifest."""
    from utils.pcrv import file_digest, write_cloud

    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create {directory}: {e}") from e

    files = []
    for i, cloud in enumerate(scenes.clouds):
        name = f"scene_{i:05d}.pcrv"
        write_cloud(directory / name, cloud)
        files.append({"name": name, "points": len(cloud), "sha256": file_digest(directory / name)})

    manifest = {"domain": scenes.domain, "eval_only": scenes.eval_only, "count": len(files), "files": files}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest


def load_scene_set(directory) -> SceneSet:
    from utils.pcrv import read_cloud

    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"no dataset manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    clouds = [read_cloud(directory / f["name"]) for f in manifest["files"]]
    return SceneSet(manifest["domain"], clouds, eval_only=bool(manifest["eval_only"]))
