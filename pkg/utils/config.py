"""
utils/config.py · Run configuration for ConDA Desk

A RunConfig is built from a preset, overlaid with a JSON file, then with
command-line flags. Every section is one of the library's own dataclasses,
so what is validated here is exactly what the modules consume.
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from modules.concat import DEFAULT_STRATEGY, ConcatTemplate, resolve_template
from modules.network import BackboneConfig, config_digest
from modules.pointcloud import AugmentConfig, RVSensor
from modules.selftrain import PseudoLabelConfig, RoundPlan
from modules.synth import DomainShift, DomainSpec, SceneRecipe, Sensor
from utils.errors import ConfigError

logger = logging.getLogger(__name__)

DEFAULT_PRESET = os.getenv("CONDA_DESK_PRESET", "desk")
RUNS_ROOT = os.getenv("CONDA_DESK_RUNS", "runs")
THREADS = int(os.getenv("CONDA_DESK_THREADS", "1"))

PRECISIONS = {"f32": np.float32, "f64": np.float64}

# target city: darker returns, noisier ranges, denser and differently mixed objects
DESK_SHIFT = DomainShift(intensity_shift=-0.15, noise_sigma=0.03, density_factor=1.5,
                         class_mixture=(0.0, 0.25, 0.30, 0.15, 0.30))


@dataclass
class DomainsConfig:
    scenes: int = 200                     # per domain
    extent: float = 40.0
    source: DomainSpec = field(default_factory=DomainSpec)
    shift: DomainShift = DESK_SHIFT
    source_dir: Optional[str] = None      # pre-generated datasets; generated on the fly when unset
    target_dir: Optional[str] = None

    def validate(self) -> "DomainsConfig":
        if self.scenes < 0:
            raise ConfigError(f"domains.scenes must be >= 0, got {self.scenes}")
        self.source.validate()
        self.shift.apply(self.source)
        return self


@dataclass
class RunConfig:
    sensor: RVSensor = field(default_factory=RVSensor)
    domains: DomainsConfig = field(default_factory=DomainsConfig)
    model: BackboneConfig = field(default_factory=BackboneConfig)
    train: RoundPlan = field(default_factory=RoundPlan)
    pseudo: PseudoLabelConfig = field(default_factory=PseudoLabelConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    concat: object = DEFAULT_STRATEGY     # preset name or {"m", "n", "pattern"}
    seed: int = 0
    precision: str = "f64"
    threads: int = THREADS

    def validate(self) -> "RunConfig":
        s = self.sensor
        if s.h < 1 or s.w < 1 or not s.fov_down < s.fov_up or s.max_range <= 0:
            raise ConfigError(f"bad sensor section {s}")
        if tuple(self.model.input_hw) != (s.h, s.w):
            raise ConfigError(f"model.input_hw {self.model.input_hw} differs from sensor {(s.h, s.w)}")
        if self.model.num_classes != self.domains.source.num_classes:
            raise ConfigError("model.num_classes differs from the domain's class count")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {sorted(PRECISIONS)}, got {self.precision!r}")
        if self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")
        self.domains.validate()
        self.model.validate()
        self.train.validate()
        self.pseudo.validate()
        self.augment.validate()
        self.template().validate(s.h, s.w)
        return self

    # ── derived objects ───────────────────────────────────────────────────────
    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    def template(self) -> ConcatTemplate:
        return resolve_template(self.concat)

    def scene_recipe(self) -> SceneRecipe:
        s = self.sensor
        return SceneRecipe(extent=self.domains.extent,
                           sensor=Sensor(rings=s.h, azimuth_bins=s.w, fov_up=s.fov_up,
                                         fov_down=s.fov_down, max_range=s.max_range))

    def digest(self) -> str:
        """Digest of the sections a checkpoint depends on."""
        return config_digest(asdict(self.sensor), self.model.to_dict())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        if isinstance(self.concat, ConcatTemplate):
            d["concat"] = asdict(self.concat)
        return d


# ── Presets ────────────────────────────────────────────────────────────────────
def preset(name: str) -> RunConfig:
    if name == "desk":
        return RunConfig().validate()
    if name == "full":
        sensor = RVSensor(h=32, w=1920)
        return RunConfig(
            sensor=sensor,
            domains=DomainsConfig(scenes=1000),
            model=BackboneConfig(input_hw=(32, 1920)),
            train=RoundPlan(pretrain_epochs=20, round_epochs=(20, 20)),
        ).validate()
    raise ConfigError(f"unknown preset {name!r}; choose desk or full")


# ── Loading ────────────────────────────────────────────────────────────────────
def _tuples(value):
    if isinstance(value, list):
        return tuple(_tuples(v) for v in value)
    return value


def _overlay(obj, data: dict, section: str):
    """A copy of dataclass `obj` with `data` applied; unknown keys are refused."""
    if not isinstance(data, dict):
        raise ConfigError(f"section {section!r} must be an object")
    known = {f.name for f in fields(obj)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {section}: {unknown}")
    try:
        return replace(obj, **{k: _tuples(v) for k, v in data.items()})
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad {section} section: {e}") from e


def from_dict(data: dict, base: Optional[RunConfig] = None) -> RunConfig:
    cfg = base if base is not None else preset(DEFAULT_PRESET)
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config section(s): {unknown}")

    out = replace(cfg)
    if "sensor" in data:
        out.sensor = _overlay(cfg.sensor, data["sensor"], "sensor")
    if "model" in data:
        merged = {**cfg.model.to_dict(), "input_hw": [out.sensor.h, out.sensor.w], **data["model"]}
        unknown = sorted(set(data["model"]) - set(cfg.model.to_dict()))
        if unknown:
            raise ConfigError(f"unknown key(s) in model: {unknown}")
        out.model = BackboneConfig.from_dict(merged)
    elif "sensor" in data:
        out.model = replace(cfg.model, input_hw=(out.sensor.h, out.sensor.w))
    for name in ("train", "pseudo", "augment"):
        if name in data:
            setattr(out, name, _overlay(getattr(cfg, name), data[name], name))
    if "domains" in data:
        d = dict(data["domains"])
        domains = cfg.domains
        if "source" in d:
            domains = replace(domains, source=_overlay(domains.source, d.pop("source"), "domains.source"))
        if "shift" in d:
            domains = replace(domains, shift=_overlay(domains.shift, d.pop("shift"), "domains.shift"))
        out.domains = _overlay(domains, d, "domains")
    if "concat" in data:
        out.concat = data["concat"]
    for key in ("seed", "precision", "threads"):
        if key in data:
            setattr(out, key, data[key])
    return out.validate()


def load_config(source: Optional[str] = None) -> RunConfig:
    """Preset name, path to a JSON file, or None for the default preset."""
    if source is None:
        return preset(DEFAULT_PRESET)
    if source in ("desk", "full"):
        return preset(source)
    path = Path(source)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    base = preset(data.pop("preset", DEFAULT_PRESET))
    return from_dict(data, base)


def apply_overrides(cfg: RunConfig, seed=None, precision=None, threads=None) -> RunConfig:
    out = replace(cfg)
    if seed is not None:
        out.seed = int(seed)
    if precision is not None:
        out.precision = precision
    if threads is not None:
        out.threads = int(threads)
    return out.validate()


def save_config(cfg: RunConfig, run_dir) -> Path:
    path = Path(run_dir) / "config.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    return path
