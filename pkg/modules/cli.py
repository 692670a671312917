"""
modules/cli.py · Command bodies for the ConDA Desk command line

Each cmd_* takes a resolved RunConfig plus its own arguments, writes its
artifacts into a run directory and returns what it wrote. app.py owns
argument parsing and exit codes.
"""

import hashlib
import json
import logging
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from modules.concat import RVBatch, concatenate, donor_map, make_assignment, resolve_template
from modules.metrics import metrics_row, to_frame
from modules.network import Backbone
from modules.pointcloud import IGNORE, normalize_channels, occupancy_report
from modules.selftrain import ABLATION_LADDER, evaluate_set, predict, pretrain, run_conda
from modules.synth import CLASS_NAMES, SceneSet, load_scene_set, make_domain_pair, save_scene_set
from utils import charts, render
from utils.checkpoint import load_checkpoint, save_checkpoint
from utils.config import RUNS_ROOT, RunConfig, save_config
from utils.errors import ConfigError, DataError
from utils.logs import append_rows, read_log
from utils.pcrv import file_digest, read_cloud, write_label_map, write_range_image

logger = logging.getLogger(__name__)

SWEEP_AXES = ("k", "k1", "k2", "sigma", "varpi", "template")
ROW_SCALE = 4


# ── Run directories ────────────────────────────────────────────────────────────
def run_dir_for(command: str, cfg: RunConfig, out: Optional[str] = None) -> Path:
    path = Path(out) if out else Path(RUNS_ROOT) / f"{command}-seed{cfg.seed}"
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create run directory {path}: {e}") from e
    return path


def write_provenance(run_dir: Path, cfg: RunConfig, **digests) -> dict:
    """config.json plus provenance.json: seed, config digests and digests of every input."""
    config_path = save_config(cfg, run_dir)
    prov = {
        "seed": cfg.seed,
        "precision": cfg.precision,
        "threads": cfg.threads,
        "config_sha256": hashlib.sha256(config_path.read_bytes()).hexdigest(),
        "model_digest": cfg.digest(),
        **{k: v for k, v in digests.items() if v is not None},
    }
    (run_dir / "provenance.json").write_text(json.dumps(prov, indent=2, sort_keys=True))
    return prov


def load_domains(cfg: RunConfig) -> tuple:
    """(source, target) scene sets: from disk when configured, generated from the seed otherwise."""
    d = cfg.domains
    if d.source_dir or d.target_dir:
        if not (d.source_dir and d.target_dir):
            raise ConfigError("domains.source_dir and domains.target_dir must be given together")
        source, target = load_scene_set(d.source_dir), load_scene_set(d.target_dir)
        if not target.eval_only:
            logger.warning("target dataset %s is not flagged evaluation-only; flagging it", d.target_dir)
            target = SceneSet(target.domain, target.clouds, eval_only=True)
        return source, target
    return make_domain_pair(cfg.scene_recipe(), d.source, d.shift, d.scenes, cfg.seed)


def _dataset_digest(cfg: RunConfig) -> Optional[str]:
    d = cfg.domains
    if not d.source_dir:
        return None
    h = hashlib.sha256()
    for directory in (d.source_dir, d.target_dir):
        h.update(file_digest(Path(directory) / "manifest.json").encode("ascii"))
    return h.hexdigest()


def _load_model(cfg: RunConfig, checkpoint) -> Backbone:
    params, _ = load_checkpoint(checkpoint, expected_digest=cfg.digest(), dtype=cfg.dtype)
    return Backbone(cfg.model, params)


def _class_names(cfg: RunConfig) -> list:
    c = cfg.model.num_classes
    return list(CLASS_NAMES[:c]) + [str(i) for i in range(len(CLASS_NAMES), c)]


# ── synth-gen / project ────────────────────────────────────────────────────────
def cmd_synth_gen(cfg: RunConfig, out_dir) -> dict:
    """Write both domains as PCRV files plus manifests under out_dir/{source,target}."""
    out_dir = Path(out_dir)
    source, target = make_domain_pair(cfg.scene_recipe(), cfg.domains.source, cfg.domains.shift,
                                      cfg.domains.scenes, cfg.seed)
    manifests = {
        "source": save_scene_set(source, out_dir / "source"),
        "target": save_scene_set(target, out_dir / "target"),
    }
    write_provenance(out_dir, cfg)
    logger.info("wrote %d + %d scenes to %s", manifests["source"]["count"], manifests["target"]["count"], out_dir)
    return manifests


def cmd_project(cfg: RunConfig, cloud_path, run_dir: Path) -> dict:
    """One cloud → range-image and label-map containers plus PPM renderings."""
    cloud = read_cloud(cloud_path)
    ri, lm = cfg.sensor.project(cloud)
    out = {"range_image": run_dir / "range_image.pcrv", "range_ppm": run_dir / "range.ppm"}
    write_range_image(out["range_image"], ri)
    render.write_ppm(out["range_ppm"], render.render_range(ri.channels, cfg.sensor.max_range), ROW_SCALE)
    if lm is not None:
        out["label_map"] = run_dir / "label_map.pcrv"
        out["labels_ppm"] = run_dir / "labels.ppm"
        write_label_map(out["label_map"], lm)
        render.write_ppm(out["labels_ppm"], render.render_labels(lm.grid), ROW_SCALE)
    logger.info("%d points → %d occupied pixels", len(cloud), int(ri.mask.sum()))
    return out


# ── pretrain / selftrain ───────────────────────────────────────────────────────
def cmd_pretrain(cfg: RunConfig, run_dir: Path, eval_target: bool = False) -> Path:
    """Source-only training; writes w_r0.cdnw and pretrain.csv."""
    source, target = load_domains(cfg)
    if len(source) == 0:
        raise DataError("source dataset is empty")
    write_provenance(run_dir, cfg, dataset_sha256=_dataset_digest(cfg))
    evaluate = (lambda m: evaluate_set(m, target, cfg.sensor)) if eval_target else None
    params, rows = pretrain(source.training_clouds(), cfg.model, cfg.sensor, cfg.train, cfg.seed,
                            cfg.augment, dtype=cfg.dtype, evaluate=evaluate,
                            log_path=run_dir / "pretrain.csv", class_names=_class_names(cfg))
    path = run_dir / "w_r0.cdnw"
    save_checkpoint(path, params, cfg.digest())
    logger.info("pre-training done: %d log rows, checkpoint %s", len(rows), path)
    return path


def _selftrain(cfg: RunConfig, params: dict, source: SceneSet, target: SceneSet, run_dir: Optional[Path],
               eval_target: bool = False):
    evaluate = (lambda m: evaluate_set(m, target, cfg.sensor)) if eval_target else None

    def on_round(report, weights):
        if run_dir is not None:
            save_checkpoint(run_dir / f"w_r{report.round_id}.cdnw", weights, cfg.digest())

    return run_conda(
        source.training_clouds(), target.inputs(), cfg.train, cfg.pseudo, params, cfg.model, cfg.sensor,
        cfg.template(), cfg.seed, augment=cfg.augment, evaluate=evaluate,
        cache_dir=run_dir / "pseudolabels" if run_dir is not None else None,
        log_path=run_dir / "selftrain.csv" if run_dir is not None else None,
        class_names=_class_names(cfg), on_round=on_round,
    )


def cmd_selftrain(cfg: RunConfig, checkpoint, run_dir: Path, eval_target: bool = False) -> dict:
    """Two ConDA rounds from a pre-trained checkpoint; writes w_r1/w_r2, caches, logs and reports.json."""
    params, _ = load_checkpoint(checkpoint, expected_digest=cfg.digest(), dtype=cfg.dtype)
    source, target = load_domains(cfg)
    write_provenance(run_dir, cfg, dataset_sha256=_dataset_digest(cfg),
                     checkpoint_sha256=file_digest(checkpoint))
    result = _selftrain(cfg, params, source, target, run_dir, eval_target)
    final = run_dir / "w_r2.cdnw"
    save_checkpoint(final, result.params, cfg.digest())
    reports = [r.to_dict() for r in result.reports]
    (run_dir / "reports.json").write_text(json.dumps(reports, indent=2))
    if (run_dir / "selftrain.csv").exists():
        charts.write_html(charts.training_figure(read_log(run_dir / "selftrain.csv")), run_dir / "selftrain.html")
    return {"checkpoint": final, "reports": reports}


# ── eval ───────────────────────────────────────────────────────────────────────
def cmd_eval(cfg: RunConfig, checkpoint, run_dir: Path, domain: str = "target", per_point: bool = True,
             overlay: int = 0, fold: bool = False) -> dict:
    """
    Score a checkpoint on one domain; writes eval.csv and classes.csv.

    `overlay` renders the first N samples as green/red correctness maps.
    """
    model = _load_model(cfg, checkpoint)
    if fold and not model.folded:
        model.fold()
    source, target = load_domains(cfg)
    scenes = {"source": source, "target": target}.get(domain)
    if scenes is None:
        raise ConfigError(f"domain must be source or target, got {domain!r}")
    if len(scenes) == 0:
        raise DataError(f"{domain} dataset is empty")
    write_provenance(run_dir, cfg, dataset_sha256=_dataset_digest(cfg), checkpoint_sha256=file_digest(checkpoint))

    cm = evaluate_set(model, scenes, cfg.sensor, per_point=per_point)
    names = _class_names(cfg)
    row = metrics_row(cm, names, split=domain, scoring="point" if per_point else "pixel")
    append_rows(run_dir / "eval.csv", [row])
    to_frame(cm, names).to_csv(run_dir / "classes.csv", index=False, float_format="%.10g")
    logger.info("%s mIoU %.2f FIoU %.2f", domain, 100 * row["miou"], 100 * row["fiou"])

    painted = []
    for i in range(min(overlay, len(scenes))):
        ri, lm = cfg.sensor.project(scenes.clouds[i])
        x = normalize_channels(ri.channels[None], cfg.sensor.max_range)
        pred = predict(model, x).argmax(axis=1)[0]
        rgb, count = render.render_correctness(lm.grid, pred, ri.mask > 0.5)
        render.write_ppm(run_dir / f"overlay_{i:05d}.ppm", rgb, ROW_SCALE)
        painted.append(count)
    return {"metrics": row, "overlay_pixels": painted}


# ── sweep / ablate ─────────────────────────────────────────────────────────────
def parse_axis_values(axis: str, values: list) -> list:
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {SWEEP_AXES}, got {axis!r}")
    if not values:
        raise ConfigError(f"sweep over {axis} needs at least one value")
    if axis == "template":
        for v in values:
            resolve_template(v)
        return list(values)
    try:
        return [float(v) for v in values]
    except ValueError as e:
        raise ConfigError(f"sweep values for {axis} must be numbers: {e}") from e


def with_axis(cfg: RunConfig, axis: str, value) -> RunConfig:
    k1, k2 = cfg.pseudo.k
    if axis == "k":
        out = replace(cfg, pseudo=replace(cfg.pseudo, k=(value, value)))
    elif axis == "k1":
        out = replace(cfg, pseudo=replace(cfg.pseudo, k=(value, k2)))
    elif axis == "k2":
        out = replace(cfg, pseudo=replace(cfg.pseudo, k=(k1, value)))
    elif axis == "sigma":
        out = replace(cfg, pseudo=replace(cfg.pseudo, sigma=value))
    elif axis == "varpi":
        out = replace(cfg, pseudo=replace(cfg.pseudo, varpi=value))
    else:
        out = replace(cfg, concat=value)
    return out.validate()


def _pretrained(cfg: RunConfig, source: SceneSet, checkpoint=None) -> dict:
    if checkpoint is not None:
        params, _ = load_checkpoint(checkpoint, expected_digest=cfg.digest(), dtype=cfg.dtype)
        return params
    params, _ = pretrain(source.training_clouds(), cfg.model, cfg.sensor, cfg.train, cfg.seed,
                         cfg.augment, dtype=cfg.dtype)
    return params


def cmd_sweep(cfg: RunConfig, axis: str, values: list, run_dir: Path, checkpoint=None) -> pd.DataFrame:
    """One self-training run per value from a shared w_r0; target mIoU table plus HTML chart."""
    values = parse_axis_values(axis, values)
    source, target = load_domains(cfg)
    write_provenance(run_dir, cfg, dataset_sha256=_dataset_digest(cfg),
                     checkpoint_sha256=file_digest(checkpoint) if checkpoint else None)
    w_pre = _pretrained(cfg, source, checkpoint)

    rows = []
    for value in values:
        variant = with_axis(cfg, axis, value)
        result = _selftrain(variant, w_pre, source, target, None)
        cm = evaluate_set(Backbone(variant.model, result.params), target, variant.sensor)
        rows.append(metrics_row(cm, _class_names(cfg), axis=axis, value=value))
        logger.info("sweep %s=%s: mIoU %.2f", axis, value, 100 * rows[-1]["miou"])

    df = pd.DataFrame(rows)
    df.to_csv(run_dir / "sweep.csv", index=False, float_format="%.10g")
    charts.write_html(charts.sweep_figure(df, axis), run_dir / "sweep.html")
    return df


def cmd_ablate(cfg: RunConfig, run_dir: Path) -> pd.DataFrame:
    """Component ladder from source-only to full two-round ConDA, one target-mIoU row per rung."""
    source, target = load_domains(cfg)
    write_provenance(run_dir, cfg, dataset_sha256=_dataset_digest(cfg))
    pretrained = {}
    rows = []
    for rung in ABLATION_LADDER:
        variant = replace(cfg, model=replace(cfg.model, regularized=rung["regularized"]))
        if rung["regularized"] not in pretrained:
            pretrained[rung["regularized"]] = _pretrained(variant, source)
        params = pretrained[rung["regularized"]]
        if rung["selftrain"]:
            pseudo = replace(cfg.pseudo, mixing=rung["mixing"],
                             varpi=rung["varpi"] if rung["varpi"] is not None else cfg.pseudo.varpi)
            epochs = cfg.train.round_epochs if rung["round2"] else (cfg.train.round_epochs[0], 0)
            variant = replace(variant, pseudo=pseudo, train=replace(cfg.train, round_epochs=epochs)).validate()
            params = _selftrain(variant, params, source, target, None).params
        cm = evaluate_set(Backbone(variant.model, params), target, variant.sensor)
        rows.append(metrics_row(cm, _class_names(cfg), rung=rung["name"]))
        logger.info("ablation %-14s mIoU %.2f", rung["name"], 100 * rows[-1]["miou"])

    df = pd.DataFrame(rows)
    df.to_csv(run_dir / "ablation.csv", index=False, float_format="%.10g")
    return df


# ── concat-demo / stats ────────────────────────────────────────────────────────
def cmd_concat_demo(cfg: RunConfig, run_dir: Path, count: int = 2) -> dict:
    """Render source, target and intermediate-domain samples with their donor map."""
    if count < 1:
        raise ConfigError(f"concat-demo needs at least one pair, got {count}")
    source, target = make_domain_pair(cfg.scene_recipe(), cfg.domains.source, cfg.domains.shift, count, cfg.seed)
    s_images, s_labels = cfg.sensor.project_batch(source.training_clouds())
    t_images, _ = cfg.sensor.project_batch(target.inputs())
    t_labels = np.full(t_images.shape[:1] + t_images.shape[2:], IGNORE, dtype=np.int64)
    template = cfg.template()
    h, w = s_images.shape[2:]

    assignment = make_assignment(template, count, count, cfg.seed)
    mixed = concatenate(RVBatch(s_images, s_labels), RVBatch(t_images, t_labels), template, cfg.seed, assignment)
    domains, _ = donor_map(assignment, template, h, w)

    written = []
    for k in range(len(mixed)):
        panels = [
            render.render_range(s_images[k % count], cfg.sensor.max_range),
            render.render_range(t_images[k % count], cfg.sensor.max_range),
            render.render_domains(domains[k]),
            render.render_range(mixed.images[k], cfg.sensor.max_range),
            render.render_labels(mixed.labels[k]),
        ]
        written.append(render.write_ppm(run_dir / f"concat_{k:03d}.ppm", render.stack_rows(*panels), ROW_SCALE))
    logger.info("rendered %d intermediate-domain samples with template %s", len(written), template)
    return {"files": written, "template": template}


def cmd_stats(cfg: RunConfig, run_dir: Path, domain: str = "source", split: tuple = (2, 4)) -> pd.DataFrame:
    """Occupancy report: empty share and class shares per (near-far, bearing) region."""
    source, target = load_domains(cfg)
    scenes = {"source": source, "target": target}.get(domain)
    if scenes is None:
        raise ConfigError(f"domain must be source or target, got {domain!r}")
    if len(scenes) == 0:
        raise DataError(f"{domain} dataset is empty")
    clouds = [replace(scenes.clouds[i], labels=scenes.evaluation_labels(i)) for i in range(len(scenes))]
    images, labels = cfg.sensor.project_batch(clouds)
    df = occupancy_report(images, labels, split, cfg.model.num_classes)
    df.insert(0, "domain", domain)
    df.to_csv(run_dir / "occupancy.csv", index=False, float_format="%.10g")
    charts.write_html(charts.occupancy_figure(df), run_dir / "occupancy.html")
    return df
