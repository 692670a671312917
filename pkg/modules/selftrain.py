"""
modules/selftrain.py · Losses, pseudo-labels and the two-round self-training loop for ConDA Desk

Source-only pre-training produces w_r0. Each self-training round then
  1. scores every target sample by the median of its normalized pixel
     entropies (round 1 keeps the ⌈ϖ·N⌉ most confident samples, round 2
     keeps all of them),
  2. turns predictions into pseudo-labels with class-wise thresholds chosen
     so that a proportion k of each class's predictions pass,
  3. trains on ℒ_s + g·ℒ_π for a fixed epoch budget, g ~ Bernoulli(σ) per
     step, where ℒ_π is the loss on the concatenated intermediate domain.

Target samples are never augmented: their pseudo-labels are tied to pixels.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from modules.concat import RVBatch, concatenate
from modules.metrics import ConfusionMatrix, accumulate, metrics_row
from modules.network import Backbone, BackboneConfig, softmax
from modules.pointcloud import (CH_MASK, IGNORE, AugmentConfig, LabelMap, PointCloud, RVSensor,
                                augment_cloud, backproject_labels, normalize_channels)
from utils.checkpoint import weights_digest
from utils.errors import ConfigError, DataError, NumericalError, ShapeError
from utils.logs import append_rows

logger = logging.getLogger(__name__)

MIXING_MODES = ("concat", "separate")
SIGMA_MODES = ("gate", "weight")


# ── Configuration ──────────────────────────────────────────────────────────────
@dataclass
class PseudoLabelConfig:
    k: tuple = (0.25, 0.5)        # per round
    varpi: float = 0.5            # round-1 share of target samples kept
    sigma: float = 0.25           # probability of visiting the intermediate domain
    sigma_mode: str = "gate"
    mixing: str = "concat"

    def validate(self) -> "PseudoLabelConfig":
        if len(self.k) != 2:
            raise ConfigError(f"k needs one value per round, got {self.k}")
        for k in self.k:
            _check_proportion("k", k)
        _check_proportion("varpi", self.varpi)
        _check_probability(self.sigma)
        if self.sigma_mode not in SIGMA_MODES:
            raise ConfigError(f"sigma_mode must be one of {SIGMA_MODES}, got {self.sigma_mode!r}")
        if self.mixing not in MIXING_MODES:
            raise ConfigError(f"mixing must be one of {MIXING_MODES}, got {self.mixing!r}")
        return self


@dataclass
class RoundPlan:
    rounds: int = 2
    pretrain_epochs: int = 5
    round_epochs: tuple = (3, 3)
    lr_pretrain: float = 1e-3
    lr_selftrain: float = 1e-4
    batch_size: int = 4
    weight_decay: float = 0.01
    pct_start: float = 0.3        # one-cycle warmup share
    step_gamma: float = 0.1
    step_at: float = 0.7          # share of a round's epochs before the decay

    def validate(self) -> "RoundPlan":
        if self.rounds != 2:
            raise ConfigError(f"self-training runs exactly 2 rounds, got {self.rounds}")
        if len(self.round_epochs) != self.rounds:
            raise ConfigError(f"round_epochs needs {self.rounds} entries, got {self.round_epochs}")
        if self.pretrain_epochs < 0 or min(self.round_epochs) < 0:
            raise ConfigError("epoch budgets must be >= 0")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr_pretrain <= 0 or self.lr_selftrain <= 0:
            raise ConfigError("learning rates must be > 0")
        if self.weight_decay < 0 or not 0.0 < self.pct_start < 1.0 or not 0.0 < self.step_at <= 1.0:
            raise ConfigError("bad schedule settings")
        return self


def _check_proportion(name: str, value: float) -> None:
    if not 0.0 < value <= 1.0:
        raise ConfigError(f"{name} must lie in (0, 1], got {value}")


def _check_probability(sigma: float) -> None:
    if not 0.0 <= sigma <= 1.0:
        raise ConfigError(f"sigma must lie in [0, 1], got {sigma}")


def ceil_count(fraction: float, n: int) -> int:
    """⌈fraction·n⌉, robust to float noise such as 0.7·10 = 7.000000000000001."""
    if n == 0:
        return 0
    return max(1, int(math.ceil(fraction * n - 1e-9)))


# ── Losses ─────────────────────────────────────────────────────────────────────
def cross_entropy(logits: np.ndarray, labels) -> tuple:
    """
    Masked mean cross-entropy over (b, C, h, w) logits.

    Returns (loss, d loss / d logits). IGNORE pixels contribute to neither.
    """
    if isinstance(labels, LabelMap):
        labels = labels.grid[None]
    labels = np.asarray(labels)
    b, c, h, w = logits.shape
    if labels.shape != (b, h, w):
        raise ShapeError(f"labels {labels.shape} do not match logits {logits.shape}")
    valid = labels != IGNORE
    n = int(valid.sum())
    if n == 0:
        logger.warning("all %d pixels of the batch are IGNORE; loss defined as 0", labels.size)
        return 0.0, np.zeros_like(logits)
    if labels[valid].min() < 0 or labels[valid].max() >= c:
        raise DataError(f"label outside [0, {c})")

    z = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_p = z - log_z
    idx = np.where(valid, labels, 0)[:, None]
    picked = np.take_along_axis(log_p, idx, axis=1)[:, 0]
    loss = float(-picked[valid].sum() / n)

    grad = np.exp(log_p)
    np.put_along_axis(grad, idx, np.take_along_axis(grad, idx, axis=1) - 1.0, axis=1)
    grad *= valid[:, None] / n
    return loss, grad.astype(logits.dtype, copy=False)


@dataclass
class StepLoss:
    value: float
    gate: float                           # 1/0 in gate mode, σ in weight mode
    g_source: np.ndarray
    g_mixed: Optional[np.ndarray] = None  # None when the mixed term was skipped


def draw_gate(sigma: float, rng: np.random.Generator) -> int:
    """One Bernoulli(σ) draw; exactly one number is consumed from `rng`."""
    _check_probability(sigma)
    return int(rng.random() < sigma)


def combined_step_loss(source: tuple, mixed: Optional[tuple], sigma: float, rng: np.random.Generator,
                       mode: str = "gate", gate: Optional[int] = None) -> StepLoss:
    """
    ℒ_s + g·ℒ_π for one step. `source` and `mixed` are (logits, labels) pairs.

    In gate mode g is drawn from `rng` unless the caller already drew it;
    in weight mode g = σ. `mixed` may be None whenever g = 0.
    """
    _check_probability(sigma)
    loss_s, g_s = cross_entropy(*source)
    if mode == "gate":
        g = draw_gate(sigma, rng) if gate is None else int(gate)
    elif mode == "weight":
        g = sigma
    else:
        raise ConfigError(f"sigma_mode must be one of {SIGMA_MODES}, got {mode!r}")

    if g == 0:
        return StepLoss(value=loss_s, gate=g, g_source=g_s)
    if mixed is None:
        raise DataError("gate is open but no mixed batch was given")
    loss_m, g_m = cross_entropy(*mixed)
    return StepLoss(value=loss_s + g * loss_m, gate=g, g_source=g_s, g_mixed=g * g_m)


# ── Pseudo-labels ──────────────────────────────────────────────────────────────
def class_thresholds(probs: np.ndarray, k: float, mask: Optional[np.ndarray] = None) -> np.ndarray:
    """
    θ_c per class over (b, C, h, w) softmax maps.

    Among occupied pixels predicted as c, θ_c is the confidence at rank
    ⌈k·count_c⌉ in descending order; a class never predicted gets +inf.
    """
    _check_proportion("k", k)
    c = probs.shape[1]
    conf = probs.max(axis=1)
    pred = probs.argmax(axis=1)
    occupied = np.ones(conf.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)

    theta = np.full(c, np.inf)
    for cls in range(c):
        values = np.sort(conf[occupied & (pred == cls)])[::-1]
        if values.size:
            theta[cls] = values[ceil_count(k, values.size) - 1]
    return theta


def generate_pseudolabels(probs: np.ndarray, thresholds: np.ndarray,
                          mask: Optional[np.ndarray] = None) -> np.ndarray:
    """(b, h, w) labels: the argmax where its confidence reaches θ_argmax, IGNORE elsewhere and on empty pixels."""
    conf = probs.max(axis=1)
    pred = probs.argmax(axis=1)
    keep = conf >= np.asarray(thresholds)[pred]
    if mask is not None:
        keep &= np.asarray(mask, dtype=bool)
    return np.where(keep, pred, IGNORE).astype(np.int64)


def acceptance_fractions(probs: np.ndarray, pseudo: np.ndarray, mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Per class: share of occupied pixels predicted as c that kept their pseudo-label (NaN if none)."""
    pred = probs.argmax(axis=1)
    occupied = np.ones(pred.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    out = np.full(probs.shape[1], np.nan)
    for cls in range(probs.shape[1]):
        predicted = occupied & (pred == cls)
        if predicted.any():
            out[cls] = float((pseudo[predicted] == cls).mean())
    return out


# ── Entropy ────────────────────────────────────────────────────────────────────
def entropy_map(probs: np.ndarray, axis: int = 1) -> np.ndarray:
    """Normalized entropy −Σ p log p / log C, with 0·log 0 = 0. Values lie in [0, 1]."""
    probs = np.asarray(probs, dtype=np.float64)
    if np.any(probs < 0):
        raise DataError("negative probability in entropy input")
    c = probs.shape[axis]
    if c < 2:
        raise DataError("entropy needs at least 2 classes")
    safe = np.where(probs > 0, probs, 1.0)
    plogp = np.where(probs > 0, probs * np.log(safe), 0.0)
    return np.clip(-plogp.sum(axis=axis) / np.log(c), 0.0, 1.0)


def median_entropy(entropy: np.ndarray) -> np.ndarray:
    """Per-sample median over all h·w pixels of (b, h, w) entropies, empty pixels included."""
    return np.median(entropy.reshape(entropy.shape[0], -1), axis=1)


def keep_most_confident(medians: np.ndarray, varpi: float) -> np.ndarray:
    """Ids of the ⌈ϖ·N⌉ samples with the lowest median entropy, in rank order; ties go to the lower id."""
    _check_proportion("varpi", varpi)
    medians = np.asarray(medians, dtype=np.float64)
    if medians.size == 0:
        raise DataError("cannot rank an empty target set")
    order = np.lexsort((np.arange(medians.size), medians))
    return order[: ceil_count(varpi, medians.size)]


def entropy_aggregate(probs: np.ndarray, varpi: float) -> tuple:
    """Returns (retained ids in rank order, per-sample median entropy)."""
    if len(probs) == 0:
        raise DataError("cannot rank an empty target set")
    medians = median_entropy(entropy_map(probs))
    return keep_most_confident(medians, varpi), medians


# ── Optimizer ──────────────────────────────────────────────────────────────────
@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01

    @classmethod
    def create(cls, params: dict, weight_decay: float = 0.01, eps: float = 1e-8) -> "OptimizerState":
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()},
                   weight_decay=weight_decay, eps=eps)


def optimizer_step(params: dict, grads: dict, state: OptimizerState, lr: float) -> tuple:
    """
    One AdamW update, in place.

        m ← β₁m + (1−β₁)g        v ← β₂v + (1−β₂)g²
        p ← p − lr·λ·p − lr·m̂/(√v̂ + ε)

    Parameters without a gradient are left untouched.
    """
    for name, g in grads.items():
        if name not in params:
            raise ShapeError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(f"{name}: gradient {g.shape} vs parameter {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name}")

    b1, b2 = state.betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name in sorted(grads):
        g = grads[name]
        p = params[name]
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * state.weight_decay * p
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# ── Schedules ──────────────────────────────────────────────────────────────────
def _cosine(start: float, end: float, pct: float) -> float:
    return end + (start - end) / 2.0 * (1.0 + math.cos(math.pi * pct))


@dataclass(frozen=True)
class OneCycleSchedule:
    """Per-step learning rate: cosine warmup to max_lr, then cosine decay to max_lr/(div·final_div)."""

    max_lr: float
    total_steps: int
    pct_start: float = 0.3
    div_factor: float = 25.0
    final_div_factor: float = 1e4

    def __call__(self, step: int) -> float:
        initial = self.max_lr / self.div_factor
        final = initial / self.final_div_factor
        warm = max(1, int(round(self.pct_start * self.total_steps)))
        if step < warm:
            return _cosine(initial, self.max_lr, step / warm)
        rest = max(1, self.total_steps - warm)
        return _cosine(self.max_lr, final, min(1.0, (step - warm) / rest))


@dataclass(frozen=True)
class StepSchedule:
    """Per-epoch learning rate: `lr` until the milestone epoch, lr·gamma after."""

    lr: float
    epochs: int
    gamma: float = 0.1
    at: float = 0.7

    @property
    def milestone(self) -> int:
        return max(1, int(math.floor(self.at * self.epochs)))

    def __call__(self, epoch: int) -> float:
        return self.lr * (self.gamma if epoch >= self.milestone else 1.0)


# ── Batching / inference ───────────────────────────────────────────────────────
def _batches(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))


def _source_batch(clouds: list, ids, sensor: RVSensor, augment: AugmentConfig, seed: tuple) -> RVBatch:
    augmented = [augment_cloud(clouds[i], list(seed) + [int(i)], augment) for i in ids]
    images, labels = sensor.encode(augmented)
    if labels is None:
        raise DataError("source clouds must carry labels")
    return RVBatch(images=images, labels=labels)


def predict(model: Backbone, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Softmax maps (N, C, h, w) for normalized inputs (N, 6, h, w)."""
    if len(images) == 0:
        return np.zeros((0, model.cfg.num_classes) + images.shape[2:])
    out = [softmax(model.forward(images[sl])) for sl in _batches(len(images), batch_size)]
    return np.concatenate(out, axis=0)


def evaluate_set(model: Backbone, scenes, sensor: RVSensor, per_point: bool = True,
                 batch_size: int = 8) -> ConfusionMatrix:
    """
    Confusion matrix of the model on a labeled scene set.

    per_point scores every point through back-projection of the predicted
    range image; otherwise occupied pixels are scored against projected labels.
    """
    cm = ConfusionMatrix(model.cfg.num_classes)
    for sl in _batches(len(scenes), batch_size):
        ids = range(sl.start, sl.stop)
        clouds = [PointCloud(scenes.input_cloud(i).points, scenes.evaluation_labels(i)) for i in ids]
        projected = [sensor.project(c) for c in clouds]
        channels = np.stack([ri.channels for ri, _ in projected])
        pred = predict(model, normalize_channels(channels, sensor.max_range), batch_size).argmax(axis=1)
        for (ri, lm), cloud, grid in zip(projected, clouds, pred):
            if per_point:
                accumulate(cm, cloud.labels, backproject_labels(LabelMap(grid), ri, cloud))
            else:
                accumulate(cm, lm.grid, grid)
    return cm


# ── Training ───────────────────────────────────────────────────────────────────
def _step(model: Backbone, src: RVBatch, mixed: Optional[RVBatch], sigma: float, mode: str,
          gate: int, state: OptimizerState, lr: float, cm: ConfusionMatrix) -> float:
    logits_s, cache_s = model.forward_with_cache(src.images)
    accumulate(cm, src.labels, logits_s.argmax(axis=1))
    mixed_pair, cache_m = None, None
    if mixed is not None:
        logits_m, cache_m = model.forward_with_cache(mixed.images)
        mixed_pair = (logits_m, mixed.labels)
    step = combined_step_loss((logits_s, src.labels), mixed_pair, sigma, None, mode=mode, gate=gate)

    grads = model.backward(step.g_source, cache_s)
    if step.g_mixed is not None:
        for name, g in model.backward(step.g_mixed, cache_m).items():
            grads[name] = grads[name] + g
    optimizer_step(model.params, grads, state, lr)
    return step.value


def _epoch_rows(cm: ConfusionMatrix, losses: list, epoch: int, round_id: int, class_names,
                evaluate: Optional[Callable], model: Backbone) -> list:
    rows = []
    if cm.total:
        rows.append(metrics_row(cm, class_names, epoch=epoch, split="train", round=round_id,
                                loss=float(np.mean(losses)) if losses else 0.0))
    if evaluate is not None:
        rows.append(metrics_row(evaluate(model), class_names, epoch=epoch, split="target",
                                round=round_id, loss=np.nan))
    return rows


def pretrain(source: list, model_cfg: BackboneConfig, sensor: RVSensor, plan: RoundPlan, seed: int,
             augment: Optional[AugmentConfig] = None, params: Optional[dict] = None, dtype=np.float64,
             evaluate: Optional[Callable] = None, log_path=None, class_names=None) -> tuple:
    """
    Source-only training with a one-cycle schedule. Returns (w_r0, epoch rows).

    With 0 epochs the initialization is returned untouched.
    """
    plan.validate()
    augment = (augment or AugmentConfig()).validate()
    if params is not None:
        model = Backbone(model_cfg, {k: np.array(v, copy=True) for k, v in params.items()})
    else:
        model = Backbone.create(model_cfg, seed, dtype)
    if plan.pretrain_epochs == 0 or not source:
        return model.params, []

    steps_per_epoch = math.ceil(len(source) / plan.batch_size)
    schedule = OneCycleSchedule(plan.lr_pretrain, plan.pretrain_epochs * steps_per_epoch, plan.pct_start)
    state = OptimizerState.create(model.params, plan.weight_decay)
    all_rows, step = [], 0
    for epoch in range(plan.pretrain_epochs):
        order = np.random.default_rng([seed, 0, epoch]).permutation(len(source))
        cm = ConfusionMatrix(model_cfg.num_classes)
        losses = []
        for sl in _batches(len(source), plan.batch_size):
            src = _source_batch(source, order[sl], sensor, augment, (seed, 0, epoch))
            losses.append(_step(model, src, None, 0.0, "gate", 0, state, schedule(step), cm))
            logger.debug("pretrain step %d loss %.5f", step, losses[-1])
            step += 1
        rows = _epoch_rows(cm, losses, epoch, 0, class_names, evaluate, model)
        logger.info("pretrain epoch %d/%d loss %.4f", epoch + 1, plan.pretrain_epochs, np.mean(losses))
        if log_path is not None:
            append_rows(log_path, rows)
        all_rows.extend(rows)
    return model.params, all_rows


@dataclass
class RoundReport:
    round_id: int
    k: float
    retained: list                   # target ids that supplied pseudo-labels
    thresholds: list                 # θ_c, +inf for classes never predicted
    acceptance: list                 # per-class kept share of predicted pixels
    median_entropy: list = field(default_factory=list)
    rows: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "round": self.round_id,
            "k": self.k,
            "retained": [int(i) for i in self.retained],
            "thresholds": [None if not np.isfinite(t) else float(t) for t in self.thresholds],
            "acceptance": [None if np.isnan(a) else float(a) for a in self.acceptance],
            "median_entropy": [float(e) for e in self.median_entropy],
        }


@dataclass
class CondaResult:
    params: dict
    reports: list


def write_pseudolabel_cache(directory, round_id: int, ids, pseudo: np.ndarray, cfg: PseudoLabelConfig,
                            k: float, thresholds: np.ndarray, digest: str) -> Path:
    """One label-map container per retained sample plus `pseudolabels.json`."""
    from utils.pcrv import write_label_map

    directory = Path(directory) / f"round{round_id}"
    directory.mkdir(parents=True, exist_ok=True)
    for i, grid in zip(ids, pseudo):
        write_label_map(directory / f"target_{int(i):05d}.pcrv", LabelMap(grid))
    sidecar = {
        "round": round_id,
        "k": k,
        "varpi": cfg.varpi if round_id == 1 else 1.0,
        "thresholds": [None if not np.isfinite(t) else float(t) for t in thresholds],
        "weights_sha256": digest,
        "samples": [int(i) for i in ids],
    }
    (directory / "pseudolabels.json").write_text(json.dumps(sidecar, indent=2))
    return directory


def run_conda(source: list, target: list, plan: RoundPlan, cfg: PseudoLabelConfig, w_pre: dict,
              model_cfg: BackboneConfig, sensor: RVSensor, template, seed: int,
              augment: Optional[AugmentConfig] = None, evaluate: Optional[Callable] = None,
              cache_dir=None, log_path=None, class_names=None,
              on_round: Optional[Callable] = None) -> CondaResult:
    """
    Two self-training rounds from w_pre. `source` holds labeled training
    clouds, `target` unlabeled input clouds.

    Round 1 keeps the ⌈ϖ·N⌉ lowest-entropy targets; round 2 relabels the
    full target set with the round-1 weights. `on_round(report, params)`
    runs after each round.
    """
    plan.validate()
    cfg.validate()
    augment = (augment or AugmentConfig()).validate()
    params = {k: np.array(v, copy=True) for k, v in w_pre.items()}
    if sum(plan.round_epochs) == 0:
        return CondaResult(params, [])
    if not source or not target:
        raise DataError(f"self-training needs source and target scenes, got {len(source)} and {len(target)}")

    model = Backbone(model_cfg, params)
    target_images, _ = sensor.encode(target)
    target_mask = target_images[:, CH_MASK] > 0.5
    reports = []

    for round_id in range(1, plan.rounds + 1):
        k = cfg.k[round_id - 1]
        probs = predict(model, target_images, plan.batch_size)
        if round_id == 1:
            retained, medians = entropy_aggregate(probs, cfg.varpi)
        else:
            retained, medians = np.arange(len(target)), median_entropy(entropy_map(probs))
        theta = class_thresholds(probs[retained], k, target_mask[retained])
        pseudo = generate_pseudolabels(probs[retained], theta, target_mask[retained])
        acceptance = acceptance_fractions(probs[retained], pseudo, target_mask[retained])
        del probs
        logger.info("round %d: %d/%d targets, k=%.2f, %d pseudo-labeled pixels, thresholds %s",
                    round_id, len(retained), len(target), k, int((pseudo != IGNORE).sum()),
                    np.array2string(theta, precision=3))
        if cache_dir is not None:
            write_pseudolabel_cache(cache_dir, round_id, retained, pseudo, cfg, k, theta,
                                    weights_digest(model.params))

        report = RoundReport(round_id, k, list(retained), list(theta), list(acceptance), list(medians))
        tgt_images = target_images[retained]
        epochs = plan.round_epochs[round_id - 1]
        schedule = StepSchedule(plan.lr_selftrain, epochs, plan.step_gamma, plan.step_at)
        state = OptimizerState.create(model.params, plan.weight_decay)

        for epoch in range(epochs):
            rng = np.random.default_rng([seed, round_id, epoch])
            t_order = rng.permutation(len(retained))
            s_order = rng.permutation(len(source))
            cm = ConfusionMatrix(model_cfg.num_classes)
            losses = []
            for n, sl in enumerate(_batches(len(retained), plan.batch_size)):
                s_ids = s_order[np.arange(sl.start, sl.stop) % len(source)]
                src = _source_batch(source, s_ids, sensor, augment, (seed, round_id, epoch))
                tgt = RVBatch(images=tgt_images[t_order[sl]], labels=pseudo[t_order[sl]])

                if cfg.mixing == "separate":
                    mixed, mode, gate, sigma = tgt, "gate", 1, 1.0
                else:
                    mode, sigma = cfg.sigma_mode, cfg.sigma
                    gate = draw_gate(sigma, rng) if mode == "gate" else int(sigma > 0)
                    mixed = concatenate(src, tgt, template, [seed, round_id, epoch, n]) if gate else None
                losses.append(_step(model, src, mixed, sigma, mode, gate, state, schedule(epoch), cm))
                logger.debug("round %d epoch %d step %d gate %d loss %.5f", round_id, epoch, n, gate, losses[-1])

            rows = _epoch_rows(cm, losses, epoch, round_id, class_names, evaluate, model)
            logger.info("round %d epoch %d/%d loss %.4f", round_id, epoch + 1, epochs, np.mean(losses))
            if log_path is not None:
                append_rows(log_path, rows)
            report.rows.extend(rows)
        reports.append(report)
        if on_round is not None:
            on_round(report, model.params)

    return CondaResult(model.params, reports)


# ── Component ablation ─────────────────────────────────────────────────────────
# Each rung adds one component on top of the previous one.
ABLATION_LADDER = (
    {"name": "source-only", "regularized": False, "selftrain": False},
    {"name": "baseline", "regularized": False, "selftrain": True, "mixing": "separate", "varpi": 1.0, "round2": True},
    {"name": "+regularizer", "regularized": True, "selftrain": True, "mixing": "separate", "varpi": 1.0, "round2": True},
    {"name": "+concat", "regularized": True, "selftrain": True, "mixing": "concat", "varpi": 1.0, "round2": True},
    {"name": "+entropy", "regularized": True, "selftrain": True, "mixing": "concat", "varpi": None, "round2": False},
    {"name": "full", "regularized": True, "selftrain": True, "mixing": "concat", "varpi": None, "round2": True},
)
