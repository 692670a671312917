"""
modules/network.py · Regularized convolutions and the range-view backbone for ConDA Desk

Dense numpy tensors with hand-written reverse-mode gradients. Every
convolution carries a learnable modulator f_r of the kernel's shape; the
effective kernel is f_r ⊙ f_c. After training the product can be folded
into a constant kernel.

Backbone: 7 stages of (strided 3×3 conv → leaky ReLU, 3×3 conv → leaky ReLU,
residual add). Height is only downsampled in the last stages. The last four
stage outputs are nearest-upsampled to input resolution, concatenated and
reduced to class logits by a 1×1 regularized conv.
"""

import hashlib
import json
import logging
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from utils.errors import ConfigError, NumericalError, ShapeError

logger = logging.getLogger(__name__)

NUM_STAGES = 7
NUM_TAPS = 4
FIRST_HEIGHT_STRIDE_STAGE = 4     # 0-based; earlier stages keep the height


# ── Regularized convolution ────────────────────────────────────────────────────
@dataclass
class RegularizedConv:
    f_c: np.ndarray                          # (out, in, kh, kw)
    f_r: Optional[np.ndarray] = None         # same shape as f_c; None for a plain conv
    bias: Optional[np.ndarray] = None        # (out,)
    stride: tuple = (1, 1)
    padding: tuple = (0, 0)
    folded: bool = False
    kernel_cache: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.f_r is not None and self.f_r.shape != self.f_c.shape:
            raise ShapeError(f"modulator {self.f_r.shape} does not match kernel {self.f_c.shape}")

    @property
    def regularized(self) -> bool:
        return self.f_r is not None

    def effective_kernel(self) -> np.ndarray:
        if self.folded:
            return self.kernel_cache
        if self.f_r is None:
            return self.f_c
        return self.f_r * self.f_c


def _windows(x: np.ndarray, kh: int, kw: int, stride: tuple, padding: tuple):
    ph, pw = padding
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, :: stride[0], :: stride[1]], xp.shape


def conv_forward(layer: RegularizedConv, x: np.ndarray) -> np.ndarray:
    """Cross-correlation of x (b, in, h, w) with the effective kernel, plus bias."""
    k = layer.effective_kernel()
    if x.ndim != 4 or x.shape[1] != k.shape[1]:
        raise ShapeError(f"input {x.shape} does not match kernel {k.shape}")
    kh, kw = k.shape[2:]
    if x.shape[2] + 2 * layer.padding[0] < kh or x.shape[3] + 2 * layer.padding[1] < kw:
        raise ShapeError(f"input {x.shape} smaller than kernel {k.shape} after padding")
    win, _ = _windows(x, kh, kw, layer.stride, layer.padding)
    out = np.tensordot(win, k, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if layer.bias is not None:
        out = out + layer.bias[None, :, None, None]
    return np.ascontiguousarray(out)


def conv_backward(layer: RegularizedConv, x: np.ndarray, upstream: np.ndarray):
    """
    Gradients of a conv given its input and the upstream gradient.

    Returns (grad_x, grad_f_c, grad_f_r, grad_bias); with G the gradient wrt
    the effective kernel, grad_f_c = G ⊙ f_r and grad_f_r = G ⊙ f_c.
    grad_f_r / grad_bias are None when the layer has no modulator / bias.
    """
    if layer.folded:
        raise ConfigError("folded convolution is inference-only; it has no backward pass")
    k = layer.effective_kernel()
    kh, kw = k.shape[2:]
    sh, sw = layer.stride
    ph, pw = layer.padding
    win, padded_shape = _windows(x, kh, kw, layer.stride, layer.padding)
    ho, wo = upstream.shape[2:]

    g_kernel = np.tensordot(upstream, win, axes=([0, 2, 3], [0, 2, 3]))
    if layer.f_r is not None:
        g_fc, g_fr = g_kernel * layer.f_r, g_kernel * layer.f_c
    else:
        g_fc, g_fr = g_kernel, None
    g_b = upstream.sum(axis=(0, 2, 3)) if layer.bias is not None else None

    g_cols = np.tensordot(upstream, k, axes=([1], [0]))        # (b, ho, wo, in, kh, kw)
    g_xp = np.zeros(padded_shape, dtype=upstream.dtype)
    for i in range(kh):
        for j in range(kw):
            g_xp[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw] += \
                g_cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    g_x = g_xp[:, :, ph : padded_shape[2] - ph, pw : padded_shape[3] - pw]
    return np.ascontiguousarray(g_x), g_fc, g_fr, g_b


def fold_regularizer(layer: RegularizedConv) -> RegularizedConv:
    """Cache f_r ⊙ f_c; the folded layer runs inference only and trains nothing."""
    if layer.folded:
        raise ConfigError("convolution is already folded")
    return RegularizedConv(
        f_c=layer.f_c, f_r=layer.f_r, bias=layer.bias, stride=layer.stride, padding=layer.padding,
        folded=True, kernel_cache=np.array(layer.effective_kernel(), copy=True),
    )


# ── Elementwise / resampling layers ────────────────────────────────────────────
def leaky_relu(x: np.ndarray, slope: float) -> np.ndarray:
    return np.where(x > 0, x, slope * x)


def leaky_relu_backward(x: np.ndarray, upstream: np.ndarray, slope: float) -> np.ndarray:
    return upstream * np.where(x > 0, 1.0, slope).astype(upstream.dtype)


def _nearest_index(src: int, dst: int) -> np.ndarray:
    return (np.arange(dst) * src) // dst


def upsample_nearest(x: np.ndarray, out_hw: tuple) -> np.ndarray:
    rows = _nearest_index(x.shape[2], out_hw[0])
    cols = _nearest_index(x.shape[3], out_hw[1])
    return x[:, :, rows][:, :, :, cols]


def upsample_nearest_backward(upstream: np.ndarray, in_hw: tuple) -> np.ndarray:
    """Sum the upstream gradient back onto source pixels (fixed reduction order)."""
    rows = _nearest_index(in_hw[0], upstream.shape[2])
    cols = _nearest_index(in_hw[1], upstream.shape[3])
    g = np.add.reduceat(upstream, np.searchsorted(rows, np.arange(in_hw[0])), axis=2)
    return np.add.reduceat(g, np.searchsorted(cols, np.arange(in_hw[1])), axis=3)


# ── Backbone ───────────────────────────────────────────────────────────────────
@dataclass(frozen=True)
class StageSpec:
    channels: int
    stride: tuple = (1, 1)       # (height, width)


DESK_STAGES = (
    StageSpec(16, (1, 1)), StageSpec(32, (1, 2)), StageSpec(32, (1, 1)), StageSpec(64, (1, 2)),
    StageSpec(64, (1, 1)), StageSpec(64, (2, 1)), StageSpec(64, (1, 1)),
)


@dataclass(frozen=True)
class BackboneConfig:
    stages: tuple = DESK_STAGES
    num_classes: int = 5
    in_channels: int = 6
    input_hw: tuple = (32, 256)
    head_taps: tuple = (3, 4, 5, 6)
    regularized: bool = True
    negative_slope: float = 0.01
    kernel: int = 3

    def validate(self) -> "BackboneConfig":
        if len(self.stages) != NUM_STAGES:
            raise ConfigError(f"backbone needs exactly {NUM_STAGES} stages, got {len(self.stages)}")
        if tuple(self.head_taps) != tuple(range(NUM_STAGES - NUM_TAPS, NUM_STAGES)):
            raise ConfigError(f"head taps must be the last {NUM_TAPS} stages, got {self.head_taps}")
        for i, s in enumerate(self.stages):
            if s.channels < 1 or min(s.stride) < 1:
                raise ConfigError(f"stage {i + 1}: bad spec {s}")
            if s.stride[0] > 1 and i < FIRST_HEIGHT_STRIDE_STAGE:
                raise ConfigError(f"stage {i + 1} downsamples height; only stages "
                                  f"{FIRST_HEIGHT_STRIDE_STAGE + 1}-{NUM_STAGES} may")
        if self.num_classes < 2 or self.in_channels < 1 or self.kernel % 2 != 1:
            raise ConfigError("need >= 2 classes, >= 1 input channel and an odd kernel size")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = [{"channels": s.channels, "stride": list(s.stride)} for s in self.stages]
        d["input_hw"] = list(self.input_hw)
        d["head_taps"] = list(self.head_taps)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        d = dict(d)
        if "stages" in d:
            d["stages"] = tuple(StageSpec(int(s["channels"]), tuple(s["stride"])) for s in d["stages"])
        for key in ("input_hw", "head_taps"):
            if key in d:
                d[key] = tuple(d[key])
        try:
            return cls(**d).validate()
        except TypeError as e:
            raise ConfigError(f"bad model section: {e}") from e

    def stage_shapes(self) -> list:
        """Spatial (h, w) after each stage."""
        h, w = self.input_hw
        shapes = []
        for s in self.stages:
            h = (h - 1) // s.stride[0] + 1
            w = (w - 1) // s.stride[1] + 1
            shapes.append((h, w))
        return shapes


def config_digest(*sections) -> str:
    blob = json.dumps(list(sections), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def init_params(cfg: BackboneConfig, seed: int, dtype=np.float64) -> dict:
    """He-normal kernels, zero biases, unit modulators. Deterministic in seed."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    k = cfg.kernel
    params = {}

    def conv(name, cin, cout, ksize, gain):
        std = np.sqrt(gain / (cin * ksize * ksize))
        params[f"{name}.f_c"] = (rng.standard_normal((cout, cin, ksize, ksize)) * std).astype(dtype)
        if cfg.regularized:
            params[f"{name}.f_r"] = np.ones((cout, cin, ksize, ksize), dtype=dtype)
        params[f"{name}.bias"] = np.zeros(cout, dtype=dtype)

    cin = cfg.in_channels
    for i, s in enumerate(cfg.stages):
        conv(f"stage{i + 1}.conv_a", cin, s.channels, k, 2.0)
        conv(f"stage{i + 1}.conv_b", s.channels, s.channels, k, 2.0)
        cin = s.channels
    tap_channels = sum(cfg.stages[i].channels for i in cfg.head_taps)
    conv("head", tap_channels, cfg.num_classes, 1, 1.0)
    return params


class Backbone:
    """Fully-convolutional segmentation network over (b, 6, h, w) range images."""

    def __init__(self, cfg: BackboneConfig, params: dict):
        self.cfg = cfg.validate()
        self.params = params
        self.folded = False
        self.layers = {}
        pad = cfg.kernel // 2
        for i, s in enumerate(cfg.stages):
            self.layers[f"stage{i + 1}.conv_a"] = self._layer(f"stage{i + 1}.conv_a", s.stride, (pad, pad))
            self.layers[f"stage{i + 1}.conv_b"] = self._layer(f"stage{i + 1}.conv_b", (1, 1), (pad, pad))
        self.layers["head"] = self._layer("head", (1, 1), (0, 0))
        self._cache = None

    @classmethod
    def create(cls, cfg: BackboneConfig, seed: int, dtype=np.float64) -> "Backbone":
        return cls(cfg, init_params(cfg, seed, dtype))

    def _layer(self, name, stride, padding) -> RegularizedConv:
        f_c = self.params[f"{name}.f_c"]
        f_r = self.params.get(f"{name}.f_r")
        if self.cfg.regularized and f_r is None:
            # checkpoint written after folding: f_c already holds the product
            self.folded = True
            return RegularizedConv(f_c=f_c, f_r=None, bias=self.params[f"{name}.bias"], stride=stride,
                                   padding=padding, folded=True, kernel_cache=f_c)
        return RegularizedConv(f_c=f_c, f_r=f_r, bias=self.params[f"{name}.bias"],
                               stride=stride, padding=padding)

    @property
    def dtype(self):
        return self.params["head.f_c"].dtype

    def parameters(self) -> dict:
        """Trainable tensors only: nothing once folded, no modulators for a plain backbone."""
        if self.folded:
            return {}
        return dict(self.params)

    def state_dict(self) -> dict:
        """Tensors to persist; a folded backbone stores effective kernels and no modulators."""
        if not self.folded:
            return dict(self.params)
        state = {}
        for name, layer in self.layers.items():
            state[f"{name}.f_c"] = layer.kernel_cache
            state[f"{name}.bias"] = layer.bias
        return state

    def parameter_count(self) -> int:
        return int(sum(v.size for v in self.state_dict().values()))

    def fold(self) -> None:
        for name in list(self.layers):
            self.layers[name] = fold_regularizer(self.layers[name])
        self.folded = True
        logger.info("folded %d regularized convolutions", len(self.layers))

    # ── forward / backward ────────────────────────────────────────────────────
    def forward(self, x: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ShapeError(f"expected (b, {cfg.in_channels}, h, w) input, got {x.shape}")
        slope = cfg.negative_slope
        h, w = x.shape[2:]
        stages, outs = [], []
        for i in range(NUM_STAGES):
            conv_a = self.layers[f"stage{i + 1}.conv_a"]
            conv_b = self.layers[f"stage{i + 1}.conv_b"]
            za = conv_forward(conv_a, x)
            a = leaky_relu(za, slope)
            zb = conv_forward(conv_b, a)
            y = a + leaky_relu(zb, slope)
            if not np.all(np.isfinite(y)):
                raise NumericalError(f"non-finite activation at stage {i + 1}")
            stages.append((x, za, a, zb))
            outs.append(y)
            x = y

        taps = [upsample_nearest(outs[i], (h, w)) for i in cfg.head_taps]
        cat = np.concatenate(taps, axis=1)
        logits = conv_forward(self.layers["head"], cat)
        if not np.all(np.isfinite(logits)):
            raise NumericalError("non-finite logits at the segmentation head")
        self._cache = (stages, [o.shape[2:] for o in outs], cat)
        return logits

    def forward_with_cache(self, x: np.ndarray):
        """Logits plus the activation cache, so two forwards can be back-propagated in turn."""
        logits = self.forward(x)
        return logits, self._cache

    def backward(self, g_logits: np.ndarray, cache=None) -> dict:
        """Parameter gradients for `cache` (default: the last forward), keyed like `parameters()`."""
        cache = cache if cache is not None else self._cache
        if cache is None:
            raise ConfigError("backward called before forward")
        if self.folded:
            raise ConfigError("folded backbone is inference-only")
        cfg = self.cfg
        slope = cfg.negative_slope
        stages, shapes, cat = cache
        grads = {}

        def put(name, g_fc, g_fr, g_b):
            grads[f"{name}.f_c"] = g_fc
            if g_fr is not None:
                grads[f"{name}.f_r"] = g_fr
            grads[f"{name}.bias"] = g_b

        g_cat, *rest = conv_backward(self.layers["head"], cat, g_logits)
        put("head", *rest)

        g_out = [None] * NUM_STAGES
        offset = 0
        for i in cfg.head_taps:
            c = cfg.stages[i].channels
            g_out[i] = upsample_nearest_backward(g_cat[:, offset : offset + c], shapes[i])
            offset += c

        g_next = None
        for i in reversed(range(NUM_STAGES)):
            gy = g_out[i] if g_next is None else (g_next if g_out[i] is None else g_next + g_out[i])
            if gy is None:
                continue
            x, za, a, zb = stages[i]
            conv_a = self.layers[f"stage{i + 1}.conv_a"]
            conv_b = self.layers[f"stage{i + 1}.conv_b"]
            g_zb = leaky_relu_backward(zb, gy, slope)
            g_a_res, *rest_b = conv_backward(conv_b, a, g_zb)
            put(f"stage{i + 1}.conv_b", *rest_b)
            g_za = leaky_relu_backward(za, gy + g_a_res, slope)
            g_next, *rest_a = conv_backward(conv_a, x, g_za)
            put(f"stage{i + 1}.conv_a", *rest_a)

        if cache is self._cache:
            self._cache = None
        return grads


def backbone_forward(cfg: BackboneConfig, params: dict, x: np.ndarray) -> np.ndarray:
    """Logits (b, C, h, w) of a backbone built from `params`."""
    return Backbone(cfg, params).forward(x)


def softmax(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)
