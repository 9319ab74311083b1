"""TinyConv with per-layer approximate forward modes.

Each conv/linear layer runs in one of four kernel modes (exact, sc,
approx-mult, analog) and, during training, in one of three phases:

* ``plain``: cheap exact-kernel forward through the proxy, no error model
* ``inject``: plain plus calibrated error injection; calibration batches run the
  accurate kernel and refresh the error model
* ``accurate``: accurate kernel in the forward pass, proxy gradients in backward

Inference goes through :meth:`TinyConv.infer`, plain numpy with the accurate
kernels and no proxy or injection.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import counters
from .analog import AdcConfig, analog_conv2d, analog_linear, calibrate_clip
from .checkpointing import Chain, apply
from .inject import (
    DEFAULT_BINS,
    DEFAULT_DEGREE,
    ErrorModelType1,
    ErrorModelType2,
    InjectionKey,
    InjectType1,
    calibrate_type1,
    calibrate_type2,
    inject_type2,
)
from .mult import MultTable, am_conv2d, am_linear, fake_quantize8, resolve_table
from .proxy import AnalogAct, Difference, ScAct
from .sc import ScConfig, sc_split_conv_counts
from .tensor import ops
from .tensor.autograd import Function, Tensor
from .tensor.functional import conv2d_exact, linear_exact, maxpool2x2, relu

MODES = ("exact", "sc", "approx-mult", "analog")
PHASES = ("plain", "inject", "accurate")
SCALE_FLOOR = 1e-6


class FakeQuant8(Function):
    """Forward: 8-bit quantize/dequantize. Backward: identity."""

    def forward(self, a):
        return fake_quantize8(a)

    def backward(self, g):
        return g


def fake_quant(t: Tensor) -> Tensor:
    return FakeQuant8.apply(t)


def _clamp_unit(t: Tensor) -> Tensor:
    # min(t, 1) for t >= 0, gradient 0 above 1
    return ops.sub(t, ops.relu(ops.add(t, Tensor(np.float32(-1.0)))))


@dataclass
class MethodConfig:
    """Per-method kernel parameters shared by all layers."""

    stream_length: int = 32
    sc_seed: int = 1
    sc_weight_scale: float | str = 1.0  # fixed full scale, or "max" for max|w| per forward
    sc_input_scale: float | str = 1.0  # fixed full scale, or "max" for the batch max at refreshes
    sc_headroom: float = 1.0  # multiplies the weight full scale
    multiplier: str = "default"
    adc_bits: int = 4
    adc_group_size: int = 9
    clip_percentile: float = 99.9
    poly_degree: int = DEFAULT_DEGREE
    bins: int = DEFAULT_BINS

    def sc_config(self) -> ScConfig:
        return ScConfig(stream_length=self.stream_length, base_seed=self.sc_seed)

    def table(self) -> MultTable:
        return resolve_table(self.multiplier)


@dataclass
class LayerState:
    in_scale: float | None = None  # SC: activation full scale
    clip_pos: float | None = None  # analog ADC full scale, real units
    clip_neg: float | None = None
    type1: ErrorModelType1 | None = None
    type2: ErrorModelType2 | None = None


class ApproxLayer:
    """conv3x3 (pad 1) or linear with a selectable forward kernel."""

    def __init__(self, kind: str, w: np.ndarray, b: np.ndarray, layer_id: int, pad: int = 1):
        if kind not in ("conv", "linear"):
            raise ValueError(f"unknown layer kind {kind!r}")
        if kind == "conv" and w.shape[2] not in (1, 3, 5):
            raise ValueError(f"conv kernel size must be 1, 3 or 5, got {w.shape[2]}")
        self.kind = kind
        self.w = Tensor(w, requires_grad=True, name=f"layer{layer_id}.w")
        self.b = Tensor(b, requires_grad=True, name=f"layer{layer_id}.b")
        self.layer_id = layer_id
        self.pad = pad if kind == "conv" else 0
        self.state = LayerState()

    # ----- plain numpy kernels -------------------------------------------------
    def _exact(self, x, w):
        if self.kind == "conv":
            return conv2d_exact(x, w, None, 1, self.pad)
        return linear_exact(x, w)

    def _bias(self, y):
        return y + self.b.data.reshape((1, -1) + (1,) * (y.ndim - 2))

    def weight_scale(self, cfg: MethodConfig) -> float:
        if cfg.sc_weight_scale == "max":
            base = max(float(np.abs(self.w.data).max()), SCALE_FLOOR)
        else:
            base = float(cfg.sc_weight_scale)
        return base * cfg.sc_headroom

    def sc_units(self, x: np.ndarray, cfg: MethodConfig) -> np.ndarray:
        """Accurate SC output in the unit domain, ``decode(pos) - decode(neg)``."""
        xs = np.minimum(x / self.state.in_scale, 1.0)
        sw = self.weight_scale(cfg)
        w = self.w.data
        wp, wn = np.maximum(w, 0) / sw, np.maximum(-w, 0) / sw
        if self.kind == "linear":
            xs, wp, wn = xs[:, :, None, None], wp[:, :, None, None], wn[:, :, None, None]
        pos, neg = sc_split_conv_counts(xs, np.minimum(wp, 1), np.minimum(wn, 1), cfg.sc_config(),
                                        1, self.pad, self.layer_id)
        u = (pos - neg) / cfg.stream_length
        return u[:, :, 0, 0] if self.kind == "linear" else u

    def adc_config(self, cfg: MethodConfig) -> AdcConfig:
        s = self.state
        if s.clip_pos is None:
            raise RuntimeError(f"layer {self.layer_id}: ADC clip has not been calibrated")
        return AdcConfig(bits=cfg.adc_bits, clip=s.clip_pos, group_size=cfg.adc_group_size, clip_neg=s.clip_neg)

    def accurate(self, x: np.ndarray, mode: str, cfg: MethodConfig, table: MultTable | None = None) -> np.ndarray:
        """Accurate-kernel output without bias."""
        w = self.w.data
        if mode == "exact":
            return self._exact(x, w)
        if mode == "sc":
            sw = self.weight_scale(cfg)
            return (self.sc_units(x, cfg) * (self.state.in_scale * sw)).astype(np.float32)
        if mode == "approx-mult":
            table = table or cfg.table()
            if self.kind == "conv":
                return am_conv2d(x, w, None, table, 1, self.pad)
            return am_linear(x, w, None, table)
        if mode == "analog":
            adc = self.adc_config(cfg)
            if self.kind == "conv":
                return analog_conv2d(x, w, None, adc, 1, self.pad)
            return analog_linear(x, w, None, adc)
        raise ValueError(f"unknown mode {mode!r}")

    def infer(self, x: np.ndarray, mode: str, cfg: MethodConfig, table: MultTable | None = None) -> np.ndarray:
        if mode == "sc" and self.state.in_scale is None:
            raise RuntimeError(f"layer {self.layer_id}: SC input scale has not been calibrated")
        return self._bias(self.accurate(x, mode, cfg, table)).astype(np.float32)

    # ----- calibration ----------------------------------------------------------
    def refresh_scale(self, x: np.ndarray, cfg: MethodConfig) -> None:
        if cfg.sc_input_scale == "max":
            self.state.in_scale = max(float(x.max()) if x.size else 0.0, SCALE_FLOOR)
        else:
            self.state.in_scale = float(cfg.sc_input_scale)

    def group_sums(self, x: np.ndarray, cfg: MethodConfig) -> tuple[np.ndarray, np.ndarray]:
        xq = fake_quantize8(x)
        wq = fake_quantize8(self.w.data)
        wp, wn = np.maximum(wq, 0), np.maximum(-wq, 0)
        if self.kind == "conv":
            return (ops.ConvGroupSums.apply(xq, wp, stride=1, pad=self.pad).data,
                    ops.ConvGroupSums.apply(xq, wn, stride=1, pad=self.pad).data)
        return (ops.LinearGroupSums.apply(xq, wp, group_size=cfg.adc_group_size).data,
                ops.LinearGroupSums.apply(xq, wn, group_size=cfg.adc_group_size).data)

    def refresh_clips(self, x: np.ndarray, cfg: MethodConfig) -> None:
        gp, gn = self.group_sums(x, cfg)
        self.state.clip_pos = calibrate_clip(gp, cfg.clip_percentile)
        self.state.clip_neg = calibrate_clip(gn, cfg.clip_percentile)

    # ----- autograd forward -----------------------------------------------------
    def _split(self, x: Tensor, wp: Tensor, wn: Tensor, cfg: MethodConfig, grouped: bool):
        if grouped:
            if self.kind == "conv":
                return ops.conv_group_sums(x, wp, 1, self.pad), ops.conv_group_sums(x, wn, 1, self.pad)
            return ops.linear_group_sums(x, wp, cfg.adc_group_size), ops.linear_group_sums(x, wn, cfg.adc_group_size)
        if self.kind == "conv":
            return ops.conv2d(x, wp, None, 1, self.pad), ops.conv2d(x, wn, None, 1, self.pad)
        return ops.linear(x, wp), ops.linear(x, wn)

    def _dense(self, x: Tensor, w: Tensor) -> Tensor:
        return ops.conv2d(x, w, None, 1, self.pad) if self.kind == "conv" else ops.linear(x, w)

    def forward(self, x: Tensor, ctx: "ForwardContext") -> Tensor:
        mode, phase, cfg = ctx.mode, ctx.phase, ctx.cfg
        if mode == "exact":
            y = self._dense(x, self.w)
        elif mode == "sc":
            y = self._forward_sc(x, ctx)
        elif mode == "approx-mult":
            y = self._forward_am(x, ctx)
        elif mode == "analog":
            y = self._forward_analog(x, ctx)
        else:
            raise ValueError(f"unknown mode {mode!r}")
        return ops.ChannelBias.apply(y, self.b)

    def _key(self, ctx) -> InjectionKey:
        return InjectionKey(ctx.seed, self.layer_id, ctx.step)

    def _forward_sc(self, x: Tensor, ctx) -> Tensor:
        cfg = ctx.cfg
        if ctx.refresh_scales or self.state.in_scale is None:
            self.refresh_scale(x.data, cfg)
        sx = self.state.in_scale
        sw = self.weight_scale(cfg)
        xs = _clamp_unit(ops.Scale.apply(x, factor=1.0 / sx))
        wp = _clamp_unit(ops.Scale.apply(ops.relu(self.w), factor=1.0 / sw))
        wn = _clamp_unit(ops.Scale.apply(ops.relu(ops.neg(self.w)), factor=1.0 / sw))
        xp, xn = self._split(xs, wp, wn, cfg, grouped=False)
        base = ScAct() if ctx.use_proxy else Difference()
        u = self._proxy_phase(base, (xp, xn), ctx, lambda: self.sc_units(x.data, cfg))
        return ops.Scale.apply(u, factor=sx * sw)

    def _forward_am(self, x: Tensor, ctx) -> Tensor:
        p = self._dense(fake_quant(x), fake_quant(self.w))
        return self._proxy_phase(None, (p,), ctx, lambda: self.accurate(x.data, "approx-mult", ctx.cfg, ctx.table))

    def _proxy_phase(self, base, inputs, ctx, accurate_fn) -> Tensor:
        """Type 1 wiring shared by the SC and approximate-multiplier layers."""
        cfg = ctx.cfg
        if ctx.phase == "accurate" or (ctx.phase == "inject" and ctx.calibrate_type1):
            u_proxy = apply(base, *inputs, checkpoint=ctx.checkpointing) if base else inputs[0]
            u_acc = accurate_fn()
            if ctx.phase == "inject":
                self.state.type1 = calibrate_type1(u_acc, u_proxy.data, cfg.poly_degree, cfg.bins, ctx.step)
            return ops.straight_through(u_proxy, u_acc)
        if ctx.phase == "inject":
            inj = InjectType1(self.state.type1, self._key(ctx))
            fn = Chain(base, inj) if base else inj
            return apply(fn, *inputs, checkpoint=ctx.checkpointing)
        return apply(base, *inputs, checkpoint=ctx.checkpointing) if base else inputs[0]

    def _forward_analog(self, x: Tensor, ctx) -> Tensor:
        cfg = ctx.cfg
        if ctx.refresh_scales or self.state.clip_pos is None:
            self.refresh_clips(x.data, cfg)
        xq, wq = fake_quant(x), fake_quant(self.w)
        gp, gn = self._split(xq, ops.relu(wq), ops.relu(ops.neg(wq)), cfg, grouped=True)
        base = AnalogAct((self.state.clip_pos, self.state.clip_neg)) if ctx.use_proxy else Difference()
        per_group = apply(base, gp, gn, checkpoint=ctx.checkpointing)
        u = ops.sum(per_group, axis=2)
        if ctx.phase == "accurate":
            return ops.straight_through(u, self.accurate(x.data, "analog", cfg))
        if ctx.phase == "inject":
            exact = (gp.data.astype(np.float64) - gn.data).sum(axis=2)
            if ctx.calibrate_type2 or self.state.type2 is None:
                acc = self.accurate(x.data, "analog", cfg)
                self.state.type2 = calibrate_type2(acc, exact, ctx.step)
                return ops.straight_through(u, acc)
            return ops.straight_through(u, inject_type2(exact, self.state.type2, self._key(ctx)))
        return u


@dataclass
class ForwardContext:
    mode: str
    phase: str = "plain"
    cfg: MethodConfig = field(default_factory=MethodConfig)
    table: MultTable | None = None
    use_proxy: bool = True
    checkpointing: bool = True
    seed: int = 0
    step: int = 0
    calibrate_type1: bool = False
    calibrate_type2: bool = False
    refresh_scales: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.phase not in PHASES:
            raise ValueError(f"phase must be one of {PHASES}, got {self.phase!r}")


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class TinyConv:
    """conv3x3-relu-pool, conv3x3-relu-pool, conv3x3-relu, flatten, linear."""

    def __init__(self, in_channels: int = 1, image_size: int = 28, classes: int = 10,
                 channels=(32, 32, 64), seed: int = 0, logit_scale: float = 1.0):
        if len(channels) != 3:
            raise ValueError("TinyConv takes exactly three conv widths")
        rng = np.random.default_rng(seed)
        self.arch = dict(in_channels=in_channels, image_size=image_size, classes=classes, channels=tuple(channels),
                         logit_scale=float(logit_scale))
        self.logit_scale = float(logit_scale)
        self.layers: list[ApproxLayer] = []
        prev = in_channels
        for i, ch in enumerate(channels):
            fan_in = prev * 9
            w = kaiming_uniform(rng, (ch, prev, 3, 3), fan_in)
            b = rng.uniform(-1, 1, ch).astype(np.float32) / np.sqrt(fan_in)
            self.layers.append(ApproxLayer("conv", w, b.astype(np.float32), i))
            prev = ch
        side = image_size // 2 // 2
        feat = prev * side * side
        w = kaiming_uniform(rng, (classes, feat), feat)
        b = (rng.uniform(-1, 1, classes) / np.sqrt(feat)).astype(np.float32)
        self.layers.append(ApproxLayer("linear", w, b, len(channels)))

    def parameters(self) -> list[Tensor]:
        out = []
        for layer in self.layers:
            out += [layer.w, layer.b]
        return out

    def forward(self, x, ctx: ForwardContext) -> Tensor:
        h = x if isinstance(x, Tensor) else Tensor(x)
        for i, layer in enumerate(self.layers[:-1]):
            h = ops.relu(layer.forward(h, ctx))
            if i < 2:
                h = ops.maxpool2x2(h)
        out = self.layers[-1].forward(ops.flatten(h), ctx)
        return out if self.logit_scale == 1.0 else ops.Scale.apply(out, factor=self.logit_scale)

    def infer(self, x: np.ndarray, mode: str, cfg: MethodConfig | None = None,
              table: MultTable | None = None) -> np.ndarray:
        """Logits from the accurate kernels; no autograd, proxies or injection."""
        cfg = cfg or MethodConfig()
        if mode == "approx-mult" and table is None:
            table = cfg.table()
        h = np.asarray(x, dtype=np.float32)
        for i, layer in enumerate(self.layers[:-1]):
            h = relu(layer.infer(h, mode, cfg, table))
            if i < 2:
                h = maxpool2x2(h)
        return self.layers[-1].infer(h.reshape(h.shape[0], -1), mode, cfg, table) * np.float32(self.logit_scale)

    def calibrate(self, x: np.ndarray, mode: str, cfg: MethodConfig | None = None) -> None:
        """Set SC input scales / ADC clips from one batch, layer by layer."""
        cfg = cfg or MethodConfig()
        h = np.asarray(x, dtype=np.float32)
        for i, layer in enumerate(self.layers):
            if i == len(self.layers) - 1:
                h = h.reshape(h.shape[0], -1)
            if mode == "sc":
                layer.refresh_scale(h, cfg)
            elif mode == "analog":
                layer.refresh_clips(h, cfg)
            counters.bump("scale_refreshes")
            h = layer.infer(h, mode, cfg)
            if i < len(self.layers) - 1:
                h = relu(h)
                if i < 2:
                    h = maxpool2x2(h)

    def is_calibrated(self, mode: str) -> bool:
        if mode == "sc":
            return all(l.state.in_scale is not None for l in self.layers)
        if mode == "analog":
            return all(l.state.clip_pos is not None for l in self.layers)
        return True

    # ----- checkpoint records ---------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for layer in self.layers:
            i = layer.layer_id
            out[f"params.layer{i}.w"] = layer.w.data.copy()
            out[f"params.layer{i}.b"] = layer.b.data.copy()
            s = layer.state
            for name in ("in_scale", "clip_pos", "clip_neg"):
                value = getattr(s, name)
                if value is not None:
                    out[f"state.layer{i}.{name}"] = np.array([value], dtype=np.float32)
            if s.type1 is not None:
                t = s.type1
                out[f"errmodel.layer{i}.type1.mean_poly"] = t.mean_poly.astype(np.float32)
                out[f"errmodel.layer{i}.type1.std_poly"] = t.std_poly.astype(np.float32)
                out[f"errmodel.layer{i}.type1.domain"] = np.array([t.lo, t.hi, t.calibrated_at], dtype=np.float32)
            if s.type2 is not None:
                t = s.type2
                out[f"errmodel.layer{i}.type2"] = np.array([t.mean, t.var, t.calibrated_at], dtype=np.float32)
        out["arch"] = np.array([self.arch["in_channels"], self.arch["image_size"], self.arch["classes"],
                                *self.arch["channels"], self.logit_scale], dtype=np.float32)
        return out

    @classmethod
    def from_state_dict(cls, records: dict[str, np.ndarray]) -> "TinyConv":
        if "arch" not in records:
            raise ValueError("checkpoint has no architecture record")
        a = records["arch"]
        model = cls(in_channels=int(a[0]), image_size=int(a[1]), classes=int(a[2]),
                    channels=tuple(int(v) for v in a[3:6]), logit_scale=float(a[6]))
        model.load_state_dict(records)
        return model

    def load_state_dict(self, records: dict[str, np.ndarray]) -> None:
        for layer in self.layers:
            i = layer.layer_id
            for attr in ("w", "b"):
                key = f"params.layer{i}.{attr}"
                if key not in records:
                    raise KeyError(f"checkpoint is missing {key}")
                t = getattr(layer, attr)
                if records[key].shape != t.data.shape:
                    raise ValueError(f"{key}: shape {records[key].shape} != model {t.data.shape}")
                t.data = records[key].astype(np.float32).copy()
            s = LayerState()
            for name in ("in_scale", "clip_pos", "clip_neg"):
                key = f"state.layer{i}.{name}"
                if key in records:
                    setattr(s, name, float(records[key][0]))
            key = f"errmodel.layer{i}.type1.domain"
            if key in records:
                lo, hi, at = records[key].astype(np.float64)
                s.type1 = ErrorModelType1(records[f"errmodel.layer{i}.type1.mean_poly"].astype(np.float64),
                                          records[f"errmodel.layer{i}.type1.std_poly"].astype(np.float64),
                                          float(lo), float(hi), int(at))
            key = f"errmodel.layer{i}.type2"
            if key in records:
                mean, var, at = records[key].astype(np.float64)
                s.type2 = ErrorModelType2(float(mean), float(var), int(at))
            layer.state = s
