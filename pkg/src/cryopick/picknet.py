"""Asymmetric 3D U-Net emitting per-class heatmaps at output stride R.

The network is written functionally over a :class:`~cryopick.nn.ParamSet`
so that teacher and student are simply two parameter sets evaluated by the
same :func:`forward`.

Layout (desk default, R=2)::

    stem:    conv3 s1 -> conv3 s2 -> conv3 s1            strides 1, 2
    encoder: residual blocks, each halving resolution     strides 4, 8, 16
    decoder: upsample x2, concat skip, conv3              16 -> 8 -> 4 -> 2
    head:    1x1x1 conv + sigmoid                         C channels
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from . import nn
from .nn import ParamSet, Tensor


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class NetConfig:
    num_classes: int = 6
    in_channels: int = 1
    stem_channels: int = 16
    encoder_channels: tuple[int, ...] = (32, 64, 128)
    output_stride: int = 2
    groups: int = 8
    head_bias: float = 0.0
    head_init_std: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "encoder_channels", tuple(self.encoder_channels))
        if self.output_stride not in (1, 2, 4):
            raise ConfigError("output stride must be 1, 2 or 4")
        if not self.encoder_channels:
            raise ConfigError("need at least one encoder stage")
        if self.output_stride >= self.deepest_stride:
            raise ConfigError("output stride must be finer than the deepest encoder stride")
        if self.num_classes < 1 or self.in_channels < 1 or self.stem_channels < 1:
            raise ConfigError("channel counts must be positive")

    @property
    def encoder_strides(self) -> tuple[int, ...]:
        return tuple(2 ** (i + 2) for i in range(len(self.encoder_channels)))

    @property
    def deepest_stride(self) -> int:
        return self.encoder_strides[-1]

    def channels_at(self, stride: int) -> int:
        """Encoder feature width at a given stride (stem covers strides 1 and 2)."""
        if stride <= 2:
            return self.stem_channels
        return self.encoder_channels[self.encoder_strides.index(stride)]

    def decoder_strides(self) -> list[int]:
        out, s = [], self.deepest_stride // 2
        while s >= self.output_stride:
            out.append(s)
            s //= 2
        return out

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _g(cfg: NetConfig, channels: int) -> int:
    g = min(cfg.groups, channels)
    while channels % g:
        g -= 1
    return g


@dataclass
class PickerModel:
    config: NetConfig
    params: ParamSet = field(repr=False)

    @property
    def stride(self) -> int:
        return self.config.output_stride


def _layer_shapes(cfg: NetConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """(name, shape, init kind) for every parameter, in canonical order."""
    shapes = []

    def conv(name, cin, cout, k):
        shapes.append((f"{name}.w", (cout, cin, k, k, k), "he"))
        shapes.append((f"{name}.b", (cout,), "zero"))

    def norm(name, c):
        shapes.append((f"{name}.gain", (c,), "one"))
        shapes.append((f"{name}.shift", (c,), "zero"))

    s = cfg.stem_channels
    conv("stem.0", cfg.in_channels, s, 3); norm("stem.0.n", s)
    conv("stem.1", s, s, 3); norm("stem.1.n", s)
    conv("stem.2", s, s, 3); norm("stem.2.n", s)
    cin = s
    for i, c in enumerate(cfg.encoder_channels):
        conv(f"enc.{i}.a", cin, c, 3); norm(f"enc.{i}.a.n", c)
        conv(f"enc.{i}.b", c, c, 3); norm(f"enc.{i}.b.n", c)
        conv(f"enc.{i}.proj", cin, c, 1); norm(f"enc.{i}.proj.n", c)
        cin = c
    for stride in cfg.decoder_strides():
        c = cfg.channels_at(stride)
        conv(f"dec.{stride}", cin + c, c, 3); norm(f"dec.{stride}.n", c)
        cin = c
    shapes.append(("head.w", (cfg.num_classes, cin, 1, 1, 1), "head"))
    shapes.append(("head.b", (cfg.num_classes,), "head_bias"))
    return shapes


def build(config: NetConfig, seed: int = 0) -> PickerModel:
    """Build a model with deterministic He-normal initialisation."""
    gen = torch.Generator().manual_seed(int(seed))
    params = ParamSet()
    for name, shape, kind in _layer_shapes(config):
        if kind == "he":
            fan_in = math.prod(shape[1:])
            t = torch.randn(shape, generator=gen) * math.sqrt(2.0 / fan_in)
        elif kind == "head":
            t = torch.randn(shape, generator=gen) * config.head_init_std
        elif kind == "one":
            t = torch.ones(shape)
        elif kind == "head_bias":
            t = torch.full(shape, float(config.head_bias))
        else:
            t = torch.zeros(shape)
        params.add(name, t.float())
    return PickerModel(config, params)


def as_input(x) -> Tensor:
    """Accept a Tomogram, a (D,H,W) / (N,C,D,H,W) array or tensor."""
    # Tensor.data is a detached alias, so tensors must bypass the Tomogram lookup
    data = x if isinstance(x, Tensor) else getattr(x, "data", x)
    t = data if isinstance(data, Tensor) else torch.as_tensor(np.asarray(data))
    if t.dim() == 3:
        t = t[None, None]
    elif t.dim() == 4:
        t = t[None]
    return t


def forward(model: PickerModel, x, params=None) -> Tensor:
    """Heatmap logits through a sigmoid, shape (N, C, D/R, H/R, W/R).

    ``params`` overrides ``model.params`` (any name -> tensor mapping, e.g.
    autograd leaves during training).
    """
    cfg = model.config
    p = params if params is not None else model.params
    x = as_input(x)
    x = x.to(p["stem.0.w"].dtype)
    if x.shape[1] != cfg.in_channels:
        raise nn.ShapeError(f"expected {cfg.in_channels} input channels, got {x.shape[1]}")
    ds = cfg.deepest_stride
    if any(n % ds for n in x.shape[2:]):
        raise nn.ShapeError(f"spatial dims {tuple(x.shape[2:])} must be divisible by {ds}")

    def cgr(h, name, stride=1, pad=1, act=True):
        h = nn.conv3(h, p[f"{name}.w"], p[f"{name}.b"], stride=stride, padding=pad)
        h = nn.groupnorm(h, _g(cfg, h.shape[1]), p[f"{name}.n.gain"], p[f"{name}.n.shift"])
        return nn.relu(h) if act else h

    skips = {}
    h = cgr(x, "stem.0")
    skips[1] = h
    h = cgr(h, "stem.1", stride=2)
    h = cgr(h, "stem.2")
    skips[2] = h
    for i, stride in enumerate(cfg.encoder_strides):
        a = cgr(h, f"enc.{i}.a", stride=2)
        a = cgr(a, f"enc.{i}.b", act=False)
        short = cgr(h, f"enc.{i}.proj", stride=2, pad=0, act=False)
        h = nn.relu(nn.add(a, short))
        skips[stride] = h
    for stride in cfg.decoder_strides():
        h = nn.concat_channels(nn.upsample2(h), skips[stride])
        h = cgr(h, f"dec.{stride}")
    logits = nn.conv3(h, p["head.w"], p["head.b"])
    return nn.sigmoid(logits)


def clone_params(model: PickerModel) -> ParamSet:
    return model.params.clone()


def with_params(model: PickerModel, params: ParamSet) -> PickerModel:
    return PickerModel(model.config, params)
