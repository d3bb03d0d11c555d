"""Weak (flip) and strong (intensity + DropBlock) augmentations.

Strong augmentations never move voxels, so a pseudo-label computed on the
clean crop stays aligned with the augmented crop.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

AXES = {"z": 0, "y": 1, "x": 2}


def _axis(axis) -> int:
    if isinstance(axis, str):
        if axis not in AXES:
            raise ValueError(f"invalid axis {axis!r}")
        return AXES[axis]
    if axis not in (0, 1, 2):
        raise ValueError(f"invalid axis {axis!r}")
    return int(axis)


def flip(arr, axis):
    """Mirror the spatial ``axis`` (z, y or x) of a volume, heatmap or batch.

    Spatial axes are always the last three, so channel and batch axes are
    left alone.
    """
    a = _axis(axis) - 3
    data = getattr(arr, "data", None)
    if data is not None and hasattr(arr, "meta"):
        return type(arr)(arr.meta, np.ascontiguousarray(np.flip(data, a)))
    if isinstance(arr, torch.Tensor):
        return arr.flip([a])
    return np.ascontiguousarray(np.flip(arr, a))


def flip_point(center, axis, dims):
    """Mirror a voxel coordinate: ``c -> dim - 1 - c`` on ``axis``."""
    a = _axis(axis)
    c = list(center)
    c[a] = dims[a] - 1 - c[a]
    return tuple(c)


# ---------------------------------------------------------------------------
# DropBlock


@dataclass(frozen=True)
class DropBlockParams:
    rate: float = 0.0019
    kernel: int = 3
    stride: int = 1
    fill: str = "mean"

    def __post_init__(self):
        if not 0 <= self.rate <= 1:
            raise ValueError("rate must lie in [0, 1]")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError("kernel must be odd and >= 1")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.fill not in ("mean", "zero"):
            raise ValueError("fill must be 'mean' or 'zero'")


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def dropblock_mask(shape, params: DropBlockParams, seed=None) -> np.ndarray:
    """Boolean mask, ``True`` = dropped.

    Bernoulli seeds are dilated by a ``kernel``-wide max pool. With stride
    above one the pooled grid is expanded back to full shape by repetition.
    """
    shape = tuple(int(s) for s in shape)
    rng = _rng(seed)
    seeds = rng.random(shape) < params.rate
    if params.kernel == 1 and params.stride == 1:
        return seeds
    t = torch.from_numpy(seeds.astype(np.float32))[None, None]
    pooled = F.max_pool3d(t, params.kernel, stride=params.stride, padding=params.kernel // 2)
    if params.stride > 1:
        s = params.stride
        pooled = pooled.repeat_interleave(s, 2).repeat_interleave(s, 3).repeat_interleave(s, 4)
        pooled = pooled[..., :shape[0], :shape[1], :shape[2]]
    return pooled[0, 0].numpy() > 0.5


def expected_drop_fraction(rate: float, kernel: int) -> float:
    """Drop probability of an interior voxel for stride-1 dilation."""
    return 1.0 - (1.0 - rate) ** (kernel ** 3)


# ---------------------------------------------------------------------------
# strong / weak pipelines


@dataclass
class AugmentSpec:
    """Augmentation menu.

    ``flip_prob`` gives per-axis (z, y, x) flip probabilities for labeled
    crops. Each strong-augmentation range is ``(low, high)``, sampled
    uniformly; identity ranges disable that step exactly.
    """

    flip_prob: tuple[float, float, float] = (0.5, 0.5, 0.5)
    scale: tuple[float, float] = (0.9, 1.1)
    shift: tuple[float, float] = (-0.1, 0.1)
    noise_sd: tuple[float, float] = (0.0, 0.2)
    gamma: tuple[float, float] = (0.8, 1.25)
    dropblock: DropBlockParams = field(default_factory=DropBlockParams)

    def __post_init__(self):
        if isinstance(self.dropblock, dict):
            self.dropblock = DropBlockParams(**self.dropblock)
        self.flip_prob = tuple(self.flip_prob)
        if any(not 0 <= p <= 1 for p in self.flip_prob):
            raise ValueError("flip probabilities must lie in [0, 1]")
        for name in ("scale", "shift", "noise_sd", "gamma"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} range is not ordered")
            setattr(self, name, (float(lo), float(hi)))
        if self.noise_sd[0] < 0 or self.gamma[0] <= 0:
            raise ValueError("noise sd must be >= 0 and gamma > 0")

    @classmethod
    def identity(cls) -> "AugmentSpec":
        return cls((0, 0, 0), (1, 1), (0, 0), (0, 0), (1, 1), DropBlockParams(rate=0.0))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentSpec":
        return cls(**d)


def _uniform(rng, lo_hi):
    lo, hi = lo_hi
    return lo if lo == hi else float(rng.uniform(lo, hi))


def apply_strong(crop: np.ndarray, spec: AugmentSpec, seed=None,
                 return_mask: bool = False):
    """Intensity scale/shift, additive noise, gamma, then DropBlock."""
    rng = _rng(seed)
    x = np.asarray(crop, dtype=np.float32).copy()
    scale = _uniform(rng, spec.scale)
    shift = _uniform(rng, spec.shift)
    sd = _uniform(rng, spec.noise_sd)
    gamma = _uniform(rng, spec.gamma)
    if scale != 1.0:
        x *= np.float32(scale)
    if shift != 0.0:
        x += np.float32(shift)
    if sd > 0:
        x += np.float32(sd) * rng.standard_normal(x.shape, dtype=np.float32)
    if gamma != 1.0:
        lo, hi = float(x.min()), float(x.max())
        if hi > lo:
            u = (x.astype(np.float64) - lo) / (hi - lo)
            x = (u ** gamma * (hi - lo) + lo).astype(np.float32)
    mask = dropblock_mask(x.shape, spec.dropblock, rng)
    if mask.any():
        x[mask] = x.mean(dtype=np.float32) if spec.dropblock.fill == "mean" else np.float32(0)
    return (x, mask) if return_mask else x


def apply_weak(crop: np.ndarray, target: np.ndarray, spec: AugmentSpec, seed=None):
    """Random axis flips applied jointly to a crop and its (C, d, h, w) target."""
    rng = _rng(seed)
    for axis, p in enumerate(spec.flip_prob):
        if p > 0 and rng.random() < p:
            crop, target = flip(crop, axis), flip(target, axis)
    return crop, target


@dataclass(frozen=True)
class WeakView:
    axes: tuple[int, ...]

    def apply(self, arr):
        for a in self.axes:
            arr = flip(arr, a)
        return arr

    # flips are involutions
    inverse = apply


def apply_weak_views(crop) -> list[tuple[object, Callable]]:
    """The four teacher views: identity and one flip per axis, with inverses."""
    views = [WeakView(()), WeakView((0,)), WeakView((1,)), WeakView((2,))]
    return [(v.apply(crop), v.inverse) for v in views]
