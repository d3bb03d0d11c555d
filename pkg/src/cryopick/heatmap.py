"""Gaussian heatmap targets and the foreground/background reweighted MSE."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .data import ClassCatalog, PickSet, VolumeMeta

TRUNCATE_SIGMAS = 3.0


@dataclass
class Heatmap:
    values: np.ndarray  # (C, D', H', W') in [0, 1]
    stride: int
    catalog: ClassCatalog
    spacing: float = 10.0

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class LossConfig:
    lam: float = 4.0
    eps: float = 1e-6

    def __post_init__(self):
        if self.lam < 0 or not self.eps > 0:
            raise ValueError("need lam >= 0 and eps > 0")


def output_dims(dims, stride: int) -> tuple[int, int, int]:
    return tuple(int(d) // stride for d in dims)


def target_sigma(radius_angstrom: float, spacing: float, stride: int) -> float:
    """Target sigma in output-grid voxels: half the radius, measured at stride R."""
    return radius_angstrom / spacing / stride / 2.0


def splat_gaussians(out: np.ndarray, centers: np.ndarray, sigma: float) -> None:
    """Max-combine truncated Gaussians centred on integer ``centers`` into ``out``."""
    half = int(math.floor(TRUNCATE_SIGMAS * sigma))
    r = np.arange(-half, half + 1)
    d2 = r[:, None, None] ** 2 + r[None, :, None] ** 2 + r[None, None, :] ** 2
    kernel = np.exp(-d2 / (2.0 * sigma**2))
    kernel[d2 > (TRUNCATE_SIGMAS * sigma) ** 2] = 0.0
    kernel = kernel.astype(out.dtype)
    dims = out.shape
    for c in np.asarray(centers, dtype=np.int64).reshape(-1, 3):
        lo = [max(0, int(ci) - half) for ci in c]
        hi = [min(d, int(ci) + half + 1) for ci, d in zip(c, dims)]
        klo = [l - (int(ci) - half) for l, ci in zip(lo, c)]
        sl = tuple(slice(a, b) for a, b in zip(lo, hi))
        ksl = tuple(slice(k, k + (b - a)) for k, a, b in zip(klo, lo, hi))
        np.maximum(out[sl], kernel[ksl], out=out[sl])


def synthesize_targets(picks: PickSet, meta: VolumeMeta, catalog: ClassCatalog,
                       stride: int = 2, dtype=np.float32) -> Heatmap:
    """Splat every pick onto its class channel at ``floor(center / R)``."""
    if catalog.C < 1:
        raise ValueError("empty catalog")
    shape = output_dims(meta.dims, stride)
    values = np.zeros((catalog.C,) + shape, dtype=dtype)
    for spec in catalog:
        centers = picks.centers(spec.class_id)
        if not len(centers):
            continue
        q = np.floor(centers / stride).astype(np.int64)
        q = np.minimum(q, np.array(shape) - 1)
        splat_gaussians(values[spec.class_id], q,
                        target_sigma(spec.radius_angstrom, meta.spacing, stride))
    return Heatmap(values, stride, catalog, meta.spacing)


def _as_tensor(x):
    if isinstance(x, Heatmap):
        x = x.values
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x))


def _terms(pred, target, cfg: LossConfig):
    pred, target = _as_tensor(pred), _as_tensor(target).to(_as_tensor(pred).dtype)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    sq = (pred - target) ** 2
    pos = (target * sq).sum() / (target.sum() + cfg.eps)
    neg = ((1 - target) * sq).sum() / ((1 - target).sum() + cfg.eps)
    return pos, neg


def reweighted_mse(pred, target, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    """Foreground-weighted plus ``lam`` x background-weighted squared error.

    Sums run over the flattened tensor (all classes and voxels). Works on
    tensors with autograd or on plain arrays / Heatmaps.
    """
    pos, neg = _terms(pred, target, cfg)
    return pos + cfg.lam * neg


def loss_per_class(pred, target, cfg: LossConfig = LossConfig()) -> list[float]:
    """Diagnostic: the same loss evaluated separately on each class channel."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    ch = 1 if pred.dim() == 5 else 0
    return [float(reweighted_mse(pred.select(ch, c), target.select(ch, c), cfg))
            for c in range(pred.shape[ch])]


def loss_grad(pred, target, cfg: LossConfig = LossConfig()) -> np.ndarray:
    """Closed-form derivative of :func:`reweighted_mse` with respect to ``pred``."""
    p = np.asarray(_as_tensor(pred).detach(), dtype=np.float64)
    y = np.asarray(_as_tensor(target).detach(), dtype=np.float64)
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {y.shape}")
    diff = p - y
    return (2 * y * diff / (y.sum() + cfg.eps)
            + 2 * cfg.lam * (1 - y) * diff / ((1 - y).sum() + cfg.eps))
