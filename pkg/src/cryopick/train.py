"""Supervised burn-in and teacher/student co-training.

Randomness is drawn from per-step generators keyed on ``(seed, stream,
global step)``: labeled sampling, unlabeled sampling and strong
augmentation are independent streams. Consequences relied upon elsewhere:

* a resumed run reproduces the uninterrupted one step for step;
* co-training with ``weight=0`` and ``alpha=0`` draws exactly the labeled
  crops that continued burn-in would, so the two student trajectories are
  bit-identical.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import nn
from .augment import AugmentSpec, DropBlockParams, apply_strong, apply_weak, apply_weak_views
from .data import ClassCatalog, PickSet, Tomogram, normalize
from .heatmap import LossConfig, reweighted_mse, synthesize_targets
from .nn import OptimizerState, ParamSet
from .picknet import NetConfig, PickerModel, build, forward

STREAM_LABELED, STREAM_UNLABELED, STREAM_AUGMENT = 1, 2, 3


class TrainingError(RuntimeError):
    pass


class CheckpointMismatch(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    crop_size: int = 32
    crops_per_step: int = 1
    steps: int = 200
    lr: float = 1e-3
    schedule: str = "constant"  # or "cosine"
    min_lr_frac: float = 0.1
    loss: LossConfig = field(default_factory=LossConfig)
    augment: AugmentSpec = field(default_factory=AugmentSpec)
    crop_bias: float = 0.5
    seed: int = 0
    checkpoint_every: int = 0
    log_every: int = 10

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if isinstance(self.augment, dict):
            self.augment = AugmentSpec.from_dict(self.augment)
        if self.crop_size % 16:
            raise ValueError("crop size must be divisible by 16")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")

    def lr_at(self, local_step: int) -> float:
        if self.schedule == "constant":
            return self.lr
        frac = min(1.0, local_step / max(1, self.steps))
        lo = self.lr * self.min_lr_frac
        return lo + 0.5 * (self.lr - lo) * (1 + math.cos(math.pi * frac))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class SSLConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    weight: float = 1.0
    ramp_steps: int = 0
    alpha: float = 0.001
    multi_view: bool = True
    unlabeled_per_step: int = 1

    def __post_init__(self):
        if isinstance(self.train, dict):
            self.train = TrainConfig.from_dict(self.train)
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must lie in [0, 1]")
        if self.weight < 0:
            raise ValueError("weight must be >= 0")

    def weight_at(self, local_step: int) -> float:
        if self.ramp_steps <= 0:
            return self.weight
        return self.weight * min(1.0, (local_step + 1) / self.ramp_steps)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SSLConfig":
        return cls(**d)


def ablation_configs(base: SSLConfig) -> dict[str, SSLConfig]:
    """Cumulative MT -> MV -> DropBlock variants of ``base``.

    ``+MT`` co-trains with a single-view pseudo-label and no DropBlock;
    ``+MV`` adds the four-view average; ``+DropBlock`` adds occlusion to
    the strong augmentation.
    """
    aug = base.train.augment
    no_db = replace(aug, dropblock=replace(aug.dropblock, rate=0.0))
    with_db = aug if aug.dropblock.rate > 0 else replace(aug, dropblock=DropBlockParams())
    return {
        "+MT": replace(base, multi_view=False, train=replace(base.train, augment=no_db)),
        "+MT+MV": replace(base, multi_view=True, train=replace(base.train, augment=no_db)),
        "+MT+MV+DropBlock": replace(base, multi_view=True,
                                    train=replace(base.train, augment=with_db)),
    }


def config_digest(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True, default=str).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# data


@dataclass
class Volume:
    """A normalized tomogram, its picks (if labeled) and cached full targets."""

    tomo: Tomogram
    picks: PickSet | None = None
    targets: np.ndarray | None = None

    @classmethod
    def prepare(cls, tomo: Tomogram, picks: PickSet | None, catalog: ClassCatalog,
                stride: int) -> "Volume":
        norm = Tomogram(tomo.meta, normalize(tomo.data))
        targets = None
        if picks is not None:
            targets = synthesize_targets(picks, tomo.meta, catalog, stride).values
        return cls(norm, picks, targets)


def _step_rng(seed: int, stream: int, step: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(stream), int(step)])


def _crop_start(rng, dims, crop: int, align: int, center=None) -> tuple[int, int, int]:
    start = []
    for a, d in enumerate(dims):
        options = np.arange(0, d - crop + 1, align)
        if center is not None:
            inside = options[(options <= center[a]) & (center[a] < options + crop)]
            options = inside if len(inside) else options
        start.append(int(options[rng.integers(len(options))]))
    return tuple(start)


def sample_crop(rng: np.random.Generator, vol: Volume, crop: int, stride: int, bias: float):
    """Random aligned crop; with probability ``bias`` it contains a chosen pick.

    Returns ``(crop data, target slice or None, start)``.
    """
    dims = vol.tomo.meta.dims
    if any(d < crop for d in dims):
        raise ValueError(f"volume {dims} smaller than crop {crop}")
    center = None
    if vol.picks is not None and len(vol.picks) and rng.random() < bias:
        center = vol.picks.picks[rng.integers(len(vol.picks))].center
    s = _crop_start(rng, dims, crop, stride, center)
    x = vol.tomo.data[s[0]:s[0] + crop, s[1]:s[1] + crop, s[2]:s[2] + crop]
    y = None
    if vol.targets is not None:
        o, w = [v // stride for v in s], crop // stride
        y = vol.targets[:, o[0]:o[0] + w, o[1]:o[1] + w, o[2]:o[2] + w]
    return x, y, s


def _labeled_batch(volumes: Sequence[Volume], cfg: TrainConfig, stride: int, step: int):
    rng = _step_rng(cfg.seed, STREAM_LABELED, step)
    xs, ys = [], []
    for _ in range(cfg.crops_per_step):
        vol = volumes[rng.integers(len(volumes))]
        x, y, _ = sample_crop(rng, vol, cfg.crop_size, stride, cfg.crop_bias)
        x, y = apply_weak(x, y, cfg.augment, rng)
        xs.append(x)
        ys.append(y)
    return (torch.from_numpy(np.stack(xs)[:, None].copy()),
            torch.from_numpy(np.stack(ys).copy()))


def _unlabeled_batch(volumes: Sequence[Volume], cfg: SSLConfig, stride: int, step: int):
    rng = _step_rng(cfg.train.seed, STREAM_UNLABELED, step)
    xs = []
    for _ in range(cfg.unlabeled_per_step):
        vol = volumes[rng.integers(len(volumes))]
        x, _, _ = sample_crop(rng, vol, cfg.train.crop_size, stride, 0.0)
        xs.append(np.ascontiguousarray(x))
    return np.stack(xs)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    stage: str  # "burn-in" or "cotrain"
    net: NetConfig
    catalog: ClassCatalog
    student: ParamSet
    optimizer: OptimizerState
    teacher: ParamSet | None = None
    stage_start: int = 0
    config_hash: str = ""
    config: dict = field(default_factory=dict)

    @property
    def step(self) -> int:
        return self.student.step

    def model(self, which: str = "auto") -> PickerModel:
        """Evaluation model: the teacher when present, else the student."""
        use_teacher = which == "teacher" or (which == "auto" and self.teacher is not None)
        return PickerModel(self.net, self.teacher if use_teacher else self.student)


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    groups = {"student": dict(ckpt.student.items()),
              "adam.m": ckpt.optimizer.m, "adam.v": ckpt.optimizer.v}
    if ckpt.teacher is not None:
        groups["teacher"] = dict(ckpt.teacher.items())
    o = ckpt.optimizer
    meta = {"format": "cryopick-checkpoint/1", "stage": ckpt.stage, "step": ckpt.step,
            "teacher_step": ckpt.teacher.step if ckpt.teacher is not None else None,
            "stride": ckpt.net.output_stride, "net": ckpt.net.to_dict(),
            "net_hash": ckpt.net.digest(), "catalog": ckpt.catalog.to_entries(),
            "catalog_hash": ckpt.catalog.digest(), "stage_start": ckpt.stage_start,
            "config_hash": ckpt.config_hash, "config": ckpt.config,
            "adam": {"lr": o.lr, "beta1": o.beta1, "beta2": o.beta2, "eps": o.eps,
                     "step": o.step}}
    return nn.save_tensors(path, groups, meta)


def load_checkpoint(path) -> Checkpoint:
    groups, meta = nn.load_tensors(path)
    net = NetConfig.from_dict(meta["net"])
    if net.digest() != meta["net_hash"]:
        raise CheckpointMismatch(f"{path}: network hash mismatch")
    catalog = ClassCatalog.from_entries(meta["catalog"])
    if catalog.digest() != meta["catalog_hash"]:
        raise CheckpointMismatch(f"{path}: catalog hash mismatch")
    student = ParamSet(groups["student"], step=meta["step"])
    teacher = None
    if "teacher" in groups:
        teacher = ParamSet(groups["teacher"], step=meta["teacher_step"])
    a = meta["adam"]
    opt = OptimizerState(a["lr"], a["beta1"], a["beta2"], a["eps"], a["step"],
                         dict(groups["adam.m"]), dict(groups["adam.v"]))
    return Checkpoint(meta["stage"], net, catalog, student, opt, teacher,
                      meta["stage_start"], meta["config_hash"], meta.get("config", {}))


def new_checkpoint(net: NetConfig, catalog: ClassCatalog, seed: int,
                   cfg: TrainConfig | None = None) -> Checkpoint:
    model = build(net, seed)
    cfg = cfg or TrainConfig()
    return Checkpoint("init", net, catalog, model.params,
                      OptimizerState.for_params(model.params, lr=cfg.lr))


# ---------------------------------------------------------------------------
# teacher / student primitives


def ema_update(teacher: ParamSet, student: ParamSet, alpha: float) -> None:
    """``teacher <- (1 - alpha) * teacher + alpha * student``, in place."""
    if teacher.names() != student.names():
        raise nn.ShapeError("teacher and student parameter names differ")
    with torch.no_grad():
        for k, t in teacher.items():
            s = student[k]
            if s.shape != t.shape:
                raise nn.ShapeError(f"{k}: shapes differ")
            teacher.assign(k, (1.0 - alpha) * t + alpha * s)
    teacher.step += 1


def _predict(teacher, x: torch.Tensor) -> torch.Tensor:
    if isinstance(teacher, PickerModel):
        return forward(teacher, x)
    return torch.as_tensor(teacher(x))


def pseudo_label(teacher, crop, multi_view: bool = True) -> torch.Tensor:
    """Teacher heatmap for an unlabeled crop batch, detached from autograd.

    With ``multi_view`` the teacher sees the identity and three single-axis
    flips; predictions are flipped back and averaged.
    """
    x = torch.as_tensor(np.asarray(crop) if not isinstance(crop, torch.Tensor) else crop)
    if x.dim() == 3:
        x = x[None, None]
    elif x.dim() == 4:
        x = x[None]
    with torch.no_grad():
        if not multi_view:
            return _predict(teacher, x).detach()
        preds = [inv(_predict(teacher, view)) for view, inv in apply_weak_views(x)]
        # pairwise sum: four equal views average back to themselves exactly
        return (((preds[0] + preds[1]) + (preds[2] + preds[3])) * 0.25).detach()


# ---------------------------------------------------------------------------
# training loops


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    metrics: list[dict]


def _check_finite(value: torch.Tensor, what: str, step: int) -> None:
    if not torch.isfinite(value):
        raise TrainingError(f"non-finite {what} loss ({float(value)}) at step {step}")


def _begin(init: Checkpoint, stage: str, cfg_dict: dict, resume: bool):
    if resume:
        if init.stage != stage:
            raise CheckpointMismatch(f"cannot resume a {init.stage!r} checkpoint as {stage!r}")
        if init.config_hash and init.config_hash != config_digest(cfg_dict):
            raise CheckpointMismatch("config hash differs from the checkpoint being resumed")
        return init.stage_start
    return init.step


def _emit(ckpt: Checkpoint, local: int, cadence: int, on_checkpoint):
    if on_checkpoint is not None and cadence > 0 and local % cadence == 0:
        on_checkpoint(ckpt)


def burn_in(labeled: Sequence[Volume], cfg: TrainConfig, init: Checkpoint,
            resume: bool = False, on_checkpoint: Callable | None = None,
            evaluator: Callable | None = None, eval_every: int = 0) -> TrainResult:
    """Supervised training on labeled volumes only (continues from ``init``)."""
    if not labeled:
        raise ValueError("burn-in needs at least one labeled volume")
    if any(v.targets is None for v in labeled):
        raise ValueError("labeled volumes need picks")
    cfg_dict = {"stage": "burn-in", "train": cfg.to_dict()}
    start = _begin(init, "burn-in", cfg_dict, resume)
    student = init.student.clone()
    opt = init.optimizer.clone()
    model = PickerModel(init.net, student)
    R = init.net.output_stride
    ckpt = Checkpoint("burn-in", init.net, init.catalog, student, opt, None, start,
                      config_digest(cfg_dict), cfg_dict)
    metrics = []
    while student.step - start < cfg.steps:
        step, local = student.step, student.step - start
        x, y = _labeled_batch(labeled, cfg, R, step)
        leaves = student.leaves()
        sup = reweighted_mse(forward(model, x, leaves), y, cfg.loss)
        _check_finite(sup, "supervised", step)
        grads = torch.autograd.grad(sup, list(leaves.values()))
        lr = cfg.lr_at(local)
        nn.adam_step(student, dict(zip(leaves, grads)), opt, lr)
        local += 1
        if cfg.log_every and local % cfg.log_every == 0:
            row = {"step": student.step, "supervised": sup.item(), "consistency": 0.0,
                   "total": sup.item(), "ema_distance": 0.0, "lr": lr}
            if evaluator is not None and eval_every and local % eval_every == 0:
                row["heldout_f1"] = evaluator(PickerModel(init.net, student))
            metrics.append(row)
        _emit(ckpt, local, cfg.checkpoint_every, on_checkpoint)
    return TrainResult(ckpt, metrics)


def cotrain(labeled: Sequence[Volume], unlabeled: Sequence[Volume], init: Checkpoint,
            cfg: SSLConfig, resume: bool = False, on_checkpoint: Callable | None = None,
            evaluator: Callable | None = None, eval_every: int = 0) -> TrainResult:
    """Teacher/student co-training: supervised + weighted consistency loss.

    The teacher is initialised from the burn-in student (or restored when
    resuming a co-training checkpoint), is never touched by the optimizer
    and follows the student through :func:`ema_update` once per step.
    """
    if not unlabeled:
        raise ValueError("co-training needs unlabeled volumes")
    if not labeled:
        raise ValueError("co-training needs labeled volumes")
    if init.stage == "init":
        raise CheckpointMismatch("co-training must start from a burn-in checkpoint")
    tcfg = cfg.train
    cfg_dict = {"stage": "cotrain", "ssl": cfg.to_dict()}
    start = _begin(init, "cotrain", cfg_dict, resume)
    student = init.student.clone()
    teacher = init.teacher.clone() if init.teacher is not None else init.student.clone()
    opt = init.optimizer.clone()
    smodel, tmodel = PickerModel(init.net, student), PickerModel(init.net, teacher)
    R = init.net.output_stride
    ckpt = Checkpoint("cotrain", init.net, init.catalog, student, opt, teacher, start,
                      config_digest(cfg_dict), cfg_dict)
    metrics = []
    while student.step - start < tcfg.steps:
        step, local = student.step, student.step - start
        x, y = _labeled_batch(labeled, tcfg, R, step)
        leaves = student.leaves()
        sup = reweighted_mse(forward(smodel, x, leaves), y, tcfg.loss)
        w = cfg.weight_at(local)
        if w > 0:
            u = _unlabeled_batch(unlabeled, cfg, R, step)
            target_u = pseudo_label(tmodel, torch.from_numpy(u[:, None].copy()), cfg.multi_view)
            arng = _step_rng(tcfg.seed, STREAM_AUGMENT, step)
            strong = np.stack([apply_strong(c, tcfg.augment, arng) for c in u])[:, None]
            cons = reweighted_mse(forward(smodel, torch.from_numpy(strong), leaves), target_u,
                                  tcfg.loss)
            total = sup + w * cons
        else:
            # the unlabeled branch contributes nothing, so it is not evaluated
            cons = torch.zeros((), dtype=sup.dtype)
            total = sup
        _check_finite(total, "total", step)
        grads = torch.autograd.grad(total, list(leaves.values()))
        lr = tcfg.lr_at(local)
        nn.adam_step(student, dict(zip(leaves, grads)), opt, lr)
        ema_update(teacher, student, cfg.alpha)
        local += 1
        if tcfg.log_every and local % tcfg.log_every == 0:
            row = {"step": student.step, "supervised": sup.item(), "consistency": cons.item(),
                   "total": total.item(), "weight": w,
                   "ema_distance": teacher.distance(student), "lr": lr}
            if evaluator is not None and eval_every and local % eval_every == 0:
                row["heldout_f1"] = evaluator(tmodel)
            metrics.append(row)
        _emit(ckpt, local, tcfg.checkpoint_every, on_checkpoint)
    return TrainResult(ckpt, metrics)


def train_report(ckpt: Checkpoint, metrics: Sequence[dict]) -> dict:
    """Summary record of a finished stage."""
    last = metrics[-1] if metrics else {}
    ema = ckpt.teacher.distance(ckpt.student) if ckpt.teacher is not None else 0.0
    return {"stage": ckpt.stage, "step": ckpt.step, "rows": len(metrics),
            "supervised": last.get("supervised"), "consistency": last.get("consistency", 0.0),
            "total": last.get("total"), "ema_distance": ema,
            "heldout_f1": [m["heldout_f1"] for m in metrics if "heldout_f1" in m]}


METRIC_FIELDS = ["step", "supervised", "consistency", "total", "weight", "ema_distance",
                 "lr", "heldout_f1"]


def write_metrics(metrics: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS, extrasaction="ignore")
        w.writeheader()
        for row in metrics:
            w.writerow(row)
