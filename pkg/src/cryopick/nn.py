"""Differentiable operators, parameter store, Adam and gradient checking.

Operators are thin, shape-checked wrappers over ``torch`` functional ops on
``(N, C, D, H, W)`` tensors; autograd supplies their gradient rules.
Everything here is deterministic on CPU for a fixed thread count.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

Tensor = torch.Tensor


class ShapeError(ValueError):
    pass


def _spatial_out(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv3(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
          padding: int = 0) -> Tensor:
    """3D cross-correlation, zero padded."""
    if x.dim() != 5 or weight.dim() != 5:
        raise ShapeError("conv3 expects (N,C,D,H,W) input and (O,C,k,k,k) weight")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"input has {x.shape[1]} channels, weight expects {weight.shape[1]}")
    if stride not in (1, 2):
        raise ShapeError("stride must be 1 or 2")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError("bias must have one entry per output channel")
    for n, k in zip(x.shape[2:], weight.shape[2:]):
        if _spatial_out(n, k, stride, padding) < 1:
            raise ShapeError("kernel larger than padded input")
    return F.conv3d(x, weight, bias, stride=stride, padding=padding)


def maxpool3(x: Tensor, kernel: int, stride: int = 1, padding: int | None = None) -> Tensor:
    """Windowed maximum; padding defaults to ``kernel // 2`` (shape preserving at stride 1)."""
    if kernel < 1:
        raise ShapeError("kernel must be >= 1")
    if x.dim() != 5:
        raise ShapeError("maxpool3 expects (N,C,D,H,W)")
    if padding is None:
        padding = kernel // 2
    if padding > kernel // 2:
        raise ShapeError("padding may not exceed half the kernel")
    return F.max_pool3d(x, kernel, stride=stride, padding=padding)


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour x2 upsampling along each spatial axis."""
    if x.dim() != 5:
        raise ShapeError("upsample2 expects (N,C,D,H,W)")
    return x.repeat_interleave(2, dim=2).repeat_interleave(2, dim=3).repeat_interleave(2, dim=4)


def relu(x: Tensor) -> Tensor:
    return torch.relu(x)


def sigmoid(x: Tensor) -> Tensor:
    return torch.sigmoid(x)


def groupnorm(x: Tensor, groups: int, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    c = x.shape[1]
    if c % groups:
        raise ShapeError(f"{groups} groups do not divide {c} channels")
    if gain.shape != (c,) or shift.shape != (c,):
        raise ShapeError("gain/shift must have one entry per channel")
    return F.group_norm(x, groups, gain, shift, eps)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"cannot add {tuple(a.shape)} and {tuple(b.shape)}")
    return a + b


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"cannot concat {tuple(a.shape)} and {tuple(b.shape)}")
    return torch.cat([a, b], dim=1)


# ---------------------------------------------------------------------------
# parameters


class ParamSet:
    """Ordered name -> tensor map with per-tensor write counters.

    Every mutation goes through :meth:`assign`, so ``versions`` records
    exactly who wrote what; the trainer uses this to prove the optimizer
    never touches the teacher.
    """

    def __init__(self, tensors: Mapping[str, Tensor] | None = None, step: int = 0):
        self._t: OrderedDict[str, Tensor] = OrderedDict()
        self.versions: dict[str, int] = {}
        self.step = step
        for k, v in (tensors or {}).items():
            self.add(k, v)

    def add(self, name: str, value: Tensor) -> None:
        if name in self._t:
            raise KeyError(f"duplicate parameter {name!r}")
        self._t[name] = value.detach().clone()
        self.versions[name] = 0

    def assign(self, name: str, value: Tensor) -> None:
        old = self._t[name]
        if value.shape != old.shape:
            raise ShapeError(f"{name}: shape {tuple(value.shape)} != {tuple(old.shape)}")
        with torch.no_grad():
            old.copy_(value)
        self.versions[name] += 1

    def __getitem__(self, name: str) -> Tensor:
        return self._t[name]

    def __contains__(self, name: str) -> bool:
        return name in self._t

    def __len__(self):
        return len(self._t)

    def names(self) -> list[str]:
        return list(self._t)

    def items(self):
        return self._t.items()

    def clone(self) -> "ParamSet":
        return ParamSet(self._t, step=self.step)

    def to(self, dtype: torch.dtype) -> "ParamSet":
        return ParamSet({k: v.to(dtype) for k, v in self._t.items()}, step=self.step)

    def numel(self) -> int:
        return sum(v.numel() for v in self._t.values())

    def leaves(self) -> dict[str, Tensor]:
        """Fresh autograd leaves sharing nothing with the stored tensors."""
        return {k: v.detach().clone().requires_grad_(True) for k, v in self._t.items()}

    def equal(self, other: "ParamSet") -> bool:
        return self.names() == other.names() and all(
            torch.equal(self[k], other[k]) for k in self.names())

    def distance(self, other: "ParamSet") -> float:
        """Euclidean norm of the flattened difference."""
        total = 0.0
        for k, v in self._t.items():
            total += float(((v.double() - other[k].double()) ** 2).sum())
        return total ** 0.5


# ---------------------------------------------------------------------------
# Adam


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, Tensor] = field(default_factory=dict)
    v: dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ParamSet, **hyper) -> "OptimizerState":
        st = cls(**hyper)
        for k, p in params.items():
            st.m[k] = torch.zeros_like(p)
            st.v[k] = torch.zeros_like(p)
        return st

    def clone(self) -> "OptimizerState":
        return OptimizerState(self.lr, self.beta1, self.beta2, self.eps, self.step,
                              {k: t.clone() for k, t in self.m.items()},
                              {k: t.clone() for k, t in self.v.items()})


def adam_step(params: ParamSet, grads: Mapping[str, Tensor], state: OptimizerState,
              lr: float | None = None) -> None:
    """One bias-corrected Adam update of ``params`` in place."""
    missing = [k for k in params.names() if k not in grads]
    if missing:
        raise KeyError(f"missing gradient for {missing[0]!r}")
    lr = state.lr if lr is None else lr
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    with torch.no_grad():
        for k, p in params.items():
            g = grads[k]
            if g.shape != p.shape:
                raise ShapeError(f"gradient for {k!r} has shape {tuple(g.shape)}")
            m, v = state.m[k], state.v[k]
            m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
            v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
            update = (m / c1) / ((v / c2).sqrt() + state.eps)
            params.assign(k, p - lr * update)
    params.step += 1


# ---------------------------------------------------------------------------
# finite-difference gradient check


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    n_checked: int
    tol: float
    worst: tuple = ()

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-4,
               tol: float = 1e-4, floor: float = 1e-6, max_per_input: int | None = None,
               seed: int = 0) -> GradCheckReport:
    """Compare autograd partials of scalar ``f(*inputs)`` with central differences.

    Inputs are promoted to float64. The relative error of a partial is
    ``|a - n| / max(|a|, |n|, floor)``. ``max_per_input`` caps how many
    coordinates of each input are probed (chosen with ``seed``).
    """
    xs = [x.detach().to(torch.float64).clone() for x in inputs]
    leaves = [x.clone().requires_grad_(True) for x in xs]
    out = f(*leaves)
    if out.numel() != 1:
        raise ShapeError("grad_check needs a scalar function")
    analytic = torch.autograd.grad(out, leaves, allow_unused=True)
    rng = np.random.default_rng(seed)
    worst_rel, worst_abs, n, worst = 0.0, 0.0, 0, ()
    with torch.no_grad():
        for i, x in enumerate(xs):
            a = analytic[i] if analytic[i] is not None else torch.zeros_like(x)
            flat = x.view(-1)
            idx = np.arange(flat.numel())
            if max_per_input is not None and flat.numel() > max_per_input:
                idx = rng.choice(flat.numel(), size=max_per_input, replace=False)
            for j in idx:
                orig = flat[j].item()
                flat[j] = orig + h
                fp = f(*xs).item()
                flat[j] = orig - h
                fm = f(*xs).item()
                flat[j] = orig
                num = (fp - fm) / (2 * h)
                an = a.view(-1)[j].item()
                err = abs(an - num)
                rel = err / max(abs(an), abs(num), floor)
                n += 1
                worst_abs = max(worst_abs, err)
                if rel > worst_rel:
                    worst_rel, worst = rel, (i, int(j), an, num)
    return GradCheckReport(worst_rel, worst_abs, n, tol, worst)


# ---------------------------------------------------------------------------
# checkpoint container: JSON manifest + concatenated little-endian payload

_DTYPES = {torch.float32: "f32le", torch.float64: "f64le"}
_NP = {"f32le": "<f4", "f64le": "<f8"}


def save_tensors(path, groups: Mapping[str, Mapping[str, Tensor]], meta: dict) -> Path:
    """Write ``path`` (manifest) and ``path.with_suffix('.bin')`` (payload)."""
    path = Path(path)
    entries, chunks, offset = [], [], 0
    for group, tensors in groups.items():
        for name, t in tensors.items():
            dt = _DTYPES[t.dtype]
            raw = t.detach().cpu().numpy().astype(_NP[dt]).tobytes()
            entries.append({"group": group, "name": name, "shape": list(t.shape),
                            "dtype": dt, "offset": offset, "nbytes": len(raw)})
            chunks.append(raw)
            offset += len(raw)
    manifest = dict(meta)
    manifest["payload"] = path.with_suffix(".bin").name
    manifest["tensors"] = entries
    path.with_suffix(".bin").write_bytes(b"".join(chunks))
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_tensors(path) -> tuple[dict[str, OrderedDict], dict]:
    path = Path(path)
    manifest = json.loads(path.read_text())
    raw = (path.parent / manifest["payload"]).read_bytes()
    groups: dict[str, OrderedDict] = {}
    for e in manifest["tensors"]:
        buf = raw[e["offset"]:e["offset"] + e["nbytes"]]
        arr = np.frombuffer(buf, dtype=_NP[e["dtype"]]).reshape(e["shape"]).copy()
        groups.setdefault(e["group"], OrderedDict())[e["name"]] = torch.from_numpy(arr)
    meta = {k: v for k, v in manifest.items() if k not in ("tensors", "payload")}
    return groups, meta
