"""Heatmap decoding, sliding-window inference and the decoder benchmark.

``nms_decode`` is max-pool non-maximum suppression: a voxel is a detection
iff it exceeds the threshold and equals the maximum of its ``k x k x k``
window. Only voxels above the threshold can qualify, and a voxel below the
threshold can never beat one above it, so the window test is evaluated on
the above-threshold voxels alone. The result is identical to dense max
pooling but costs time proportional to the foreground.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from scipy import ndimage

from .data import ClassCatalog, PickSet, Tomogram, VolumeMeta
from .heatmap import Heatmap, output_dims, synthesize_targets
from .data import Pick


@dataclass(frozen=True)
class Detection:
    class_id: int
    center: tuple[float, float, float]
    confidence: float


def round_to_odd(x: float) -> int:
    """Nearest odd integer; even integers round up."""
    return 2 * int(math.floor(x / 2.0)) + 1


def nms_kernel(radius_angstrom: float, spacing: float, stride: int) -> int:
    """Window size spanning half the particle radius on either side, odd and >= 3."""
    radius_out = radius_angstrom / spacing / stride
    return max(3, round_to_odd(radius_out + 1))


def _thresholds(threshold, n: int) -> list[float]:
    if np.ndim(threshold) == 0:
        return [float(threshold)] * n
    t = [float(v) for v in threshold]
    if len(t) != n:
        raise ValueError(f"need {n} thresholds, got {len(t)}")
    return t


def to_input_coords(idx: np.ndarray, stride: int) -> np.ndarray:
    return np.asarray(idx, dtype=np.float64) * stride + stride / 2.0


def local_maxima(values: np.ndarray, kernel: int, threshold: float,
                 chunk: int = 1 << 14) -> np.ndarray:
    """Indices (n, 3) of window maxima above ``threshold`` in one 3D channel.

    Ties between equal values inside a window go to the lexicographically
    smallest coordinate (the smallest C-order flat index).
    """
    shape = values.shape
    flat = values.reshape(-1)
    cand = np.flatnonzero(flat > threshold)
    if not cand.size:
        return np.zeros((0, 3), dtype=np.int64)
    coords = np.stack(np.unravel_index(cand, shape), axis=1)
    # the 3^3 window lies inside every k^3 window, so it is an exact pre-filter
    for k in sorted({min(3, kernel), kernel}):
        keep = _window_winners(flat, shape, coords, cand, k, chunk)
        coords, cand = coords[keep], cand[keep]
    return coords


def _window_winners(flat, shape, coords, cand, kernel, chunk):
    h = kernel // 2
    r = np.arange(-h, h + 1)
    offs = np.array(list(itertools.product(r, r, r)), dtype=np.int64)
    offs = offs[np.any(offs != 0, axis=1)]
    keep = np.ones(cand.size, dtype=bool)
    hi = np.array(shape) - 1
    strides = np.array([shape[1] * shape[2], shape[2], 1], dtype=np.int64)
    for start in range(0, cand.size, chunk):
        c = coords[start:start + chunk]
        own_idx = cand[start:start + chunk]
        own = flat[own_idx]
        ok = np.ones(len(c), dtype=bool)
        for o in offs:
            # clipping keeps neighbours inside the window, never outside it
            nb = np.clip(c + o, 0, hi) @ strides
            v = flat[nb]
            ok &= (v < own) | ((v == own) & (nb >= own_idx))
        keep[start:start + chunk] = ok
    return keep


def nms_decode(hm: Heatmap, catalog: ClassCatalog | None = None, threshold=0.5,
               global_kernel: int | None = None) -> list[Detection]:
    """Max-pool NMS per class with class-specific windows."""
    catalog = catalog or hm.catalog
    vals = np.asarray(hm.values)
    thr = _thresholds(threshold, catalog.C)
    dets = []
    for spec in catalog:
        k = global_kernel or nms_kernel(spec.radius_angstrom, hm.spacing, hm.stride)
        ch = vals[spec.class_id]
        idx = local_maxima(ch, k, thr[spec.class_id])
        conf = ch[tuple(idx.T)] if len(idx) else []
        for i, cf in zip(to_input_coords(idx, hm.stride), conf):
            dets.append(Detection(spec.class_id, tuple(float(v) for v in i), float(cf)))
    return dets


_STRUCT26 = np.ones((3, 3, 3), dtype=bool)


def ccl_decode(hm: Heatmap, catalog: ClassCatalog | None = None, threshold=0.5) -> list[Detection]:
    """Baseline decoder: threshold, 26-connected components, one centroid each."""
    catalog = catalog or hm.catalog
    vals = np.asarray(hm.values)
    thr = _thresholds(threshold, catalog.C)
    dets = []
    for spec in catalog:
        ch = vals[spec.class_id]
        labels, n = ndimage.label(ch > thr[spec.class_id], structure=_STRUCT26)
        if not n:
            continue
        index = np.arange(1, n + 1)
        cents = ndimage.center_of_mass(np.ones_like(ch), labels, index)
        peaks = ndimage.maximum(ch, labels, index)
        for cen, pk in zip(cents, np.atleast_1d(peaks)):
            c = to_input_coords(np.asarray(cen), hm.stride)
            dets.append(Detection(spec.class_id, tuple(float(v) for v in c), float(pk)))
    return dets


def count_components(mask: np.ndarray) -> int:
    return int(ndimage.label(mask, structure=_STRUCT26)[1])


def detections_to_picks(dets: Sequence[Detection], tomogram_id: str, meta: VolumeMeta) -> PickSet:
    hi = np.nextafter(np.array(meta.dims, dtype=np.float64), 0)
    return PickSet(tomogram_id, [
        Pick(d.class_id, tuple(float(v) for v in np.clip(d.center, 0, hi))) for d in dets])


# ---------------------------------------------------------------------------
# tiling


@dataclass(frozen=True)
class TilePlan:
    dims: tuple[int, int, int]
    window: tuple[int, int, int]
    overlap: float
    starts: tuple[tuple[int, ...], ...]

    @property
    def tiles(self) -> list[tuple[int, int, int]]:
        return list(itertools.product(*self.starts))

    def coverage(self) -> np.ndarray:
        cov = np.zeros(self.dims, dtype=np.float64)
        for t in self.tiles:
            cov[tuple(slice(s, s + w) for s, w in zip(t, self.window))] += 1
        return cov

    def blend_weights(self) -> np.ndarray:
        """Per-voxel weight given to each covering tile (uniform averaging)."""
        return 1.0 / self.coverage()


def _axis_starts(dim: int, window: int, stride: int) -> list[int]:
    starts, s = [], 0
    while s + window < dim:
        starts.append(s)
        s += stride
    starts.append(dim - window)
    return sorted(set(starts))


def plan_tiles(dims, window, overlap: float = 0.25, align: int = 1) -> TilePlan:
    """Sliding-window start offsets; the last tile per axis is clamped to ``dim - window``.

    ``align`` rounds the stride down to a multiple of ``align`` (dims and
    window must then be multiples as well, so every start is aligned).
    """
    dims = tuple(int(d) for d in getattr(dims, "dims", dims))
    window = (int(window),) * 3 if np.ndim(window) == 0 else tuple(int(w) for w in window)
    if not 0 <= overlap < 1:
        raise ValueError("overlap must lie in [0, 1)")
    if any(w > d for w, d in zip(window, dims)):
        raise ValueError(f"window {window} larger than volume {dims}")
    starts = []
    for d, w in zip(dims, window):
        stride = max(1, int(math.floor(w * (1 - overlap))))
        if align > 1:
            if d % align or w % align:
                raise ValueError("dims and window must be multiples of align")
            stride = max(align, stride - stride % align)
        starts.append(tuple(_axis_starts(d, w, stride)))
    return TilePlan(dims, window, overlap, tuple(starts))


# ---------------------------------------------------------------------------
# inference

FLIP_NONE: tuple[tuple[int, ...], ...] = ((),)
FLIP_AXES: tuple[tuple[int, ...], ...] = ((), (0,), (1,), (2,))
FLIP_ALL: tuple[tuple[int, ...], ...] = tuple(
    a for n in range(4) for a in itertools.combinations(range(3), n))


@dataclass
class InferenceResult:
    heatmap: Heatmap
    detections: list[Detection]
    forwards: int
    seconds: float


def _flip(t: torch.Tensor, axes: tuple[int, ...]) -> torch.Tensor:
    return t.flip([a - 3 for a in axes]) if axes else t


def predict_tile(model, crop: np.ndarray, flips=FLIP_AXES) -> np.ndarray:
    """Flip-averaged heatmap (C, d/R, h/R, w/R) for one crop, accumulated in float64."""
    from .picknet import forward

    x = torch.as_tensor(np.ascontiguousarray(crop, dtype=np.float32))[None, None]
    acc = None
    with torch.no_grad():
        for axes in flips:
            y = _flip(forward(model, _flip(x, axes)), axes)[0].double()
            acc = y if acc is None else acc + y
    return (acc / len(flips)).numpy()


def predict_heatmap(model, tomo: Tomogram, window=None, overlap: float = 0.25,
                    flips=FLIP_AXES) -> tuple[Heatmap, int]:
    """Stitched whole-volume heatmap and the number of network forwards used."""
    from .data import normalize

    cfg = model.config
    R, ds = cfg.output_stride, cfg.deepest_stride
    data = normalize(tomo.data)
    dims = tomo.meta.dims
    padded = tuple(int(math.ceil(d / ds) * ds) for d in dims)
    if window is None:
        window = padded
    window = (int(window),) * 3 if np.ndim(window) == 0 else tuple(int(w) for w in window)
    if any(w % ds for w in window):
        raise ValueError(f"window {window} must be divisible by {ds}")
    padded = tuple(max(p, w) for p, w in zip(padded, window))
    if padded != dims:
        data = np.pad(data, [(0, p - d) for p, d in zip(padded, dims)], mode="constant")
    plan = plan_tiles(padded, window, overlap, align=R)
    out_shape = (cfg.num_classes,) + output_dims(padded, R)
    acc = np.zeros(out_shape, dtype=np.float64)
    cov = np.zeros(out_shape[1:], dtype=np.float64)
    ow = tuple(w // R for w in window)
    for t in plan.tiles:
        crop = data[tuple(slice(s, s + w) for s, w in zip(t, window))]
        osl = tuple(slice(s // R, s // R + w) for s, w in zip(t, ow))
        acc[(slice(None),) + osl] += predict_tile(model, crop, flips)
        cov[osl] += 1.0
    acc /= cov
    od = output_dims(dims, R)
    values = acc[:, :od[0], :od[1], :od[2]].astype(np.float32)
    return Heatmap(values, R, None, tomo.meta.spacing), len(plan.tiles) * len(flips)


def infer_volume(model, tomo: Tomogram, catalog: ClassCatalog, window=None,
                 overlap: float = 0.25, flips=FLIP_AXES, thresholds=0.5) -> InferenceResult:
    t0 = time.perf_counter()
    hm, n = predict_heatmap(model, tomo, window, overlap, flips)
    hm.catalog = catalog
    dets = nms_decode(hm, catalog, thresholds)
    return InferenceResult(hm, dets, n, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# benchmark


def random_blob_heatmap(shape, catalog: ClassCatalog, n_per_class: int, seed: int = 0,
                        spacing: float = 10.0, stride: int = 2) -> Heatmap:
    """Heatmap of ``n_per_class`` random Gaussian targets per class."""
    C, D, H, W = shape
    if C != catalog.C:
        raise ValueError("channel count must match the catalog")
    rng = np.random.default_rng(seed)
    meta = VolumeMeta((D * stride, H * stride, W * stride), spacing)
    picks = [Pick(c, tuple(rng.uniform(0, 1, 3) * np.array(meta.dims) * 0.999999))
             for c in range(C) for _ in range(n_per_class)]
    return synthesize_targets(PickSet("bench", picks), meta, catalog, stride)


@dataclass
class BenchRow:
    decoder: str
    size: tuple[int, ...]
    times: list[float]
    detections: int

    @property
    def median(self) -> float:
        return float(np.median(self.times))


def bench_decode(sizes, catalog: ClassCatalog, repetitions: int = 3, n_per_class: int = 100,
                 threshold: float = 0.5, seed: int = 0) -> list[BenchRow]:
    """Wall-clock timing of both decoders on random-blob heatmaps."""
    rows = []
    for size in sizes:
        hm = random_blob_heatmap(tuple(size), catalog, n_per_class, seed)
        for name, fn in (("nms", nms_decode), ("ccl", ccl_decode)):
            times, n = [], 0
            for _ in range(repetitions):
                t0 = time.perf_counter()
                n = len(fn(hm, catalog, threshold))
                times.append(time.perf_counter() - t0)
            rows.append(BenchRow(name, tuple(size), times, n))
    return rows


def bench_csv(rows: Sequence[BenchRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["decoder", "size", "repetitions", "median_s", "min_s", "max_s", "detections"])
    for r in rows:
        w.writerow([r.decoder, "x".join(map(str, r.size)), len(r.times), f"{r.median:.6f}",
                    f"{min(r.times):.6f}", f"{max(r.times):.6f}", r.detections])
    return buf.getvalue()


def bench_table(rows: Sequence[BenchRow]) -> str:
    lines = [f"{'decoder':8s} {'size':>18s} {'median [s]':>11s} {'detections':>11s}"]
    for r in rows:
        lines.append(f"{r.decoder:8s} {'x'.join(map(str, r.size)):>18s} "
                     f"{r.median:11.4f} {r.detections:11d}")
    return "\n".join(lines)


def bench_json(rows: Sequence[BenchRow]) -> str:
    return json.dumps([{"decoder": r.decoder, "size": list(r.size), "times": r.times,
                        "median": r.median, "detections": r.detections} for r in rows], indent=2)
