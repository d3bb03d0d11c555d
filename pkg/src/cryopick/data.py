"""Domain types, on-disk formats and synthetic tomogram generation.

Conventions shared by every module:

* volumes are indexed ``(z, y, x)`` with x varying fastest;
* in memory, particle centers are real-valued voxel coordinates;
* on disk, centers are stored in Angstrom with the origin at the center of
  voxel ``(0, 0, 0)``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class FormatError(ValueError):
    """A file on disk does not match its declared format."""


class PickError(ValueError):
    """A pick violates its class or bounds contract."""


class PlacementError(RuntimeError):
    """Synthetic particles could not be placed under the separation rule."""

    def __init__(self, class_name: str, attempts: int):
        super().__init__(
            f"could not place a '{class_name}' particle after {attempts} attempts; "
            "reduce counts or the separation fraction"
        )
        self.class_name = class_name


# ---------------------------------------------------------------------------
# class catalogue


@dataclass(frozen=True)
class ClassSpec:
    class_id: int
    name: str
    radius_angstrom: float

    def __post_init__(self):
        if not self.radius_angstrom > 0:
            raise ValueError(f"radius of {self.name!r} must be positive")

    def radius_voxels(self, spacing: float) -> float:
        return self.radius_angstrom / spacing


@dataclass(frozen=True)
class ClassCatalog:
    classes: tuple[ClassSpec, ...]

    def __post_init__(self):
        if not self.classes:
            raise ValueError("a catalog needs at least one class")
        ids = [c.class_id for c in self.classes]
        if ids != list(range(len(ids))):
            raise ValueError("class ids must be dense and ordered 0..C-1")
        names = [c.name for c in self.classes]
        if len(set(names)) != len(names):
            raise ValueError("class names must be unique")

    @classmethod
    def from_entries(cls, entries: Iterable[dict]) -> "ClassCatalog":
        return cls(tuple(
            ClassSpec(i, str(e["name"]), float(e["radius_angstrom"]))
            for i, e in enumerate(entries)
        ))

    @property
    def C(self) -> int:
        return len(self.classes)

    def __len__(self):
        return len(self.classes)

    def __iter__(self):
        return iter(self.classes)

    def __getitem__(self, class_id: int) -> ClassSpec:
        return self.classes[class_id]

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.classes]

    def by_name(self, name: str) -> ClassSpec:
        for c in self.classes:
            if c.name == name:
                return c
        raise PickError(f"unknown class {name!r}")

    def to_entries(self) -> list[dict]:
        return [{"name": c.name, "radius_angstrom": c.radius_angstrom} for c in self.classes]

    def digest(self) -> str:
        blob = json.dumps(self.to_entries(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def default_catalog() -> ClassCatalog:
    """The six CZII particle classes with their typical radii."""
    text = resources.files("cryopick").joinpath("default_catalog.json").read_text()
    return ClassCatalog.from_entries(json.loads(text))


def read_catalog(path) -> ClassCatalog:
    try:
        entries = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    return ClassCatalog.from_entries(entries)


def write_catalog(catalog: ClassCatalog, path) -> None:
    Path(path).write_text(json.dumps(catalog.to_entries(), indent=2) + "\n")


# ---------------------------------------------------------------------------
# volumes and picks


@dataclass(frozen=True)
class VolumeMeta:
    dims: tuple[int, int, int]
    voxel_spacing_angstrom: float = 10.0

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) < 1:
            raise ValueError(f"dims must be three positive integers, got {self.dims}")
        if not self.voxel_spacing_angstrom > 0:
            raise ValueError("voxel spacing must be positive")
        object.__setattr__(self, "dims", dims)

    @property
    def spacing(self) -> float:
        return self.voxel_spacing_angstrom


@dataclass
class Tomogram:
    meta: VolumeMeta
    data: np.ndarray

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.shape != self.meta.dims:
            raise ValueError(f"data shape {self.data.shape} != dims {self.meta.dims}")
        if not np.isfinite(self.data).all():
            raise ValueError("tomogram contains non-finite values")


@dataclass(frozen=True)
class Pick:
    class_id: int
    center: tuple[float, float, float]


@dataclass
class PickSet:
    tomogram_id: str
    picks: list[Pick] = field(default_factory=list)

    def __len__(self):
        return len(self.picks)

    def __iter__(self):
        return iter(self.picks)

    def of_class(self, class_id: int) -> list[Pick]:
        return [p for p in self.picks if p.class_id == class_id]

    def centers(self, class_id: int | None = None) -> np.ndarray:
        picks = self.picks if class_id is None else self.of_class(class_id)
        return np.array([p.center for p in picks], dtype=np.float64).reshape(-1, 3)

    def validate(self, meta: VolumeMeta, catalog: ClassCatalog) -> None:
        for p in self.picks:
            check_pick(p, meta, catalog)


def check_pick(pick: Pick, meta: VolumeMeta, catalog: ClassCatalog) -> None:
    if not 0 <= pick.class_id < catalog.C:
        raise PickError(f"class id {pick.class_id} not in catalog")
    for c, d, ax in zip(pick.center, meta.dims, "zyx"):
        if not 0 <= c < d:
            raise PickError(f"center {ax}={c:.3f} outside [0, {d})")


def normalize(data: np.ndarray) -> np.ndarray:
    """Zero-mean, unit-variance copy (constant volumes map to zeros)."""
    data = np.asarray(data, dtype=np.float32)
    sd = float(data.std())
    return ((data - data.mean()) / (sd if sd > 0 else 1.0)).astype(np.float32)


# ---------------------------------------------------------------------------
# synthesis


@dataclass
class SynthConfig:
    """Parameters of one synthetic tomogram.

    ``counts`` maps class names to particle counts; ``separation`` is the
    minimum center distance as a fraction of the two radii summed.
    ``amplitude`` is one peak value for every class or a map from class
    name to peak value (classes left out default to 1.0).
    """

    dims: tuple[int, int, int] = (64, 64, 64)
    spacing: float = 10.0
    counts: dict[str, int] = field(default_factory=dict)
    separation: float = 1.0
    amplitude: float | dict[str, float] = 1.0
    noise_sd: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if isinstance(self.amplitude, dict):
            self.amplitude = {str(k): float(v) for k, v in self.amplitude.items()}
        if any(n < 0 for n in self.counts.values()):
            raise ValueError("particle counts must be non-negative")
        if self.separation < 0:
            raise ValueError("separation fraction must be non-negative")
        if self.noise_sd < 0:
            raise ValueError("noise sd must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {k: d[k] for k in ("dims", "spacing", "counts", "separation",
                                   "amplitude", "noise_sd", "seed") if k in d}
        return cls(**known)


MAX_PLACEMENT_ATTEMPTS = 10_000
_RENDER_TRUNCATION = 5.0  # in blob sigmas; exp(-12.5) < 4e-6


def blob_sigma(spec: ClassSpec, spacing: float) -> float:
    """Spatial sigma of a rendered particle in voxels: half its radius."""
    return spec.radius_voxels(spacing) / 2.0


def render_particles(meta: VolumeMeta, picks: Sequence[Pick], catalog: ClassCatalog,
                     amplitude: float | dict[str, float] = 1.0) -> np.ndarray:
    """Sum of isotropic Gaussian densities, one per pick."""
    vol = np.zeros(meta.dims, dtype=np.float64)
    for p in picks:
        peak = (amplitude.get(catalog[p.class_id].name, 1.0) if isinstance(amplitude, dict)
                else amplitude)
        sigma = blob_sigma(catalog[p.class_id], meta.spacing)
        half = int(math.ceil(_RENDER_TRUNCATION * sigma))
        axes = []
        for c, d in zip(p.center, meta.dims):
            lo, hi = max(0, int(math.floor(c)) - half), min(d, int(math.floor(c)) + half + 2)
            idx = np.arange(lo, hi, dtype=np.float64)
            axes.append((slice(lo, hi), np.exp(-((idx - c) ** 2) / (2 * sigma**2))))
        (sz, gz), (sy, gy), (sx, gx) = axes
        vol[sz, sy, sx] += peak * gz[:, None, None] * gy[None, :, None] * gx[None, None, :]
    return vol


def _place(rng: np.random.Generator, cfg: SynthConfig, catalog: ClassCatalog) -> list[Pick]:
    placed: list[Pick] = []
    radii: list[float] = []
    dims = np.array(cfg.dims, dtype=np.float64)
    for spec in catalog:
        r = spec.radius_voxels(cfg.spacing)
        for _ in range(int(cfg.counts.get(spec.name, 0))):
            existing = np.array([p.center for p in placed]).reshape(-1, 3)
            need = cfg.separation * (np.asarray(radii) + r)
            for _attempt in range(MAX_PLACEMENT_ATTEMPTS):
                c = rng.uniform(0.0, 1.0, size=3) * dims
                c = np.minimum(c, np.nextafter(dims, 0))
                if not len(existing) or np.all(np.linalg.norm(existing - c, axis=1) >= need):
                    break
            else:
                raise PlacementError(spec.name, MAX_PLACEMENT_ATTEMPTS)
            placed.append(Pick(spec.class_id, tuple(float(v) for v in c)))
            radii.append(r)
    return placed


def synthesize_tomogram(cfg: SynthConfig, catalog: ClassCatalog,
                        tomogram_id: str = "synthetic") -> tuple[Tomogram, PickSet]:
    """Render a noisy synthetic tomogram and its exact ground-truth picks.

    The output is a pure function of ``(cfg, catalog)``.
    """
    for name in list(cfg.counts) + list(cfg.amplitude if isinstance(cfg.amplitude, dict) else ()):
        catalog.by_name(name)
    meta = VolumeMeta(cfg.dims, cfg.spacing)
    rng = np.random.default_rng(cfg.seed)
    picks = _place(rng, cfg, catalog)
    vol = render_particles(meta, picks, catalog, cfg.amplitude).astype(np.float32)
    if cfg.noise_sd > 0:
        vol += np.float32(cfg.noise_sd) * rng.standard_normal(meta.dims, dtype=np.float32)
    return Tomogram(meta, vol), PickSet(tomogram_id, picks)


# ---------------------------------------------------------------------------
# volume I/O: JSON header + raw little-endian float32 payload

VOLUME_PAYLOAD_SUFFIX = ".f32"


def _payload_path(header: Path) -> Path:
    return header.with_suffix(VOLUME_PAYLOAD_SUFFIX)


def write_volume(tomo: Tomogram, path) -> Path:
    """Write ``path`` (JSON header) and its sibling ``.f32`` payload."""
    path = Path(path)
    if not np.isfinite(tomo.data).all():
        raise FormatError("refusing to write non-finite values")
    header = {
        "dims": list(tomo.meta.dims),
        "dtype": "f32le",
        "spacing_angstrom": tomo.meta.spacing,
        "order": "zyx",
        "payload": _payload_path(path).name,
    }
    path.write_text(json.dumps(header, indent=2) + "\n")
    _payload_path(path).write_bytes(tomo.data.astype("<f4").tobytes())
    return path


def read_volume(path) -> Tomogram:
    path = Path(path)
    try:
        header = json.loads(path.read_text())
        dims = tuple(int(d) for d in header["dims"])
        spacing = float(header["spacing_angstrom"])
        meta = VolumeMeta(dims, spacing)
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed header ({exc})") from exc
    if header.get("dtype") != "f32le" or header.get("order", "zyx") != "zyx":
        raise FormatError(f"{path}: unsupported dtype/order")
    raw = (path.parent / header.get("payload", _payload_path(path).name)).read_bytes()
    expected = math.prod(dims) * 4
    if len(raw) != expected:
        raise FormatError(
            f"{path}: payload length mismatch ({len(raw)} bytes, expected {expected})")
    data = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
    if not np.isfinite(data).all():
        raise FormatError(f"{path}: payload contains non-finite values")
    return Tomogram(meta, data)


def payload_nbytes(dims: Sequence[int]) -> int:
    return math.prod(int(d) for d in dims) * 4


# ---------------------------------------------------------------------------
# picks I/O: one JSON object per line, coordinates in Angstrom


def write_picks(picks: PickSet, path, meta: VolumeMeta, catalog: ClassCatalog) -> None:
    s = meta.spacing
    with open(path, "w") as fh:
        for p in picks:
            z, y, x = p.center
            fh.write(json.dumps({
                "tomogram_id": picks.tomogram_id,
                "class_name": catalog[p.class_id].name,
                "x_angstrom": x * s, "y_angstrom": y * s, "z_angstrom": z * s,
            }) + "\n")


def read_picks(path, meta: VolumeMeta, catalog: ClassCatalog) -> PickSet:
    tomogram_id = None
    picks = []
    s = meta.spacing
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            center = (rec["z_angstrom"] / s, rec["y_angstrom"] / s, rec["x_angstrom"] / s)
            name = rec["class_name"]
            tid = rec["tomogram_id"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from exc
        pick = Pick(catalog.by_name(name).class_id, tuple(float(c) for c in center))
        try:
            check_pick(pick, meta, catalog)
        except PickError as exc:
            raise PickError(f"{path}:{lineno}: {exc}") from None
        tomogram_id = tomogram_id or tid
        picks.append(pick)
    return PickSet(tomogram_id or Path(path).stem, picks)


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
