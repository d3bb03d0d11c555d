"""Desk-scale semi-supervised benchmark on synthetic tomograms.

Per seed: synthesize labeled / unlabeled / test volumes, run one burn-in,
then co-train each ablation variant from that shared burn-in checkpoint and
score the teacher on the test volumes (macro F1 at tau 0.5).

Isotropic blobs at the catalog radii leave three large classes within 20 A
of each other, so classes also differ in peak contrast (``AMPLITUDE``).
Strong augmentation is therefore restricted to additive noise (and
DropBlock), which leaves contrast intact; intensity scale, shift and gamma
would teach the student to ignore the very cue that separates classes.

With ``control=True`` each seed also reports ``supervised-continued``: the
burn-in model trained for the co-training step budget on labeled data only.
It separates the effect of the unlabeled branch from that of extra steps.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .augment import AugmentSpec, DropBlockParams
from .data import ClassCatalog, SynthConfig, default_catalog, synthesize_tomogram
from .decode import FLIP_AXES, infer_volume
from .evaluate import MatchConfig, match, merge_reports
from .picknet import NetConfig
from .train import (SSLConfig, TrainConfig, Volume, ablation_configs, burn_in, cotrain,
                    new_checkpoint)


AMPLITUDE = {"apo-ferritin": 1.0, "beta-amylase": 0.6, "beta-galactosidase": 0.8,
             "ribosome": 0.6, "thyroglobulin": 1.0, "virus-like-particle": 0.8}

CONTROL = "supervised-continued"


def _contrast_preserving() -> AugmentSpec:
    return AugmentSpec(scale=(1.0, 1.0), shift=(0.0, 0.0), noise_sd=(0.0, 0.3), gamma=(1.0, 1.0))


@dataclass
class BenchmarkConfig:
    n_labeled: int = 2
    n_unlabeled: int = 16
    n_test: int = 8
    dims: tuple[int, int, int] = (64, 64, 64)
    spacing: float = 15.0
    counts: int = 3  # particles per class per volume
    amplitude: float | dict[str, float] = field(default_factory=lambda: dict(AMPLITUDE))
    noise_sd: float = 0.8
    net: NetConfig = field(default_factory=lambda: NetConfig(
        stem_channels=8, encoder_channels=(16, 32, 32), groups=4, head_bias=-2.0))
    burn_in: TrainConfig = field(default_factory=lambda: TrainConfig(
        crop_size=32, steps=1500, lr=3e-3, schedule="cosine", min_lr_frac=0.1, log_every=100))
    ssl: SSLConfig = field(default_factory=lambda: SSLConfig(
        train=TrainConfig(crop_size=32, steps=300, lr=3e-4, log_every=50,
                          augment=_contrast_preserving()),
        weight=1.0, alpha=0.02))
    threshold: float = 0.5
    flips: tuple = FLIP_AXES
    control: bool = False


def make_dataset(cfg: BenchmarkConfig, catalog: ClassCatalog, seed: int):
    counts = {c.name: cfg.counts for c in catalog}

    def vol(i):
        sc = SynthConfig(cfg.dims, cfg.spacing, counts, 1.0, cfg.amplitude, cfg.noise_sd,
                         seed=seed * 10_000 + i)
        return synthesize_tomogram(sc, catalog, f"s{seed}_v{i:03d}")

    n = cfg.n_labeled + cfg.n_unlabeled + cfg.n_test
    vols = [vol(i) for i in range(n)]
    R = cfg.net.output_stride
    labeled = [Volume.prepare(t, p, catalog, R) for t, p in vols[:cfg.n_labeled]]
    unlabeled = [Volume.prepare(t, None, catalog, R)
                 for t, _ in vols[cfg.n_labeled:cfg.n_labeled + cfg.n_unlabeled]]
    test = vols[cfg.n_labeled + cfg.n_unlabeled:]
    return labeled, unlabeled, test


def score(model, test, catalog: ClassCatalog, cfg: BenchmarkConfig, tau: float = 0.5) -> float:
    reports = []
    for tomo, truth in test:
        res = infer_volume(model, tomo, catalog, flips=cfg.flips, thresholds=cfg.threshold)
        reports.append(match(res.detections, truth, catalog, tomo.meta.spacing, MatchConfig(tau)))
    return merge_reports(reports).macro_f1


@dataclass
class SeedResult:
    seed: int
    scores: dict[str, float]
    seconds: float


def run_seed(seed: int, cfg: BenchmarkConfig | None = None,
             catalog: ClassCatalog | None = None, variants=None, log=print) -> SeedResult:
    cfg = cfg or BenchmarkConfig()
    catalog = catalog or default_catalog()
    torch.manual_seed(seed)
    t0 = time.perf_counter()
    labeled, unlabeled, test = make_dataset(cfg, catalog, seed)
    init = new_checkpoint(cfg.net, catalog, seed, cfg.burn_in)
    base = burn_in(labeled, replace(cfg.burn_in, seed=seed), init).checkpoint
    scores = {"baseline": score(base.model(), test, catalog, cfg)}
    log(f"seed {seed}: baseline {scores['baseline']:.4f} ({time.perf_counter() - t0:.0f}s)")
    ssl = replace(cfg.ssl, train=replace(cfg.ssl.train, seed=seed))
    if cfg.control:
        cont = burn_in(labeled, ssl.train, base).checkpoint
        scores[CONTROL] = score(cont.model(), test, catalog, cfg)
        log(f"seed {seed}: {CONTROL} {scores[CONTROL]:.4f} ({time.perf_counter() - t0:.0f}s)")
    for name, vcfg in ablation_configs(ssl).items():
        if variants is not None and name not in variants:
            continue
        ck = cotrain(labeled, unlabeled, base, vcfg).checkpoint
        scores[name] = score(ck.model("teacher"), test, catalog, cfg)
        log(f"seed {seed}: {name} {scores[name]:.4f} ({time.perf_counter() - t0:.0f}s)")
    return SeedResult(seed, scores, time.perf_counter() - t0)


def run_benchmark(seeds=(0, 1, 2), cfg: BenchmarkConfig | None = None, log=print,
                  variants=None) -> list[SeedResult]:
    return [run_seed(s, cfg, variants=variants, log=log) for s in seeds]


def summarize(results: list[SeedResult]) -> dict[str, float]:
    names = list(results[0].scores)
    return {n: float(np.mean([r.scores[n] for r in results])) for n in names}
