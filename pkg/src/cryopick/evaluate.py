"""Radius-threshold matching and F1 reporting."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .data import ClassCatalog, PickSet


@dataclass(frozen=True)
class MatchConfig:
    tau: float = 0.5
    class_aware: bool = True

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")


@dataclass
class ClassScore:
    name: str
    tp: int
    fp: int
    fn: int
    mean_distance: float = float("nan")

    @property
    def absent(self) -> bool:
        return self.tp + self.fp + self.fn == 0

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0


@dataclass
class MatchReport:
    tau: float
    classes: list[ClassScore] = field(default_factory=list)

    @property
    def macro_f1(self) -> float:
        present = [c.f1 for c in self.classes if not c.absent]
        return float(np.mean(present)) if present else 0.0

    @property
    def micro_f1(self) -> float:
        tp = sum(c.tp for c in self.classes)
        fp = sum(c.fp for c in self.classes)
        fn = sum(c.fn for c in self.classes)
        return 2 * tp / (2 * tp + fp + fn) if tp else 0.0

    def to_dict(self) -> dict:
        return {
            "tau": self.tau, "macro_f1": self.macro_f1, "micro_f1": self.micro_f1,
            "classes": [dict(asdict(c), precision=c.precision, recall=c.recall, f1=c.f1,
                             absent=c.absent,
                             mean_distance=None if np.isnan(c.mean_distance) else c.mean_distance)
                        for c in self.classes],
        }


def merge_reports(reports: Sequence[MatchReport]) -> MatchReport:
    """Sum counts over volumes (e.g. a test set) into one report."""
    if not reports:
        raise ValueError("nothing to merge")
    out = MatchReport(reports[0].tau)
    for i, c in enumerate(reports[0].classes):
        rows = [r.classes[i] for r in reports]
        tp = sum(r.tp for r in rows)
        dists = [r.mean_distance * r.tp for r in rows if r.tp]
        out.classes.append(ClassScore(c.name, tp, sum(r.fp for r in rows),
                                      sum(r.fn for r in rows),
                                      sum(dists) / tp if tp else float("nan")))
    return out


def _key(point) -> tuple:
    return tuple(float(v) for v in point)


def greedy_match(pred: np.ndarray, truth: np.ndarray, cutoff) -> list[tuple[int, int, float]]:
    """One-to-one matching of candidate pairs in ascending distance.

    ``cutoff`` is a scalar or one value per truth. Equal distances are
    ordered by pred coordinates, then truth coordinates, so the result does
    not depend on input order.
    """
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    truth = np.asarray(truth, dtype=np.float64).reshape(-1, 3)
    if not len(pred) or not len(truth):
        return []
    d = np.linalg.norm(pred[:, None, :] - truth[None, :, :], axis=2)
    cut = np.broadcast_to(np.asarray(cutoff, dtype=np.float64), (len(truth),))
    pi, ti = np.nonzero(d <= cut[None, :])
    order = sorted(range(len(pi)), key=lambda n: (d[pi[n], ti[n]], _key(pred[pi[n]]),
                                                   _key(truth[ti[n]])))
    used_p, used_t, pairs = set(), set(), []
    for n in order:
        p, t = int(pi[n]), int(ti[n])
        if p in used_p or t in used_t:
            continue
        used_p.add(p)
        used_t.add(t)
        pairs.append((p, t, float(d[p, t])))
    return pairs


def match(preds, truth: PickSet, catalog: ClassCatalog, spacing: float,
          cfg: MatchConfig = MatchConfig()) -> MatchReport:
    """Count TP/FP/FN per class; a pred matches a truth within ``tau * radius``."""
    for item in list(preds) + list(truth.picks):
        if not 0 <= item.class_id < catalog.C:
            raise ValueError(f"class id {item.class_id} not in catalog")
    report = MatchReport(cfg.tau)
    if cfg.class_aware:
        for spec in catalog:
            p = np.array([d.center for d in preds if d.class_id == spec.class_id]).reshape(-1, 3)
            t = truth.centers(spec.class_id)
            pairs = greedy_match(p, t, cfg.tau * spec.radius_voxels(spacing))
            report.classes.append(_score(spec.name, pairs, len(p), len(t)))
        return report
    # class-agnostic: one pool, cutoff from each truth's own class radius
    p = np.array([d.center for d in preds]).reshape(-1, 3)
    t = truth.centers()
    cut = [cfg.tau * catalog[q.class_id].radius_voxels(spacing) for q in truth.picks]
    report.classes.append(_score("all", greedy_match(p, t, cut), len(p), len(t)))
    return report


def _score(name, pairs, n_pred, n_truth) -> ClassScore:
    tp = len(pairs)
    mean_d = float(np.mean([d for _, _, d in pairs])) if pairs else float("nan")
    return ClassScore(name, tp, n_pred - tp, n_truth - tp, mean_d)


def f1_scores(report: MatchReport) -> dict:
    out = {c.name: c.f1 for c in report.classes}
    out["macro"] = report.macro_f1
    out["micro"] = report.micro_f1
    return out


def evaluate(preds, truth: PickSet, catalog: ClassCatalog, spacing: float,
             taus: Sequence[float] = (0.5, 0.75)) -> dict[float, MatchReport]:
    return {t: match(preds, truth, catalog, spacing, MatchConfig(t)) for t in taus}


# ---------------------------------------------------------------------------
# threshold sweeps


@dataclass
class SweepResult:
    grid: list[float]
    curves: dict[str, list[float]]  # per class name and "macro"
    best: dict[str, float]


def _argmax_lowest(values: Sequence[float], grid: Sequence[float]) -> float:
    best = max(values)
    return grid[next(i for i, v in enumerate(values) if v == best)]


def sweep_detections(detections: Sequence[Sequence], truths: Sequence[PickSet],
                     catalog: ClassCatalog, spacing: float, grid: Sequence[float],
                     tau: float = 0.5) -> SweepResult:
    """F1 curves from detections decoded at a low threshold.

    Window maxima do not depend on the threshold, so raising it is the same
    as dropping detections whose confidence does not exceed it.
    """
    grid = [float(g) for g in grid]
    if any(not 0 < g < 1 for g in grid):
        raise ValueError("thresholds must lie in (0, 1)")
    curves: dict[str, list[float]] = {c.name: [] for c in catalog}
    curves["macro"] = []
    for g in grid:
        reports = [match([d for d in dets if d.confidence > g], truth, catalog, spacing,
                         MatchConfig(tau)) for dets, truth in zip(detections, truths)]
        merged = merge_reports(reports)
        for c in merged.classes:
            curves[c.name].append(c.f1)
        curves["macro"].append(merged.macro_f1)
    best = {k: _argmax_lowest(v, grid) for k, v in curves.items()}
    return SweepResult(grid, curves, best)


def sweep_thresholds(model, volumes, truths: Sequence[PickSet], catalog: ClassCatalog,
                     grid: Sequence[float], tau: float = 0.5, **infer_kw) -> SweepResult:
    """Decode each volume once at the lowest grid value, then sweep."""
    from .decode import infer_volume

    lo = min(grid)
    dets = [infer_volume(model, v, catalog, thresholds=lo * 0.999, **infer_kw).detections
            for v in volumes]
    return sweep_detections(dets, truths, catalog, volumes[0].meta.spacing, grid, tau)


# ---------------------------------------------------------------------------
# rendering


def report_table(reports: Sequence[MatchReport]) -> str:
    """Classes as columns, one F1 row per tau, a macro column at the end."""
    names = [c.name for c in reports[0].classes]
    short = [n[:10] for n in names]
    head = f"{'':8s}" + "".join(f"{s:>11s}" for s in short) + f"{'macro':>9s}{'micro':>9s}"
    lines = [head]
    for r in reports:
        cells = "".join(f"{('  absent' if c.absent else f'{c.f1:.3f}'):>11s}" for c in r.classes)
        lines.append(f"F1@{r.tau:<5g}" + cells + f"{r.macro_f1:9.3f}{r.micro_f1:9.3f}")
    return "\n".join(lines)


def report_csv(reports: Sequence[MatchReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["tau", "class", "tp", "fp", "fn", "precision", "recall", "f1", "absent"])
    for r in reports:
        for c in r.classes:
            w.writerow([r.tau, c.name, c.tp, c.fp, c.fn, f"{c.precision:.6f}",
                        f"{c.recall:.6f}", f"{c.f1:.6f}", c.absent])
        w.writerow([r.tau, "macro", "", "", "", "", "", f"{r.macro_f1:.6f}", ""])
        w.writerow([r.tau, "micro", "", "", "", "", "", f"{r.micro_f1:.6f}", ""])
    return buf.getvalue()


def report_json(reports: Sequence[MatchReport]) -> str:
    return json.dumps([r.to_dict() for r in reports], indent=2)
