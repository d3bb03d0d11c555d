"""Scoring detections against ground truth: tau cut-offs, sweeps, renderings.

Run:  python demos/evaluation.py
"""
import numpy as np

from cryopick.data import Pick, PickSet, default_catalog
from cryopick.decode import Detection
from cryopick.evaluate import evaluate, report_table, sweep_detections

catalog = default_catalog()
rng = np.random.default_rng(0)

truth = PickSet("demo", [Pick(int(c), tuple(rng.uniform(10, 90, 3)))
                         for c in rng.integers(0, 6, 30)])
# A detector that finds 80% of particles with ~2 voxel jitter, plus some junk.
dets = [Detection(p.class_id, tuple(np.add(p.center, rng.normal(0, 2, 3))),
                  float(rng.uniform(0.4, 1.0)))
        for p in truth.picks if rng.random() < 0.8]
dets += [Detection(int(rng.integers(6)), tuple(rng.uniform(0, 100, 3)),
                   float(rng.uniform(0.1, 0.6))) for _ in range(10)]

# A prediction matches when it lies within tau * radius of an unmatched truth
# of the same class; larger tau is more lenient, so F1@0.75 >= F1@0.5.
reports = evaluate(dets, truth, catalog, spacing=10.0, taus=(0.5, 0.75))
print(report_table(list(reports.values())))

grid = [round(t, 2) for t in np.arange(0.1, 1.0, 0.1)]
sweep = sweep_detections([dets], [truth], catalog, 10.0, grid)
print("\nbest threshold per class:", sweep.best)
