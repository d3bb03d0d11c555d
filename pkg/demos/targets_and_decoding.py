"""Heatmap targets, max-pool NMS decoding, and the connected-component baseline.

Run:  python demos/targets_and_decoding.py
"""
import time

import numpy as np

from cryopick.data import Pick, PickSet, VolumeMeta, default_catalog
from cryopick.decode import ccl_decode, nms_decode, nms_kernel, random_blob_heatmap
from cryopick.heatmap import LossConfig, reweighted_mse, synthesize_targets, target_sigma

catalog = default_catalog()
meta = VolumeMeta((96, 96, 96), 10.0)

print("class                 sigma(out vox)  NMS kernel")
for spec in catalog:
    print(f"{spec.name:20s}  {target_sigma(spec.radius_angstrom, 10.0, 2):8.2f}"
          f"  {nms_kernel(spec.radius_angstrom, 10.0, 2):6d}")

# Two apo-ferritins close together and one ribosome.  Targets live on the
# stride-2 output grid; peaks sit at floor(center / 2).
picks = PickSet("demo", [Pick(0, (20.3, 20.0, 20.0)), Pick(0, (20.3, 20.0, 34.0)),
                         Pick(3, (60.0, 50.0, 40.0))])
hm = synthesize_targets(picks, meta, catalog)
print("\nheatmap", hm.values.shape, "peak values", hm.values.max(axis=(1, 2, 3)).round(3))

dets = nms_decode(hm, catalog, threshold=0.5)
print("decoded (input voxel coords = idx * 2 + 1):")
for d in dets:
    print(f"  {catalog[d.class_id].name:14s} {d.center}  conf {d.confidence:.2f}")

# The loss weighs foreground and background separately, background times lambda.
pred = np.clip(hm.values + 0.05, 0, 1)
print(f"\nloss of a slightly biased prediction: {float(reweighted_mse(pred, hm.values)):.5f}"
      f" (lambda 0: {float(reweighted_mse(pred, hm.values, LossConfig(lam=0.0))):.5f})")

# Decoder speed on a tomogram-sized output grid (183 x 650 x 650 input at stride 2).
big = random_blob_heatmap((6, 92, 325, 325), catalog, 100, seed=0)
for name, fn in (("nms", nms_decode), ("ccl", ccl_decode)):
    t0 = time.perf_counter()
    n = len(fn(big, catalog, 0.5))
    print(f"{name}: {n} detections in {time.perf_counter() - t0:.2f} s")
