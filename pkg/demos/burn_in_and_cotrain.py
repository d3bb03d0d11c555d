"""Supervised burn-in followed by teacher/student co-training, at toy scale.

A few hundred steps on a handful of small synthetic volumes; enough to watch
the losses move and to see the teacher trail the student.  The full desk
benchmark lives in ``cryopick.benchmark`` (and takes about 20 minutes).

Run:  python demos/burn_in_and_cotrain.py
"""
from cryopick.data import SynthConfig, default_catalog, synthesize_tomogram
from cryopick.evaluate import MatchConfig, match, merge_reports
from cryopick.decode import infer_volume
from cryopick.picknet import NetConfig
from cryopick.train import SSLConfig, TrainConfig, Volume, burn_in, cotrain, new_checkpoint

catalog = default_catalog()
counts = {c.name: 2 for c in catalog}


def make(seed):
    return synthesize_tomogram(SynthConfig((48, 48, 48), 15.0, counts, noise_sd=0.5, seed=seed),
                               catalog, f"v{seed}")


labeled = [Volume.prepare(*make(s), catalog, 2) for s in (0, 1)]
unlabeled = [Volume.prepare(make(s)[0], None, catalog, 2) for s in range(10, 16)]
test = [make(s) for s in (100, 101)]

net = NetConfig(stem_channels=8, encoder_channels=(16, 32, 32), groups=4, head_bias=-2.0)


def f1(model):
    reps = [match(infer_volume(model, t, catalog).detections, truth, catalog, t.meta.spacing,
                  MatchConfig(0.5)) for t, truth in test]
    return merge_reports(reps).macro_f1


burn = burn_in(labeled, TrainConfig(crop_size=32, steps=300, lr=3e-3, schedule="cosine",
                                    log_every=50), new_checkpoint(net, catalog, seed=0))
for row in burn.metrics:
    print(f"burn-in step {row['step']:4d}  loss {row['supervised']:.4f}")
print(f"burn-in macro F1@0.5 {f1(burn.checkpoint.model()):.3f}")

ssl = SSLConfig(TrainConfig(crop_size=32, steps=100, lr=3e-4, log_every=25), alpha=0.02)
co = cotrain(labeled, unlabeled, burn.checkpoint, ssl)
for row in co.metrics:
    print(f"cotrain step {row['step']:4d}  sup {row['supervised']:.4f}  "
          f"cons {row['consistency']:.4f}  |teacher - student| {row['ema_distance']:.4f}")
print(f"teacher macro F1@0.5 {f1(co.checkpoint.model('teacher')):.3f}")
