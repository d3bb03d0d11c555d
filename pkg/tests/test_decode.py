import itertools
from collections import deque

import numpy as np
import pytest
import torch

from cryopick.data import Pick, PickSet, Tomogram, VolumeMeta, default_catalog, normalize
from cryopick.decode import (FLIP_ALL, FLIP_AXES, FLIP_NONE, bench_csv, bench_decode,
                             bench_json, bench_table, ccl_decode, count_components,
                             infer_volume, local_maxima, nms_decode, nms_kernel, plan_tiles,
                             predict_heatmap, round_to_odd)
from cryopick.heatmap import Heatmap, synthesize_targets
from cryopick.picknet import NetConfig, build, forward

CAT = default_catalog()


def brute_force_maxima(vals, k, thr):
    """All-pairs window test written independently of the decoder."""
    h = k // 2
    D, H, W = vals.shape
    out = []
    for z, y, x in itertools.product(range(D), range(H), range(W)):
        v = vals[z, y, x]
        if not v > thr:
            continue
        win = True
        for dz, dy, dx in itertools.product(range(-h, h + 1), repeat=3):
            a, b, c = z + dz, y + dy, x + dx
            if not (0 <= a < D and 0 <= b < H and 0 <= c < W) or (dz, dy, dx) == (0, 0, 0):
                continue
            u = vals[a, b, c]
            if u > v or (u == v and (a, b, c) < (z, y, x)):
                win = False
                break
        if win:
            out.append((z, y, x))
    return sorted(out)


def single_class_hm(values, stride=2, spacing=10.0):
    from cryopick.data import ClassCatalog
    cat = ClassCatalog.from_entries([{"name": "p", "radius_angstrom": 60}])
    return Heatmap(np.asarray(values, dtype=np.float32)[None], stride, cat, spacing)


def test_kernel_rule():
    assert [round_to_odd(x) for x in (2.0, 2.9, 3.0, 4.0, 5.5)] == [3, 3, 3, 5, 5]
    # AF at 10 A, R=2: 3 output voxels -> 5; ribosome 7.5 -> 9
    assert nms_kernel(60, 10, 2) == 5
    assert nms_kernel(150, 10, 2) == 9
    assert nms_kernel(10, 10, 2) == 3


def test_empty_heatmap():
    hm = single_class_hm(np.zeros((8, 8, 8)))
    assert nms_decode(hm) == [] and ccl_decode(hm) == []


def test_single_spike_both_decoders():
    v = np.zeros((12, 12, 12))
    v[5, 5, 5] = 0.9
    for dec in (nms_decode, ccl_decode):
        (d,) = dec(single_class_hm(v), threshold=0.5)
        assert d.center == (11.0, 11.0, 11.0)
        assert d.confidence == pytest.approx(0.9, abs=1e-7)


def test_two_spikes_in_one_window():
    v = np.zeros((12, 12, 12))
    v[5, 5, 5] = 0.9
    v[5, 6, 6] = 0.8
    dets = nms_decode(single_class_hm(v), threshold=0.5)
    assert [d.center for d in dets] == [(11.0, 11.0, 11.0)]


@pytest.mark.parametrize("seed", range(12))
@pytest.mark.parametrize("k", [3, 5, 7])
def test_nms_matches_brute_force(seed, k):
    rng = np.random.default_rng(seed)
    vals = rng.uniform(0, 1, (16, 16, 16))
    if seed % 2:
        vals = np.round(vals * 6) / 6  # plateaus exercise the tie rule
    got = sorted(map(tuple, local_maxima(vals, k, 0.5).tolist()))
    assert got == brute_force_maxima(vals, k, 0.5)


def test_plateau_keeps_smallest_coordinate():
    v = np.zeros((8, 8, 8))
    v[2:4, 2:4, 2:4] = 0.7
    assert local_maxima(v, 3, 0.5).tolist() == [[2, 2, 2]]


@pytest.mark.parametrize("axis", [0, 1, 2])
def test_flip_equivariance(axis):
    rng = np.random.default_rng(axis)
    vals = rng.uniform(0, 1, (12, 14, 10))
    a = local_maxima(vals, 5, 0.6)
    b = local_maxima(np.flip(vals, axis), 5, 0.6)
    a[:, axis] = vals.shape[axis] - 1 - a[:, axis]
    assert sorted(map(tuple, a.tolist())) == sorted(map(tuple, b.tolist()))


def test_ccl_merges_touching_blobs():
    v = np.zeros((16, 16, 16))
    v[4:8, 4:8, 4:8] = 0.8
    v[8:12, 7:11, 7:11] = 0.9  # shares a face with the first block
    assert count_components(v > 0.5) == 1
    assert len(ccl_decode(single_class_hm(v))) == 1
    assert len(nms_decode(single_class_hm(v), global_kernel=3)) >= 1


def flood_fill_count(mask):
    seen = np.zeros_like(mask, dtype=bool)
    n = 0
    offs = [o for o in itertools.product((-1, 0, 1), repeat=3) if o != (0, 0, 0)]
    for start in zip(*np.nonzero(mask)):
        if seen[start]:
            continue
        n += 1
        seen[start] = True
        q = deque([start])
        while q:
            p = q.popleft()
            for o in offs:
                r = tuple(a + b for a, b in zip(p, o))
                if all(0 <= r[i] < mask.shape[i] for i in range(3)) and mask[r] and not seen[r]:
                    seen[r] = True
                    q.append(r)
    return n


@pytest.mark.parametrize("seed", range(10))
def test_component_count_matches_flood_fill(seed):
    mask = np.random.default_rng(seed).random((10, 11, 12)) < 0.12
    assert count_components(mask) == flood_fill_count(mask)


def test_round_trip_recovers_separated_picks():
    rng = np.random.default_rng(0)
    meta = VolumeMeta((64, 64, 64), 15.0)
    picks = []
    while len(picks) < 6:
        c = int(rng.integers(6))
        p = rng.uniform(4, 60, 3)
        if all(np.linalg.norm(p - np.array(q.center)) > 30 for q in picks):
            picks.append(Pick(c, tuple(p)))
    hm = synthesize_targets(PickSet("t", picks), meta, CAT)
    dets = nms_decode(hm, CAT, 0.5)
    assert len(dets) == len(picks)
    for p in picks:
        q = np.floor(np.array(p.center) / 2)
        hit = [d for d in dets if d.class_id == p.class_id
               and np.abs((np.array(d.center) - 1) / 2 - q).max() <= 1]
        assert len(hit) == 1


def test_thresholds_per_class():
    v = np.zeros((2, 8, 8, 8), dtype=np.float32)
    v[:, 4, 4, 4] = 0.6
    from cryopick.data import ClassCatalog
    cat = ClassCatalog.from_entries([{"name": "a", "radius_angstrom": 20},
                                     {"name": "b", "radius_angstrom": 20}])
    dets = nms_decode(Heatmap(v, 2, cat, 10.0), cat, [0.5, 0.7])
    assert [d.class_id for d in dets] == [0]
    with pytest.raises(ValueError):
        nms_decode(Heatmap(v, 2, cat, 10.0), cat, [0.5])


# ---------------------------------------------------------------------------
# tiling


def test_tile_plan_arithmetic():
    plan = plan_tiles((183, 650, 650), 90, 0.25)
    assert plan.starts[0] == (0, 67, 93)
    assert plan.starts[1][-1] == 560
    single = plan_tiles((16, 16, 16), 16)
    assert single.tiles == [(0, 0, 0)]
    with pytest.raises(ValueError):
        plan_tiles((16, 16, 16), 17)
    with pytest.raises(ValueError):
        plan_tiles((16, 16, 16), 8, overlap=1.0)


@pytest.mark.parametrize("dims,window,overlap", [((40, 37, 29), 16, 0.25), ((32, 32, 32), 8, 0.0),
                                                   ((50, 20, 33), (20, 20, 11), 0.5)])
def test_blend_weights_sum_to_one(dims, window, overlap):
    plan = plan_tiles(dims, window, overlap)
    cov = plan.coverage()
    assert cov.min() >= 1  # every voxel covered
    total = np.zeros(dims)
    w = plan.blend_weights()
    for t in plan.tiles:
        total[tuple(slice(s, s + k) for s, k in zip(t, plan.window))] += \
            w[tuple(slice(s, s + k) for s, k in zip(t, plan.window))]
    np.testing.assert_allclose(total, 1.0, atol=1e-6)
    if overlap == 0 and all(d % 8 == 0 for d in dims):
        assert np.all(w == 1.0)


TINY = NetConfig(stem_channels=2, encoder_channels=(4, 4), groups=2)


def test_single_tile_equals_direct_forward():
    model = build(TINY, 0)
    data = np.random.default_rng(0).standard_normal((16, 16, 16)).astype(np.float32)
    tomo = Tomogram(VolumeMeta((16, 16, 16), 10.0), data)
    hm, n = predict_heatmap(model, tomo, window=16, flips=FLIP_NONE)
    assert n == 1
    direct = forward(model, torch.from_numpy(normalize(data))[None, None])[0].numpy()
    np.testing.assert_allclose(hm.values, direct, atol=1e-6)


def test_tta_on_symmetric_volume(monkeypatch):
    # a stride-2 network is not itself flip-equivariant, so use a stub that is:
    # 2^3 block means (blocks mirror onto blocks) followed by a sigmoid
    import cryopick.picknet as picknet

    def stub(model, x, params=None):
        y = torch.sigmoid(torch.nn.functional.avg_pool3d(x, 2))
        return y.expand(-1, model.config.num_classes, -1, -1, -1)

    monkeypatch.setattr(picknet, "forward", stub)
    model = build(TINY, 1)
    a = np.random.default_rng(1).standard_normal((16, 16, 16))
    for ax in range(3):
        a = a + np.flip(a, ax)
    tomo = Tomogram(VolumeMeta((16, 16, 16), 10.0), a)
    h0, _ = predict_heatmap(model, tomo, flips=FLIP_NONE)
    h1, n = predict_heatmap(model, tomo, flips=FLIP_AXES)
    assert n == 4
    np.testing.assert_allclose(h0.values, h1.values, atol=1e-5)


def test_infer_volume_flip_equivariance():
    model = build(TINY, 2)
    rng = np.random.default_rng(2)
    data = rng.standard_normal((24, 24, 24)).astype(np.float32)
    tomo = Tomogram(VolumeMeta((24, 24, 24), 10.0), data)
    flipped = Tomogram(tomo.meta, np.ascontiguousarray(data[::-1]))
    h, _ = predict_heatmap(model, tomo, window=16, overlap=0.5, flips=FLIP_ALL)
    hf, _ = predict_heatmap(model, flipped, window=16, overlap=0.5, flips=FLIP_ALL)
    # tile starts (0, 8) mirror onto themselves, so stitching is symmetric too
    np.testing.assert_allclose(hf.values, h.values[:, ::-1], atol=1e-6)
    thr = float(np.quantile(h.values, 0.99))
    a = infer_volume(model, tomo, CAT, 16, 0.5, FLIP_ALL, thr).detections
    b = infer_volume(model, flipped, CAT, 16, 0.5, FLIP_ALL, thr).detections
    mirror = sorted((d.class_id, 24 - d.center[0], d.center[1], d.center[2]) for d in a)
    assert sorted((d.class_id,) + d.center for d in b) == mirror


def test_predict_pads_non_divisible_volume():
    model = build(TINY, 0)
    tomo = Tomogram(VolumeMeta((18, 20, 22), 10.0), np.zeros((18, 20, 22)))
    hm, _ = predict_heatmap(model, tomo, flips=FLIP_NONE)
    assert hm.values.shape == (6, 9, 10, 11)


# ---------------------------------------------------------------------------
# benchmark


def test_bench_report_complete():
    rows = bench_decode([(6, 8, 16, 16), (6, 10, 20, 20)], CAT, repetitions=2, n_per_class=2)
    assert {(r.decoder, r.size) for r in rows} == {
        (d, s) for d in ("nms", "ccl") for s in ((6, 8, 16, 16), (6, 10, 20, 20))}
    assert all(len(r.times) == 2 for r in rows)
    assert bench_csv(rows).count("\n") == 5
    assert "nms" in bench_table(rows) and '"median"' in bench_json(rows)
