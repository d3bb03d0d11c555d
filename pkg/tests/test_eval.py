import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cryopick.data import ClassCatalog, Pick, PickSet, default_catalog
from cryopick.decode import Detection
from cryopick.evaluate import (ClassScore, MatchConfig, MatchReport, evaluate, f1_scores,
                               greedy_match, match, merge_reports, report_csv, report_json,
                               report_table, sweep_detections)

CAT = default_catalog()
RIBO = CAT.by_name("ribosome").class_id  # 15 voxels at 10 A


def det(c, p, conf=0.9):
    return Detection(c, tuple(float(v) for v in p), conf)


def truth(*picks):
    return PickSet("t", [Pick(c, tuple(float(v) for v in p)) for c, p in picks])


def score_of(report, name):
    return next(c for c in report.classes if c.name == name)


def test_exact_match_and_boundary():
    r = match([det(RIBO, (50, 50, 50))], truth((RIBO, (50, 50, 50))), CAT, 10.0)
    s = score_of(r, "ribosome")
    assert (s.tp, s.fp, s.fn, s.f1) == (1, 0, 0, 1.0)
    r = match([det(RIBO, (50, 50, 59))], truth((RIBO, (50, 50, 50))), CAT, 10.0)  # 0.6 radius
    s = score_of(r, "ribosome")
    assert (s.tp, s.fp, s.fn, s.f1) == (0, 1, 1, 0.0)
    # inclusive cutoff at exactly tau * radius
    r = match([det(RIBO, (50, 50, 57.5))], truth((RIBO, (50, 50, 50))), CAT, 10.0)
    assert score_of(r, "ribosome").tp == 1


def test_one_to_one():
    t = truth((RIBO, (20, 20, 20)), (RIBO, (60, 60, 60)), (RIBO, (20, 60, 20)))
    p = [det(RIBO, (20, 20, 21)), det(RIBO, (20, 21, 20))]
    s = score_of(match(p, t, CAT, 10.0), "ribosome")
    assert (s.tp, s.fp, s.fn) == (1, 1, 2)


def test_f1_arithmetic_and_absent():
    assert ClassScore("a", 1, 0, 0).f1 == 1.0
    s = ClassScore("a", 1, 1, 1)
    assert (s.precision, s.recall, s.f1) == (0.5, 0.5, 0.5)
    z = ClassScore("a", 0, 0, 0)
    assert z.f1 == 0.0 and z.absent
    rep = MatchReport(0.5, [ClassScore("a", 1, 0, 0), z])
    assert rep.macro_f1 == 1.0  # absent classes are left out of the macro average
    assert f1_scores(rep)["micro"] == 1.0


def test_class_aware():
    t = truth((RIBO, (50, 50, 50)))
    r = match([det(0, (50, 50, 50))], t, CAT, 10.0)
    assert score_of(r, "ribosome").fn == 1 and score_of(r, "apo-ferritin").fp == 1
    agn = match([det(0, (50, 50, 50))], t, CAT, 10.0, MatchConfig(0.5, class_aware=False))
    assert agn.classes[0].tp == 1
    with pytest.raises(ValueError):
        match([det(9, (1, 1, 1))], t, CAT, 10.0)


def optimal_tp(pred, tru, cutoff):
    """Maximum one-to-one matching size by exhaustive enumeration."""
    if not len(pred) or not len(tru):
        return 0
    ok = np.linalg.norm(pred[:, None] - tru[None], axis=2) <= cutoff
    small, big, okm = (pred, tru, ok) if len(pred) <= len(tru) else (tru, pred, ok.T)
    best = 0
    for perm in itertools.permutations(range(len(big)), len(small)):
        best = max(best, sum(okm[i, j] for i, j in enumerate(perm)))
        if best == len(small):
            break
    return best


def _separated(rng, n, sep, box):
    pts = []
    while len(pts) < n:
        p = rng.uniform(0, box, 3)
        if all(np.linalg.norm(p - q) >= sep for q in pts):
            pts.append(p)
    return np.array(pts).reshape(-1, 3)


def test_greedy_equals_exhaustive_on_separated_instances():
    # truths at least one radius sum apart (as generated) and cutoff of half a radius
    rng = np.random.default_rng(0)
    for _ in range(1000):
        r = 4.0
        tru = _separated(rng, int(rng.integers(0, 9)), 2 * r, 40.0)
        pred = rng.uniform(0, 40.0, (int(rng.integers(0, 9)), 3))
        near = rng.random(len(pred)) < 0.6
        if len(tru):
            pick = tru[rng.integers(len(tru), size=len(pred))]
            pred[near] = pick[near] + rng.normal(0, 1.2, (near.sum(), 3))
        assert len(greedy_match(pred, tru, 0.5 * r)) == optimal_tp(pred, tru, 0.5 * r)


def test_greedy_vs_exhaustive_unconstrained_rate():
    # without the separation constraint greedy can lose a match; measure how often
    rng = np.random.default_rng(1)
    worse = 0
    for _ in range(300):
        tru = rng.uniform(0, 10, (int(rng.integers(1, 9)), 3))
        pred = rng.uniform(0, 10, (int(rng.integers(1, 9)), 3))
        g, o = len(greedy_match(pred, tru, 3.0)), optimal_tp(pred, tru, 3.0)
        assert g <= o
        worse += g < o
    print(f"greedy below optimum on {worse}/300 dense unconstrained instances")
    assert worse < 300 * 0.5


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 100_000))
def test_conservation_tau_monotonicity_permutation(seed):
    rng = np.random.default_rng(seed)
    t = PickSet("t", [Pick(int(rng.integers(6)), tuple(rng.uniform(0, 60, 3)))
                      for _ in range(rng.integers(0, 12))])
    preds = [det(int(rng.integers(6)), rng.uniform(0, 60, 3)) for _ in range(rng.integers(0, 12))]
    preds += [det(p.class_id, np.array(p.center) + rng.normal(0, 2, 3)) for p in t.picks
              if rng.random() < 0.7]
    reps = evaluate(preds, t, CAT, 10.0)
    for rep in reps.values():
        for spec, c in zip(CAT, rep.classes):
            assert c.tp + c.fn == len(t.centers(spec.class_id))
            assert c.tp + c.fp == sum(d.class_id == spec.class_id for d in preds)
    for a, b in zip(reps[0.5].classes, reps[0.75].classes):
        assert b.f1 >= a.f1
    assert reps[0.75].macro_f1 >= reps[0.5].macro_f1
    shuffled = [preds[i] for i in rng.permutation(len(preds))]
    again = match(shuffled, t, CAT, 10.0)
    assert [(c.tp, c.fp, c.fn) for c in again.classes] == \
        [(c.tp, c.fp, c.fn) for c in reps[0.5].classes]


def test_self_match_is_perfect():
    rng = np.random.default_rng(3)
    t = PickSet("t", [Pick(int(rng.integers(6)), tuple(rng.uniform(0, 60, 3))) for _ in range(20)])
    preds = [det(p.class_id, p.center) for p in t.picks]
    for rep in evaluate(preds, t, CAT, 10.0).values():
        assert all(c.f1 == 1.0 for c in rep.classes if not c.absent)


def test_merge_sums_counts():
    a = MatchReport(0.5, [ClassScore("x", 1, 2, 3, 1.0)])
    b = MatchReport(0.5, [ClassScore("x", 3, 0, 1, 2.0)])
    m = merge_reports([a, b])
    c = m.classes[0]
    assert (c.tp, c.fp, c.fn) == (4, 2, 4)
    assert c.mean_distance == pytest.approx((1.0 + 6.0) / 4)


def test_sweep_step_behaviour_and_ties():
    t = [truth((RIBO, (50, 50, 50)), (RIBO, (20, 20, 20)))]
    d = [[det(RIBO, (50, 50, 50), 0.9), det(RIBO, (20, 20, 20), 0.9)]]
    grid = [0.1, 0.3, 0.5, 0.7, 0.89, 0.9, 0.95]
    res = sweep_detections(d, t, CAT, 10.0, grid)
    assert len(res.curves["ribosome"]) == len(grid)
    assert res.curves["ribosome"] == [1.0] * 5 + [0.0, 0.0]
    assert res.best["ribosome"] == 0.1  # ties go to the lowest threshold
    with pytest.raises(ValueError):
        sweep_detections(d, t, CAT, 10.0, [0.0, 0.5])


def test_report_renderings():
    rep = evaluate([det(RIBO, (50, 50, 50))], truth((RIBO, (50, 50, 50))), CAT, 10.0)
    reps = list(rep.values())
    table = report_table(reps)
    assert "F1@0.5" in table and "F1@0.75" in table and "absent" in table
    rows = report_csv(reps).strip().splitlines()
    assert len(rows) == 1 + 2 * (6 + 2)
    parsed = json.loads(report_json(reps))  # strict JSON: no NaN tokens
    assert parsed[0]["macro_f1"] == 1.0
    assert "NaN" not in report_json(reps)


def test_custom_catalog():
    cat = ClassCatalog.from_entries([{"name": "a", "radius_angstrom": 100}])
    r = match([det(0, (0, 0, 4.9))], truth((0, (0, 0, 0))), cat, 10.0)
    assert r.classes[0].tp == 1 and math.isclose(r.macro_f1, 1.0)
