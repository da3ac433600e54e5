import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pcaseg.metrics import (MetricReport, asd, boundary, dsc, evaluate, evaluate_onehot, hd95, jaccard)
from pcaseg.numcore import ShapeError


def brute_boundary(mask):
    h, w = mask.shape
    pts = []
    for r in range(h):
        for c in range(w):
            if not mask[r, c]:
                continue
            for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                rr, cc = r + dr, c + dc
                if not (0 <= rr < h and 0 <= cc < w) or not mask[rr, cc]:
                    pts.append((r, c))
                    break
    return pts


def brute_directed(src, dst):
    return [min(math.dist(a, b) for b in dst) for a in src]


def brute_hd95(p, g):
    bp, bg = brute_boundary(p), brute_boundary(g)
    pooled = sorted(brute_directed(bp, bg) + brute_directed(bg, bp))
    return pooled[math.ceil(0.95 * len(pooled)) - 1]


def brute_asd(p, g):
    bp, bg = brute_boundary(p), brute_boundary(g)
    d1, d2 = brute_directed(bp, bg), brute_directed(bg, bp)
    return 0.5 * (sum(d1) / len(d1) + sum(d2) / len(d2))


def random_pairs(n, seed=0, max_side=16):
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        h, w = rng.integers(2, max_side + 1, size=2)
        density = rng.uniform(0.1, 0.7)
        p = rng.random((h, w)) < density
        g = rng.random((h, w)) < density
        if p.any() and g.any():
            out.append((p, g))
    return out


def test_overlap_examples():
    a = np.zeros((3, 3), bool)
    a[0, 0] = True
    b = a.copy()
    b[0, 1] = True
    assert dsc(a, b) == pytest.approx(2 / 3)
    assert jaccard(a, b) == pytest.approx(1 / 2)
    assert dsc(b, b) == 1.0 and jaccard(b, b) == 1.0
    c = np.zeros((3, 3), bool)
    c[2, 2] = True
    assert dsc(a, c) == 0.0 and jaccard(a, c) == 0.0


def test_empty_conventions():
    empty = np.zeros((3, 4), bool)
    full = np.ones((3, 4), bool)
    assert dsc(empty, empty) == 1.0
    assert jaccard(empty, empty) == 1.0
    assert dsc(empty, full) == 0.0
    assert hd95(empty, empty) == 0.0 and asd(empty, empty) == 0.0
    assert hd95(empty, full) == pytest.approx(5.0)
    assert asd(full, empty) == pytest.approx(5.0)


def test_single_pixels_three_four_five():
    p = np.zeros((5, 6), bool)
    g = np.zeros((5, 6), bool)
    p[0, 0] = True
    g[3, 4] = True
    assert hd95(p, g) == 5.0
    assert asd(p, g) == 5.0


def test_boundary_of_filled_block():
    m = np.zeros((6, 6), bool)
    m[1:5, 1:5] = True
    b = boundary(m)
    assert b.sum() == 12
    assert not b[2:4, 2:4].any()
    # touching the image edge counts as boundary
    assert boundary(np.ones((3, 3), bool)).sum() == 8


def test_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        dsc(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(ShapeError):
        hd95(np.zeros((2, 2)), np.zeros((3, 2)))


def test_hd95_and_asd_match_brute_force_on_random_pairs():
    for p, g in random_pairs(200):
        assert hd95(p, g) == brute_hd95(p, g)
        assert asd(p, g) == pytest.approx(brute_asd(p, g), abs=1e-9)


def test_boundary_matches_brute_force():
    for p, _ in random_pairs(50, seed=1):
        assert sorted(map(tuple, np.argwhere(boundary(p)).tolist())) == brute_boundary(p)


masks = st.integers(2, 12).flatmap(
    lambda h: st.tuples(arrays(bool, (h, h)), arrays(bool, (h, h))))


@settings(max_examples=150, deadline=None)
@given(masks)
def test_symmetry_and_dice_jaccard_identity(pair):
    p, g = pair
    assert dsc(p, g) == dsc(g, p)
    assert jaccard(p, g) == jaccard(g, p)
    assert hd95(p, g) == hd95(g, p)
    assert asd(p, g) == pytest.approx(asd(g, p), abs=1e-12)
    ja = jaccard(p, g)
    assert dsc(p, g) == pytest.approx(2 * ja / (1 + ja), abs=1e-12)
    assert 0.0 <= ja <= dsc(p, g) <= 1.0


@settings(max_examples=100, deadline=None)
@given(arrays(bool, (8, 8)))
def test_identity(m):
    if not m.any():
        return
    assert dsc(m, m) == 1.0 and jaccard(m, m) == 1.0
    assert hd95(m, m) == 0.0 and asd(m, m) == 0.0


def test_distances_positive_when_masks_differ():
    for p, g in random_pairs(50, seed=2):
        if (p != g).any() and (boundary(p) != boundary(g)).any():
            assert asd(p, g) > 0


def test_translation_invariance():
    rng = np.random.default_rng(3)
    for _ in range(30):
        p = np.zeros((20, 20), bool)
        g = np.zeros((20, 20), bool)
        p[4:12, 4:12] = rng.random((8, 8)) < 0.6
        g[4:12, 4:12] = rng.random((8, 8)) < 0.6
        if not (p.any() and g.any()):
            continue
        dy, dx = rng.integers(-3, 4, size=2)
        ps, gs = np.roll(p, (dy, dx), (0, 1)), np.roll(g, (dy, dx), (0, 1))
        for f in (dsc, jaccard, hd95, asd):
            assert f(ps, gs) == pytest.approx(f(p, g), abs=1e-12)


def _three_class_case():
    gt = np.zeros((8, 8), int)
    gt[1:4, 1:4] = 1
    gt[5:7, 2:7] = 2
    pred = np.zeros((8, 8), int)
    pred[1:4, 2:5] = 1
    pred[5:8, 2:6] = 2
    return pred, gt


def test_evaluate_hand_built_three_class_case():
    pred, gt = _three_class_case()
    report = evaluate(pred, gt, num_classes=3)
    assert set(report.per_class) == {1, 2}
    for c in (1, 2):
        p, g = pred == c, gt == c
        inter = (p & g).sum()
        s = report.per_class[c]
        assert s.dsc == pytest.approx(2 * inter / (p.sum() + g.sum()))
        assert s.ja == pytest.approx(inter / (p | g).sum())
        assert s.hd95 == brute_hd95(p, g)
        assert s.asd == pytest.approx(brute_asd(p, g), abs=1e-12)
    m = report.mean()
    assert m.dsc == pytest.approx((report.per_class[1].dsc + report.per_class[2].dsc) / 2)


def test_evaluate_perfect_and_missing_class():
    _, gt = _three_class_case()
    perfect = evaluate(gt, gt, 3).mean()
    assert (perfect.dsc, perfect.ja, perfect.hd95, perfect.asd) == (1.0, 1.0, 0.0, 0.0)
    pred = np.where(gt == 2, 0, gt)
    report = evaluate(pred, gt, 3)
    assert report.per_class[2].dsc == 0.0
    assert report.per_class[2].hd95 == pytest.approx(math.hypot(8, 8))
    assert report.mean_dsc == pytest.approx(0.5)


def test_evaluate_averages_per_image():
    pred, gt = _three_class_case()
    stack = evaluate(np.stack([pred, gt]), np.stack([gt, gt]), 3)
    single = evaluate(pred, gt, 3)
    assert stack.per_class[1].dsc == pytest.approx((single.per_class[1].dsc + 1.0) / 2)


def test_evaluate_onehot_class_count_mismatch():
    a = np.zeros((3, 4, 4))
    b = np.zeros((4, 4, 4))
    with pytest.raises(ShapeError):
        evaluate_onehot(a, b)


def test_evaluate_rejects_out_of_range_labels():
    with pytest.raises(ShapeError):
        evaluate(np.full((2, 2), 3), np.zeros((2, 2), int), 3)


def test_report_csv_round_trip():
    pred, gt = _three_class_case()
    report = evaluate(pred, gt, 3)
    text = report.to_csv()
    lines = text.splitlines()
    assert lines[0] == "class,dsc,ja,hd95,asd"
    assert lines[-1].startswith("mean,")
    back = MetricReport.from_csv(text)
    for c in (1, 2):
        assert back.per_class[c].dsc == pytest.approx(report.per_class[c].dsc, rel=1e-8)
        assert back.per_class[c].asd == pytest.approx(report.per_class[c].asd, rel=1e-8)
