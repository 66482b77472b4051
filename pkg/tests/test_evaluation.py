import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from simtransfer.errors import EmptySubsetError, InvariantError
from simtransfer.evaluation import (
    ClassAP,
    EvalConfig,
    Subset,
    average_precision,
    class_ap,
    evaluate,
    iou,
    iou_matrix,
    mean_ap,
    nms,
    report_rows,
)
from simtransfer.model import Box, Detection, GroundTruth, GroundTruthSet

from conftest import make_registry
from oracles import ap_threshold_sweep, greedy_flags


def test_iou_self():
    b = Box(3, 4, 5, 6)
    assert iou(b, b) == 1.0


def test_iou_disjoint():
    assert iou(Box(0, 0, 1, 1), Box(5, 5, 1, 1)) == 0.0


def test_iou_half_shift():
    assert iou(Box(0.5, 0.5, 1, 1), Box(1.0, 0.5, 1, 1)) == pytest.approx(1 / 3, abs=1e-15)


def test_iou_matrix_matches_scalar(rng):
    A = np.column_stack([rng.uniform(0, 10, (6, 2)), rng.uniform(1, 5, (6, 2))])
    B = np.column_stack([rng.uniform(0, 10, (4, 2)), rng.uniform(1, 5, (4, 2))])
    M = iou_matrix(A, B)
    for i in range(6):
        for j in range(4):
            assert M[i, j] == pytest.approx(iou(Box(*A[i]), Box(*B[j])), abs=1e-14)


def test_config_ranges():
    with pytest.raises(InvariantError):
        EvalConfig(iou_threshold=1.0)
    with pytest.raises(InvariantError):
        EvalConfig(ap_mode="11-point")


# -- NMS --------------------------------------------------------------------------


def _det(score, box, img="a", cat=0):
    return Detection(img, cat, score, box)


def test_nms_single():
    d = _det(0.5, Box(0, 0, 1, 1))
    assert nms([d]) == [d]


def test_nms_identical_boxes():
    a, b = _det(0.8, Box(0, 0, 2, 2)), _det(0.9, Box(0, 0, 2, 2))
    assert nms([a, b]) == [b]


def test_nms_chain():
    # A-B and B-C overlap with IoU 0.5; A and C are disjoint
    A = _det(0.9, Box.from_corners(0, 0, 3, 1))
    B = _det(0.8, Box.from_corners(1, 0, 4, 1))
    C = _det(0.7, Box.from_corners(3.5, 0, 6.5, 1))
    assert iou(A.box, B.box) == pytest.approx(0.5)
    assert iou(A.box, C.box) == 0.0
    assert nms([A, B, C], 0.3) == [A, C]


def test_nms_groups_by_image_and_category():
    box = Box(0, 0, 2, 2)
    dets = [_det(0.9, box), _det(0.8, box, cat=1), _det(0.7, box, img="b")]
    assert nms(dets) == dets


def test_nms_tie_keeps_first_listed():
    a, b = _det(0.5, Box(0, 0, 2, 2)), _det(0.5, Box(0.1, 0, 2, 2))
    assert nms([a, b]) == [a]
    assert nms([b, a]) == [b]


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_nms_order_independent_without_ties(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 12))
    dets = [_det(float(s), Box(*rng.uniform(0, 10, 2), *rng.uniform(1, 4, 2)))
            for s in rng.permutation(n) / n]
    kept = set(nms(dets))
    assert set(nms(list(reversed(dets)))) == kept
    for a in kept:
        for b in kept:
            if a is not b:
                assert iou(a.box, b.box) <= 0.3


# -- AP -----------------------------------------------------------------------------


def _gts(boxes_by_image, cat=0):
    return GroundTruthSet({k: [GroundTruth(cat, b) for b in v] for k, v in boxes_by_image.items()})


def test_ap_single_hit():
    g = Box(5, 5, 4, 4)
    assert average_precision([_det(0.9, g)], _gts({"a": [g]}), 0) == 1.0


def test_ap_hit_then_spurious():
    g = Box(5, 5, 4, 4)
    dets = [_det(0.9, g), _det(0.5, Box(50, 50, 4, 4))]
    assert average_precision(dets, _gts({"a": [g]}), 0) == 1.0


def test_ap_tp_fp_tp_fixture():
    g1, g2 = Box(5, 5, 4, 4), Box(20, 20, 4, 4)
    dets = [_det(0.9, g1), _det(0.8, Box(50, 50, 4, 4)), _det(0.7, g2)]
    assert average_precision(dets, _gts({"a": [g1, g2]}), 0) == pytest.approx(0.8333333, abs=1e-6)


def test_duplicate_hit_is_false_positive():
    g = Box(5, 5, 4, 4)
    res = class_ap([_det(0.9, g), _det(0.8, g)], _gts({"a": [g]}), 0)
    assert res.ap == 1.0 and res.n_det == 2
    res = class_ap([_det(0.8, g), _det(0.9, Box(40, 40, 2, 2)), _det(0.95, g)], _gts({"a": [g]}), 0)
    assert res.ap == 1.0


def test_highest_iou_unmatched_gt_is_taken():
    # the detection overlaps both objects; it takes the closer one, leaving the other for the next detection
    near, far = Box(0, 0, 10, 10), Box(2, 0, 10, 10)
    dets = [_det(0.9, Box(0.5, 0, 10, 10)), _det(0.8, Box(2, 0, 10, 10))]
    assert average_precision(dets, _gts({"a": [far, near]}), 0) == 1.0


def test_ap_no_ground_truth():
    res = class_ap([_det(0.9, Box(1, 1, 1, 1))], _gts({}), 0)
    assert res.ap == 0.0 and not res.empty
    res = class_ap([], _gts({}), 0)
    assert res.ap == 0.0 and res.empty


def test_other_categories_ignored():
    g = Box(5, 5, 4, 4)
    dets = [_det(0.99, Box(40, 40, 2, 2), cat=1), _det(0.9, g)]
    assert average_precision(dets, _gts({"a": [g]}), 0) == 1.0


def _random_instance(rng):
    n_img = int(rng.integers(1, 4))
    gts, boxes = {}, []
    for i in range(n_img):
        k = int(rng.integers(0, 4))
        gts[f"i{i}"] = [Box(*rng.uniform(0, 20, 2), *rng.uniform(2, 6, 2)) for _ in range(k)]
    n_det = int(rng.integers(0, 51))
    dets = []
    for _ in range(n_det):
        img = f"i{int(rng.integers(0, n_img))}"
        if gts[img] and rng.random() < 0.6:
            g = gts[img][int(rng.integers(0, len(gts[img])))]
            b = Box(g.x + rng.normal(0, 0.5), g.y + rng.normal(0, 0.5), g.w, g.h)
        else:
            b = Box(*rng.uniform(0, 20, 2), *rng.uniform(2, 6, 2))
        dets.append(_det(float(np.round(rng.random(), 2)), b, img))
    return dets, _gts(gts)


def _oracle_ap(dets, gts, thr=0.5):
    flags = greedy_flags(
        [d.image_id for d in dets], [d.score for d in dets], [d.box for d in dets],
        {k: list(gts.for_category(0).get(k, [])) for k in gts}, thr, iou,
    )
    n_gt = sum(len(v) for v in gts.for_category(0).values())
    return ap_threshold_sweep([d.score for d in dets], flags, n_gt)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_ap_matches_sweep_oracle(seed):
    dets, gts = _random_instance(np.random.default_rng(seed))
    assert average_precision(dets, gts, 0) == pytest.approx(_oracle_ap(dets, gts), abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_ap_monotone_transform_invariant(seed):
    rng = np.random.default_rng(seed)
    dets, gts = _random_instance(rng)
    a, b = rng.uniform(0.1, 5), rng.uniform(-3, 3)
    moved = [Detection(d.image_id, d.category, float(np.exp(a * d.score + b)), d.box) for d in dets]
    assert average_precision(moved, gts, 0) == pytest.approx(average_precision(dets, gts, 0), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_lowest_false_positive_never_helps(seed):
    rng = np.random.default_rng(seed)
    dets, gts = _random_instance(rng)
    base = average_precision(dets, gts, 0)
    low = min([d.score for d in dets], default=0.0) - 1.0
    worse = dets + [_det(low, Box(500, 500, 1, 1), "i0")]
    assert 0.0 <= average_precision(worse, gts, 0) <= base <= 1.0


# -- mAP and reports -----------------------------------------------------------------


def test_mean_ap_examples():
    reg = make_registry("SSW")
    assert mean_ap({0: 1.0, 1: 0.5}, reg, Subset.STRONG) == 0.75
    assert mean_ap({2: 0.3}, reg, "weak") == 0.3
    with pytest.raises(EmptySubsetError):
        mean_ap({0: 1.0}, reg, Subset.WEAK)


def test_mean_ap_skips_empty_categories(caplog):
    reg = make_registry("SSW")
    aps = {0: ClassAP(0, 0.5, 2, 3), 1: ClassAP(1, 0.0, 0, 0)}
    with caplog.at_level(logging.INFO):
        assert mean_ap(aps, reg, Subset.STRONG) == 0.5
    assert "skipped" in caplog.text


def test_evaluate_and_report():
    reg = make_registry("SW")
    g = Box(5, 5, 4, 4)
    gts = GroundTruthSet({"a": [GroundTruth(0, g)], "b": [GroundTruth(1, g)]})
    dets = [Detection("a", 0, 0.9, g), Detection("b", 1, 0.3, Box(30, 30, 1, 1))]
    rep = evaluate(dets, gts, reg)
    assert (rep.map_strong, rep.map_weak, rep.map_all) == (1.0, 0.0, 0.5)
    rows = report_rows(rep, reg)
    assert rows[0] == ["category_id", "subset", "AP"]
    assert rows[1] == ["0", "strong", "1"]
    assert rows[-3:] == [["mAP_strong", "strong", "1"], ["mAP_weak", "weak", "0"], ["mAP_all", "all", "0.5"]]
