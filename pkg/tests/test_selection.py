import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from geoxplain.attribution import AttributionMap, SaliencyMask, threshold_top_p
from geoxplain.errors import DimensionMismatch, UnsortedInput
from geoxplain.ingest import ImageTensor
from geoxplain.segmentation import SegmentMask, SegmentSet
from geoxplain.selection import (
    CropBox,
    ScoredSegment,
    SelectionConfig,
    dedup_containment_iou,
    filter_by_min_score,
    geometric_mean,
    run_selection,
    score_segment,
    select_elements,
    sort_by_score,
    to_padded_bbox,
)

# (0.5 * 0.5 * 0.9) ** (1/3), mpmath at 30 digits
WORKED_EXAMPLE_SCORE = 0.60822019955734002


def _seg(bits, sid=0):
    return SegmentMask(sid, np.asarray(bits, bool))


def _block(shape, r0, r1, c0, c1, sid=0):
    bits = np.zeros(shape, bool)
    bits[r0:r1, c0:c1] = True
    return _seg(bits, sid)


def test_score_upper_bound():
    seg = _block((6, 6), 1, 4, 1, 4)
    s = score_segment(seg, AttributionMap(np.ones((6, 6))), SaliencyMask(seg.bits.copy(), 20))
    assert s.factors == (1.0, 1.0, 1.0) and s.score == 1.0


def test_zero_map_annihilates():
    seg = _block((6, 6), 0, 3, 0, 3)
    s = score_segment(seg, AttributionMap(np.zeros((6, 6))), SaliencyMask(np.ones((6, 6), bool), 100))
    assert s.overlap_factor == 1.0 and s.score == 0.0


def test_worked_example_matches_enumeration():
    values = np.zeros((4, 4))
    values[:2, :2] = [[0.9, 0.8], [0.2, 0.1]]
    seg = _block((4, 4), 0, 2, 0, 2)
    saliency = SaliencyMask(values > 0.5, 0)
    s = score_segment(seg, AttributionMap(values), saliency)
    assert s.overlap_factor == 0.5
    assert s.mean_importance == pytest.approx(0.5, abs=1e-12)
    assert s.central_importance == 0.9
    assert s.score == pytest.approx(WORKED_EXAMPLE_SCORE, abs=1e-12)
    assert s.factors + (s.score,) == pytest.approx(oracles.score(seg.bits, values, saliency.bits), abs=1e-12)


def test_geometric_not_arithmetic_mean():
    assert geometric_mean((1, 1, 0)) == 0.0
    assert geometric_mean((1.0, 1.0, 1.0)) == 1.0


@settings(max_examples=100, deadline=None)
@given(st.tuples(*[st.floats(0.01, 0.9)] * 3), st.integers(0, 2), st.floats(0.001, 0.5))
def test_score_strictly_monotone_in_each_factor(factors, which, bump):
    raised = list(factors)
    raised[which] = min(1.0, raised[which] + bump)
    if raised[which] > factors[which]:
        assert geometric_mean(raised) > geometric_mean(factors)
    assert 0 <= geometric_mean(factors) <= 1


def test_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        score_segment(_block((4, 4), 0, 2, 0, 2), AttributionMap(np.zeros((5, 5))), SaliencyMask(np.zeros((4, 4), bool), 1))


def _scored(score, sid):
    return ScoredSegment(sid, 1.0, 1.0, 1.0, score, None)


def test_filter_by_min_score():
    items = [_scored(s, i) for i, s in enumerate([0.0, 0.3, 0.7, 1.0])]
    assert filter_by_min_score(items, 0) == items
    assert filter_by_min_score(items, 1 + 1e-9) == []


def test_filter_matches_naive_loop(rng):
    for _ in range(20):
        items = [_scored(float(s), i) for i, s in enumerate(rng.random(30))]
        thr = float(rng.random())
        naive = []
        for it in items:
            if not it.score < thr:
                naive.append(it)
        assert filter_by_min_score(items, thr) == naive


def _scored_mask(seg, score):
    return ScoredSegment(seg.segment_id, 1.0, 1.0, 1.0, score, seg)


def test_identical_masks_lower_one_dropped():
    a = _block((8, 8), 1, 5, 1, 5, 0)
    b = _block((8, 8), 1, 5, 1, 5, 1)
    kept = dedup_containment_iou([_scored_mask(a, 0.9), _scored_mask(b, 0.5)], SelectionConfig())
    assert [k.segment_id for k in kept] == [0]


def test_small_detail_inside_large_segment_survives():
    big = _block((30, 30), 0, 20, 0, 20, 0)  # 400 px
    small = _block((30, 30), 5, 9, 5, 9, 1)  # 16 px, ratio 25 > rho
    kept = dedup_containment_iou([_scored_mask(big, 0.9), _scored_mask(small, 0.8)], SelectionConfig(area_ratio_gate=3))
    assert [k.segment_id for k in kept] == [0, 1]


def test_near_duplicate_inside_similar_size_is_dropped():
    big = _block((30, 30), 0, 10, 0, 10, 0)  # 100 px
    inner = _block((30, 30), 0, 10, 0, 5, 1)  # 50 px fully inside, ratio 2 <= 3
    kept = dedup_containment_iou([_scored_mask(big, 0.9), _scored_mask(inner, 0.8)], SelectionConfig())
    assert [k.segment_id for k in kept] == [0]


def test_unsorted_input_rejected():
    a, b = _block((4, 4), 0, 1, 0, 1, 0), _block((4, 4), 2, 3, 2, 3, 1)
    with pytest.raises(UnsortedInput):
        dedup_containment_iou([_scored_mask(a, 0.1), _scored_mask(b, 0.9)], SelectionConfig())


def random_mask_set(rng, shape=(12, 12), n=8):
    segs = []
    for sid in range(n):
        r0, c0 = rng.integers(0, shape[0] - 1, 2)
        h, w = rng.integers(1, 7, 2)
        bits = np.zeros(shape, bool)
        bits[r0 : r0 + h, c0 : c0 + w] = True
        bits &= rng.random(shape) < 0.9 if rng.random() < 0.3 else True
        if not bits.any():
            bits[r0, c0] = True
        segs.append((_seg(bits, sid), float(np.round(rng.random(), 1))))  # coarse scores force ties
    return segs


def test_dedup_matches_pairwise_oracle(rng):
    for _ in range(50):
        cfg = SelectionConfig(
            iou_threshold=float(rng.uniform(0.2, 0.9)),
            containment_threshold=float(rng.uniform(0.5, 1.0)),
            area_ratio_gate=float(rng.uniform(1, 5)),
        )
        segs = random_mask_set(rng)
        ranked = sort_by_score([_scored_mask(s, sc) for s, sc in segs])
        got = [k.segment_id for k in dedup_containment_iou(ranked, cfg)]
        items = [(s.segment_id, sc, oracles.pixels(s.bits)) for s, sc in segs]
        assert got == oracles.dedup(items, cfg.iou_threshold, cfg.containment_threshold, cfg.area_ratio_gate)


def test_dedup_output_is_pairwise_safe(rng):
    cfg = SelectionConfig()
    from geoxplain.selection import is_duplicate

    for _ in range(20):
        ranked = sort_by_score([_scored_mask(s, sc) for s, sc in random_mask_set(rng)])
        kept = dedup_containment_iou(ranked, cfg)
        for i, a in enumerate(kept):
            for b in kept[i + 1 :]:
                assert not is_duplicate(a.segment.bits, b.segment.bits, cfg)


def test_pad_zero_is_tight_box():
    box = to_padded_bbox(_block((20, 20), 3, 8, 4, 15), 0.0, (20, 20))
    assert (box.row0, box.col0, box.row1, box.col1) == (3, 4, 7, 14)


def test_pad_clamps_at_image_edge():
    bits = np.zeros((224, 224), bool)
    bits[0, 0] = True
    box = to_padded_bbox(_seg(bits), 0.1, (224, 224))
    assert (box.row0, box.col0, box.row1, box.col1) == (0, 0, 1, 1)


def test_pad_ten_by_twenty():
    box = to_padded_bbox(_block((224, 224), 50, 60, 100, 120), 0.1, (224, 224))
    # ceil(0.1 * 10) = 1 row, ceil(0.1 * 20) = 2 cols
    assert (box.row0, box.col0, box.row1, box.col1) == (49, 98, 60, 121)


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 30), st.integers(1, 31), st.integers(0, 30), st.integers(1, 31), st.floats(0, 1))
def test_padded_box_contains_segment_and_fits(r0, h, c0, w, pad):
    h, w = min(h, 32 - r0), min(w, 32 - c0)
    seg = _block((32, 32), r0, r0 + h, c0, c0 + w)
    box = to_padded_bbox(seg, pad, (32, 32))
    assert 0 <= box.row0 <= r0 and r0 + h - 1 <= box.row1 < 32
    assert 0 <= box.col0 <= c0 and c0 + w - 1 <= box.col1 < 32
    assert box.row0 == max(0, r0 - math.ceil(round(pad * h, 9)))


def test_select_zero_map_is_empty():
    img = ImageTensor(np.zeros((8, 8, 3), np.float32))
    amap = AttributionMap(np.zeros((8, 8)))
    segs = SegmentSet("x", [_block((8, 8), 0, 4, 0, 4, 0), _block((8, 8), 4, 8, 4, 8, 1)])
    assert select_elements(img, amap, threshold_top_p(amap, 20), segs, SelectionConfig()) == []


def test_select_single_segment():
    img = ImageTensor(np.zeros((10, 10, 3), np.float32))
    amap = AttributionMap(np.ones((10, 10)))
    seg = _block((10, 10), 2, 5, 2, 5)
    boxes = select_elements(img, amap, threshold_top_p(amap, 100), [seg], SelectionConfig())
    assert boxes == [to_padded_bbox(seg, 0.1, (10, 10), 1.0)]


def test_planted_object_ranks_first(rng):
    side = 40
    values = rng.random((side, side)) * 0.3
    obj = _block((side, side), 20, 28, 6, 14, 0)
    values[obj.bits] = 0.95
    amap = AttributionMap(values)
    segs = [obj] + [_block((side, side), r, r + 8, c, c + 8, i + 1) for i, (r, c) in enumerate([(0, 0), (0, 20), (30, 30), (10, 30)])]
    sel = run_selection(None, amap, threshold_top_p(amap, 10), segs, SelectionConfig())
    top = sel.boxes[0]
    rows, cols = np.nonzero(obj.bits)
    assert top.row0 <= rows.min() and rows.max() <= top.row1
    assert top.col0 <= cols.min() and cols.max() <= top.col1
    assert sel.scored[0].segment_id == 0


def test_max_elements_truncates_and_is_deterministic(rng):
    amap = AttributionMap(rng.random((16, 16)))
    segs = [_block((16, 16), r, r + 4, c, c + 4, i) for i, (r, c) in enumerate([(0, 0), (0, 8), (8, 0), (8, 8), (4, 4)])]
    cfg = SelectionConfig(s_min=0.0, max_elements=2)
    a = select_elements(None, amap, threshold_top_p(amap, 50), segs, cfg)
    b = select_elements(None, amap, threshold_top_p(amap, 50), segs, cfg)
    assert len(a) == 2 and a == b
    assert all(isinstance(x, CropBox) for x in a)
