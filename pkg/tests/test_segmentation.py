import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from geoxplain.errors import ConceptsUnsupported, EmptyMask
from geoxplain.ingest import ImageTensor
from geoxplain.segmentation import (
    FallbackSegmenter,
    SegmentMask,
    load_concepts,
    mask_area,
    mask_centroid,
    rle_decode,
    rle_encode,
    segment_image,
    segment_set_from_dict,
    segment_set_to_dict,
)


def _img(values):
    return ImageTensor(np.asarray(values, dtype=np.float32))


def _nearest_member_oracle(bits, point):
    best = None
    for r in range(bits.shape[0]):
        for c in range(bits.shape[1]):
            if bits[r, c]:
                d = (r - point[0]) ** 2 + (c - point[1]) ** 2
                if best is None or d < best[0]:
                    best = (d, (r, c))
    return best[1]


def test_two_region_image_gives_two_segments():
    img = np.zeros((10, 12, 3))
    img[:, 5:] = (0.9, 0.1, 0.1)
    segs = segment_image(_img(img), FallbackSegmenter())
    assert len(segs.segments) == 2
    assert {s.area for s in segs.segments} == {50, 70}
    assert segs.coverage == 1.0


def test_uniform_image_is_one_segment():
    segs = segment_image(_img(np.full((8, 8, 3), 0.4)), "fallback")
    assert len(segs.segments) == 1 and segs.segments[0].area == 64


def test_concepts_need_a_concept_backend():
    with pytest.raises(ConceptsUnsupported):
        segment_image(_img(np.zeros((4, 4, 3))), FallbackSegmenter(), concepts=["bollard"])


def test_concept_backend_receives_prompts():
    class Sam3Like:
        supports_concepts = True
        name = "sam3"

        def segment(self, image, concepts=None):
            bits = np.zeros(image.shape[:2], bool)
            bits[:3, :3] = True
            speck = np.zeros(image.shape[:2], bool)
            speck[5, 5] = True
            return [(bits, concepts[0]), np.ones(image.shape[:2], bool), speck]

    segs = segment_image(_img(np.zeros((6, 6, 3))), Sam3Like(), concepts=["road sign"], min_area=4)
    # the single-pixel proposal falls under min_area and is dropped
    assert [s.area for s in segs.segments] == [9, 36]
    assert segs.segments[0].concept_hint == "road sign" and segs.segments[0].source == "sam3"


def test_tiny_components_are_merged_and_partition_kept(rng):
    img = rng.random((20, 20, 3))
    segs = segment_image(_img(img), FallbackSegmenter(levels=4, min_area=4))
    total = np.sum([s.bits.astype(int) for s in segs.segments], axis=0)
    assert (total == 1).all()
    assert min(s.area for s in segs.segments) >= 4


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (9, 9, 3), elements=st.sampled_from([0.1, 0.4, 0.6, 0.9])))
def test_fallback_partitions_and_is_deterministic(values):
    a = segment_image(_img(values), FallbackSegmenter())
    b = segment_image(_img(values), FallbackSegmenter())
    stack = np.stack([s.bits for s in a.segments]).astype(int)
    assert (stack.sum(axis=0) == 1).all()
    assert all(np.array_equal(x.bits, y.bits) for x, y in zip(a.segments, b.segments))


def test_centroid_symmetric_block_rounds_to_top_left():
    bits = np.zeros((4, 4), bool)
    bits[:2, :2] = True
    assert mask_centroid(SegmentMask(0, bits)) == (0, 0)


def test_centroid_singleton():
    bits = np.zeros((10, 10), bool)
    bits[7, 3] = True
    assert mask_centroid(SegmentMask(0, bits)) == (7, 3)


def test_centroid_u_shape_snaps_to_nearest_member():
    bits = np.zeros((7, 7), bool)
    bits[1:6, 1] = bits[1:6, 5] = True
    bits[5, 1:6] = True
    # mean lies in the hole of the U
    rows, cols = np.nonzero(bits)
    rounded = (int(np.ceil(rows.mean() - 0.5)), int(np.ceil(cols.mean() - 0.5)))
    assert not bits[rounded]
    assert mask_centroid(SegmentMask(0, bits)) == _nearest_member_oracle(bits, rounded)


@settings(max_examples=80, deadline=None)
@given(arrays(bool, st.tuples(st.integers(1, 9), st.integers(1, 9))))
def test_centroid_is_always_a_member(bits):
    if not bits.any():
        with pytest.raises(EmptyMask):
            mask_centroid(bits)
        return
    r, c = mask_centroid(bits)
    assert bits[r, c]


def test_mask_area():
    assert mask_area(SegmentMask(0, np.ones((4, 4), bool))) == 16
    with pytest.raises(EmptyMask):
        SegmentMask(0, np.zeros((4, 4), bool))


def test_mask_area_matches_naive_count(rng):
    for _ in range(100):
        bits = rng.random((rng.integers(1, 12), rng.integers(1, 12))) < 0.4
        if not bits.any():
            continue
        naive = 0
        for row in bits.tolist():
            for v in row:
                naive += v
        assert mask_area(SegmentMask(0, bits)) == naive


@settings(max_examples=60, deadline=None)
@given(arrays(bool, st.tuples(st.integers(1, 8), st.integers(1, 8))))
def test_rle_round_trip(bits):
    assert np.array_equal(rle_decode(rle_encode(bits)), bits)


def test_segment_set_serialization(rng):
    img = rng.random((12, 12, 3))
    segs = segment_image(_img(img), FallbackSegmenter(), image_id="a")
    back = segment_set_from_dict(segment_set_to_dict(segs))
    assert back.image_id == "a"
    assert all(np.array_equal(x.bits, y.bits) for x, y in zip(segs.segments, back.segments))


def test_concepts_file(tmp_path):
    path = tmp_path / "concepts.txt"
    path.write_text("bollard\n\n# comment\n  yellow road line  \n")
    assert load_concepts(path) == ["bollard", "yellow road line"]
