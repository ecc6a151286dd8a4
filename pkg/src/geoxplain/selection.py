"""Score segments against an attribution map, filter, de-duplicate and box them."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .attribution import AttributionMap, SaliencyMask
from .errors import DimensionMismatch, EmptyMask, UnsortedInput
from .segmentation import SegmentMask, mask_centroid


@dataclass(frozen=True)
class SelectionConfig:
    s_min: float = 0.2
    iou_threshold: float = 0.7
    containment_threshold: float = 0.85
    area_ratio_gate: float = 3.0
    pad_fraction: float = 0.1
    max_elements: int | None = 10

    def __post_init__(self):
        if not 0 <= self.iou_threshold <= 1 or not 0 <= self.containment_threshold <= 1:
            raise ValueError("iou_threshold and containment_threshold must lie in [0, 1]")
        if self.area_ratio_gate < 1:
            raise ValueError("area_ratio_gate must be >= 1")
        if self.pad_fraction < 0:
            raise ValueError("pad_fraction must be >= 0")
        if self.max_elements is not None and self.max_elements < 0:
            raise ValueError("max_elements must be >= 0")

    @classmethod
    def from_config(cls, sel: dict) -> "SelectionConfig":
        keys = ("s_min", "iou_threshold", "containment_threshold", "area_ratio_gate", "pad_fraction", "max_elements")
        return cls(**{k: sel[k] for k in keys})


@dataclass(frozen=True)
class ScoredSegment:
    segment_id: int
    overlap_factor: float
    mean_importance: float
    central_importance: float
    score: float
    segment: SegmentMask | None = field(default=None, repr=False, compare=False)

    @property
    def factors(self) -> tuple[float, float, float]:
        return (self.overlap_factor, self.mean_importance, self.central_importance)


@dataclass(frozen=True)
class CropBox:
    """Inclusive pixel bounds of a padded crop."""

    row0: int
    col0: int
    row1: int
    col1: int
    source_segment_id: int = -1
    score: float = 0.0

    @property
    def height(self) -> int:
        return self.row1 - self.row0 + 1

    @property
    def width(self) -> int:
        return self.col1 - self.col0 + 1

    def as_dict(self) -> dict:
        return {
            "row0": self.row0,
            "col0": self.col0,
            "row1": self.row1,
            "col1": self.col1,
            "source_segment_id": self.source_segment_id,
            "score": self.score,
        }


def geometric_mean(factors) -> float:
    """Unweighted geometric mean, computed in log space; any zero factor gives 0."""
    if any(f <= 0 for f in factors):
        return 0.0
    return math.exp(sum(math.log(f) for f in factors) / len(factors))


def score_segment(segment: SegmentMask, amap: AttributionMap, saliency: SaliencyMask) -> ScoredSegment:
    bits = segment.bits
    if bits.shape != amap.values.shape or bits.shape != saliency.bits.shape:
        raise DimensionMismatch(
            f"segment {bits.shape}, map {amap.values.shape}, saliency {saliency.bits.shape} disagree"
        )
    area = np.count_nonzero(bits)
    if area == 0:
        raise EmptyMask(f"segment {segment.segment_id} is empty")
    overlap = np.count_nonzero(bits & saliency.bits) / area
    mean_imp = float(amap.values[bits].mean())
    r, c = mask_centroid(segment)
    central = float(amap.values[r, c])
    return ScoredSegment(
        segment.segment_id,
        float(overlap),
        mean_imp,
        central,
        geometric_mean((overlap, mean_imp, central)),
        segment,
    )


def filter_by_min_score(scored: list[ScoredSegment], s_min: float) -> list[ScoredSegment]:
    return [s for s in scored if s.score >= s_min]


def rank_key(s: ScoredSegment):
    return (-s.score, s.segment_id)


def sort_by_score(scored: list[ScoredSegment]) -> list[ScoredSegment]:
    return sorted(scored, key=rank_key)


def iou(a: np.ndarray, b: np.ndarray) -> float:
    inter = np.count_nonzero(a & b)
    union = np.count_nonzero(a | b)
    return inter / union if union else 0.0


def is_duplicate(kept: np.ndarray, cand: np.ndarray, config: SelectionConfig) -> bool:
    """Whether ``cand`` is redundant given an already kept, higher-ranked ``kept``.

    Near-duplicates go (high IoU, or ``cand`` mostly inside ``kept``); a
    candidate much smaller than the segment containing it is a detail and
    survives the containment test.
    """
    inter = np.count_nonzero(kept & cand)
    area_k, area_c = np.count_nonzero(kept), np.count_nonzero(cand)
    union = area_k + area_c - inter
    if union and inter / union >= config.iou_threshold:
        return True
    contained = inter / area_c >= config.containment_threshold
    return contained and area_k / area_c <= config.area_ratio_gate


def dedup_containment_iou(scored: list[ScoredSegment], config: SelectionConfig) -> list[ScoredSegment]:
    """Greedy scan in rank order, keeping candidates no kept segment makes redundant."""
    for prev, cur in zip(scored, scored[1:]):
        if rank_key(prev) > rank_key(cur):
            raise UnsortedInput("input must be sorted by score desc, then segment_id asc")
    kept: list[ScoredSegment] = []
    for cand in scored:
        if not any(is_duplicate(k.segment.bits, cand.segment.bits, config) for k in kept):
            kept.append(cand)
    return kept


def to_padded_bbox(segment: SegmentMask, pad_fraction: float, dims: tuple[int, int], score: float = 0.0) -> CropBox:
    """Tight box grown by ``ceil(pad_fraction * side)`` per edge, clamped to the image."""
    rows = np.flatnonzero(segment.bits.any(axis=1))
    cols = np.flatnonzero(segment.bits.any(axis=0))
    if rows.size == 0:
        raise EmptyMask(f"segment {segment.segment_id} is empty")
    r0, r1, c0, c1 = int(rows[0]), int(rows[-1]), int(cols[0]), int(cols[-1])
    # round() keeps 0.1 * 30 from ceiling to 4
    pad_r = math.ceil(round(pad_fraction * (r1 - r0 + 1), 9))
    pad_c = math.ceil(round(pad_fraction * (c1 - c0 + 1), 9))
    h, w = dims
    return CropBox(
        max(0, r0 - pad_r),
        max(0, c0 - pad_c),
        min(h - 1, r1 + pad_r),
        min(w - 1, c1 + pad_c),
        segment.segment_id,
        score,
    )


@dataclass
class Selection:
    boxes: list[CropBox]
    scored: list[ScoredSegment]  # ranked survivors, aligned with boxes
    n_candidates: int = 0


def run_selection(image, amap: AttributionMap, saliency: SaliencyMask, segments, config: SelectionConfig) -> Selection:
    """score -> filter(s_min) -> sort -> dedup -> pad -> truncate, keeping the factor breakdown."""
    segs = segments.segments if hasattr(segments, "segments") else list(segments)
    dims = amap.values.shape
    if saliency.bits.shape != dims or (image is not None and (image.height, image.width) != dims):
        raise DimensionMismatch("image, attribution map and saliency mask must share dimensions")
    scored = [score_segment(s, amap, saliency) for s in segs]
    ranked = sort_by_score(filter_by_min_score(scored, config.s_min))
    kept = dedup_containment_iou(ranked, config)
    if config.max_elements is not None:
        kept = kept[: config.max_elements]
    boxes = [to_padded_bbox(k.segment, config.pad_fraction, dims, k.score) for k in kept]
    return Selection(boxes, kept, len(segs))


def select_elements(image, amap: AttributionMap, saliency: SaliencyMask, segments, config: SelectionConfig) -> list[CropBox]:
    """Ranked padded crops for the segments that survive scoring and de-duplication. May be empty."""
    return run_selection(image, amap, saliency, segments, config).boxes
