"""Candidate segment proposals and per-segment geometry."""

from __future__ import annotations

import heapq
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import BackendFailure, ConceptsUnsupported, ConfigError, EmptyMask, FatalBackendError
from .ingest import ImageTensor

BACKENDS = ("mobilesam", "sam2", "sam3", "fallback")
MIN_AREA = 4


@dataclass(frozen=True, eq=False)
class SegmentMask:
    segment_id: int
    bits: np.ndarray
    source: str = "fallback"
    concept_hint: str | None = None

    def __post_init__(self):
        if self.bits.dtype != bool:
            object.__setattr__(self, "bits", self.bits.astype(bool))
        if not self.bits.any():
            raise EmptyMask(f"segment {self.segment_id} has no pixels")

    @property
    def area(self) -> int:
        return int(np.count_nonzero(self.bits))


@dataclass
class SegmentSet:
    image_id: str
    segments: list[SegmentMask] = field(default_factory=list)

    def __post_init__(self):
        ids = [s.segment_id for s in self.segments]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate segment ids in {self.image_id}")

    @property
    def coverage(self) -> float:
        if not self.segments:
            return 0.0
        union = np.logical_or.reduce([s.bits for s in self.segments])
        return float(union.mean())


def mask_area(mask: SegmentMask) -> int:
    return mask.area


def _round_half_down(v: float) -> int:
    # halves go toward the top-left: 0.5 -> 0, 1.5 -> 1
    return int(np.ceil(v - 0.5))


def mask_centroid(mask: SegmentMask | np.ndarray) -> tuple[int, int]:
    """Rounded mean pixel position, snapped onto the mask when it falls outside.

    The snap picks the member pixel nearest (Euclidean) to the rounded
    position; equal distances resolve to the first pixel in row-major order.
    """
    bits = mask.bits if isinstance(mask, SegmentMask) else np.asarray(mask, dtype=bool)
    rows, cols = np.nonzero(bits)
    if rows.size == 0:
        raise EmptyMask("centroid of an empty mask")
    r, c = _round_half_down(rows.mean()), _round_half_down(cols.mean())
    if bits[r, c]:
        return r, c
    d2 = (rows - r) ** 2 + (cols - c) ** 2
    i = int(np.argmin(d2))  # nonzero() is row-major, argmin takes the first minimum
    return int(rows[i]), int(cols[i])


# -- fallback backend --------------------------------------------------------------


def quantize(values: np.ndarray, levels: int) -> np.ndarray:
    """Per-channel uniform quantization of a raw [0, 1] image into one integer code per pixel."""
    q = np.clip((values * levels).astype(np.int64), 0, levels - 1)
    return (q[..., 0] * levels + q[..., 1]) * levels + q[..., 2]


def _label_components(codes: np.ndarray) -> np.ndarray:
    """4-connected components of equal code, labelled 0.. in raster order of first pixel."""
    labels = np.full(codes.shape, -1, dtype=np.int64)
    next_id = 0
    for code in np.unique(codes):
        lab, n = ndimage.label(codes == code)
        sel = lab > 0
        labels[sel] = lab[sel] - 1 + next_id
        next_id += n
    return _raster_rank(labels)


def _raster_rank(labels: np.ndarray) -> np.ndarray:
    _, dense = np.unique(labels, return_inverse=True)
    dense = dense.reshape(labels.shape)
    _, first = np.unique(dense.ravel(), return_index=True)
    rank = np.empty(len(first), dtype=np.int64)
    rank[np.argsort(first)] = np.arange(len(first))
    return rank[dense]


def _merge_small(labels: np.ndarray, min_area: int) -> np.ndarray:
    """Absorb components below ``min_area`` into the neighbour sharing the longest border.

    The smallest component (lowest id on ties) is merged first; border ties go
    to the lowest neighbour id. Works on the region adjacency graph.
    """
    if labels.size < min_area:
        return np.zeros_like(labels)
    n = int(labels.max()) + 1
    area = np.bincount(labels.ravel(), minlength=n).tolist()
    border: list[dict[int, int]] = [dict() for _ in range(n)]
    pairs = [(labels[:, :-1], labels[:, 1:]), (labels[:-1, :], labels[1:, :])]
    for a, b in pairs:
        diff = a != b
        ab = np.stack([a[diff], b[diff]], axis=1)
        ab = np.concatenate([ab, ab[:, ::-1]])
        uniq, cnt = np.unique(ab, axis=0, return_counts=True)
        for (u, v), c in zip(uniq.tolist(), cnt.tolist()):
            border[u][v] = border[u].get(v, 0) + c
    parent = list(range(n))
    heap = [(area[i], i) for i in range(n) if area[i] < min_area]
    heapq.heapify(heap)
    while heap:
        a_v, victim = heapq.heappop(heap)
        if parent[victim] != victim or area[victim] != a_v or not border[victim]:
            continue
        target = max(border[victim], key=lambda nb: (border[victim][nb], -nb))
        for nb, cnt in border[victim].items():
            del border[nb][victim]
            if nb != target:
                border[target][nb] = border[target].get(nb, 0) + cnt
                border[nb][target] = border[nb].get(target, 0) + cnt
        border[victim] = {}
        parent[victim] = target
        area[target] += area[victim]
        if area[target] < min_area:
            heapq.heappush(heap, (area[target], target))

    def find(i):
        while parent[i] != i:
            i = parent[i]
        return i

    root = np.array([find(i) for i in range(n)], dtype=np.int64)
    return _raster_rank(root[labels])


def fallback_segments(values: np.ndarray, levels: int = 4, min_area: int = MIN_AREA) -> list[np.ndarray]:
    """Partition an image into connected regions of equal quantized colour."""
    labels = _merge_small(_label_components(quantize(values, levels)), min_area)
    return [labels == i for i in range(int(labels.max()) + 1)]


class FallbackSegmenter:
    supports_concepts = False
    deterministic = True

    def __init__(self, levels: int = 4, min_area: int = MIN_AREA):
        self.levels = levels
        self.min_area = min_area

    def segment(self, image: np.ndarray, concepts=None) -> list[np.ndarray]:
        return fallback_segments(image, self.levels, self.min_area)


def load_concepts(path: str | os.PathLike) -> list[str]:
    """One concept phrase per line; blank lines and ``#`` comments are skipped."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [ln.strip() for ln in lines if ln.strip() and not ln.lstrip().startswith("#")]


def build_segmenter(name: str, seg_cfg: dict):
    if name == "fallback":
        return FallbackSegmenter(int(seg_cfg["quantization_levels"]), int(seg_cfg["min_area"]))
    if name not in BACKENDS:
        raise ConfigError(f"unknown segmentation backend {name!r}")
    ext = seg_cfg["external"]
    if not ext["module"]:
        raise FatalBackendError(
            f"segmentation backend {name!r} needs segmentation.external.module (a loader for the pretrained model)"
        )
    from .classifier import _import_path

    try:
        module = _import_path(ext["module"])
        return module.load_segmenter(ext["weights"], name)
    except FatalBackendError:
        raise
    except Exception as exc:
        raise FatalBackendError(f"segmentation backend {name!r} failed to load: {exc}") from exc


def segment_image(
    image: ImageTensor,
    backend,
    concepts: Sequence[str] | None = None,
    image_id: str = "",
    min_area: int = MIN_AREA,
) -> SegmentSet:
    """Run ``backend`` (a segmenter object or the name ``"fallback"``) on a raw image.

    Masks smaller than ``min_area`` from external backends are dropped; the
    fallback backend merges them into a neighbour instead.
    """
    if isinstance(backend, str):
        backend = build_segmenter(backend, {"quantization_levels": 4, "min_area": min_area, "external": {"module": None}})
    if concepts and not getattr(backend, "supports_concepts", False):
        raise ConceptsUnsupported(f"{type(backend).__name__} does not accept concept prompts")
    if image.normalization != "raw_0_1":
        raise ValueError("segmentation expects a raw_0_1 image")
    try:
        raw_masks = backend.segment(image.values, concepts=list(concepts) if concepts else None)
    except Exception as exc:
        raise BackendFailure(f"segmentation backend failed: {exc}") from exc
    source = getattr(backend, "name", "fallback" if isinstance(backend, FallbackSegmenter) else "external")
    segments = []
    for item in raw_masks:
        hint = None
        if isinstance(item, tuple):
            item, hint = item
        bits = np.asarray(item, dtype=bool)
        if bits.shape != (image.height, image.width):
            raise BackendFailure(f"mask shape {bits.shape} does not match image {image.height}x{image.width}")
        if np.count_nonzero(bits) < min_area and not isinstance(backend, FallbackSegmenter):
            continue
        segments.append(SegmentMask(len(segments), bits, source, hint))
    return SegmentSet(image_id, segments)


# -- persistence --------------------------------------------------------------------


def rle_encode(bits: np.ndarray) -> dict:
    """Row-major run lengths, starting with the length of the leading run of zeros."""
    flat = np.asarray(bits, dtype=bool).ravel()
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    counts = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        counts = [0] + counts
    return {"size": list(bits.shape), "counts": counts}


def rle_decode(rle: dict) -> np.ndarray:
    h, w = rle["size"]
    flat = np.zeros(h * w, dtype=bool)
    pos, val = 0, False
    for n in rle["counts"]:
        if val:
            flat[pos : pos + n] = True
        pos += n
        val = not val
    return flat.reshape(h, w)


def segment_set_to_dict(segs: SegmentSet) -> dict:
    return {
        "image_id": segs.image_id,
        "segments": [
            {
                "segment_id": s.segment_id,
                "area": s.area,
                "source": s.source,
                "concept_hint": s.concept_hint,
                "rle": rle_encode(s.bits),
            }
            for s in segs.segments
        ],
    }


def segment_set_from_dict(d: dict) -> SegmentSet:
    return SegmentSet(
        d["image_id"],
        [SegmentMask(s["segment_id"], rle_decode(s["rle"]), s["source"], s["concept_hint"]) for s in d["segments"]],
    )
