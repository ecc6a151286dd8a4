"""Deletion / insertion tests against size-matched random crops."""

from __future__ import annotations

import hashlib
from collections import defaultdict
from dataclasses import asdict, dataclass

import numpy as np

from .classifier import ClassifierAdapter, predict_top1_batch
from .errors import BoxLargerThanImage, BoxOutOfBounds, ConfigError, EmptyResults
from .ingest import ImageTensor
from .selection import CropBox

DELETION, INSERTION = "deletion", "insertion"
GUIDED, RANDOM = "guided", "random"


@dataclass(frozen=True)
class MaskingSpec:
    boxes: tuple[CropBox, ...]
    mode: str
    fill: tuple[float, float, float]

    def __post_init__(self):
        if self.mode not in (DELETION, INSERTION):
            raise ValueError(f"mode must be deletion or insertion, got {self.mode!r}")
        if len(self.fill) != 3 or not all(0.0 <= f <= 1.0 for f in self.fill):
            raise ValueError("fill needs three channels in [0, 1]")


@dataclass(frozen=True)
class FaithfulnessConfig:
    repeats: int = 10
    fill: object = "image_mean"
    dataset_mean: tuple[float, float, float] = (0.485, 0.456, 0.406)

    @classmethod
    def from_config(cls, f: dict) -> "FaithfulnessConfig":
        fill = f["fill"]
        if isinstance(fill, list):
            fill = tuple(float(v) for v in fill)
        return cls(int(f["repeats"]), fill, tuple(float(v) for v in f["dataset_mean"]))


@dataclass(frozen=True)
class FaithfulnessResult:
    image_id: str
    label: int
    pred_original: int
    pred_deletion: int
    pred_insertion: int
    condition: str
    repeat_index: int
    coverage_fraction: float

    def to_dict(self) -> dict:
        return asdict(self)


def union_mask(boxes, dims: tuple[int, int]) -> np.ndarray:
    h, w = dims
    union = np.zeros((h, w), dtype=bool)
    for b in boxes:
        if not (0 <= b.row0 <= b.row1 < h and 0 <= b.col0 <= b.col1 < w):
            raise BoxOutOfBounds(f"box {b} outside a {h}x{w} image")
        union[b.row0 : b.row1 + 1, b.col0 : b.col1 + 1] = True
    return union


def apply_masking(image: ImageTensor, spec: MaskingSpec) -> ImageTensor:
    """Deletion fills the union of boxes; insertion fills everything outside it."""
    if image.normalization != "raw_0_1":
        raise ValueError("masking operates on raw_0_1 images")
    inside = union_mask(spec.boxes, (image.height, image.width))
    target = inside if spec.mode == DELETION else ~inside
    out = image.values.copy()
    out[target] = np.asarray(spec.fill, dtype=out.dtype)
    return ImageTensor(out, "raw_0_1")


def coverage_fraction(boxes, dims: tuple[int, int]) -> float:
    return float(union_mask(boxes, dims).mean())


def random_crops_matched(guided, dims: tuple[int, int], seed: int) -> list[CropBox]:
    """One box per guided box, same height and width, top-left uniform over valid positions."""
    h, w = dims
    rng = np.random.default_rng(seed)
    out = []
    for b in guided:
        if b.height > h or b.width > w:
            raise BoxLargerThanImage(f"box {b.height}x{b.width} does not fit a {h}x{w} image")
        r0 = int(rng.integers(0, h - b.height + 1))
        c0 = int(rng.integers(0, w - b.width + 1))
        out.append(CropBox(r0, c0, r0 + b.height - 1, c0 + b.width - 1, -1, 0.0))
    return out


def derive_seed(run_seed: int, image_id: str, repeat: int) -> int:
    digest = hashlib.sha256(f"{run_seed}:{image_id}:{repeat}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def resolve_fill(image: ImageTensor, config: FaithfulnessConfig) -> tuple[float, float, float]:
    fill = config.fill
    if fill == "image_mean":
        return tuple(float(v) for v in image.values.reshape(-1, 3).mean(axis=0))
    if fill == "gray":
        return (0.5, 0.5, 0.5)
    if fill == "dataset_mean":
        return tuple(config.dataset_mean)
    if isinstance(fill, (tuple, list)) and len(fill) == 3:
        return tuple(float(v) for v in fill)
    raise ConfigError(f"unknown fill {fill!r}")


def evaluate_conditions(
    model: ClassifierAdapter,
    image: ImageTensor,
    conditions: list[tuple[str, int, list[CropBox]]],
    fill: tuple[float, float, float],
    image_id: str,
    label: int,
) -> list[FaithfulnessResult]:
    """Run deletion and insertion for each (condition, repeat, boxes) in one model batch."""
    dims = (image.height, image.width)
    batch = [image]
    for _, _, boxes in conditions:
        batch.append(apply_masking(image, MaskingSpec(tuple(boxes), DELETION, fill)))
        batch.append(apply_masking(image, MaskingSpec(tuple(boxes), INSERTION, fill)))
    preds = predict_top1_batch(model, batch)
    out = []
    for i, (cond, rep, boxes) in enumerate(conditions):
        out.append(
            FaithfulnessResult(
                image_id,
                int(label),
                preds[0],
                preds[1 + 2 * i],
                preds[2 + 2 * i],
                cond,
                rep,
                coverage_fraction(boxes, dims),
            )
        )
    return out


def evaluate_image(
    model: ClassifierAdapter,
    image: ImageTensor,
    guided: list[CropBox],
    config: FaithfulnessConfig = FaithfulnessConfig(),
    image_id: str = "",
    label: int = 0,
    run_seed: int = 0,
) -> list[FaithfulnessResult]:
    """One guided result plus ``config.repeats`` random-baseline results for one image."""
    dims = (image.height, image.width)
    conditions = [(GUIDED, 0, list(guided))]
    if guided:
        for r in range(config.repeats):
            boxes = random_crops_matched(guided, dims, derive_seed(run_seed, image_id, r))
            conditions.append((RANDOM, r, boxes))
    return evaluate_conditions(model, image, conditions, resolve_fill(image, config), image_id, label)


# -- aggregation ----------------------------------------------------------------


@dataclass(frozen=True)
class ConditionStats:
    accuracy_original: float
    accuracy_deletion: float
    accuracy_insertion: float
    deletion_drop: float
    mean_coverage: float
    n_images: int
    # agreement with the unmasked prediction instead of the ground-truth label
    agreement_deletion: float
    agreement_insertion: float


@dataclass(frozen=True)
class AggregateReport:
    conditions: dict[str, ConditionStats]

    def to_dict(self) -> dict:
        return {k: asdict(v) for k, v in self.conditions.items()}


def aggregate(results) -> AggregateReport:
    """Accuracies per condition; repeats are averaged within an image before averaging images."""
    results = list(results)
    if not results:
        raise EmptyResults("no faithfulness results to aggregate")
    grouped: dict[str, dict[str, list]] = defaultdict(lambda: defaultdict(list))
    for r in results:
        grouped[r.condition][r.image_id].append(r)

    conditions = {}
    for cond in (GUIDED, RANDOM):
        if cond not in grouped:
            continue
        per_image = []
        for rs in grouped[cond].values():
            per_image.append(
                [
                    np.mean([r.pred_original == r.label for r in rs]),
                    np.mean([r.pred_deletion == r.label for r in rs]),
                    np.mean([r.pred_insertion == r.label for r in rs]),
                    np.mean([r.coverage_fraction for r in rs]),
                    np.mean([r.pred_deletion == r.pred_original for r in rs]),
                    np.mean([r.pred_insertion == r.pred_original for r in rs]),
                ]
            )
        orig, dele, ins, cov, agr_d, agr_i = (float(v) for v in np.mean(per_image, axis=0))
        conditions[cond] = ConditionStats(orig, dele, ins, orig - dele, cov, len(per_image), agr_d, agr_i)
    return AggregateReport(conditions)
