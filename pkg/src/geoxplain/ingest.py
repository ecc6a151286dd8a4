"""Dataset manifests, image decoding, preprocessing and train-time augmentation."""

from __future__ import annotations

import json
import os
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

from .errors import (
    AugmentationOnEval,
    DecodeError,
    LabelOutOfRange,
    MissingFile,
    NonRGBInput,
    SchemaError,
)

SPLITS = ("train", "eval")
NORMALIZATIONS = ("raw_0_1", "standardized")


@dataclass(frozen=True)
class ImageRecord:
    id: str
    uri: str
    label: int
    split: str
    label_name: str = ""


@dataclass
class DatasetManifest:
    num_classes: int
    class_names: list[str]
    records: list[ImageRecord] = field(default_factory=list)
    root: Path | None = field(default=None, compare=False, repr=False)

    def split(self, name: str) -> list[ImageRecord]:
        return [r for r in self.records if r.split == name]

    def class_counts(self) -> dict[str, list[int]]:
        """Per-split record counts by class index. Reported, never enforced equal."""
        out = {}
        for split in SPLITS:
            counts = Counter(r.label for r in self.records if r.split == split)
            out[split] = [counts.get(c, 0) for c in range(self.num_classes)]
        return out

    def resolve(self, record: ImageRecord) -> str:
        if "://" in record.uri or os.path.isabs(record.uri) or self.root is None:
            return record.uri
        return str(self.root / record.uri)


@dataclass(frozen=True)
class PreprocessConfig:
    side: int = 224
    normalization: str = "standardized"
    mean: tuple[float, float, float] = (0.485, 0.456, 0.406)
    std: tuple[float, float, float] = (0.229, 0.224, 0.225)

    @classmethod
    def from_config(cls, ingest: dict) -> "PreprocessConfig":
        return cls(
            side=int(ingest["side"]),
            normalization=ingest["normalization"],
            mean=tuple(float(v) for v in ingest["mean"]),
            std=tuple(float(v) for v in ingest["std"]),
        )


@dataclass(frozen=True)
class AugmentConfig:
    flip_prob: float = 0.5
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2

    @classmethod
    def from_config(cls, augment: dict) -> "AugmentConfig":
        return cls(**{k: float(v) for k, v in augment.items()})


@dataclass(frozen=True, eq=False)
class ImageTensor:
    """An HxWx3 float32 image in either raw [0, 1] or standardized units."""

    values: np.ndarray
    normalization: str = "raw_0_1"

    def __post_init__(self):
        if self.values.ndim != 3 or self.values.shape[2] != 3:
            raise NonRGBInput(f"expected HxWx3 values, got shape {self.values.shape}")
        if self.normalization not in NORMALIZATIONS:
            raise ValueError(f"unknown normalization {self.normalization!r}")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return 3


# -- manifests ---------------------------------------------------------------


def _parse_record(obj: dict, lineno: int, num_classes: int, class_names: list[str]) -> ImageRecord:
    if not isinstance(obj, dict):
        raise SchemaError(f"line {lineno}: record must be an object")
    for key in ("id", "uri", "label", "split"):
        if key not in obj:
            raise SchemaError(f"line {lineno}: record missing field '{key}'")
    rid = obj["id"]
    if not isinstance(rid, str) or not rid:
        raise SchemaError(f"line {lineno}: field 'id' must be a non-empty string")
    if not isinstance(obj["uri"], str):
        raise SchemaError(f"record {rid}: field 'uri' must be a string")
    label = obj["label"]
    if isinstance(label, bool) or not isinstance(label, int):
        raise SchemaError(f"record {rid}: field 'label' must be an integer")
    if not 0 <= label < num_classes:
        raise LabelOutOfRange(f"record {rid}: label {label} outside 0..{num_classes - 1}")
    if obj["split"] not in SPLITS:
        raise SchemaError(f"record {rid}: field 'split' must be one of {SPLITS}")
    name = obj.get("label_name", class_names[label])
    return ImageRecord(id=rid, uri=obj["uri"], label=label, split=obj["split"], label_name=name)


def load_manifest(path: str | os.PathLike) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"manifest not found: {path}")
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    if not lines:
        raise SchemaError("manifest is empty; a header line is required")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise SchemaError(f"header does not parse: {exc}") from exc
    if not isinstance(header, dict):
        raise SchemaError("header must be an object")
    n = header.get("num_classes")
    if isinstance(n, bool) or not isinstance(n, int) or n < 1:
        raise SchemaError("header field 'num_classes' must be a positive integer")
    names = header.get("class_names")
    if not isinstance(names, list) or len(names) != n or not all(isinstance(s, str) for s in names):
        raise SchemaError("header field 'class_names' must list exactly num_classes strings")

    records, seen = [], set()
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"line {lineno} does not parse: {exc}") from exc
        rec = _parse_record(obj, lineno, n, names)
        if rec.id in seen:
            raise SchemaError(f"field 'id': duplicate record id {rec.id}")
        seen.add(rec.id)
        records.append(rec)
    return DatasetManifest(n, list(names), records, root=path.resolve().parent)


def write_manifest(manifest: DatasetManifest, path: str | os.PathLike) -> None:
    header = {"num_classes": manifest.num_classes, "class_names": manifest.class_names}
    lines = [json.dumps(header)]
    for r in manifest.records:
        lines.append(
            json.dumps(
                {"id": r.id, "uri": r.uri, "label": r.label, "split": r.split, "label_name": r.label_name}
            )
        )
    Path(path).write_text("\n".join(lines) + "\n")


# -- images ------------------------------------------------------------------


def load_image(uri: str) -> np.ndarray:
    """Decode a PNG/JPEG into an HxWx3 uint8 RGB array."""
    if "://" in uri:
        import io
        import urllib.request

        try:
            with urllib.request.urlopen(uri, timeout=30) as resp:
                data = io.BytesIO(resp.read())
        except OSError as exc:
            raise DecodeError(f"cannot fetch {uri}: {exc}") from exc
        source = data
    else:
        if not os.path.isfile(uri):
            raise MissingFile(f"image not found: {uri}")
        source = uri
    try:
        with Image.open(source) as img:
            if img.mode not in ("RGB", "RGBA", "L", "P"):
                raise NonRGBInput(f"unsupported image mode {img.mode} for {uri}")
            return np.asarray(img.convert("RGB"), dtype=np.uint8).copy()
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise DecodeError(f"cannot decode {uri}: {exc}") from exc


def save_image(values: np.ndarray, path: str | os.PathLike) -> None:
    """Write raw [0, 1] float or uint8 HxWx3 values as PNG."""
    if values.dtype != np.uint8:
        values = np.clip(np.rint(values * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(values, mode="RGB").save(path)


def resize_bilinear(values: np.ndarray, side: int) -> np.ndarray:
    if values.shape[0] == side and values.shape[1] == side:
        return values.astype(np.float32, copy=True)
    t = torch.from_numpy(np.ascontiguousarray(values, dtype=np.float32)).permute(2, 0, 1)[None]
    out = F.interpolate(t, size=(side, side), mode="bilinear", align_corners=False, antialias=True)
    return out[0].permute(1, 2, 0).numpy().astype(np.float32)


def standardize(values: np.ndarray, mean, std) -> np.ndarray:
    mean = np.asarray(mean, dtype=np.float32)
    std = np.asarray(std, dtype=np.float32)
    return ((values - mean) / std).astype(np.float32)


def preprocess(image: np.ndarray, config: PreprocessConfig = PreprocessConfig()) -> ImageTensor:
    """Resize to ``config.side`` (bilinear) and scale to raw [0, 1] or standardized units."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise NonRGBInput(f"expected an HxWx3 RGB image, got shape {image.shape}")
    if image.shape[0] < 1 or image.shape[1] < 1:
        raise DecodeError("image has no pixels")
    raw = resize_bilinear(image.astype(np.float32) / np.float32(255.0), config.side)
    if config.normalization == "raw_0_1":
        return ImageTensor(np.clip(raw, 0.0, 1.0), "raw_0_1")
    return ImageTensor(standardize(raw, config.mean, config.std), "standardized")


def to_standardized(x: ImageTensor, mean, std) -> np.ndarray:
    if x.normalization == "standardized":
        return x.values
    return standardize(x.values, mean, std)


def _gray(values: np.ndarray) -> np.ndarray:
    return values @ np.array([0.299, 0.587, 0.114], dtype=np.float32)


def augment(
    tensor: ImageTensor, seed: int, config: AugmentConfig = AugmentConfig(), split: str = "train"
) -> ImageTensor:
    """Random horizontal flip and colour jitter on a raw [0, 1] training image."""
    if split != "train":
        raise AugmentationOnEval(f"augmentation requested for split {split!r}")
    if tensor.normalization != "raw_0_1":
        raise ValueError("augment expects raw_0_1 input")
    rng = np.random.default_rng(seed)
    out = tensor.values.astype(np.float32, copy=True)
    if rng.random() < config.flip_prob:
        out = out[:, ::-1, :].copy()
    # a zero range leaves the pixels untouched, not merely scaled by 1.0
    if config.brightness > 0:
        out = out * np.float32(rng.uniform(1 - config.brightness, 1 + config.brightness))
    if config.contrast > 0:
        factor = np.float32(rng.uniform(1 - config.contrast, 1 + config.contrast))
        mean = np.float32(_gray(out).mean())
        out = (out - mean) * factor + mean
    if config.saturation > 0:
        factor = np.float32(rng.uniform(1 - config.saturation, 1 + config.saturation))
        gray = _gray(out)[..., None]
        out = (out - gray) * factor + gray
    if config.brightness > 0 or config.contrast > 0 or config.saturation > 0:
        out = np.clip(out, 0.0, 1.0)
    return ImageTensor(out.astype(np.float32), "raw_0_1")
