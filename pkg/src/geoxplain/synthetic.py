"""Planted-cue benchmark: the class is decided by one small saturated object on muted clutter."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .ingest import DatasetManifest, ImageRecord, save_image, write_manifest

CLASS_NAMES = ["red-disk", "green-triangle", "blue-diamond"]
# quantization bins [0,.25) and [.75,1] keep cues apart from the muted clutter
_CUE_RGB = np.array([[0.88, 0.12, 0.12], [0.12, 0.85, 0.12], [0.12, 0.18, 0.88]])


def _muted(rng) -> np.ndarray:
    # channels in [0.3, 0.45] or [0.55, 0.7], away from the 0.5 bin edge
    lo = rng.random(3) < 0.5
    return np.where(lo, rng.uniform(0.30, 0.45, 3), rng.uniform(0.55, 0.70, 3))


def _mondrian(img, rng, r0, r1, c0, c1, min_side):
    h, w = r1 - r0, c1 - c0
    if (h < 2 * min_side and w < 2 * min_side) or (rng.random() < 0.15 and h * w < 16 * min_side**2):
        img[r0:r1, c0:c1] = _muted(rng)
        return
    if h >= w and h >= 2 * min_side:
        cut = int(rng.integers(r0 + min_side, r1 - min_side + 1))
        _mondrian(img, rng, r0, cut, c0, c1, min_side)
        _mondrian(img, rng, cut, r1, c0, c1, min_side)
    else:
        cut = int(rng.integers(c0 + min_side, c1 - min_side + 1))
        _mondrian(img, rng, r0, r1, c0, cut, min_side)
        _mondrian(img, rng, r0, r1, cut, c1, min_side)


def _shape_mask(kind: int, side: int, size: int, r: int, c: int) -> np.ndarray:
    rows, cols = np.mgrid[0:side, 0:side]
    dy, dx = rows - r, cols - c
    half = size / 2.0
    if kind == 0:  # disk
        return dy**2 + dx**2 <= half**2
    if kind == 1:  # upward triangle
        return (dy >= -half) & (dy <= half) & (np.abs(dx) <= (dy + half) / 2.0)
    return np.abs(dy) + np.abs(dx) <= half  # diamond


def cue_mask(label: int, side: int, size: int, r: int, c: int) -> np.ndarray:
    return _shape_mask(label, side, size, r, c)


def render_image(label: int, side: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Return (raw [0,1] image, boolean cue mask)."""
    img = np.zeros((side, side, 3))
    _mondrian(img, rng, 0, side, 0, side, max(3, side // 10))
    # muted distractor shapes with the same silhouettes as the cues
    for _ in range(int(rng.integers(2, 5))):
        size = int(rng.integers(side // 8, side // 4))
        r, c = (int(v) for v in rng.integers(size // 2 + 1, side - size // 2 - 1, 2))
        img[_shape_mask(int(rng.integers(3)), side, size, r, c)] = _muted(rng)
    size = int(rng.integers(max(5, side // 6), max(6, side // 4) + 1))
    r, c = (int(v) for v in rng.integers(size // 2 + 1, side - size // 2 - 1, 2))
    mask = cue_mask(label, side, size, r, c)
    img[mask] = np.clip(_CUE_RGB[label] + rng.uniform(-0.05, 0.05, 3), 0, 1)
    return img, mask


def make_planted_cue_dataset(
    out_dir: str | os.PathLike, n_train_per_class: int = 200, n_eval_per_class: int = 100, side: int = 64, seed: int = 0
) -> Path:
    """Write PNGs, ``manifest.jsonl`` and ``cues.npz`` (eval cue masks) to ``out_dir``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    records, cues = [], {}
    for split, per_class in (("train", n_train_per_class), ("eval", n_eval_per_class)):
        for i in range(per_class * len(CLASS_NAMES)):
            label = i % len(CLASS_NAMES)
            img, mask = render_image(label, side, rng)
            rid = f"{split}-{i:05d}"
            save_image(img, out / "images" / f"{rid}.png")
            records.append(ImageRecord(rid, f"images/{rid}.png", label, split, CLASS_NAMES[label]))
            if split == "eval":
                cues[rid] = mask
    manifest = DatasetManifest(len(CLASS_NAMES), list(CLASS_NAMES), records)
    path = out / "manifest.jsonl"
    write_manifest(manifest, path)
    np.savez_compressed(out / "cues.npz", **cues)
    return path
