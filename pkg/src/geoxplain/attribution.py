"""Attribution backends and top-p saliency thresholding."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .classifier import ACTIVATION_MAPS, INPUT_GRADIENTS, ClassifierAdapter, softmax
from .errors import BackendFailure, CapabilityMissing, ConfigError, InvalidPercentile, NonFiniteValues
from .ingest import ImageTensor, standardize, to_standardized

METHODS = ("gradcam", "gradcampp", "smoothgrad", "scorecam", "stub", "refcam", "gradient")


@dataclass(frozen=True, eq=False)
class AttributionMap:
    values: np.ndarray
    target_class: int = -1
    method: str = ""

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True, eq=False)
class SaliencyMask:
    bits: np.ndarray
    percentile_p: float

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]


def normalize_map(raw: np.ndarray, target_class: int = -1, method: str = "") -> AttributionMap:
    """Min-max rescale to [0, 1]. A constant map carries no signal and becomes all zeros."""
    values = np.asarray(raw, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise NonFiniteValues("attribution map contains NaN or inf")
    if values.size == 0 or values.max() == values.min():
        return AttributionMap(np.zeros_like(values), target_class, method)
    lo, hi = values.min(), values.max()
    return AttributionMap((values - lo) / (hi - lo), target_class, method)


def top_p_count(p: float, n_pixels: int) -> int:
    # rounding guards against p/100*n landing a hair above an integer
    return min(n_pixels, math.ceil(round(p / 100.0 * n_pixels, 9)))


def threshold_top_p(amap: AttributionMap, p: float) -> SaliencyMask:
    """Keep the ``ceil(p/100 * H*W)`` highest-valued pixels.

    Ties at the cutoff go to the lower row-major index, so masks are nested in p.
    """
    if not (isinstance(p, (int, float)) and 0 < p <= 100):
        raise InvalidPercentile(f"percentile must be in (0, 100], got {p}")
    flat = np.asarray(amap.values).ravel()
    k = top_p_count(p, flat.size)
    order = np.argsort(-flat, kind="stable")
    bits = np.zeros(flat.size, dtype=bool)
    bits[order[:k]] = True
    return SaliencyMask(bits.reshape(amap.values.shape), float(p))


# -- backends -------------------------------------------------------------------


def _upsample(cam: np.ndarray, side_hw: tuple[int, int]) -> np.ndarray:
    if cam.shape == side_hw:
        return cam.astype(np.float64)
    t = torch.from_numpy(np.ascontiguousarray(cam, dtype=np.float64))[None, None]
    return F.interpolate(t, size=side_hw, mode="bilinear", align_corners=False)[0, 0].numpy()


def _relu(a):
    return np.maximum(a, 0.0)


def gradcam_raw(model: ClassifierAdapter, x: np.ndarray, target: int) -> np.ndarray:
    """Gradient-weighted activation map: channel weights are spatially averaged gradients."""
    acts, grads = model.activations_and_gradients(x, target)
    weights = grads.mean(axis=(1, 2))
    return _relu(np.tensordot(weights, acts, axes=1))


def gradcampp_raw(model: ClassifierAdapter, x: np.ndarray, target: int) -> np.ndarray:
    acts, grads = model.activations_and_gradients(x, target)
    g2, g3 = grads**2, grads**3
    denom = 2 * g2 + acts.sum(axis=(1, 2))[:, None, None] * g3
    alpha = g2 / np.where(denom != 0, denom, 1.0)
    weights = (alpha * _relu(grads)).sum(axis=(1, 2))
    return _relu(np.tensordot(weights, acts, axes=1))


def scorecam_raw(model: ClassifierAdapter, x: np.ndarray, target: int, batch_size: int = 32) -> np.ndarray:
    acts = model.activations(x)
    hw = x.shape[:2]
    mean = np.asarray(model.mean, dtype=np.float32)
    std = np.asarray(model.std, dtype=np.float32)
    raw = x * std + mean
    masks = []
    for a in acts:
        up = _upsample(a, hw)
        lo, hi = up.min(), up.max()
        masks.append(((up - lo) / (hi - lo)) if hi > lo else np.zeros_like(up))
    scores = []
    for i in range(0, len(masks), batch_size):
        chunk = np.stack([standardize(raw * m[..., None].astype(np.float32), mean, std) for m in masks[i : i + batch_size]])
        scores.append(softmax(model.logits(chunk))[:, target])
    weights = np.concatenate(scores)
    return _relu(np.tensordot(weights, acts, axes=1))


def smoothgrad_raw(
    model: ClassifierAdapter, x: np.ndarray, target: int, noise_level: float = 0.15, n_samples: int = 25, seed: int = 0
) -> np.ndarray:
    """Average input gradients over noisy copies; pixel relevance is the max |grad| over channels."""
    rng = np.random.default_rng(seed)
    sigma = noise_level * float(x.max() - x.min())
    total = np.zeros(x.shape, dtype=np.float64)
    for _ in range(max(1, int(n_samples))):
        noisy = x if sigma == 0 else (x + rng.normal(0.0, sigma, size=x.shape)).astype(np.float32)
        total += model.input_gradient(noisy, target)
    return np.abs(total / max(1, int(n_samples))).max(axis=2)


def stub_raw(shape: tuple[int, int], kind: str = "gaussian", center=None, sigma: float = 0.15) -> np.ndarray:
    h, w = shape
    if kind == "constant":
        return np.ones(shape)
    if kind != "gaussian":
        raise ConfigError(f"unknown stub attribution kind {kind!r}")
    cy, cx = center if center is not None else ((h - 1) / 2, (w - 1) / 2)
    rows, cols = np.mgrid[0:h, 0:w]
    s = sigma * max(h, w)
    return np.exp(-((rows - cy) ** 2 + (cols - cx) ** 2) / (2 * s * s))


_NEEDS = {
    "gradcam": ACTIVATION_MAPS,
    "refcam": ACTIVATION_MAPS,
    "gradcampp": ACTIVATION_MAPS,
    "scorecam": ACTIVATION_MAPS,
    "smoothgrad": INPUT_GRADIENTS,
    "gradient": INPUT_GRADIENTS,
}


def compute_attribution(
    model: ClassifierAdapter, x: ImageTensor, target: int, method: str, params: dict | None = None
) -> AttributionMap:
    """Attribution for ``target`` at input resolution, normalized to [0, 1].

    ``params`` is the ``attribution`` config section (only the per-method
    sub-sections are read).
    """
    params = params or {}
    if method not in METHODS:
        raise ConfigError(f"unknown attribution method {method!r}")
    if method in _NEEDS and _NEEDS[method] not in model.capabilities:
        raise CapabilityMissing(f"method {method!r} needs {_NEEDS[method]!r}")
    xs = to_standardized(x, model.mean, model.std)
    hw = (x.height, x.width)
    try:
        if method == "stub":
            raw = stub_raw(hw, **params.get("stub", {}))
        elif method in ("gradcam", "refcam"):
            raw = _upsample(gradcam_raw(model, xs, target), hw)
        elif method == "gradcampp":
            raw = _upsample(gradcampp_raw(model, xs, target), hw)
        elif method == "scorecam":
            raw = _upsample(scorecam_raw(model, xs, target, **params.get("scorecam", {})), hw)
        elif method == "smoothgrad":
            raw = smoothgrad_raw(model, xs, target, **params.get("smoothgrad", {}))
        else:
            raw = smoothgrad_raw(model, xs, target, noise_level=0.0, n_samples=1)
    except (CapabilityMissing, ConfigError, TypeError):
        raise
    except Exception as exc:
        raise BackendFailure(f"attribution backend {method!r} failed: {exc}") from exc
    return normalize_map(raw, target, method)
