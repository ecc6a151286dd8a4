"""Classifier adapter contract, reference adapters and prediction helpers."""

from __future__ import annotations

import importlib
import importlib.util
import os
import threading
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .errors import BackendFailure, CapabilityMissing, ConfigError, FatalBackendError, ShapeMismatch
from .ingest import ImageTensor, to_standardized

PROBABILITIES = "probabilities"
INPUT_GRADIENTS = "input_gradients"
ACTIVATION_MAPS = "activation_maps"


class ClassifierAdapter:
    """What the pipeline needs from a classifier.

    Subclasses implement :meth:`logits` over a batch of standardized HxWx3
    images. Gradient access is optional and announced through
    ``capabilities``. Adapters that cannot serve concurrent inference set
    ``thread_safe = False``; callers then go through :attr:`lock`.
    """

    num_classes: int
    input_side: int
    capabilities: frozenset = frozenset({PROBABILITIES})
    thread_safe: bool = True
    mean: tuple = (0.485, 0.456, 0.406)
    std: tuple = (0.229, 0.224, 0.225)

    def __init__(self):
        self.lock = threading.RLock()

    def logits(self, batch: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def activations_and_gradients(self, x: np.ndarray, target: int) -> tuple[np.ndarray, np.ndarray]:
        """(C, h, w) activations of the last spatial layer and d logit[target] / d activations."""
        raise CapabilityMissing(f"{type(self).__name__} does not expose activation maps")

    def activations(self, x: np.ndarray) -> np.ndarray:
        return self.activations_and_gradients(x, 0)[0]

    def input_gradient(self, x: np.ndarray, target: int) -> np.ndarray:
        """d logit[target] / d input, shaped like ``x`` (H, W, 3)."""
        raise CapabilityMissing(f"{type(self).__name__} does not expose input gradients")

    def require(self, capability: str) -> None:
        if capability not in self.capabilities:
            raise CapabilityMissing(f"{type(self).__name__} lacks capability {capability!r}")


class StubClassifier(ClassifierAdapter):
    """Pixel-blind adapter that returns the same logits for every input."""

    def __init__(self, logits: Sequence[float], input_side: int = 224):
        super().__init__()
        self.fixed = np.asarray(logits, dtype=np.float64)
        self.num_classes = len(self.fixed)
        self.input_side = input_side

    def logits(self, batch):
        return np.tile(self.fixed, (len(batch), 1))


class ToyCNN(nn.Module):
    """Small fully-convolutional classifier; the last conv block feeds the CAM."""

    def __init__(self, num_classes: int, channels: Sequence[int] = (16, 32, 32)):
        super().__init__()
        layers, c_in = [], 3
        for i, c_out in enumerate(channels):
            layers += [nn.Conv2d(c_in, c_out, 3, padding=1), nn.BatchNorm2d(c_out), nn.ReLU()]
            if i < len(channels) - 1:
                layers.append(nn.MaxPool2d(2))
            c_in = c_out
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(c_in, num_classes)

    def forward(self, x):
        a = self.features(x)
        return self.head(a.mean(dim=(2, 3)))


class TorchClassifier(ClassifierAdapter):
    """Adapter over a module with ``features`` (spatial) and ``head`` (on pooled features)."""

    capabilities = frozenset({PROBABILITIES, INPUT_GRADIENTS, ACTIVATION_MAPS})
    # backward passes share the module's parameter .grad buffers
    thread_safe = False

    def __init__(self, module: nn.Module, num_classes: int, input_side: int, mean=None, std=None):
        super().__init__()
        self.module = module.eval()
        self.num_classes = num_classes
        self.input_side = input_side
        if mean is not None:
            self.mean = tuple(mean)
        if std is not None:
            self.std = tuple(std)

    @staticmethod
    def _to_torch(batch: np.ndarray) -> torch.Tensor:
        return torch.from_numpy(np.ascontiguousarray(batch, dtype=np.float32)).permute(0, 3, 1, 2)

    def logits(self, batch):
        with torch.no_grad():
            return self.module(self._to_torch(batch)).double().numpy()

    def activations_and_gradients(self, x, target):
        inp = self._to_torch(x[None])
        acts = self.module.features(inp)
        acts.retain_grad()
        out = self.module.head(acts.mean(dim=(2, 3)))
        self.module.zero_grad(set_to_none=True)
        out[0, target].backward()
        return acts[0].detach().double().numpy(), acts.grad[0].double().numpy()

    def activations(self, x):
        with torch.no_grad():
            return self.module.features(self._to_torch(x[None]))[0].double().numpy()

    def input_gradient(self, x, target):
        inp = self._to_torch(x[None]).requires_grad_(True)
        out = self.module(inp)
        self.module.zero_grad(set_to_none=True)
        out[0, target].backward()
        return inp.grad[0].permute(1, 2, 0).double().numpy()

    def save(self, path: str | os.PathLike, **meta) -> None:
        torch.save({"state_dict": self.module.state_dict(), **meta}, path)


# -- predictions ---------------------------------------------------------------


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _batch_logits(model: ClassifierAdapter, xs: Sequence[ImageTensor]) -> np.ndarray:
    for x in xs:
        if x.height != model.input_side or x.width != model.input_side:
            raise ShapeMismatch(
                f"input is {x.height}x{x.width}, model expects {model.input_side}x{model.input_side}"
            )
    batch = np.stack([to_standardized(x, model.mean, model.std) for x in xs])
    try:
        if model.thread_safe:
            out = model.logits(batch)
        else:
            with model.lock:
                out = model.logits(batch)
    except Exception as exc:  # adapter-specific faults
        raise BackendFailure(f"{type(model).__name__}.logits failed: {exc}") from exc
    out = np.asarray(out, dtype=np.float64)
    if out.shape != (len(xs), model.num_classes):
        raise BackendFailure(f"adapter returned logits of shape {out.shape}")
    return out


def predict_proba(model: ClassifierAdapter, x: ImageTensor) -> np.ndarray:
    return softmax(_batch_logits(model, [x])[0])


def predict_proba_batch(model: ClassifierAdapter, xs: Sequence[ImageTensor]) -> np.ndarray:
    if not xs:
        return np.zeros((0, model.num_classes))
    return softmax(_batch_logits(model, xs))


def predict_top1(model: ClassifierAdapter, x: ImageTensor) -> tuple[int, float]:
    """Argmax class and its probability; ties go to the lowest class index."""
    probs = predict_proba(model, x)
    k = int(np.argmax(probs))
    return k, float(probs[k])


def predict_top1_batch(model: ClassifierAdapter, xs: Sequence[ImageTensor]) -> list[int]:
    probs = predict_proba_batch(model, xs)
    return [int(k) for k in np.argmax(probs, axis=1)]


# -- registry ----------------------------------------------------------------


def load_toy_classifier(weights: str | os.PathLike, mean=None, std=None) -> TorchClassifier:
    blob = torch.load(weights, map_location="cpu", weights_only=False)
    module = ToyCNN(blob["num_classes"], blob["channels"])
    module.load_state_dict(blob["state_dict"])
    return TorchClassifier(module, blob["num_classes"], blob["input_side"], mean, std)


def _import_path(spec: str):
    if spec.endswith(".py") or os.path.sep in spec:
        path = Path(spec)
        if not path.is_file():
            raise FatalBackendError(f"adapter module not found: {spec}")
        mod_spec = importlib.util.spec_from_file_location(f"geoxplain_ext_{path.stem}", path)
        module = importlib.util.module_from_spec(mod_spec)
        mod_spec.loader.exec_module(module)
        return module
    return importlib.import_module(spec)


def build_classifier(cfg: dict, num_classes: int | None = None) -> ClassifierAdapter:
    """Resolve ``classifier.backend`` from a full run config."""
    ccfg, ingest = cfg["classifier"], cfg["ingest"]
    side = int(ingest["side"])
    backend = ccfg["backend"]
    if backend == "stub":
        if ccfg["stub_logits"] is None:
            if num_classes is None:
                raise ConfigError("classifier.stub_logits is required for the stub backend")
            logits = [0.0] * num_classes
        else:
            logits = ccfg["stub_logits"]
        model = StubClassifier(logits, side)
    elif backend == "toy-cnn":
        weights = ccfg["weights"]
        if not weights or not os.path.isfile(weights):
            raise FatalBackendError(f"toy-cnn weights not found: {weights}")
        model = load_toy_classifier(weights, ingest["mean"], ingest["std"])
    elif backend == "external":
        ext = ccfg["external"]
        if not ext["module"]:
            raise ConfigError("classifier.external.module is required for the external backend")
        try:
            module = _import_path(ext["module"])
            model = module.load_classifier(ext["weights"], num_classes=num_classes, input_side=side)
        except FatalBackendError:
            raise
        except Exception as exc:
            raise FatalBackendError(f"external classifier failed to load: {exc}") from exc
    else:
        raise ConfigError(f"unknown classifier backend {backend!r}")
    if num_classes is not None and model.num_classes != num_classes:
        raise ConfigError(f"classifier has {model.num_classes} classes, manifest has {num_classes}")
    if model.input_side != side:
        raise ConfigError(f"classifier input side {model.input_side} != ingest.side {side}")
    return model
