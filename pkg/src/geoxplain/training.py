"""Desk-scale trainer: label-smoothed cross-entropy, AdamW, early stopping on validation loss."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .classifier import TorchClassifier, ToyCNN, predict_top1_batch
from .errors import DivergenceDetected, EmptySplit
from .ingest import (
    AugmentConfig,
    DatasetManifest,
    ImageRecord,
    ImageTensor,
    PreprocessConfig,
    augment,
    load_image,
    preprocess,
    standardize,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-4
    weight_decay: float = 0.02
    label_smoothing: float = 0.1
    max_epochs: int = 300
    patience: int = 30
    batch_size: int = 32
    seed: int = 0
    val_fraction: float = 0.1

    def __post_init__(self):
        if not 0 <= self.label_smoothing < 1:
            raise ValueError("label_smoothing must lie in [0, 1)")
        for name in ("learning_rate", "max_epochs", "patience", "batch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0 or self.seed < 0:
            raise ValueError("weight_decay and seed must be non-negative")

    @classmethod
    def from_config(cls, train: dict) -> "TrainConfig":
        return cls(**train)

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class TrainReport:
    seed: int
    config_hash: str
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False
    train_accuracy: float = float("nan")
    val_accuracy: float = float("nan")
    n_train: int = 0
    n_val: int = 0

    def write(self, path: str | os.PathLike) -> None:
        """One JSON line per epoch followed by a summary line."""
        lines = [json.dumps({"type": "epoch", **e}) for e in self.epochs]
        summary = {k: v for k, v in asdict(self).items() if k != "epochs"}
        lines.append(json.dumps({"type": "summary", **summary}))
        Path(path).write_text("\n".join(lines) + "\n")


def split_train_val(records: list[ImageRecord], fraction: float, seed: int):
    """Seeded hold-out of ``floor(fraction * n)`` records for early stopping.

    With nothing held out, the training records double as validation set.
    """
    order = np.random.default_rng(seed).permutation(len(records))
    n_val = int(math.floor(fraction * len(records)))
    val = [records[i] for i in sorted(order[:n_val])]
    train = [records[i] for i in sorted(order[n_val:])]
    return train, (val or train)


def _load_raw(manifest: DatasetManifest, records, pre: PreprocessConfig) -> np.ndarray:
    raw_cfg = PreprocessConfig(pre.side, "raw_0_1", pre.mean, pre.std)
    return np.stack([preprocess(load_image(manifest.resolve(r)), raw_cfg).values for r in records])


def _batches(n, size, rng):
    order = rng.permutation(n)
    for i in range(0, n, size):
        yield order[i : i + size]


def train_classifier(
    manifest: DatasetManifest,
    config: TrainConfig = TrainConfig(),
    preprocess_config: PreprocessConfig = PreprocessConfig(),
    augment_config: AugmentConfig | None = AugmentConfig(),
    channels=(16, 32, 32),
) -> tuple[TorchClassifier, TrainReport]:
    train_records = manifest.split("train")
    counts = manifest.class_counts()["train"]
    if not train_records or min(counts) == 0:
        raise EmptySplit(f"train split needs >=1 record per class, got counts {counts}")

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    fit_recs, val_recs = split_train_val(train_records, config.val_fraction, config.seed)
    pre = preprocess_config
    x_fit = _load_raw(manifest, fit_recs, pre)
    y_fit = torch.tensor([r.label for r in fit_recs])
    x_val = torch.from_numpy(standardize(_load_raw(manifest, val_recs, pre), pre.mean, pre.std)).permute(0, 3, 1, 2)
    y_val = torch.tensor([r.label for r in val_recs])

    module = ToyCNN(manifest.num_classes, channels)
    opt = torch.optim.AdamW(module.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay)
    loss_fn = nn.CrossEntropyLoss(label_smoothing=config.label_smoothing)
    report = TrainReport(seed=config.seed, config_hash=config.digest(), n_train=len(fit_recs), n_val=len(val_recs))

    best_loss, best_state, since_best = math.inf, None, 0
    for epoch in range(config.max_epochs):
        module.train()
        total, seen = 0.0, 0
        for idx in _batches(len(fit_recs), config.batch_size, rng):
            imgs = []
            for i in idx:
                x = x_fit[i]
                if augment_config is not None:
                    x = augment(ImageTensor(x), int(rng.integers(2**31)), augment_config).values
                imgs.append(standardize(x, pre.mean, pre.std))
            xb = torch.from_numpy(np.stack(imgs)).permute(0, 3, 1, 2)
            loss = loss_fn(module(xb), y_fit[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            seen += len(idx)
        module.eval()
        with torch.no_grad():
            val_loss = float(loss_fn(module(x_val), y_val))
        if not math.isfinite(val_loss):
            raise DivergenceDetected(f"validation loss became {val_loss} at epoch {epoch}")
        report.epochs.append({"epoch": epoch, "train_loss": total / seen, "val_loss": val_loss})
        log.info("epoch %d train_loss=%.4f val_loss=%.4f", epoch, total / seen, val_loss)
        if val_loss < best_loss:
            best_loss, best_state, since_best = val_loss, copy.deepcopy(module.state_dict()), 0
            report.best_epoch = epoch
        else:
            since_best += 1
            if since_best >= config.patience:
                report.stopped_early = True
                break

    module.load_state_dict(best_state)
    model = TorchClassifier(module, manifest.num_classes, pre.side, pre.mean, pre.std)
    model.channels = tuple(channels)
    report.train_accuracy = _accuracy(model, x_fit, y_fit.tolist())
    report.val_accuracy = _accuracy(model, _load_raw(manifest, val_recs, pre), y_val.tolist())
    return model, report


def _accuracy(model, raw: np.ndarray, labels) -> float:
    preds = []
    for i in range(0, len(raw), 256):
        preds += predict_top1_batch(model, [ImageTensor(v) for v in raw[i : i + 256]])
    return float(np.mean(np.asarray(preds) == np.asarray(labels)))


def evaluate_accuracy(model, manifest: DatasetManifest, split: str, preprocess_config: PreprocessConfig) -> float:
    """Top-1 accuracy of ``model`` against the ground-truth labels of one split."""
    records = manifest.split(split)
    if not records:
        raise EmptySplit(f"split {split!r} is empty")
    return _accuracy(model, _load_raw(manifest, records, preprocess_config), [r.label for r in records])


def save_toy_classifier(model: TorchClassifier, path: str | os.PathLike) -> None:
    model.save(
        path,
        num_classes=model.num_classes,
        input_side=model.input_side,
        channels=list(getattr(model, "channels", (16, 32, 32))),
    )
