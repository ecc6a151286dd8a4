import sys
from pathlib import Path

import numpy as np
import pytest
import yaml

from geoxplain.synthetic import make_planted_cue_dataset
from geoxplain.training import TrainConfig, save_toy_classifier, train_classifier
from geoxplain.ingest import PreprocessConfig, load_manifest

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance():
    def record(name: str, passed: bool, detail: str = "") -> None:
        ACCEPTANCE_LINES.append(f"[{'PASS' if passed else 'FAIL'}] {name}" + (f"  ({detail})" if detail else ""))

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory) -> Path:
    out = tmp_path_factory.mktemp("tiny")
    return make_planted_cue_dataset(out, n_train_per_class=12, n_eval_per_class=4, side=32, seed=3)


@pytest.fixture(scope="session")
def tiny_weights(tiny_dataset) -> Path:
    manifest = load_manifest(tiny_dataset)
    model, _ = train_classifier(
        manifest, TrainConfig(max_epochs=3, batch_size=16), PreprocessConfig(side=32), None, (8, 8)
    )
    path = tiny_dataset.parent / "tiny.pt"
    save_toy_classifier(model, path)
    return path


@pytest.fixture
def write_config(tmp_path):
    def write(overrides: dict, name: str = "config.yaml") -> Path:
        overrides = {"run": {"output_root": str(tmp_path / "runs")}, **overrides}
        path = tmp_path / name
        path.write_text(yaml.safe_dump(overrides))
        return path

    return write


@pytest.fixture
def tiny_config(write_config, tiny_dataset, tiny_weights):
    def make(**sections) -> Path:
        base = {
            "ingest": {"manifest": str(tiny_dataset), "side": 32},
            "classifier": {"backend": "toy-cnn", "weights": str(tiny_weights), "toy_channels": [8, 8]},
            "faithfulness": {"repeats": 3},
        }
        for key, value in sections.items():
            base.setdefault(key, {}).update(value)
        return write_config(base)

    return make


@pytest.fixture(scope="session")
def cue_model(tmp_path_factory):
    """A toy CNN that has actually learned the planted cues, plus its dataset."""
    path = make_planted_cue_dataset(tmp_path_factory.mktemp("cue"), 100, 10, side=32, seed=11)
    manifest = load_manifest(path)
    model, report = train_classifier(manifest, TrainConfig(max_epochs=25, seed=0), PreprocessConfig(side=32), None, (32, 32))
    return model, manifest, path
