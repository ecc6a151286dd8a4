import math
import textwrap

import numpy as np
import pytest
import torch

from geoxplain.classifier import (
    StubClassifier,
    TorchClassifier,
    ToyCNN,
    build_classifier,
    predict_proba,
    predict_top1,
)
from geoxplain.config import merge_config
from geoxplain.errors import BackendFailure, ConfigError, FatalBackendError, ShapeMismatch
from geoxplain.ingest import ImageTensor

# exp/sum of logits (2, 1, 0), evaluated with mpmath at 30 digits
SOFTMAX_210 = (0.66524095577482189, 0.24472847105479765, 0.090030573170380458)


def _x(side=8, seed=0):
    return ImageTensor(np.random.default_rng(seed).random((side, side, 3)).astype(np.float32))


def test_probabilities_sum_to_one():
    torch.manual_seed(0)
    model = TorchClassifier(ToyCNN(3, (4, 4)), 3, 8)
    assert predict_proba(model, _x()).sum() == pytest.approx(1.0, abs=1e-5)


def test_constant_logits_give_uniform():
    probs = predict_proba(StubClassifier([1.5] * 4, 8), _x())
    np.testing.assert_allclose(probs, 0.25, atol=1e-12)


def test_softmax_matches_closed_form():
    probs = predict_proba(StubClassifier([2.0, 1.0, 0.0], 8), _x())
    np.testing.assert_allclose(probs, SOFTMAX_210, atol=1e-12)


def test_top1_tie_goes_to_lowest_index():
    assert predict_top1(StubClassifier([0.0, 0.0, 0.0], 8), _x())[0] == 0


def test_top1_dominant_logit():
    k, p = predict_top1(StubClassifier([0.0, 5.0, 0.0], 8), _x())
    assert k == 1 and p == pytest.approx(math.exp(5) / (math.exp(5) + 2))


def test_top1_matches_brute_force_scan(rng):
    for _ in range(100):
        logits = rng.integers(-3, 4, size=5).astype(float)  # small ints make ties common
        best = 0
        for i in range(1, len(logits)):
            if logits[i] > logits[best]:
                best = i
        assert predict_top1(StubClassifier(logits, 8), _x())[0] == best


def test_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        predict_proba(StubClassifier([0, 0], 16), _x(8))


def test_backend_faults_are_wrapped():
    class Broken(StubClassifier):
        def logits(self, batch):
            raise RuntimeError("boom")

    with pytest.raises(BackendFailure, match="boom"):
        predict_proba(Broken([0, 0], 8), _x())


def test_inference_is_deterministic():
    torch.manual_seed(1)
    model = TorchClassifier(ToyCNN(3, (4, 4)), 3, 8)
    x = _x(seed=5)
    assert predict_proba(model, x).tobytes() == predict_proba(model, x).tobytes()


def test_raw_and_standardized_inputs_agree():
    torch.manual_seed(2)
    model = TorchClassifier(ToyCNN(3, (4, 4)), 3, 8)
    x = _x(seed=6)
    std = ImageTensor(((x.values - np.float32(model.mean)) / np.float32(model.std)).astype(np.float32), "standardized")
    np.testing.assert_allclose(predict_proba(model, x), predict_proba(model, std), atol=1e-6)


def test_registry_stub_and_errors():
    cfg = merge_config({"ingest": {"side": 8}, "classifier": {"backend": "stub", "stub_logits": [1, 2, 3]}})
    model = build_classifier(cfg, 3)
    assert isinstance(model, StubClassifier) and model.num_classes == 3
    with pytest.raises(ConfigError):
        build_classifier(cfg, 4)
    cfg["classifier"]["backend"] = "toy-cnn"
    with pytest.raises(FatalBackendError):
        build_classifier(cfg, 3)


def test_registry_loads_external_module(tmp_path):
    mod = tmp_path / "my_adapter.py"
    mod.write_text(
        textwrap.dedent(
            """
            from geoxplain.classifier import StubClassifier

            def load_classifier(weights, num_classes, input_side):
                assert weights.endswith("w.bin")
                return StubClassifier([0.0] * (num_classes - 1) + [9.0], input_side)
            """
        )
    )
    cfg = merge_config(
        {"ingest": {"side": 8}, "classifier": {"backend": "external", "external": {"module": str(mod), "weights": "w.bin"}}}
    )
    model = build_classifier(cfg, 3)
    assert predict_top1(model, _x())[0] == 2
