import math

import numpy as np
import pytest
import torch

from latte.adapter import AdapterConfig
from latte.data import CLASSIFICATION, REGRESSION, Sample
from latte.embedding import HashEmbeddingProvider
from latte.encoder import EncoderConfig
from latte.finetune import (
    FinetuneConfig,
    finetune,
    predict,
    predict_normalized,
    supervised_loss,
)
from latte.model import LatteModel, SemanticRowEmbedder
from latte.nn_core import DTYPE
from conftest import build_dataset


def tiny_model(dataset, seed=0):
    torch.manual_seed(seed)
    provider = HashEmbeddingProvider(d_e=8, seed=0)
    embedder = SemanticRowEmbedder(provider, dataset.metadata, dataset.norm_stats)
    enc = EncoderConfig(model_dim=16, ffn_dim=32, layers=1, heads=2, dropout=0.0, d_e=8)
    ad = AdapterConfig(layers=1, heads=2, model_dim=16, ffn_dim=32, dropout=0.0, d_llm=6)
    return LatteModel(enc, ad, embedder)


class TestSupervisedLoss:
    def test_classification_log_prob(self):
        p = torch.tensor([0.2, 0.5, 0.3], dtype=DTYPE)
        assert supervised_loss(p, 1, CLASSIFICATION).item() == pytest.approx(-math.log(0.5))
        assert supervised_loss(p, 0, CLASSIFICATION).item() == pytest.approx(-math.log(0.2))

    def test_classification_zero_prob_is_floored(self):
        p = torch.tensor([0.0, 1.0], dtype=DTYPE)
        loss = supervised_loss(p, 0, CLASSIFICATION)
        assert torch.isfinite(loss)
        assert loss.item() == pytest.approx(-math.log(1e-12))

    def test_regression_squared_error(self):
        pred = torch.tensor([0.25], dtype=DTYPE)
        assert supervised_loss(pred, 0.75, REGRESSION).item() == pytest.approx(0.25)
        assert supervised_loss(pred, 0.25, REGRESSION).item() == pytest.approx(0.0)

    def test_unknown_task_type(self):
        with pytest.raises(ValueError):
            supervised_loss(torch.tensor([1.0], dtype=DTYPE), 0, "ranking")


class TestFinetuneClassification:
    def test_learns_separable_toy(self, binary_dataset):
        model = tiny_model(binary_dataset)
        h_m = torch.zeros(6, dtype=DTYPE)
        cfg = FinetuneConfig(
            learning_rate=1e-3, head_learning_rate=1e-2, epochs=150, kl_weight=0.0, head_hidden=32
        )
        history = finetune(model, binary_dataset, list(range(20)), h_m, cfg)
        assert history[-1]["L_true"] < history[0]["L_true"]
        probs = predict(model, binary_dataset, binary_dataset.labeled, h_m)
        acc = (probs.argmax(axis=1) == np.array([s.label for s in binary_dataset.labeled])).mean()
        assert acc == 1.0

    def test_probabilities_are_normalized(self, binary_dataset):
        model = tiny_model(binary_dataset)
        h_m = torch.zeros(6, dtype=DTYPE)
        cfg = FinetuneConfig(learning_rate=1e-4, epochs=3, head_hidden=8)
        finetune(model, binary_dataset, list(range(8)), h_m, cfg)
        probs = predict(model, binary_dataset, binary_dataset.test, h_m)
        assert probs.shape == (len(binary_dataset.test), 2)
        assert np.all(probs >= 0)
        assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-12)

    def test_empty_split_rejected(self, binary_dataset):
        model = tiny_model(binary_dataset)
        with pytest.raises(ValueError, match="empty"):
            finetune(model, binary_dataset, [], torch.zeros(6, dtype=DTYPE), FinetuneConfig())

    def test_predict_without_head_rejected(self, binary_dataset):
        model = tiny_model(binary_dataset)
        with pytest.raises(RuntimeError, match="task head"):
            predict(model, binary_dataset, binary_dataset.test, torch.zeros(6, dtype=DTYPE))

    def test_history_entries_consistent(self, binary_dataset):
        model = tiny_model(binary_dataset)
        h_m = torch.randn(6, dtype=DTYPE)
        cfg = FinetuneConfig(learning_rate=1e-4, epochs=5, kl_weight=2.0, head_hidden=8)
        history = finetune(model, binary_dataset, list(range(8)), h_m, cfg)
        for row in history:
            assert row["L_pre"] == pytest.approx(2.0 * row["L_KL"] + row["L_true"], abs=1e-9)

    def test_early_stopping_bounds_epochs(self, binary_dataset):
        model = tiny_model(binary_dataset)
        h_m = torch.zeros(6, dtype=DTYPE)
        # a tiny learning rate plateaus immediately, so patience cuts the run short
        cfg = FinetuneConfig(
            learning_rate=1e-12, head_learning_rate=1e-12, epochs=500, patience=3, head_hidden=8
        )
        history = finetune(model, binary_dataset, list(range(8)), h_m, cfg)
        assert len(history) < 500

    def test_knowledge_vector_not_mutated(self, binary_dataset):
        model = tiny_model(binary_dataset)
        h_m = torch.randn(6, dtype=DTYPE)
        original = h_m.clone()
        cfg = FinetuneConfig(learning_rate=1e-3, epochs=10, head_hidden=8)
        finetune(model, binary_dataset, list(range(8)), h_m, cfg)
        predict(model, binary_dataset, binary_dataset.test, h_m)
        assert torch.equal(h_m, original)

    def test_predict_is_pure(self, binary_dataset):
        model = tiny_model(binary_dataset)
        h_m = torch.zeros(6, dtype=DTYPE)
        finetune(model, binary_dataset, list(range(8)), h_m, FinetuneConfig(epochs=3, head_hidden=8))
        state = {k: v.clone() for k, v in model.state_dict().items()}
        a = predict(model, binary_dataset, binary_dataset.test, h_m)
        b = predict(model, binary_dataset, binary_dataset.test, h_m)
        assert np.array_equal(a, b)
        for k, v in model.state_dict().items():
            assert torch.equal(state[k], v)


class TestFinetuneRegression:
    def build(self, regression_metadata):
        rng = np.random.default_rng(0)
        labeled = []
        for _ in range(24):
            x = rng.uniform(-1, 1, size=2)
            labeled.append(
                Sample({"Length": float(x[0]), "Diameter": float(x[1])}, label=float(3 * x[0] + 10))
            )
        return build_dataset(regression_metadata, labeled, test=labeled[:8])

    def test_learns_linear_target(self, regression_metadata):
        ds = self.build(regression_metadata)
        model = tiny_model(ds)
        h_m = torch.zeros(6, dtype=DTYPE)
        cfg = FinetuneConfig(
            learning_rate=1e-3, head_learning_rate=1e-2, epochs=200, kl_weight=0.0, head_hidden=32
        )
        history = finetune(model, ds, list(range(24)), h_m, cfg)
        assert history[-1]["L_true"] < 0.02

    def test_predictions_denormalized_to_target_range(self, regression_metadata):
        ds = self.build(regression_metadata)
        model = tiny_model(ds)
        h_m = torch.zeros(6, dtype=DTYPE)
        cfg = FinetuneConfig(learning_rate=1e-3, head_learning_rate=1e-2, epochs=120, kl_weight=0.0, head_hidden=32)
        finetune(model, ds, list(range(24)), h_m, cfg)
        preds = predict(model, ds, ds.test, h_m)
        labels = np.array([s.label for s in ds.test])
        assert preds.shape == labels.shape
        # de-normalized predictions live near the raw label scale, not [0, 1]
        assert np.abs(preds - labels).mean() < 1.0
        normalized = predict_normalized(model, ds.test, h_m)
        span = ds.norm_stats.target_max - ds.norm_stats.target_min
        assert np.allclose(preds, ds.norm_stats.target_min + normalized * span, atol=1e-9)


def test_config_validation():
    with pytest.raises(ValueError):
        FinetuneConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        FinetuneConfig(head_learning_rate=-1.0)
