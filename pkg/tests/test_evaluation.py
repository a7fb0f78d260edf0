import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from latte.adapter import AdapterConfig
from latte.data import Sample
from latte.embedding import HashEmbeddingProvider, LlmCallCounter
from latte.encoder import EncoderConfig
from latte.evaluation import (
    AblationMarginError,
    ExperimentConfig,
    ExperimentReport,
    MetricResult,
    UndefinedMetricError,
    auc,
    compare_variants,
    emit_report,
    linear_regression_baseline,
    logistic_baseline,
    mse,
    multiclass_auc,
    parse_raw_report,
    render_aggregate,
    run_experiment,
)
from latte.finetune import FinetuneConfig
from latte.pipeline import VariantFlags
from latte.synthetic import make_blobs_classification, make_linear_regression_dataset
from conftest import build_dataset


def pairwise_auc(scores, labels):
    """Brute-force oracle: count positive-negative pairs, ties worth 1/2."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


class TestAuc:
    def test_perfect_and_inverted(self):
        labels = [0, 0, 1, 1]
        assert auc([0.1, 0.2, 0.8, 0.9], labels) == 1.0
        assert auc([0.9, 0.8, 0.2, 0.1], labels) == 0.0

    def test_all_tied_is_half(self):
        assert auc([0.5, 0.5, 0.5, 0.5], [0, 1, 0, 1]) == 0.5

    def test_single_class_rejected(self):
        with pytest.raises(UndefinedMetricError):
            auc([0.1, 0.9], [1, 1])

    def test_matches_pairwise_oracle_exactly(self):
        rng = np.random.default_rng(0)
        for trial in range(500):
            n = int(rng.integers(4, 30))
            labels = rng.integers(0, 2, size=n)
            if labels.min() == labels.max():
                labels[0] = 1 - labels[0]
            scores = rng.choice([0.0, 0.25, 0.5, 0.8, 1.0, rng.random()], size=n)
            assert auc(scores, labels) == pairwise_auc(scores, labels), f"trial {trial}"

    @given(st.lists(st.integers(0, 9), min_size=4, max_size=20))
    @settings(max_examples=60, deadline=None)
    def test_invariant_under_increasing_transform(self, raw):
        labels = np.array([i % 2 for i in range(len(raw))])
        scores = np.array(raw, dtype=np.float64)
        assert auc(scores, labels) == auc(np.exp(scores / 3.0), labels)

    def test_multiclass_two_class_reduces_to_auc(self):
        rng = np.random.default_rng(1)
        labels = rng.integers(0, 2, size=20)
        labels[:2] = [0, 1]
        probs = rng.random((20, 2))
        probs /= probs.sum(axis=1, keepdims=True)
        assert multiclass_auc(probs, labels) == auc(probs[:, 1], (labels == 1).astype(int))

    def test_multiclass_macro_average(self):
        probs = np.array(
            [[0.8, 0.1, 0.1], [0.1, 0.8, 0.1], [0.1, 0.1, 0.8], [0.6, 0.3, 0.1]]
        )
        labels = np.array([0, 1, 2, 0])
        expected = np.mean(
            [auc(probs[:, c], (labels == c).astype(int)) for c in range(3)]
        )
        assert multiclass_auc(probs, labels) == pytest.approx(expected, abs=1e-12)


class TestMse:
    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(2)
        preds = rng.standard_normal(37)
        targets = rng.standard_normal(37)
        manual = sum((p - t) ** 2 for p, t in zip(preds, targets)) / 37
        assert mse(preds, targets) == pytest.approx(manual, rel=1e-12)

    def test_validation(self):
        with pytest.raises(ValueError):
            mse([1.0], [1.0, 2.0])
        with pytest.raises(ValueError):
            mse([], [])

    def test_zero_for_exact(self):
        assert mse([1.0, 2.0], [1.0, 2.0]) == 0.0


class TestBaselines:
    def test_logistic_separable_reaches_perfect_auc(self):
        ds = make_blobs_classification(
            n_labeled=40, n_unlabeled=10, n_test=60, separation=6.0, noise=0.5, seed=0
        )
        value = logistic_baseline(ds, list(range(40)))
        assert value > 0.99

    def test_logistic_null_features_near_half(self, binary_metadata):
        rng = np.random.default_rng(0)
        labeled = [
            Sample(
                {
                    "Gender": "x",
                    "Age": float(rng.standard_normal()),
                    "Cholesterol": float(rng.standard_normal()),
                },
                label=i % 2,
            )
            for i in range(60)
        ]
        test = [
            Sample(
                {
                    "Gender": "x",
                    "Age": float(rng.standard_normal()),
                    "Cholesterol": float(rng.standard_normal()),
                },
                label=i % 2,
            )
            for i in range(200)
        ]
        ds = build_dataset(binary_metadata, labeled, test=test)
        value = logistic_baseline(ds, list(range(60)))
        assert abs(value - 0.5) < 0.15

    def test_logistic_duplication_invariant(self):
        ds = make_blobs_classification(
            n_labeled=20, n_unlabeled=10, n_test=40, separation=3.0, noise=1.0, seed=1
        )
        once = logistic_baseline(ds, list(range(20)))
        twice = logistic_baseline(ds, list(range(20)) * 2)
        assert once == pytest.approx(twice, abs=1e-6)

    def test_logistic_single_class_rejected(self):
        ds = make_blobs_classification(n_labeled=20, n_unlabeled=5, n_test=10, seed=0)
        only_zero = [i for i in range(20) if ds.labeled[i].label == 0]
        with pytest.raises(UndefinedMetricError):
            logistic_baseline(ds, only_zero)

    def test_ridge_recovers_linear_target(self):
        ds = make_linear_regression_dataset(
            n_labeled=60, n_unlabeled=10, n_test=80, noise=0.01, seed=0
        )
        value = linear_regression_baseline(ds, list(range(60)))
        assert value < 0.01


class TestAggregateAndReports:
    def make_report(self):
        rep = ExperimentReport()
        for seed, value in enumerate([1.0, 2.0, 3.0]):
            rep.results.append(
                MetricResult("auc", value, shot=4, seed=seed, dataset="toy", variant="full")
            )
        rep.results.append(
            MetricResult("auc", None, shot=8, seed=0, dataset="toy", variant="full", error="Boom: x")
        )
        rep.results.append(
            MetricResult("auc", 0.75, shot=8, seed=1, dataset="toy", variant="full")
        )
        return rep

    def test_aggregate_population_std(self):
        agg = self.make_report().aggregate()
        mean, std, n = agg[("toy", 4, "full", "auc")]
        assert mean == pytest.approx(2.0)
        assert std == pytest.approx(np.sqrt(2.0 / 3.0))
        assert n == 3

    def test_single_value_has_no_std(self):
        agg = self.make_report().aggregate()
        mean, std, n = agg[("toy", 8, "full", "auc")]
        assert std is None and n == 1

    def test_render_mean_pm_std(self):
        text = render_aggregate(self.make_report())
        assert "shot 4: 2.00 ± 0.82" in text
        assert "(n=1)" in text

    def test_reference_is_display_only(self):
        rep = self.make_report()
        rep.references[("toy", 4)] = 0.99
        text = render_aggregate(rep)
        assert "reference=0.99" in text

    def test_emit_parse_roundtrip(self, tmp_path):
        rep = self.make_report()
        rep.llm_call_summary = {"preprocessing": 1, "training": 0, "inference": 0}
        raw = tmp_path / "raw.csv"
        agg = tmp_path / "agg.txt"
        llm = tmp_path / "llm.json"
        emit_report(rep, raw, agg, llm)
        back = parse_raw_report(raw)
        assert len(back.results) == len(rep.results)
        for a, b in zip(back.results, rep.results):
            assert (a.value is None) == (b.value is None)
            if a.value is not None:
                assert a.value == b.value  # repr round-trips doubles exactly
            assert a.error == b.error
        import json

        assert json.loads(llm.read_text()) == rep.llm_call_summary

    def test_emit_empty_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            emit_report(ExperimentReport(), tmp_path / "r.csv", tmp_path / "a.txt")


def fast_experiment_config(**kw):
    ds = make_blobs_classification(
        n_labeled=24, n_unlabeled=40, n_test=40, n_features=3, separation=4.0, seed=0
    )
    defaults = dict(
        dataset=ds,
        dataset_name="blobs",
        provider=HashEmbeddingProvider(d_e=8, seed=0),
        knowledge=None,
        encoder_cfg=EncoderConfig(model_dim=16, ffn_dim=32, layers=1, heads=2, dropout=0.0, d_e=8),
        adapter_cfg=AdapterConfig(layers=1, heads=2, model_dim=16, ffn_dim=32, dropout=0.0, d_llm=6),
        pretrain_cfg=None,
        finetune_cfg=FinetuneConfig(
            learning_rate=1e-3, head_learning_rate=1e-2, epochs=60, kl_weight=0.0, head_hidden=16
        ),
        shots=(4,),
        seeds=(0, 1),
        variant=VariantFlags(meta=False, llm=False),
    )
    defaults.update(kw)
    return ExperimentConfig(**defaults)


class TestRunExperiment:
    def test_sweep_produces_one_row_per_cell(self):
        report = run_experiment(fast_experiment_config(shots=(2, 4), seeds=(0, 1)))
        assert len(report.results) == 4
        cells = {(r.shot, r.seed) for r in report.results}
        assert cells == {(2, 0), (2, 1), (4, 0), (4, 1)}
        for r in report.results:
            assert r.error == ""
            assert 0.0 <= r.value <= 1.0

    def test_cell_failure_recorded_not_raised(self):
        cfg = fast_experiment_config()
        cfg.adapter_cfg = AdapterConfig(
            layers=1, heads=2, model_dim=16, ffn_dim=32, dropout=0.0, d_llm=6, tau=1.0
        )
        # force a failure by requesting the meta stage with no pretrain config
        cfg.variant = VariantFlags(meta=True, llm=False)
        report = run_experiment(cfg)
        assert all(r.value is None for r in report.results)
        assert all("pretrain" in r.error for r in report.results)

    def test_llm_counter_snapshot_attached(self):
        counter = LlmCallCounter()
        counter.bump("preprocessing")
        report = run_experiment(fast_experiment_config(llm_counter=counter))
        assert report.llm_call_summary == {"preprocessing": 1, "training": 0, "inference": 0}

    def test_compare_variants_margin_failure_lists_seeds(self):
        cfg = fast_experiment_config(seeds=(0, 1))
        with pytest.raises(AblationMarginError) as err:
            # both variants are identical, so any positive margin must fail
            compare_variants(
                cfg,
                VariantFlags(meta=False, llm=False),
                VariantFlags(meta=False, llm=False),
                min_margin=0.05,
            )
        message = str(err.value)
        assert "s0=" in message and "s1=" in message
        assert "margin" in message
