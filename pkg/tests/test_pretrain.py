import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from latte.adapter import AdapterConfig
from latte.embedding import HashEmbeddingProvider
from latte.encoder import EncoderConfig
from latte.model import LatteModel, SemanticRowEmbedder
from latte.nn_core import DTYPE
from latte.pretrain import (
    ClusterAssignment,
    CorruptionSpec,
    MetaTask,
    PretrainConfig,
    TaskConstructionError,
    _substream_seed,
    build_meta_task,
    cluster_pseudo_labels,
    corrupt_representation,
    corruption_mask,
    meta_losses,
    meta_step,
    run_pretraining,
)


def tiny_model(dataset, seed=0):
    torch.manual_seed(seed)
    provider = HashEmbeddingProvider(d_e=8, seed=0)
    embedder = SemanticRowEmbedder(provider, dataset.metadata, dataset.norm_stats)
    enc = EncoderConfig(model_dim=16, ffn_dim=32, layers=1, heads=2, dropout=0.0, d_e=8)
    ad = AdapterConfig(layers=1, heads=2, model_dim=16, ffn_dim=32, dropout=0.0, d_llm=6)
    return LatteModel(enc, ad, embedder)


class TestCorruption:
    def test_mask_is_binary_and_deterministic(self):
        spec = CorruptionSpec(keep_prob=0.7, seed=3)
        a = corruption_mask(64, spec, 5)
        b = corruption_mask(64, spec, 5)
        assert np.array_equal(a, b)
        assert set(np.unique(a)) <= {0.0, 1.0}

    def test_different_draws_differ(self):
        spec = CorruptionSpec(keep_prob=0.5, seed=0)
        assert not np.array_equal(corruption_mask(64, spec, 0), corruption_mask(64, spec, 1))

    def test_keep_fraction_near_keep_prob(self):
        spec = CorruptionSpec(keep_prob=0.7, seed=0)
        masks = np.concatenate([corruption_mask(128, spec, i) for i in range(50)])
        assert masks.mean() == pytest.approx(0.7, abs=0.03)

    def test_keep_prob_one_is_identity(self):
        h = np.random.default_rng(0).standard_normal(32)
        spec = CorruptionSpec(keep_prob=1.0, seed=0)
        assert np.array_equal(corrupt_representation(h, spec, 0), h)

    def test_invalid_keep_prob(self):
        with pytest.raises(ValueError):
            CorruptionSpec(keep_prob=0.0)

    def test_corruption_zeroes_dropped_coordinates(self):
        h = np.ones(64)
        spec = CorruptionSpec(keep_prob=0.5, seed=1)
        mask = corruption_mask(64, spec, 2)
        corrupted = corrupt_representation(h, spec, 2)
        assert np.array_equal(corrupted, mask)


class TestClustering:
    def test_labels_are_nearest_centroid(self):
        rng = np.random.default_rng(0)
        reps = rng.standard_normal((60, 5))
        a = cluster_pseudo_labels(reps, 4, seed=0)
        # oracle: recompute assignments by brute-force distance
        for i, x in enumerate(reps):
            d = ((a.centroids - x) ** 2).sum(axis=1)
            assert d[a.labels[i]] == pytest.approx(d.min(), abs=1e-12)

    def test_inertia_matches_brute_force(self):
        rng = np.random.default_rng(1)
        reps = rng.standard_normal((40, 3))
        a = cluster_pseudo_labels(reps, 3, seed=0)
        manual = sum(((reps[i] - a.centroids[a.labels[i]]) ** 2).sum() for i in range(40))
        assert a.inertia == pytest.approx(manual, rel=1e-12)

    def test_inertia_history_non_increasing(self):
        for ds_seed in range(20):
            rng = np.random.default_rng(ds_seed)
            reps = rng.standard_normal((50, 4)) + rng.integers(0, 3, size=(50, 1)) * 4.0
            a = cluster_pseudo_labels(reps, 3, seed=ds_seed)
            for earlier, later in zip(a.inertia_history, a.inertia_history[1:]):
                assert later <= earlier + 1e-9

    def test_one_hot_consistency(self):
        rng = np.random.default_rng(2)
        reps = rng.standard_normal((30, 4))
        a = cluster_pseudo_labels(reps, 4, seed=0)
        assert a.one_hot.shape == (30, 4)
        assert np.array_equal(a.one_hot.sum(axis=1), np.ones(30, dtype=np.int64))
        assert np.array_equal(a.one_hot.argmax(axis=1), a.labels)

    def test_well_separated_blobs_recovered(self):
        rng = np.random.default_rng(3)
        centers = np.array([[0.0, 0.0], [50.0, 0.0], [0.0, 50.0]])
        reps = np.concatenate([c + 0.1 * rng.standard_normal((20, 2)) for c in centers])
        a = cluster_pseudo_labels(reps, 3, seed=0)
        for block in range(3):
            ids = a.labels[20 * block : 20 * (block + 1)]
            assert len(set(ids.tolist())) == 1

    def test_deterministic_in_seed(self):
        reps = np.random.default_rng(4).standard_normal((25, 3))
        a = cluster_pseudo_labels(reps, 3, seed=11)
        b = cluster_pseudo_labels(reps, 3, seed=11)
        assert np.array_equal(a.labels, b.labels)
        assert np.array_equal(a.centroids, b.centroids)

    def test_input_validation(self):
        reps = np.zeros((3, 2))
        with pytest.raises(ValueError):
            cluster_pseudo_labels(reps, 1, seed=0)
        with pytest.raises(ValueError):
            cluster_pseudo_labels(reps, 5, seed=0)

    def test_duplicate_points_do_not_crash(self):
        reps = np.zeros((10, 3))
        a = cluster_pseudo_labels(reps, 2, seed=0)
        assert a.inertia == pytest.approx(0.0, abs=1e-18)


class TestMetaTask:
    def assignment(self, counts, seed=0):
        rng = np.random.default_rng(seed)
        labels = np.concatenate([np.full(c, i) for i, c in enumerate(counts)])
        k = len(counts)
        one_hot = np.zeros((labels.size, k), dtype=np.int64)
        one_hot[np.arange(labels.size), labels] = 1
        return ClusterAssignment(
            centroids=rng.standard_normal((k, 2)),
            labels=labels,
            one_hot=one_hot,
            inertia=0.0,
        )

    def test_composition(self):
        a = self.assignment([10, 10, 10, 10])
        task = build_meta_task(a, n_way=3, k_shot=4, seed=0)
        assert len(task.sample_indices) == 12
        assert len(set(task.sample_indices)) == 12
        per_class: dict[int, int] = {}
        for idx, lab in zip(task.sample_indices, task.pseudo_labels):
            assert a.labels[idx] == lab
            per_class[lab] = per_class.get(lab, 0) + 1
        assert sorted(per_class.values()) == [4, 4, 4]
        assert len(per_class) == 3

    def test_small_clusters_ineligible(self):
        a = self.assignment([10, 2, 10, 10])
        task = build_meta_task(a, n_way=3, k_shot=5, seed=0)
        assert 1 not in set(task.pseudo_labels)

    def test_too_few_eligible_raises(self):
        a = self.assignment([10, 2, 2, 2])
        with pytest.raises(TaskConstructionError, match="only 1 clusters"):
            build_meta_task(a, n_way=2, k_shot=5, seed=0)

    def test_deterministic(self):
        a = self.assignment([8, 8, 8])
        t1 = build_meta_task(a, 2, 3, seed=5)
        t2 = build_meta_task(a, 2, 3, seed=5)
        assert t1 == t2

    @given(st.integers(0, 1000))
    @settings(max_examples=30, deadline=None)
    def test_never_reuses_a_sample(self, seed):
        a = self.assignment([6, 6, 6, 6], seed=1)
        task = build_meta_task(a, n_way=2, k_shot=3, seed=seed)
        assert len(set(task.sample_indices)) == len(task.sample_indices)


class TestMetaLosses:
    def test_uniform_head_gives_log_n_way_cross_entropy(self, binary_dataset):
        # the pseudo head starts at zero logits, so L_pseudo = ln(n_way)
        model = tiny_model(binary_dataset)
        model.attach_pseudo_head(8, 4)
        model.eval()
        samples = binary_dataset.unlabeled[:8]
        h_m = torch.randn(6, dtype=DTYPE)
        l_meta, l_kl, l_pseudo = meta_losses(model, samples, [0, 1, 2, 3] * 2, h_m, kl_weight=1.0)
        assert l_pseudo.item() == pytest.approx(math.log(4), abs=1e-12)
        assert l_meta.item() == pytest.approx(l_kl.item() + l_pseudo.item(), abs=1e-12)

    def test_kl_weight_scales_kl_term(self, binary_dataset):
        model = tiny_model(binary_dataset)
        model.attach_pseudo_head(8, 4)
        model.eval()
        samples = binary_dataset.unlabeled[:4]
        h_m = torch.randn(6, dtype=DTYPE)
        labels = [0, 1, 2, 3]
        l1, kl, pseudo = meta_losses(model, samples, labels, h_m, kl_weight=1.0)
        l2, _, _ = meta_losses(model, samples, labels, h_m, kl_weight=0.0)
        assert l2.item() == pytest.approx(pseudo.item(), abs=1e-12)
        assert l1.item() - l2.item() == pytest.approx(kl.item(), abs=1e-12)

    def test_meta_step_reduces_episode_loss(self, binary_dataset):
        model = tiny_model(binary_dataset)
        model.attach_pseudo_head(16, 2)
        model.eval()
        config = PretrainConfig(k=2, n_way=2, k_shot=4, learning_rate=1e-2)
        task = MetaTask(
            n_way=2, k_shot=4, sample_indices=tuple(range(8)), pseudo_labels=(0, 1) * 4
        )
        h_m = torch.randn(6, dtype=DTYPE)
        optimizer = torch.optim.Adam(model.trainable_parameters(), lr=config.learning_rate)
        first, _, _ = meta_step(model, optimizer, task, binary_dataset.unlabeled, h_m, config)
        for _ in range(20):
            last, _, _ = meta_step(model, optimizer, task, binary_dataset.unlabeled, h_m, config)
        assert last < first


class TestRunPretraining:
    def config(self, **kw):
        defaults = dict(
            k=2, n_way=2, k_shot=3, tasks_per_epoch=3, epochs=2, learning_rate=1e-3, seed=0
        )
        defaults.update(kw)
        return PretrainConfig(**defaults)

    def test_zero_epochs_is_noop(self, binary_dataset):
        model = tiny_model(binary_dataset)
        before = {k: v.clone() for k, v in model.state_dict().items()}
        h_m = torch.zeros(6, dtype=DTYPE)
        rows = run_pretraining(model, binary_dataset.unlabeled, h_m, self.config(epochs=0))
        assert rows == []
        # the pseudo head gets attached, but no pre-existing weight moves
        after = model.state_dict()
        for k, v in before.items():
            assert torch.equal(after[k], v)

    def test_changes_weights_and_logs_rows(self, binary_dataset, tmp_path):
        model = tiny_model(binary_dataset)
        before = {k: v.clone() for k, v in model.state_dict().items()}
        h_m = torch.randn(6, dtype=DTYPE)
        log = tmp_path / "losses.csv"
        rows = run_pretraining(model, binary_dataset.unlabeled, h_m, self.config(), log)
        assert len(rows) == 6
        assert set(rows[0]) == {"epoch", "task_index", "L_meta", "L_KL", "L_pseudo"}
        changed = any(
            not torch.equal(before[k], v) for k, v in model.state_dict().items()
        )
        assert changed
        header = log.read_text().splitlines()[0]
        assert header == "epoch,task_index,L_meta,L_KL,L_pseudo"
        for row in rows:
            assert row["L_meta"] == pytest.approx(row["L_KL"] + row["L_pseudo"], abs=1e-9)

    def test_deterministic_given_seed(self, binary_dataset):
        h_m = torch.randn(6, dtype=DTYPE)
        runs = []
        for _ in range(2):
            model = tiny_model(binary_dataset, seed=4)
            rows = run_pretraining(model, binary_dataset.unlabeled, h_m, self.config())
            runs.append((rows, {k: v.clone() for k, v in model.state_dict().items()}))
        assert runs[0][0] == runs[1][0]
        for k in runs[0][1]:
            assert torch.equal(runs[0][1][k], runs[1][1][k])

    def test_attaches_pseudo_head_once(self, binary_dataset):
        model = tiny_model(binary_dataset)
        h_m = torch.zeros(6, dtype=DTYPE)
        run_pretraining(model, binary_dataset.unlabeled, h_m, self.config(epochs=1))
        head = model.pseudo_head
        assert head is not None
        run_pretraining(model, binary_dataset.unlabeled, h_m, self.config(epochs=1))
        assert model.pseudo_head is head


def test_substream_seeds_distinct():
    seeds = {
        _substream_seed(0, "mask", 0),
        _substream_seed(0, "mask", 1),
        _substream_seed(0, "cluster", 0),
        _substream_seed(1, "mask", 0),
        _substream_seed(0, "task", 0, 0),
    }
    assert len(seeds) == 5


def test_config_validation():
    with pytest.raises(ValueError):
        PretrainConfig(k=2, n_way=3)
    with pytest.raises(ValueError):
        PretrainConfig(learning_rate=0.0)
