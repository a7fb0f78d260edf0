"""Unsupervised meta-pretraining: corruption, clustering, episodic tasks."""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field

import numpy as np
import torch

from .model import LatteModel
from .nn_core import DTYPE


@dataclass(frozen=True)
class CorruptionSpec:
    keep_prob: float = 0.7
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.keep_prob <= 1.0:
            raise ValueError("keep_prob must lie in (0, 1]")


@dataclass
class ClusterAssignment:
    centroids: np.ndarray  # (k, d)
    labels: np.ndarray  # (n,) int cluster ids
    one_hot: np.ndarray  # (n, k) binary
    inertia: float
    inertia_history: list = field(default_factory=list)


@dataclass(frozen=True)
class MetaTask:
    n_way: int
    k_shot: int
    sample_indices: tuple[int, ...]  # into the unlabeled pool, N*K entries
    pseudo_labels: tuple[int, ...]  # cluster id per sample


@dataclass
class PretrainConfig:
    k: int = 4
    n_way: int = 4
    k_shot: int = 5
    tasks_per_epoch: int = 50
    epochs: int = 20
    learning_rate: float = 1e-4
    kl_weight: float = 1.0
    corruption: CorruptionSpec = field(default_factory=CorruptionSpec)
    head_hidden: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.n_way > self.k:
            raise ValueError("n_way cannot exceed the cluster count k")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")


class TaskConstructionError(RuntimeError):
    """Not enough sufficiently-populated clusters to build the episode."""


def _substream_seed(base_seed: int, purpose: str, *indices: int) -> int:
    raw = f"{base_seed}|{purpose}|" + "|".join(map(str, indices))
    return int.from_bytes(hashlib.sha256(raw.encode()).digest()[:8], "little")


def corruption_mask(dim: int, spec: CorruptionSpec, draw_index: int) -> np.ndarray:
    """Bernoulli(keep_prob) 0/1 mask, deterministic in (seed, draw_index)."""
    rng = np.random.default_rng(_substream_seed(spec.seed, "mask", draw_index))
    return (rng.random(dim) < spec.keep_prob).astype(np.float64)


def corrupt_representation(h_cls: np.ndarray, spec: CorruptionSpec, draw_index: int) -> np.ndarray:
    return h_cls * corruption_mask(h_cls.shape[-1], spec, draw_index)


def cluster_pseudo_labels(reps, k: int, seed: int) -> ClusterAssignment:
    """Lloyd's algorithm with k-means++ seeding.

    Max 100 iterations, tolerance 1e-6 on centroid movement; empty clusters
    re-seeded to the point farthest from its centroid. The objective recorded
    per iteration is non-increasing.
    """
    reps = np.asarray(reps, dtype=np.float64)
    n = reps.shape[0]
    if k < 2:
        raise ValueError("need k >= 2 clusters")
    if n < k:
        raise ValueError(f"need at least k={k} points, got {n}")
    rng = np.random.default_rng(seed)

    # k-means++ seeding
    centroids = np.empty((k, reps.shape[1]), dtype=np.float64)
    centroids[0] = reps[rng.integers(n)]
    d2 = ((reps - centroids[0]) ** 2).sum(axis=1)
    for c in range(1, k):
        total = d2.sum()
        if total <= 0:
            centroids[c] = reps[rng.integers(n)]
        else:
            centroids[c] = reps[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((reps - centroids[c]) ** 2).sum(axis=1))

    history = []
    labels = np.zeros(n, dtype=np.int64)
    for _ in range(100):
        dists = ((reps[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        labels = dists.argmin(axis=1)
        inertia = float(dists[np.arange(n), labels].sum())
        history.append(inertia)
        new_centroids = centroids.copy()
        for c in range(k):
            members = reps[labels == c]
            if len(members) == 0:
                farthest = int(dists[np.arange(n), labels].argmax())
                new_centroids[c] = reps[farthest]
            else:
                new_centroids[c] = members.mean(axis=0)
        shift = float(np.abs(new_centroids - centroids).max())
        centroids = new_centroids
        if shift < 1e-6:
            break

    dists = ((reps[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    labels = dists.argmin(axis=1)
    inertia = float(dists[np.arange(n), labels].sum())
    one_hot = np.zeros((n, k), dtype=np.int64)
    one_hot[np.arange(n), labels] = 1
    return ClusterAssignment(
        centroids=centroids, labels=labels, one_hot=one_hot, inertia=inertia, inertia_history=history
    )


def build_meta_task(assignment: ClusterAssignment, n_way: int, k_shot: int, seed: int) -> MetaTask:
    """Pick N eligible clusters and K members from each, without replacement."""
    rng = np.random.default_rng(seed)
    k = assignment.centroids.shape[0]
    eligible = [c for c in range(k) if int((assignment.labels == c).sum()) >= k_shot]
    if len(eligible) < n_way:
        raise TaskConstructionError(
            f"only {len(eligible)} clusters hold >= {k_shot} members, need {n_way}"
        )
    classes = rng.choice(len(eligible), size=n_way, replace=False)
    indices, labels = [], []
    for ci in sorted(int(c) for c in classes):
        cluster = eligible[ci]
        members = np.flatnonzero(assignment.labels == cluster)
        picked = rng.choice(len(members), size=k_shot, replace=False)
        for p in sorted(int(x) for x in picked):
            indices.append(int(members[p]))
            labels.append(int(cluster))
    return MetaTask(
        n_way=n_way, k_shot=k_shot, sample_indices=tuple(indices), pseudo_labels=tuple(labels)
    )


def meta_losses(
    model: LatteModel,
    samples,
    pseudo_labels,
    h_m: torch.Tensor,
    kl_weight: float,
    cls_mask: np.ndarray | None = None,
):
    """(L_meta, L_KL, L_pseudo) for one episode; no parameter update."""
    mask_t = None if cls_mask is None else torch.as_tensor(cls_mask, dtype=DTYPE)
    out = model.forward_rows(samples, h_m, cls_mask=mask_t)
    logits = model.pseudo_head(out.h_llm_hat)
    labels = torch.as_tensor(list(pseudo_labels), dtype=torch.long)
    l_pseudo = torch.nn.functional.cross_entropy(logits, labels)
    l_kl = out.kl_loss
    return kl_weight * l_kl + l_pseudo, l_kl, l_pseudo


def meta_step(
    model: LatteModel,
    optimizer: torch.optim.Optimizer,
    task: MetaTask,
    unlabeled,
    h_m: torch.Tensor,
    config: PretrainConfig,
    cls_mask: np.ndarray | None = None,
):
    """One optimizer update on L_meta; returns the pre-update loss values."""
    samples = [unlabeled[i] for i in task.sample_indices]
    optimizer.zero_grad()
    l_meta, l_kl, l_pseudo = meta_losses(
        model, samples, task.pseudo_labels, h_m, config.kl_weight, cls_mask
    )
    if not torch.isfinite(l_meta):
        raise FloatingPointError(
            f"non-finite meta loss {l_meta.item()} on task indices {task.sample_indices}"
        )
    l_meta.backward()
    optimizer.step()
    return float(l_meta.item()), float(l_kl.item()), float(l_pseudo.item())


def run_pretraining(
    model: LatteModel,
    unlabeled,
    h_m: torch.Tensor,
    config: PretrainConfig,
    loss_log_path=None,
):
    """Stage I loop: per epoch, corrupt + re-cluster, then episodic updates.

    Returns the per-step loss rows {epoch, task_index, L_meta, L_KL, L_pseudo}.
    Deterministic given (model init, unlabeled rows, h_m, config).
    """
    if model.pseudo_head is None:
        gen = torch.Generator().manual_seed(_substream_seed(config.seed, "pseudo-head"))
        model.attach_pseudo_head(config.head_hidden, config.k, gen)
    optimizer = torch.optim.Adam(model.trainable_parameters(), lr=config.learning_rate)
    rows = []
    for epoch in range(config.epochs):
        mask = corruption_mask(model.sate.config.model_dim, config.corruption, epoch)
        model.eval()
        with torch.no_grad():
            h_cls, _ = model.encode_samples(unlabeled)
        corrupted = h_cls.numpy() * mask
        assignment = cluster_pseudo_labels(
            corrupted, config.k, _substream_seed(config.seed, "cluster", epoch)
        )
        model.train()
        for t in range(config.tasks_per_epoch):
            try:
                task = build_meta_task(
                    assignment,
                    config.n_way,
                    config.k_shot,
                    _substream_seed(config.seed, "task", epoch, t),
                )
            except TaskConstructionError:
                continue  # degenerate clustering this epoch; skip the episode
            l_meta, l_kl, l_pseudo = meta_step(
                model, optimizer, task, unlabeled, h_m, config, cls_mask=mask
            )
            rows.append(
                {"epoch": epoch, "task_index": t, "L_meta": l_meta, "L_KL": l_kl, "L_pseudo": l_pseudo}
            )
    model.eval()
    if loss_log_path is not None and rows:
        with open(loss_log_path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
    return rows
