"""Stage II supervised fine-tuning on the few-shot split, plus prediction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .data import CLASSIFICATION, REGRESSION, TabularDataset, denormalize_target, normalize_target
from .model import LatteModel
from .nn_core import DTYPE
from .pretrain import _substream_seed

PROB_FLOOR = 1e-12  # clamp before log, recorded in the run manifest


@dataclass
class FinetuneConfig:
    learning_rate: float = 1e-5  # backbone
    head_learning_rate: float = 1e-3  # fresh task head
    epochs: int = 300
    kl_weight: float = 1.0
    head_hidden: int = 256
    weight_decay: float = 0.0  # applied to the task head only
    patience: int = 20
    min_delta: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.head_learning_rate <= 0:
            raise ValueError("learning rates must be positive")


def supervised_loss(prediction: torch.Tensor, label, task_type: str) -> torch.Tensor:
    """Classification: -log p[y] on a probability vector. Regression: (y - yhat)^2."""
    if task_type == CLASSIFICATION:
        p = prediction[int(label)].clamp_min(PROB_FLOOR)
        return -torch.log(p)
    if task_type == REGRESSION:
        return (float(label) - prediction.reshape(())) ** 2
    raise ValueError(f"unknown task type {task_type!r}")


def _batch_loss(model: LatteModel, samples, labels, h_m, task_type, kl_weight):
    out = model.forward_rows(samples, h_m)
    raw = model.task_head(out.h_llm_hat)
    if task_type == CLASSIFICATION:
        labels_t = torch.as_tensor([int(y) for y in labels], dtype=torch.long)
        l_true = torch.nn.functional.cross_entropy(raw, labels_t)
    else:
        preds = raw[:, 0]
        targets = torch.as_tensor([float(y) for y in labels], dtype=DTYPE)
        l_true = ((targets - preds) ** 2).mean()
    return kl_weight * out.kl_loss + l_true, out.kl_loss, l_true


def finetune(
    model: LatteModel,
    dataset: TabularDataset,
    labeled_indices,
    h_m: torch.Tensor,
    config: FinetuneConfig,
):
    """Full-batch optimization of kl_weight * L_KL + L_true over the split.

    A fresh task head is attached; encoder and adapter warm-start from the
    caller's (typically Stage I) state. Early stop on training-loss plateau.
    Returns the per-epoch loss history.
    """
    samples = [dataset.labeled[i] for i in labeled_indices]
    if not samples:
        raise ValueError("few-shot split is empty")
    task_type = dataset.metadata.task_type
    if task_type == CLASSIFICATION:
        labels = [s.label for s in samples]
        out_dim = dataset.metadata.n_classes
    else:
        labels = [normalize_target(dataset.norm_stats, s.label) for s in samples]
        out_dim = 1
    gen = torch.Generator().manual_seed(_substream_seed(config.seed, "task-head"))
    model.attach_task_head(config.head_hidden, out_dim, gen)
    backbone = [p for n, p in model.named_parameters() if not n.startswith("task_head.")]
    optimizer = torch.optim.Adam(
        [
            {"params": backbone, "lr": config.learning_rate},
            {
                "params": model.task_head.parameters(),
                "lr": config.head_learning_rate,
                "weight_decay": config.weight_decay,
            },
        ]
    )
    history = []
    best = float("inf")
    stale = 0
    model.train()
    for _ in range(config.epochs):
        optimizer.zero_grad()
        loss, l_kl, l_true = _batch_loss(model, samples, labels, h_m, task_type, config.kl_weight)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"non-finite fine-tuning loss {loss.item()}")
        loss.backward()
        optimizer.step()
        history.append(
            {"L_pre": float(loss.item()), "L_KL": float(l_kl.item()), "L_true": float(l_true.item())}
        )
        if loss.item() < best - config.min_delta:
            best = loss.item()
            stale = 0
        else:
            stale += 1
            if stale > config.patience:
                break
    model.eval()
    return history


def predict(model: LatteModel, dataset: TabularDataset, rows, h_m: torch.Tensor):
    """Classification: probability vectors. Regression: de-normalized scalars.

    Pure inference: no parameter mutation, no LLM calls.
    """
    if model.task_head is None:
        raise RuntimeError("model has no task head; run fine-tuning first")
    model.eval()
    with torch.no_grad():
        out = model.forward_rows(rows, h_m)
        raw = model.task_head(out.h_llm_hat)
        if dataset.metadata.task_type == CLASSIFICATION:
            return torch.softmax(raw, dim=-1).numpy()
        preds = raw[:, 0].numpy()
        return np.array([denormalize_target(dataset.norm_stats, p) for p in preds])


def predict_normalized(model: LatteModel, rows, h_m: torch.Tensor) -> np.ndarray:
    """Regression predictions in normalized target space (metric space)."""
    model.eval()
    with torch.no_grad():
        out = model.forward_rows(rows, h_m)
        return model.task_head(out.h_llm_hat)[:, 0].numpy()
