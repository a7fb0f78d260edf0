"""End-to-end orchestration of extract -> pretrain -> finetune -> predict."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
import torch

from .adapter import AdapterConfig
from .data import CLASSIFICATION, TabularDataset, normalize_target, sample_few_shot
from .embedding import EmbeddingProvider, KnowledgeVector, LlmCallCounter
from .encoder import EncoderConfig
from .finetune import FinetuneConfig, finetune, predict, predict_normalized
from .model import LatteModel, LearnedRowEmbedder, SemanticRowEmbedder
from .nn_core import DTYPE
from .pretrain import PretrainConfig, _substream_seed, run_pretraining


@dataclass(frozen=True)
class VariantFlags:
    """Ablation switchboard mirroring the SaTE / LLM / Meta columns."""

    sate: bool = True
    llm: bool = True
    meta: bool = True

    def label(self) -> str:
        return (
            f"sate={'on' if self.sate else 'off'},"
            f"llm={'on' if self.llm else 'off'},"
            f"meta={'on' if self.meta else 'off'}"
        )

    @staticmethod
    def from_label(label: str) -> "VariantFlags":
        parts = dict(p.split("=") for p in label.split(","))
        return VariantFlags(
            sate=parts.get("sate", "on") == "on",
            llm=parts.get("llm", "on") == "on",
            meta=parts.get("meta", "on") == "on",
        )


@dataclass
class CellResult:
    shot: int
    seed: int
    variant: VariantFlags
    scores: np.ndarray  # classification: (n_test, C) probabilities
    predictions: np.ndarray | None  # regression: normalized predictions
    test_labels: np.ndarray
    model: LatteModel
    finetune_history: list = field(default_factory=list)


def effective_configs(adapter_cfg: AdapterConfig, pretrain_cfg, finetune_cfg, variant: VariantFlags):
    """LLM-off realizes the ablation as eta=0 plus zero KL weight."""
    if variant.llm:
        return adapter_cfg, pretrain_cfg, finetune_cfg
    adapter_cfg = dataclasses.replace(adapter_cfg, eta=0.0)
    if pretrain_cfg is not None:
        pretrain_cfg = dataclasses.replace(pretrain_cfg, kl_weight=0.0)
    finetune_cfg = dataclasses.replace(finetune_cfg, kl_weight=0.0)
    return adapter_cfg, pretrain_cfg, finetune_cfg


def build_model(
    dataset: TabularDataset,
    provider: EmbeddingProvider,
    encoder_cfg: EncoderConfig,
    adapter_cfg: AdapterConfig,
    variant: VariantFlags,
    seed: int,
) -> LatteModel:
    """Deterministic model construction; the variant picks the row embedder."""
    torch.manual_seed(_substream_seed(seed, "model-init"))
    if variant.sate:
        embedder = SemanticRowEmbedder(provider, dataset.metadata, dataset.norm_stats)
        encoder_cfg = dataclasses.replace(encoder_cfg, d_e=provider.d_e)
    else:
        vocab = LearnedRowEmbedder.build_vocab(
            dataset.metadata, list(dataset.labeled) + list(dataset.unlabeled)
        )
        embedder = LearnedRowEmbedder(dataset.metadata, encoder_cfg.d_e, vocab)
        embedder.bind_norm_stats(dataset.norm_stats)
    gen = torch.Generator().manual_seed(_substream_seed(seed, "adapter-init"))
    return LatteModel(encoder_cfg, adapter_cfg, embedder, gen)


def knowledge_tensor(knowledge: KnowledgeVector | None, d_llm: int, variant: VariantFlags):
    if variant.llm and knowledge is not None:
        if knowledge.dim != d_llm:
            raise ValueError(f"knowledge dim {knowledge.dim} does not match configured d_llm {d_llm}")
        return torch.as_tensor(knowledge.vector, dtype=DTYPE)
    return torch.zeros(d_llm, dtype=DTYPE)


def run_cell(
    dataset: TabularDataset,
    provider: EmbeddingProvider,
    knowledge: KnowledgeVector | None,
    encoder_cfg: EncoderConfig,
    adapter_cfg: AdapterConfig,
    pretrain_cfg: PretrainConfig | None,
    finetune_cfg: FinetuneConfig,
    shot: int,
    seed: int,
    variant: VariantFlags = VariantFlags(),
    stage1_cache: dict | None = None,
) -> CellResult:
    """One (shot, seed, variant) cell: optional Stage I, Stage II, prediction.

    ``stage1_cache`` (keyed by (seed, variant label)) lets a shot sweep reuse
    the pretrained backbone, which does not depend on the shot.
    """
    adapter_cfg, pretrain_cfg, finetune_cfg = effective_configs(
        adapter_cfg, pretrain_cfg, finetune_cfg, variant
    )
    h_m = knowledge_tensor(knowledge, adapter_cfg.d_llm, variant)
    model = build_model(dataset, provider, encoder_cfg, adapter_cfg, variant, seed)

    if variant.meta:
        if pretrain_cfg is None:
            raise ValueError("meta variant is on but no pretrain config was given")
        if not dataset.unlabeled:
            raise ValueError("meta-pretraining needs unlabeled rows")
        pretrain_cfg = dataclasses.replace(pretrain_cfg, seed=_substream_seed(seed, "stage1"))
        cache_key = (seed, variant.label())
        cached = stage1_cache.get(cache_key) if stage1_cache is not None else None
        if cached is not None:
            model.load_state_dict(
                {k: torch.as_tensor(v, dtype=DTYPE) for k, v in cached.items()}
            )
        else:
            torch.manual_seed(_substream_seed(seed, "stage1-run"))
            run_pretraining(model, dataset.unlabeled, h_m, pretrain_cfg)
            model.pseudo_head = None  # the pseudo-label head is stage-local
            if stage1_cache is not None:
                stage1_cache[cache_key] = {
                    k: t.detach().numpy().copy() for k, t in model.state_dict().items()
                }
        model.pseudo_head = None

    split = sample_few_shot(dataset, shot, seed)
    finetune_cfg = dataclasses.replace(finetune_cfg, seed=_substream_seed(seed, "stage2"))
    torch.manual_seed(_substream_seed(seed, "stage2-run"))
    history = finetune(model, dataset, split.labeled_indices, h_m, finetune_cfg)

    test = list(dataset.test)
    if dataset.metadata.task_type == CLASSIFICATION:
        scores = predict(model, dataset, test, h_m)
        predictions = None
        test_labels = np.array([int(s.label) for s in test])
    else:
        scores = np.zeros((len(test), 0))
        predictions = predict_normalized(model, test, h_m)
        test_labels = np.array(
            [normalize_target(dataset.norm_stats, s.label) for s in test], dtype=np.float64
        )
    return CellResult(
        shot=shot,
        seed=seed,
        variant=variant,
        scores=scores,
        predictions=predictions,
        test_labels=test_labels,
        model=model,
        finetune_history=history,
    )
