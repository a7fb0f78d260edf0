"""Full model assembly: row embedders, encoder, adapter and task heads."""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .adapter import AdapterConfig, AdapterOutput, KnowledgeAdapter
from .data import CATEGORICAL, Metadata, NormStats, Sample, normalize_value
from .embedding import EmbeddingProvider, embed_feature_value
from .encoder import EncoderConfig, TabularEncoder
from .nn_core import DTYPE, MLPHead


class SemanticRowEmbedder:
    """Name-aware per-cell embeddings from a text-embedding provider.

    Vectors are fixed (no gradients); a per-(feature, value) cache keeps
    repeated cells cheap. Numerical features share one name vector scaled by
    the normalized value, so only categorical cells hit the provider per value.
    """

    trainable = False

    def __init__(self, provider: EmbeddingProvider, metadata: Metadata, norm_stats: NormStats):
        self.provider = provider
        self.metadata = metadata
        self.norm_stats = norm_stats
        self.d_e = provider.d_e
        self._name_vectors = {
            f.name: provider.embed_tokens(f.name).mean(axis=0)
            for f in metadata.features
            if f.kind != CATEGORICAL
        }
        self._cat_cache: dict[tuple[str, str], np.ndarray] = {}

    def embed_rows(self, samples) -> torch.Tensor:
        out = np.empty((len(samples), len(self.metadata.features), self.d_e), dtype=np.float64)
        for i, sample in enumerate(samples):
            for j, feat in enumerate(self.metadata.features):
                value = sample.values[feat.name]
                if feat.kind == CATEGORICAL:
                    key = (feat.name, str(value))
                    vec = self._cat_cache.get(key)
                    if vec is None:
                        vec = embed_feature_value(self.provider, feat, value, self.norm_stats)
                        self._cat_cache[key] = vec
                    out[i, j] = vec
                else:
                    x = normalize_value(self.norm_stats, feat.name, value)
                    out[i, j] = self._name_vectors[feat.name] * x
        return torch.as_tensor(out, dtype=DTYPE)

    def parameters(self):
        return []


class LearnedRowEmbedder(nn.Module):
    """Semantics-free ablation embedder: one learned vector per feature index,
    plus a learned per-category vector for categorical cells. Feature names
    never reach the embedding, only positions and value identities."""

    trainable = True

    def __init__(self, metadata: Metadata, d_e: int, vocab: dict[str, list[str]]):
        super().__init__()
        self.metadata = metadata
        self.d_e = d_e
        self.feature_emb = nn.Parameter(torch.randn(len(metadata.features), d_e, dtype=DTYPE) * (1.0 / d_e**0.5))
        self._cat_index: dict[tuple[str, str], int] = {}
        n_cat = 0
        for feat in metadata.features:
            if feat.kind == CATEGORICAL:
                for value in vocab.get(feat.name, []):
                    self._cat_index[(feat.name, value)] = n_cat
                    n_cat += 1
        # final slot is the unknown-category bucket
        self.cat_emb = nn.Parameter(torch.randn(n_cat + 1, d_e, dtype=DTYPE) * (1.0 / d_e**0.5))
        self._unknown = n_cat
        self._norm_stats: NormStats | None = None

    def bind_norm_stats(self, norm_stats: NormStats) -> None:
        self._norm_stats = norm_stats

    @staticmethod
    def build_vocab(metadata: Metadata, samples) -> dict[str, list[str]]:
        vocab: dict[str, list[str]] = {}
        for feat in metadata.features:
            if feat.kind != CATEGORICAL:
                continue
            seen: dict[str, None] = {}
            for s in samples:
                seen.setdefault(str(s.values[feat.name]), None)
            vocab[feat.name] = list(seen)
        return vocab

    def embed_rows(self, samples) -> torch.Tensor:
        if self._norm_stats is None:
            raise RuntimeError("bind_norm_stats must be called before embedding rows")
        parts = []
        for sample in samples:
            row = []
            for j, feat in enumerate(self.metadata.features):
                value = sample.values[feat.name]
                if feat.kind == CATEGORICAL:
                    idx = self._cat_index.get((feat.name, str(value)), self._unknown)
                    row.append(self.feature_emb[j] + self.cat_emb[idx])
                else:
                    x = normalize_value(self._norm_stats, feat.name, value)
                    row.append(self.feature_emb[j] * x)
            parts.append(torch.stack(row))
        return torch.stack(parts)


class LatteModel(nn.Module):
    """Encoder + knowledge adapter with optional pseudo-label and task heads.

    Submodules are named ``sate`` and ``adapter`` so checkpoint records carry
    those prefixes. The learned ablation embedder (when used) lives under
    ``embedder``; the semantic embedder holds no parameters and is attached
    separately.
    """

    def __init__(
        self,
        encoder_config: EncoderConfig,
        adapter_config: AdapterConfig,
        embedder,
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        self.sate = TabularEncoder(encoder_config)
        self.adapter = KnowledgeAdapter(adapter_config, generator)
        if isinstance(embedder, nn.Module):
            self.embedder = embedder
        else:
            object.__setattr__(self, "embedder", embedder)
        self.pseudo_head: MLPHead | None = None
        self.task_head: MLPHead | None = None

    def attach_pseudo_head(self, hidden: int, k: int, generator=None) -> None:
        self.pseudo_head = MLPHead(self.sate.config.model_dim, hidden, k, generator)

    def attach_task_head(self, hidden: int, out: int, generator=None) -> None:
        self.task_head = MLPHead(self.sate.config.model_dim, hidden, out, generator)

    def encode_samples(self, samples):
        """(h_cls, h_features) for a batch of Sample objects."""
        vectors = self.embedder.embed_rows(samples)
        return self.sate(vectors)

    def forward_rows(
        self, samples, h_m: torch.Tensor, cls_mask: torch.Tensor | None = None
    ) -> AdapterOutput:
        h_cls, h_feats = self.encode_samples(samples)
        if cls_mask is not None:
            h_cls = h_cls * cls_mask
        return self.adapter(h_cls, h_feats, h_m)

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]
