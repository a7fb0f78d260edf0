"""Semantic-aware tabular encoder: CLS token + position-free transformer."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .nn_core import DTYPE, TransformerBlock


@dataclass
class EncoderConfig:
    model_dim: int = 128
    ffn_dim: int = 256
    layers: int = 2
    heads: int = 8
    dropout: float = 0.1
    d_e: int = 32  # text-embedding width fed into the input projection

    def __post_init__(self):
        if self.model_dim % self.heads != 0:
            raise ValueError("model_dim must be divisible by heads")
        if min(self.model_dim, self.ffn_dim, self.layers, self.heads, self.d_e) < 1:
            raise ValueError("all encoder dimensions must be >= 1")


@dataclass
class EncodedRow:
    h_cls: np.ndarray  # (model_dim,)
    h_features: np.ndarray  # (n, model_dim)
    feature_order: tuple[str, ...] = ()


class TabularEncoder(nn.Module):
    """Project per-feature embeddings, prepend a learned CLS vector and refine
    the set with full self-attention. No positional encoding, so the encoding
    is permutation-invariant over features."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.input_proj = nn.Linear(config.d_e, config.model_dim, dtype=DTYPE)
        self.cls = nn.Parameter(torch.zeros(config.model_dim, dtype=DTYPE))
        with torch.no_grad():
            self.cls.normal_(0.0, 0.02)
        self.blocks = nn.ModuleList(
            TransformerBlock(config.model_dim, config.heads, config.ffn_dim, config.dropout)
            for _ in range(config.layers)
        )
        self.ln_out = nn.LayerNorm(config.model_dim, dtype=DTYPE)

    def forward(self, feature_vectors: torch.Tensor):
        """feature_vectors (B, n, d_e) -> (h_cls (B, d), h_features (B, n, d))."""
        if feature_vectors.ndim != 3:
            raise ValueError("expected a (batch, features, d_e) tensor")
        if feature_vectors.shape[1] < 1:
            raise ValueError("need at least one feature vector")
        if feature_vectors.shape[2] != self.config.d_e:
            raise ValueError(
                f"feature dim {feature_vectors.shape[2]} does not match d_e {self.config.d_e}"
            )
        b = feature_vectors.shape[0]
        x = self.input_proj(feature_vectors)
        cls = self.cls.expand(b, 1, -1)
        x = torch.cat([cls, x], dim=1)
        for block in self.blocks:
            x = block(x)
        x = self.ln_out(x)
        return x[:, 0, :], x[:, 1:, :]


def encode_row(encoder: TabularEncoder, feature_vectors, feature_order=()) -> EncodedRow:
    """Encode one row given as a list of (name, vector) pairs or an (n, d_e) array."""
    if isinstance(feature_vectors, (list, tuple)) and feature_vectors and isinstance(
        feature_vectors[0], tuple
    ):
        feature_order = tuple(name for name, _ in feature_vectors)
        arr = np.stack([np.asarray(v, dtype=np.float64) for _, v in feature_vectors])
    else:
        arr = np.asarray(feature_vectors, dtype=np.float64)
    with torch.no_grad():
        h_cls, h_feats = encoder(torch.as_tensor(arr, dtype=DTYPE).unsqueeze(0))
    return EncodedRow(
        h_cls=h_cls[0].numpy(),
        h_features=h_feats[0].numpy(),
        feature_order=tuple(feature_order),
    )


def encode_batch(encoder: TabularEncoder, rows, feature_order=()) -> list[EncodedRow]:
    """Batched encode; elementwise equal to encoding each row independently."""
    arr = np.asarray(rows, dtype=np.float64)
    if arr.ndim != 3:
        raise ValueError("rows must share one schema: expected (batch, features, d_e)")
    with torch.no_grad():
        h_cls, h_feats = encoder(torch.as_tensor(arr, dtype=DTYPE))
    return [
        EncodedRow(h_cls=h_cls[i].numpy(), h_features=h_feats[i].numpy(), feature_order=tuple(feature_order))
        for i in range(arr.shape[0])
    ]
