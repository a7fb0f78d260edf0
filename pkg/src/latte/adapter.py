"""Knowledge adapter: global query, KL distillation, fusion and gating."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .nn_core import DTYPE, TransformerBlock, init_parameters, kl_divergence, scaled_attention


@dataclass
class AdapterConfig:
    layers: int = 2
    heads: int = 2
    tau: float = 4.0
    eta: float = 0.5
    model_dim: int = 128
    ffn_dim: int = 256
    dropout: float = 0.1
    d_llm: int = 64  # hidden size of the knowledge-providing model

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("temperature tau must be positive")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("gate eta must lie in [0, 1]")
        if self.model_dim % self.heads != 0:
            raise ValueError("model_dim must be divisible by heads")


@dataclass
class AdapterOutput:
    q: torch.Tensor  # (B, d)
    q_llm: torch.Tensor  # (d,)
    attention: torch.Tensor  # (B, n+1)
    h_llm: torch.Tensor  # (B, d)
    h_llm_hat: torch.Tensor  # (B, d)
    kl_loss: torch.Tensor  # scalar, mean over the batch


class GatedTransform(nn.Module):
    """Two-layer feed-forward alignment map, exactly the identity at init.

    PReLU with unit slope makes the initial map linear, so g(x) = x until
    training bends it; capacity appears as the slope and weights move.
    """

    def __init__(self, dim: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim, dtype=DTYPE)
        self.act = nn.PReLU(init=1.0)
        self.fc2 = nn.Linear(dim, dim, dtype=DTYPE)
        with torch.no_grad():
            self.fc1.weight.copy_(torch.eye(dim, dtype=DTYPE))
            self.fc1.bias.zero_()
            self.fc2.weight.copy_(torch.eye(dim, dtype=DTYPE))
            self.fc2.bias.zero_()
        self.act.weight.data = self.act.weight.data.to(DTYPE)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(x)))


class KnowledgeAdapter(nn.Module):
    def __init__(self, config: AdapterConfig, generator: torch.Generator | None = None):
        super().__init__()
        self.config = config
        self.w0 = nn.Parameter(init_parameters((config.model_dim, config.d_llm), "kaiming", generator))
        self.gtransformer = nn.ModuleList(
            TransformerBlock(config.model_dim, config.heads, config.ffn_dim, config.dropout)
            for _ in range(config.layers)
        )
        self.ln_q = nn.LayerNorm(config.model_dim, dtype=DTYPE)
        self.g = GatedTransform(config.model_dim)

    def project_knowledge(self, h_m: torch.Tensor) -> torch.Tensor:
        """q_llm = W0 h_M, the teacher query in model space."""
        return self.w0 @ h_m

    def global_query(self, h_cls: torch.Tensor, h_features: torch.Tensor) -> torch.Tensor:
        """Cross-attention stack: query stream seeded by h_cls, keys/values the
        per-feature representations; returns one vector per row."""
        if h_features.shape[1] < 1:
            raise ValueError("global query needs at least one feature representation")
        x = h_cls.unsqueeze(1)
        for block in self.gtransformer:
            x = block(x, kv=h_features)
        return self.ln_q(x)[:, 0, :]

    def distill_loss(self, h_m: torch.Tensor, q: torch.Tensor, tau: float | None = None) -> torch.Tensor:
        tau = self.config.tau if tau is None else tau
        q_llm = self.project_knowledge(h_m)
        return kl_divergence(q_llm.expand_as(q), q, tau).mean()

    @staticmethod
    def knowledge_fusion(h_cls: torch.Tensor, h_features: torch.Tensor, q_llm: torch.Tensor):
        """Projection-free attention of q_llm over {h_cls} + features.

        The encoded set is used directly as keys and values so the sample's
        semantics pass through unchanged; the output is a convex combination.
        """
        stack = torch.cat([h_cls.unsqueeze(1), h_features], dim=1)  # (B, n+1, d)
        q = q_llm.reshape(1, 1, -1).expand(stack.shape[0], 1, stack.shape[-1])
        out, weights = scaled_attention(q, stack, stack)
        return out[:, 0, :], weights[:, 0, :]

    def gated_combine(self, h_llm: torch.Tensor, h_cls: torch.Tensor, eta: float | None = None):
        eta = self.config.eta if eta is None else eta
        if not 0.0 <= eta <= 1.0:
            raise ValueError("gate eta must lie in [0, 1]")
        if eta == 0.0:
            return h_cls
        if eta == 1.0:
            return self.g(h_llm)
        return eta * self.g(h_llm) + (1.0 - eta) * h_cls

    def forward(self, h_cls: torch.Tensor, h_features: torch.Tensor, h_m: torch.Tensor) -> AdapterOutput:
        q = self.global_query(h_cls, h_features)
        q_llm = self.project_knowledge(h_m)
        kl = kl_divergence(q_llm.expand_as(q), q, self.config.tau).mean()
        h_llm, attention = self.knowledge_fusion(h_cls, h_features, q_llm)
        h_llm_hat = self.gated_combine(h_llm, h_cls)
        return AdapterOutput(
            q=q, q_llm=q_llm, attention=attention, h_llm=h_llm, h_llm_hat=h_llm_hat, kl_loss=kl
        )


def adapter_forward(
    adapter: KnowledgeAdapter, h_cls, h_features, h_m, batched: bool = False
) -> AdapterOutput:
    """Convenience wrapper accepting numpy inputs; single row unless batched."""
    h_cls_t = torch.as_tensor(np.asarray(h_cls), dtype=DTYPE)
    h_feat_t = torch.as_tensor(np.asarray(h_features), dtype=DTYPE)
    h_m_t = torch.as_tensor(np.asarray(h_m), dtype=DTYPE)
    if not batched:
        h_cls_t = h_cls_t.unsqueeze(0)
        h_feat_t = h_feat_t.unsqueeze(0)
    with torch.no_grad():
        return adapter(h_cls_t, h_feat_t, h_m_t)
