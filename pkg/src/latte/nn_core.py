"""Differentiable building blocks, checkpointing and a gradient-check harness.

Built on torch tensors (CPU, float64 by default). Autograd supplies the
gradients; ``grad_check`` is the independent finite-difference oracle that
every trained block must pass.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np
import torch
from torch import nn

DTYPE = torch.float64

CHECKPOINT_MAGIC = b"LATTECKPT1\n"


def scaled_attention(queries: torch.Tensor, keys: torch.Tensor, values: torch.Tensor):
    """Scaled dot-product attention.

    queries (..., m, d), keys (..., t, d), values (..., t, dv). Returns
    (outputs (..., m, dv), weights (..., m, t)); weight rows sum to 1.
    """
    if queries.shape[-1] != keys.shape[-1]:
        raise ValueError(
            f"query dim {queries.shape[-1]} does not match key dim {keys.shape[-1]}"
        )
    if keys.shape[-2] != values.shape[-2]:
        raise ValueError("need one value row per key row")
    d = queries.shape[-1]
    scores = queries @ keys.transpose(-1, -2) / d**0.5
    weights = torch.softmax(scores, dim=-1)
    return weights @ values, weights


def kl_divergence(p_logits: torch.Tensor, q_logits: torch.Tensor, tau: float) -> torch.Tensor:
    """KL(softmax(p/tau) || softmax(q/tau)) over the last axis.

    Non-negative; zero iff the tempered softmax distributions coincide.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    if p_logits.shape[-1] != q_logits.shape[-1]:
        raise ValueError("logit vectors must have equal length")
    log_p = torch.log_softmax(p_logits / tau, dim=-1)
    log_q = torch.log_softmax(q_logits / tau, dim=-1)
    return (log_p.exp() * (log_p - log_q)).sum(dim=-1)


def init_parameters(shape, scheme: str, generator: torch.Generator | None = None) -> torch.Tensor:
    """Seeded parameter initialization: kaiming N(0, 2/fan_in), xavier, zeros."""
    shape = tuple(shape)
    if scheme == "zeros":
        return torch.zeros(shape, dtype=DTYPE)
    fan_in = shape[-1] if shape else 1
    fan_out = shape[0] if shape else 1
    if scheme == "kaiming":
        std = (2.0 / fan_in) ** 0.5
    elif scheme == "xavier":
        std = (2.0 / (fan_in + fan_out)) ** 0.5
    else:
        raise ValueError(f"unknown init scheme {scheme!r}")
    return torch.randn(shape, generator=generator, dtype=DTYPE) * std


def grad_check(scalar_function, params, epsilon: float = 1e-5, max_coords: int = 50, seed: int = 0):
    """Max relative error of autograd gradients vs central finite differences.

    Checks every coordinate of each tensor, or a seeded random subset of
    ``max_coords`` coordinates for larger tensors.
    """
    params = list(params)
    for p in params:
        p.requires_grad_(True)
        if p.grad is not None:
            p.grad = None
    value = scalar_function()
    if not torch.isfinite(value):
        raise FloatingPointError(f"non-finite function value {value}")
    value.backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for p in params:
            grad = p.grad if p.grad is not None else torch.zeros_like(p)
            flat = p.view(-1)
            n = flat.numel()
            coords = (
                range(n)
                if n <= max_coords
                else sorted(rng.choice(n, size=max_coords, replace=False).tolist())
            )
            gflat = grad.view(-1)
            for i in coords:
                orig = flat[i].item()
                flat[i] = orig + epsilon
                f_plus = scalar_function().item()
                flat[i] = orig - epsilon
                f_minus = scalar_function().item()
                flat[i] = orig
                fd = (f_plus - f_minus) / (2 * epsilon)
                g = gflat[i].item()
                # floor keeps cancellation noise on near-zero coordinates from
                # dominating the relative error
                rel = abs(g - fd) / max(abs(g) + abs(fd), 1e-4)
                worst = max(worst, rel)
    for p in params:
        p.grad = None
    return worst


class MultiHeadAttention(nn.Module):
    """Multi-head attention with learned Q/K/V/O projections."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"model dim {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.wq = nn.Linear(dim, dim, dtype=DTYPE)
        self.wk = nn.Linear(dim, dim, dtype=DTYPE)
        self.wv = nn.Linear(dim, dim, dtype=DTYPE)
        self.wo = nn.Linear(dim, dim, dtype=DTYPE)

    def forward(self, x_q: torch.Tensor, x_kv: torch.Tensor) -> torch.Tensor:
        b, m, _ = x_q.shape
        t = x_kv.shape[1]
        q = self.wq(x_q).view(b, m, self.heads, self.head_dim).transpose(1, 2)
        k = self.wk(x_kv).view(b, t, self.heads, self.head_dim).transpose(1, 2)
        v = self.wv(x_kv).view(b, t, self.heads, self.head_dim).transpose(1, 2)
        out, _ = scaled_attention(q, k, v)
        out = out.transpose(1, 2).reshape(b, m, self.dim)
        return self.wo(out)


class TransformerBlock(nn.Module):
    """Pre-norm transformer block; no positional signal anywhere.

    With ``kv`` given the attention is cross-attention from the query stream
    onto the key/value stream; otherwise full self-attention.
    """

    def __init__(self, dim: int, heads: int, ffn_dim: int, dropout: float = 0.0):
        super().__init__()
        self.ln_attn = nn.LayerNorm(dim, dtype=DTYPE)
        self.ln_kv = nn.LayerNorm(dim, dtype=DTYPE)
        self.attn = MultiHeadAttention(dim, heads)
        self.ln_ffn = nn.LayerNorm(dim, dtype=DTYPE)
        self.ffn = nn.Sequential(
            nn.Linear(dim, ffn_dim, dtype=DTYPE),
            nn.GELU(),
            nn.Linear(ffn_dim, dim, dtype=DTYPE),
        )
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, kv: torch.Tensor | None = None) -> torch.Tensor:
        xn = self.ln_attn(x)
        kvn = xn if kv is None else self.ln_kv(kv)
        x = x + self.drop(self.attn(xn, kvn))
        x = x + self.drop(self.ffn(self.ln_ffn(x)))
        return x


class MLPHead(nn.Module):
    """Two-layer MLP head; the output layer starts at zero so early updates
    dominate the ranking instead of random initial logits."""

    def __init__(self, dim: int, hidden: int, out: int, generator: torch.Generator | None = None):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden, dtype=DTYPE)
        self.fc2 = nn.Linear(hidden, out, dtype=DTYPE)
        with torch.no_grad():
            self.fc1.weight.copy_(init_parameters((hidden, dim), "kaiming", generator))
            self.fc1.bias.zero_()
            self.fc2.weight.zero_()
            self.fc2.bias.zero_()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(torch.relu(self.fc1(x)))


# ---------------------------------------------------------------------------
# Checkpoint format: MAGIC, u64 manifest length, manifest JSON (sorted keys),
# then the raw little-endian tensor payloads in manifest record order.
# ---------------------------------------------------------------------------


def _canonical_json(doc) -> bytes:
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")


def config_hash(doc) -> str:
    return hashlib.sha256(_canonical_json(doc)).hexdigest()


def save_checkpoint(path, tensors: dict, manifest: dict | None = None) -> None:
    """Atomically write named float64 arrays plus a JSON manifest."""
    records = []
    payloads = []
    for name in tensors:
        arr = np.ascontiguousarray(np.asarray(tensors[name], dtype=np.float64))
        data = arr.astype("<f8", copy=False).tobytes()
        records.append({"name": name, "shape": list(arr.shape), "dtype": "<f8", "nbytes": len(data)})
        payloads.append(data)
    doc = dict(manifest or {})
    doc["records"] = records
    blob = _canonical_json(doc)
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for data in payloads:
            fh.write(data)
    import os

    os.replace(tmp, path)


def load_checkpoint(path):
    """Read a checkpoint; returns (tensors dict, manifest dict)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        (mlen,) = struct.unpack("<Q", fh.read(8))
        doc = json.loads(fh.read(mlen).decode("utf-8"))
        tensors = {}
        for rec in doc["records"]:
            data = fh.read(rec["nbytes"])
            tensors[rec["name"]] = np.frombuffer(data, dtype=rec["dtype"]).reshape(rec["shape"]).copy()
    manifest = {k: v for k, v in doc.items() if k != "records"}
    return tensors, manifest


def state_dict_to_numpy(module: nn.Module) -> dict:
    return {name: t.detach().cpu().numpy() for name, t in module.state_dict().items()}


def load_numpy_state_dict(module: nn.Module, tensors: dict) -> None:
    state = {name: torch.as_tensor(arr, dtype=DTYPE) for name, arr in tensors.items()}
    module.load_state_dict(state)
