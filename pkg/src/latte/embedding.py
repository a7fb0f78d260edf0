"""Text embeddings, task-knowledge extraction and LLM-call accounting.

The framework never runs a language model in process. Token embeddings come
from an ``EmbeddingProvider`` (a deterministic hash-based stub ships for tests
and desk runs; a cached real encoder can be plugged in behind the same
contract). The task knowledge vector is the average-pooled hidden state of the
rendered metadata prompt at a chosen layer, fetched either from a
pre-extracted file or from an out-of-process hidden-states endpoint.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .data import CATEGORICAL, CLASSIFICATION, FeatureDescriptor, Metadata, NormStats, normalize_value

ENV_HIDDEN_STATES_URL = "LATTE_HIDDEN_STATES_URL"
KNOWLEDGE_TEMPLATE_ID = "knowledge-prompt-v1"
DEFAULT_KNOWLEDGE_LAYER = 30
EMPTY_TOKEN = "<empty>"


class KnowledgeSourceError(RuntimeError):
    """The knowledge vector could not be obtained or failed validation."""


class EmbeddingProvider(Protocol):
    provider_id: str
    d_e: int

    def embed_tokens(self, text: str) -> np.ndarray:  # (n_tokens, d_e)
        ...


def _stable_digest(*parts: str) -> int:
    h = hashlib.sha256("\x1f".join(parts).encode("utf-8")).digest()
    return int.from_bytes(h[:8], "little")


def stub_embed_tokens(text: str, d_e: int, seed: int) -> np.ndarray:
    """Deterministic unit-norm token vectors keyed by (token, seed).

    Whitespace tokenization; identical tokens share identical vectors within
    and across calls. Empty text yields a single sentinel-token vector.
    """
    if d_e < 1:
        raise ValueError("d_e must be >= 1")
    tokens = text.split() or [EMPTY_TOKEN]
    out = np.empty((len(tokens), d_e), dtype=np.float64)
    for i, tok in enumerate(tokens):
        rng = np.random.default_rng(_stable_digest("stub-token", tok, str(seed)))
        v = rng.standard_normal(d_e)
        out[i] = v / np.linalg.norm(v)
    return out


class HashEmbeddingProvider:
    """Test-double provider built on :func:`stub_embed_tokens`."""

    def __init__(self, d_e: int = 32, seed: int = 0):
        self.d_e = d_e
        self.seed = seed
        self.provider_id = f"hash-stub/d{d_e}/s{seed}"

    def embed_tokens(self, text: str) -> np.ndarray:
        return stub_embed_tokens(text, self.d_e, self.seed)


class EmbeddingCache:
    """In-memory embedding cache with optional append-only file persistence.

    Keys hash provider_id + text; hits return the stored vector unchanged, so
    cached and uncached call sequences are bitwise-identical.
    """

    def __init__(self, path=None):
        self.path = path
        self._store: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()
        if path is not None and os.path.exists(path):
            with open(path, "r", encoding="utf-8") as fh:
                for line in fh:
                    rec = json.loads(line)
                    self._store[rec["key"]] = np.array(rec["vector"], dtype=np.float64).reshape(
                        rec["shape"]
                    )

    @staticmethod
    def key_for(provider_id: str, text: str) -> str:
        return hashlib.sha256(f"{provider_id}\x1f{text}".encode("utf-8")).hexdigest()

    def get(self, key: str):
        return self._store.get(key)

    def put(self, key: str, vectors: np.ndarray) -> None:
        with self._lock:
            self._store[key] = vectors
            if self.path is not None:
                rec = {
                    "key": key,
                    "dim": int(vectors.shape[-1]),
                    "shape": list(vectors.shape),
                    "vector": vectors.ravel().tolist(),
                }
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(rec) + "\n")


class CachedEmbeddingProvider:
    """Wrap any provider with an :class:`EmbeddingCache`."""

    def __init__(self, provider: EmbeddingProvider, cache: EmbeddingCache | None = None):
        self.provider = provider
        self.cache = cache or EmbeddingCache()
        self.provider_id = provider.provider_id
        self.d_e = provider.d_e

    def embed_tokens(self, text: str) -> np.ndarray:
        key = EmbeddingCache.key_for(self.provider_id, text)
        hit = self.cache.get(key)
        if hit is not None:
            return hit
        vectors = self.provider.embed_tokens(text)
        self.cache.put(key, vectors)
        return vectors


def embed_feature_value(
    provider: EmbeddingProvider,
    feature: FeatureDescriptor,
    value,
    norm_stats: NormStats,
) -> np.ndarray:
    """Name-aware embedding of one cell.

    Categorical: mean token vector of "<name>: <value>". Numerical: mean token
    vector of the name alone, scaled element-wise by the normalized value.
    """
    if not feature.name:
        raise ValueError("feature name must be non-empty")
    if feature.kind == CATEGORICAL:
        return provider.embed_tokens(f"{feature.name}: {value}").mean(axis=0)
    x = normalize_value(norm_stats, feature.name, value)
    return provider.embed_tokens(feature.name).mean(axis=0) * x


def render_knowledge_prompt(metadata: Metadata) -> str:
    """Fixed, order-preserving prompt template over the task metadata."""
    lines = [f"Task: {metadata.task_description}", "Features:"]
    for feat in metadata.features:
        lines.append(f"- {feat.name}: {feat.description}")
    if metadata.task_type == CLASSIFICATION:
        lines.append("Classes: " + ", ".join(metadata.class_names))
    return "\n".join(lines)


def prompt_hash(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


@dataclass
class LlmCallCounter:
    preprocessing: int = 0
    training: int = 0
    inference: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def bump(self, stage: str) -> None:
        with self._lock:
            setattr(self, stage, getattr(self, stage) + 1)

    def snapshot(self) -> dict:
        with self._lock:
            return {
                "preprocessing": self.preprocessing,
                "training": self.training,
                "inference": self.inference,
            }


@dataclass(frozen=True, eq=False)
class KnowledgeVector:
    vector: np.ndarray  # (d_llm,)
    model_id: str
    layer: int
    prompt_hash: str
    template_id: str = KNOWLEDGE_TEMPLATE_ID

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64)
        if not np.all(np.isfinite(v)):
            raise KnowledgeSourceError("knowledge vector contains non-finite entries")
        object.__setattr__(self, "vector", v)

    @property
    def dim(self) -> int:
        return int(self.vector.shape[0])

    def __eq__(self, other):
        if not isinstance(other, KnowledgeVector):
            return NotImplemented
        return (
            np.array_equal(self.vector, other.vector)
            and (self.model_id, self.layer, self.prompt_hash, self.template_id)
            == (other.model_id, other.layer, other.prompt_hash, other.template_id)
        )


def save_knowledge_vector(kv: KnowledgeVector, path) -> None:
    doc = {
        "model_id": kv.model_id,
        "layer": kv.layer,
        "dim": kv.dim,
        "template_id": kv.template_id,
        "prompt_hash": kv.prompt_hash,
        "vector": kv.vector.tolist(),  # repr round-trips doubles exactly
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_knowledge_vector(path) -> KnowledgeVector:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    vector = np.array(doc["vector"], dtype=np.float64)
    if vector.shape[0] != int(doc["dim"]):
        raise KnowledgeSourceError(
            f"knowledge file {path}: declared dim {doc['dim']} but vector has {vector.shape[0]}"
        )
    return KnowledgeVector(
        vector=vector,
        model_id=str(doc["model_id"]),
        layer=int(doc["layer"]),
        prompt_hash=str(doc["prompt_hash"]),
        template_id=str(doc.get("template_id", KNOWLEDGE_TEMPLATE_ID)),
    )


class FileKnowledgeSource:
    """Reads a pre-extracted knowledge vector; performs no LLM calls."""

    def __init__(self, path):
        self.path = path

    def fetch(self, prompt: str, layer: int, counter: LlmCallCounter) -> KnowledgeVector:
        kv = load_knowledge_vector(self.path)
        if kv.layer != layer:
            raise KnowledgeSourceError(
                f"knowledge file holds layer {kv.layer}, requested layer {layer}"
            )
        return kv


class HttpKnowledgeSource:
    """POSTs the prompt to a hidden-states endpoint and average-pools tokens."""

    def __init__(self, url: str, model_id: str = "remote", retries: int = 3, timeout: float = 30.0):
        self.url = url.rstrip("/")
        self.model_id = model_id
        self.retries = retries
        self.timeout = timeout

    def fetch(self, prompt: str, layer: int, counter: LlmCallCounter) -> KnowledgeVector:
        import requests

        last_error = None
        for attempt in range(self.retries):
            try:
                resp = requests.post(
                    f"{self.url}/v1/hidden_states",
                    json={"prompt": prompt, "layer": layer},
                    timeout=self.timeout,
                )
                resp.raise_for_status()
                break
            except Exception as exc:  # noqa: BLE001 - transport errors wrapped below
                last_error = exc
        else:
            raise KnowledgeSourceError(
                f"hidden-states endpoint unreachable after {self.retries} attempts: {last_error}"
            )
        counter.bump("preprocessing")
        doc = resp.json()
        states = np.array(doc["hidden_states"], dtype=np.float64)
        if states.ndim != 2 or states.shape[1] != int(doc["dim"]):
            raise KnowledgeSourceError(
                f"endpoint returned hidden states of shape {states.shape}, declared dim {doc['dim']}"
            )
        return KnowledgeVector(
            vector=states.mean(axis=0),
            model_id=self.model_id,
            layer=layer,
            prompt_hash=prompt_hash(prompt),
        )


def resolve_knowledge_source(file_path=None):
    """Env var LATTE_HIDDEN_STATES_URL selects http mode; otherwise file mode."""
    url = os.environ.get(ENV_HIDDEN_STATES_URL)
    if url:
        return HttpKnowledgeSource(url)
    if file_path is None:
        raise KnowledgeSourceError(
            f"no knowledge source: set {ENV_HIDDEN_STATES_URL} or provide a vector file"
        )
    return FileKnowledgeSource(file_path)


def extract_task_knowledge(
    source,
    metadata: Metadata,
    layer: int = DEFAULT_KNOWLEDGE_LAYER,
    counter: LlmCallCounter | None = None,
) -> KnowledgeVector:
    """Render the metadata prompt and obtain its pooled hidden state."""
    counter = counter if counter is not None else LlmCallCounter()
    prompt = render_knowledge_prompt(metadata)
    kv = source.fetch(prompt, layer, counter)
    return kv
