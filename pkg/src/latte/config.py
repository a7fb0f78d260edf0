"""Run configuration: one structured YAML file drives the whole pipeline."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import yaml

from .adapter import AdapterConfig
from .encoder import EncoderConfig
from .finetune import FinetuneConfig
from .pretrain import CorruptionSpec, PretrainConfig
from .pipeline import VariantFlags

LAST_LAYER = -1  # alias resolved by the hidden-states backend


@dataclass
class DatasetPaths:
    data: str = ""
    metadata: str = ""
    test: str | None = None
    delimiter: str = ","


@dataclass
class KnowledgeConfig:
    file: str | None = None  # pre-extracted vector (file mode)
    layer: int = 30
    d_llm: int = 64
    model_id: str = "llama2"


@dataclass
class EmbeddingConfig:
    d_e: int = 32
    seed: int = 0
    cache_file: str | None = None


@dataclass
class EvalConfig:
    shots: tuple = (4, 8, 16)
    seeds: tuple = (0, 1, 2)
    references: dict = field(default_factory=dict)  # shot -> paper value (display only)


@dataclass
class RunConfig:
    dataset: DatasetPaths = field(default_factory=DatasetPaths)
    knowledge: KnowledgeConfig = field(default_factory=KnowledgeConfig)
    embedding: EmbeddingConfig = field(default_factory=EmbeddingConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    variant: VariantFlags = field(default_factory=VariantFlags)
    output_dir: str = "runs"

    def canonical(self) -> dict:
        """Plain nested dict for hashing and manifests."""

        def convert(obj):
            if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
                return {f.name: convert(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
            if isinstance(obj, dict):
                return {str(k): convert(v) for k, v in obj.items()}
            if isinstance(obj, (list, tuple)):
                return [convert(v) for v in obj]
            return obj

        return convert(self)


def _build(cls, doc: dict, **extra):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(doc) - names
    if unknown:
        raise ValueError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    kwargs = dict(doc)
    kwargs.update(extra)
    return cls(**kwargs)


def load_run_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        doc = yaml.safe_load(fh) or {}

    cfg = RunConfig()
    if "dataset" in doc:
        cfg.dataset = _build(DatasetPaths, doc["dataset"])
    if "knowledge" in doc:
        kdoc = dict(doc["knowledge"])
        if kdoc.get("layer") == "last":
            kdoc["layer"] = LAST_LAYER
        cfg.knowledge = _build(KnowledgeConfig, kdoc)
    if "embedding" in doc:
        cfg.embedding = _build(EmbeddingConfig, doc["embedding"])
    if "encoder" in doc:
        cfg.encoder = _build(EncoderConfig, doc["encoder"])
    if "adapter" in doc:
        cfg.adapter = _build(AdapterConfig, doc["adapter"])
    if "pretrain" in doc:
        pdoc = dict(doc["pretrain"])
        corruption = pdoc.pop("corruption", None)
        if corruption is not None:
            pdoc["corruption"] = _build(CorruptionSpec, corruption)
        cfg.pretrain = _build(PretrainConfig, pdoc)
    if "finetune" in doc:
        cfg.finetune = _build(FinetuneConfig, doc["finetune"])
    if "eval" in doc:
        edoc = dict(doc["eval"])
        if "shots" in edoc:
            edoc["shots"] = tuple(int(s) for s in edoc["shots"])
        if "seeds" in edoc:
            edoc["seeds"] = tuple(int(s) for s in edoc["seeds"])
        if "references" in edoc:
            edoc["references"] = {int(k): float(v) for k, v in edoc["references"].items()}
        cfg.eval = _build(EvalConfig, edoc)
    if "variant" in doc:
        cfg.variant = _build(VariantFlags, {k: bool(v) for k, v in doc["variant"].items()})
    if "output_dir" in doc:
        cfg.output_dir = str(doc["output_dir"])
    # keep encoder input width in lockstep with the embedding provider
    cfg.encoder = dataclasses.replace(cfg.encoder, d_e=cfg.embedding.d_e)
    cfg.adapter = dataclasses.replace(cfg.adapter, d_llm=cfg.knowledge.d_llm)
    return cfg
