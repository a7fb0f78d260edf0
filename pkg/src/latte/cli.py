"""Command-line entry point: extract-knowledge, pretrain, finetune, evaluate, report."""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys

import torch

from .config import RunConfig, load_run_config
from .data import load_dataset, sample_few_shot
from .embedding import (
    ENV_HIDDEN_STATES_URL,
    EmbeddingCache,
    CachedEmbeddingProvider,
    FileKnowledgeSource,
    HashEmbeddingProvider,
    HttpKnowledgeSource,
    KnowledgeSourceError,
    LlmCallCounter,
    extract_task_knowledge,
    load_knowledge_vector,
    prompt_hash,
    render_knowledge_prompt,
    save_knowledge_vector,
)
from .evaluation import ExperimentConfig, emit_report, parse_raw_report, render_aggregate, run_experiment
from .finetune import finetune
from .nn_core import DTYPE, config_hash, load_checkpoint, save_checkpoint, state_dict_to_numpy
from .pipeline import VariantFlags, build_model, effective_configs, knowledge_tensor
from .pretrain import _substream_seed, run_pretraining

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_KNOWLEDGE = 2
EXIT_MISSING_ARTIFACT = 3
EXIT_RUNTIME = 4


class MissingArtifactError(FileNotFoundError):
    pass


def _file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


class OutputLock:
    """Single-writer lock on the output directory."""

    def __init__(self, output_dir):
        self.path = os.path.join(output_dir, ".lock")

    def __enter__(self):
        os.makedirs(os.path.dirname(self.path), exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError as exc:
            raise RuntimeError(f"output directory is locked by {self.path}") from exc
        os.close(fd)
        return self

    def __exit__(self, *exc_info):
        try:
            os.remove(self.path)
        except FileNotFoundError:
            pass


def _load_inputs(cfg: RunConfig):
    dataset = load_dataset(
        cfg.dataset.data, cfg.dataset.metadata, cfg.dataset.test, cfg.dataset.delimiter
    )
    provider = HashEmbeddingProvider(cfg.embedding.d_e, cfg.embedding.seed)
    if cfg.embedding.cache_file:
        provider = CachedEmbeddingProvider(provider, EmbeddingCache(cfg.embedding.cache_file))
    return dataset, provider


def _knowledge_path(cfg: RunConfig) -> str:
    return os.path.join(cfg.output_dir, "knowledge.json")


def _load_knowledge(cfg: RunConfig, variant: VariantFlags):
    if not variant.llm:
        return None
    for candidate in (_knowledge_path(cfg), cfg.knowledge.file):
        if candidate and os.path.exists(candidate):
            return load_knowledge_vector(candidate)
    raise MissingArtifactError(
        f"knowledge vector not found: run extract-knowledge first (expected {_knowledge_path(cfg)})"
    )


def _base_manifest(cfg: RunConfig, extra_inputs=()):
    inputs = {}
    for path in (cfg.dataset.data, cfg.dataset.metadata, cfg.dataset.test, *extra_inputs):
        if path and os.path.exists(path):
            inputs[os.path.basename(str(path))] = _file_hash(path)
    canonical = cfg.canonical()
    canonical.pop("output_dir", None)  # where artifacts land does not change what they are
    return {"config_hash": config_hash(canonical), "inputs": inputs}


def cmd_extract_knowledge(cfg: RunConfig) -> int:
    metadata_path = cfg.dataset.metadata
    if not os.path.exists(metadata_path):
        raise MissingArtifactError(f"metadata file not found: {metadata_path}")
    from .data import load_metadata

    metadata = load_metadata(metadata_path)
    prompt = render_knowledge_prompt(metadata)
    out_path = _knowledge_path(cfg)
    if os.path.exists(out_path):
        existing = load_knowledge_vector(out_path)
        if existing.prompt_hash == prompt_hash(prompt) and existing.layer == cfg.knowledge.layer:
            print(f"knowledge vector up to date: {out_path}")
            return EXIT_OK
    url = os.environ.get(ENV_HIDDEN_STATES_URL)
    if url:
        source = HttpKnowledgeSource(url, model_id=cfg.knowledge.model_id)
    elif cfg.knowledge.file and os.path.exists(cfg.knowledge.file):
        source = FileKnowledgeSource(cfg.knowledge.file)
    else:
        raise KnowledgeSourceError(
            f"no knowledge source: set {ENV_HIDDEN_STATES_URL} or point knowledge.file at a vector"
        )
    counter = LlmCallCounter()
    kv = extract_task_knowledge(source, metadata, cfg.knowledge.layer, counter)
    os.makedirs(cfg.output_dir, exist_ok=True)
    save_knowledge_vector(kv, out_path)
    with open(os.path.join(cfg.output_dir, "llm_calls.json"), "w", encoding="utf-8") as fh:
        json.dump(counter.snapshot(), fh, indent=2, sort_keys=True)
    print(
        f"knowledge vector written: {out_path}\n"
        f"  model_id={kv.model_id} layer={kv.layer} dim={kv.dim}\n"
        f"  template={kv.template_id} prompt_hash={kv.prompt_hash}\n"
        f"  llm_calls={counter.snapshot()}"
    )
    return EXIT_OK


def cmd_pretrain(cfg: RunConfig) -> int:
    dataset, provider = _load_inputs(cfg)
    knowledge = _load_knowledge(cfg, cfg.variant)
    seed = cfg.eval.seeds[0]
    adapter_cfg, pretrain_cfg, _ = effective_configs(
        cfg.adapter, cfg.pretrain, cfg.finetune, cfg.variant
    )
    h_m = knowledge_tensor(knowledge, adapter_cfg.d_llm, cfg.variant)
    model = build_model(dataset, provider, cfg.encoder, adapter_cfg, cfg.variant, seed)
    pretrain_cfg = dataclasses.replace(pretrain_cfg, seed=_substream_seed(seed, "stage1"))
    torch.manual_seed(_substream_seed(seed, "stage1-run"))
    run_pretraining(
        model,
        dataset.unlabeled,
        h_m,
        pretrain_cfg,
        loss_log_path=os.path.join(cfg.output_dir, "pretrain_losses.csv"),
    )
    model.pseudo_head = None
    manifest = _base_manifest(cfg)
    manifest.update({"stage": "pretrain", "seed": seed, "variant": cfg.variant.label()})
    path = os.path.join(cfg.output_dir, "pretrain.ckpt")
    save_checkpoint(path, state_dict_to_numpy(model), manifest)
    print(f"pretrain checkpoint written: {path}")
    return EXIT_OK


def cmd_finetune(cfg: RunConfig) -> int:
    dataset, provider = _load_inputs(cfg)
    knowledge = _load_knowledge(cfg, cfg.variant)
    seed = cfg.eval.seeds[0]
    shot = cfg.eval.shots[0]
    adapter_cfg, _, finetune_cfg = effective_configs(
        cfg.adapter, cfg.pretrain, cfg.finetune, cfg.variant
    )
    h_m = knowledge_tensor(knowledge, adapter_cfg.d_llm, cfg.variant)
    model = build_model(dataset, provider, cfg.encoder, adapter_cfg, cfg.variant, seed)
    ckpt_path = os.path.join(cfg.output_dir, "pretrain.ckpt")
    if cfg.variant.meta:
        if not os.path.exists(ckpt_path):
            raise MissingArtifactError(f"missing pretrain checkpoint: {ckpt_path}")
        tensors, _ = load_checkpoint(ckpt_path)
        model.load_state_dict({k: torch.as_tensor(v, dtype=DTYPE) for k, v in tensors.items()})
    split = sample_few_shot(dataset, shot, seed)
    finetune_cfg = dataclasses.replace(finetune_cfg, seed=_substream_seed(seed, "stage2"))
    torch.manual_seed(_substream_seed(seed, "stage2-run"))
    finetune(model, dataset, split.labeled_indices, h_m, finetune_cfg)
    manifest = _base_manifest(cfg, extra_inputs=(ckpt_path,) if cfg.variant.meta else ())
    manifest.update(
        {
            "stage": "finetune",
            "seed": seed,
            "variant": cfg.variant.label(),
            "few_shot": {"shot": shot, "seed": seed, "indices": list(split.labeled_indices)},
            "prob_floor": 1e-12,
            "knowledge": None
            if knowledge is None
            else {
                "model_id": knowledge.model_id,
                "layer": knowledge.layer,
                "prompt_hash": knowledge.prompt_hash,
                "template_id": knowledge.template_id,
                "h_m": knowledge.vector.tolist(),
            },
            "eta": adapter_cfg.eta,
            "tau": adapter_cfg.tau,
        }
    )
    path = os.path.join(cfg.output_dir, "finetune.ckpt")
    save_checkpoint(path, state_dict_to_numpy(model), manifest)
    print(f"finetune checkpoint written: {path}")
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig) -> int:
    dataset, provider = _load_inputs(cfg)
    counter = LlmCallCounter()
    knowledge = _load_knowledge(cfg, cfg.variant)
    experiment = ExperimentConfig(
        dataset=dataset,
        dataset_name=os.path.splitext(os.path.basename(cfg.dataset.data))[0],
        provider=provider,
        knowledge=knowledge,
        encoder_cfg=cfg.encoder,
        adapter_cfg=cfg.adapter,
        pretrain_cfg=cfg.pretrain,
        finetune_cfg=cfg.finetune,
        shots=tuple(cfg.eval.shots),
        seeds=tuple(cfg.eval.seeds),
        variant=cfg.variant,
        references={
            (os.path.splitext(os.path.basename(cfg.dataset.data))[0], shot): value
            for shot, value in cfg.eval.references.items()
        },
        llm_counter=counter,
    )
    report = run_experiment(experiment)
    raw_path = os.path.join(cfg.output_dir, "raw_results.csv")
    agg_path = os.path.join(cfg.output_dir, "aggregate.txt")
    llm_path = os.path.join(cfg.output_dir, "llm_calls.json")
    # fold in calls made by earlier pipeline stages (knowledge extraction)
    summary = counter.snapshot()
    if os.path.exists(llm_path):
        with open(llm_path, "r", encoding="utf-8") as fh:
            prior = json.load(fh)
        summary = {k: summary.get(k, 0) + prior.get(k, 0) for k in summary}
    report.llm_call_summary = summary
    emit_report(report, raw_path, agg_path, llm_path)
    manifest = _base_manifest(cfg)
    manifest.update({"stage": "evaluate", "variant": cfg.variant.label()})
    with open(os.path.join(cfg.output_dir, "evaluate_manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    failures = [r for r in report.results if r.value is None]
    print(f"report written: {raw_path} ({len(report.results)} cells, {len(failures)} failed)")
    if failures:
        for r in failures:
            print(f"  FAILED shot={r.shot} seed={r.seed}: {r.error}")
    return EXIT_OK


def cmd_report(cfg: RunConfig) -> int:
    raw_path = os.path.join(cfg.output_dir, "raw_results.csv")
    if not os.path.exists(raw_path):
        raise MissingArtifactError(f"missing raw results: {raw_path}")
    report = parse_raw_report(raw_path)
    agg_path = os.path.join(cfg.output_dir, "aggregate.txt")
    with open(agg_path, "w", encoding="utf-8") as fh:
        fh.write(render_aggregate(report))
    print(f"aggregate regenerated: {agg_path}")
    return EXIT_OK


COMMANDS = {
    "extract-knowledge": cmd_extract_knowledge,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="latte", description=__doc__)
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="path to the run config YAML")
    parser.add_argument("--output-dir", help="override the config output directory")
    parser.add_argument("--seeds", help="comma-separated seed override")
    parser.add_argument("--shots", help="comma-separated shot override")
    parser.add_argument(
        "--variant", help="ablation flags, e.g. sate=on,llm=off,meta=on"
    )
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        cfg = load_run_config(args.config)
        if args.output_dir:
            cfg.output_dir = args.output_dir
        if args.seeds:
            cfg.eval.seeds = tuple(int(s) for s in args.seeds.split(","))
        if args.shots:
            cfg.eval.shots = tuple(int(s) for s in args.shots.split(","))
        if args.variant:
            cfg.variant = VariantFlags.from_label(args.variant)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    os.makedirs(cfg.output_dir, exist_ok=True)
    try:
        with OutputLock(cfg.output_dir):
            return COMMANDS[args.command](cfg)
    except KnowledgeSourceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_KNOWLEDGE
    except MissingArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING_ARTIFACT
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
