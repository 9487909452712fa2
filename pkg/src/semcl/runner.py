"""Experiment orchestration: config to runs, evaluation from checkpoints, ablations.

A run directory is self-describing: its manifest embeds the full config plus
the seed, so re-evaluation regenerates the dataset and backbone without the
original config file.
"""
from __future__ import annotations

import statistics
from pathlib import Path

from .backbone import VisionBackbone
from .config import ExperimentConfig
from .core import derive_seed
from .data import ingest
from .errors import ConfigurationError, ProtocolError
from .matching import read_selection_log
from .metrics import (
    AccuracyMatrix,
    avg_acc,
    export,
    forgetting,
    last_acc,
    selection_accuracy,
)
from .serialization import load_pool, read_json, write_json
from .text import CachedEncoder, EmbeddingCache, SemanticProjector, get_encoder, task_semantics
from .training import evaluate_pool, run_protocol, split_tasks


def build_backbone(config: ExperimentConfig) -> VisionBackbone:
    bcfg = config.backbone_config()
    if config.values["backbone"]["provider"] == "toy":
        return VisionBackbone.toy(bcfg)
    return VisionBackbone.load(bcfg, config.values["backbone"]["pretrained_path"])


def build_semantics_fn(config: ExperimentConfig):
    enc_cfg = config.values["encoder"]
    if enc_cfg["cache_path"]:
        cache = EmbeddingCache.load(enc_cfg["cache_path"])
        encoder = CachedEncoder(cache)
    else:
        encoder = get_encoder(enc_cfg["name"], dim=enc_cfg["dim"])
    target = config.values["backbone"]["embed_dim"]
    projector = SemanticProjector.seeded(
        encoder.dim, target, seed=enc_cfg["projection_seed"]
    )

    def semantics_fn(class_names):
        return task_semantics(class_names, encoder, projector)

    return semantics_fn, encoder


def run_dir_for_seed(output_dir: str | Path, seed: int) -> Path:
    return Path(output_dir) / f"seed_{seed}"


def run_single(
    config: ExperimentConfig,
    seed: int,
    run_dir: Path,
    stop_after: int | None = None,
) -> dict:
    """One seeded protocol run; writes manifest, checkpoints, and metrics."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    backbone = build_backbone(config)
    semantics_fn, encoder = build_semantics_fn(config)
    dataset = ingest(config.dataset_spec())
    manifest = {
        "format": 1,
        "config": config.to_dict(),
        "seed": seed,
        "encoder": {"name": encoder.name, "dim": encoder.dim, "pooling": encoder.pooling},
        "backbone_checksum": backbone.weights_checksum(),
        "class_names": list(dataset.class_names),
    }
    write_json(run_dir / "manifest.json", manifest)
    state = run_protocol(
        config.protocol_spec(),
        config.train_config(),
        config.model_spec(),
        dataset,
        backbone,
        semantics_fn,
        run_dir,
        seed=derive_seed(seed, "protocol"),
        selection_mode=config.values["selection_mode"],
        stop_after=stop_after,
    )
    last_session = state.matrix.sessions_recorded
    records = state.records_by_session.get(last_session)
    if records is None and last_session:
        records = read_selection_log(
            run_dir / "sessions" / f"session_{last_session:03d}" / "selection_log.csv"
        )
    export(run_dir, state.matrix, records)
    summary = summarize_matrix(state.matrix, records)
    write_json(run_dir / "summary.json", summary)
    return summary


def summarize_matrix(matrix: AccuracyMatrix, records) -> dict:
    summary: dict = {"sessions": matrix.sessions_recorded}
    if matrix.complete:
        summary["last_acc"] = last_acc(matrix)
        summary["avg_acc"] = avg_acc(matrix)
        summary["forgetting"] = forgetting(matrix) if matrix.num_tasks >= 2 else None
    if records:
        summary["selection_accuracy"] = selection_accuracy(records)
    return summary


def run_experiment(config: ExperimentConfig, output_dir: str | Path | None = None) -> dict:
    """Run every configured seed and aggregate the headline metrics."""
    output_dir = Path(output_dir or config.values["output_dir"])
    output_dir.mkdir(parents=True, exist_ok=True)
    per_seed: dict[int, dict] = {}
    for seed in config.values["seeds"]:
        per_seed[seed] = run_single(config, seed, run_dir_for_seed(output_dir, seed))
    aggregate: dict[str, dict] = {}
    metric_names = ("last_acc", "avg_acc", "forgetting", "selection_accuracy")
    for name in metric_names:
        values = [s[name] for s in per_seed.values() if s.get(name) is not None]
        if values:
            aggregate[name] = {
                "mean": statistics.fmean(values),
                "std": statistics.stdev(values) if len(values) > 1 else 0.0,
            }
    result = {"seeds": {str(s): v for s, v in per_seed.items()}, "aggregate": aggregate}
    write_json(output_dir / "summary.json", result)
    return result


def evaluate_run(
    run_dir: str | Path,
    *,
    oracle_routing: bool = False,
    out_subdir: str | None = None,
    render: bool = False,
) -> dict:
    """Recompute all metrics for a run directory from its checkpoints.

    Prior bundles are frozen, so the pool restricted to the first t tasks is
    exactly the pool as it stood after session t; the whole accuracy matrix
    rebuilds from the final checkpoint. Partial runs evaluate through their
    last completed session.
    """
    run_dir = Path(run_dir)
    manifest_path = run_dir / "manifest.json"
    if not manifest_path.exists():
        raise ConfigurationError(f"{run_dir} has no manifest.json; not a run directory")
    manifest = read_json(manifest_path)
    config = ExperimentConfig.from_dict(manifest["config"])
    backbone = build_backbone(config)
    if backbone.weights_checksum() != manifest["backbone_checksum"]:
        raise ProtocolError("backbone checksum differs from the run manifest")
    dataset = ingest(config.dataset_spec())
    label_space = split_tasks(dataset.class_ids, config.protocol_spec())
    pool = load_pool(run_dir / "pool")
    if pool.num_tasks_seen == 0:
        raise ProtocolError(f"run {run_dir} has no completed sessions")

    protocol = config.protocol_spec()
    matrix = AccuracyMatrix(
        num_tasks=protocol.num_tasks,
        test_sizes={
            t: sum(dataset.num_test(c) for c in label_space.classes_for(t))
            for t in range(1, protocol.num_tasks + 1)
        },
    )
    final_records = None
    for upto in range(1, pool.num_tasks_seen + 1):
        accuracies, records = evaluate_pool(
            pool.upto(upto), backbone, dataset, label_space,
            selection_mode=config.values["selection_mode"],
            temperature=config.model_spec().temperature,
            oracle_routing=oracle_routing,
        )
        matrix.add_session(upto, accuracies)
        final_records = records
    out_dir = run_dir / (out_subdir or ("eval_oracle" if oracle_routing else "eval"))
    export(out_dir, matrix, final_records, render=render)
    summary = summarize_matrix(matrix, final_records)
    write_json(out_dir / "summary.json", summary)
    return summary


def run_ablation(config: ExperimentConfig, axis: str, output_dir: str | Path | None = None) -> dict:
    """Paired runs differing only in one component flag; returns both summaries."""
    variants = {
        "adapter": ("ablation", "use_adapter", False),
        "s-prompt": ("ablation", "use_semantic_prompt", False),
        "iqkm": ("selection_mode", None, "multi-key-only"),
    }
    if axis not in variants:
        raise ConfigurationError(
            f"unknown ablation axis {axis!r}; options: {sorted(variants)}"
        )
    output_dir = Path(output_dir or config.values["output_dir"]) / f"ablate_{axis}"
    section, key, value = variants[axis]
    base_values = config.to_dict()
    import copy

    variant_values = copy.deepcopy(base_values)
    if key is None:
        variant_values[section] = value
    else:
        variant_values[section][key] = value
    variant = ExperimentConfig.from_dict(variant_values)

    full = run_experiment(config, output_dir / "full")
    without = run_experiment(variant, output_dir / "without")
    comparison = {"axis": axis, "full": full["aggregate"], "without": without["aggregate"]}
    write_json(output_dir / "comparison.json", comparison)
    _write_comparison_table(output_dir / "comparison.csv", comparison)
    return comparison


def _write_comparison_table(path: Path, comparison: dict) -> None:
    import csv

    metrics = sorted(set(comparison["full"]) | set(comparison["without"]))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "full_mean", "full_std", "without_mean", "without_std"])
        for name in metrics:
            f = comparison["full"].get(name)
            w = comparison["without"].get(name)
            writer.writerow(
                [
                    name,
                    repr(f["mean"]) if f else "",
                    repr(f["std"]) if f else "",
                    repr(w["mean"]) if w else "",
                    repr(w["std"]) if w else "",
                ]
            )


def build_embedding_cache(
    class_names: list[str],
    encoder_name: str,
    dim: int,
    out_dir: str | Path,
    classes_per_task: int | None = None,
    order_seed: int | None = None,
) -> EmbeddingCache:
    """Precompute class templates (and task templates when a split is given)."""
    from .core import split_classes
    from .text import build_class_template, build_task_template, encode

    encoder = get_encoder(encoder_name, dim=dim)
    cache = EmbeddingCache(encoder_name=encoder.name, dim=encoder.dim, pooling=encoder.pooling)
    texts = [build_class_template(name).text for name in class_names]
    if classes_per_task:
        space = split_classes(list(range(len(class_names))), classes_per_task, order_seed)
        for task in range(1, space.num_tasks + 1):
            names = [class_names[c] for c in space.classes_for(task)]
            texts.append(build_task_template(names).text)
    for text in texts:
        cache.put(text, encode(text, encoder))
    cache.save(out_dir)
    return cache
