"""Class-incremental training: one frozen-backbone session per task.

Each session builds a fresh bundle (prompts, keys, adapters, classifier),
trains it jointly on the summed objective with ground-truth task routing,
computes class prototypes from frozen-path query features, freezes the
bundle, and appends it to the pool. Selection (query-key matching) is used
only at evaluation time; training never consults it and never reads samples
outside the current task's classes.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import VisionBackbone, init_adapter
from .core import LabelSpace, PromptPool, TaskBundle, derive_seed, split_classes
from .data import IndexedDataset
from .errors import ConfigurationError, DataError, EmptyClassError, NumericalError, ProtocolError
from .losses import ContrastConfig, LossRecord, semantic_contrast_loss_batch, total_loss, write_loss_log
from .matching import SelectionRecord, multi_key_loss_batch, select_task, write_selection_log
from .metrics import AccuracyMatrix
from .serialization import bundle_checksum, save_pool, write_json


@dataclass
class ProtocolSpec:
    """How the class set splits into an incremental task sequence."""

    total_classes: int
    classes_per_task: int
    order_seed: int | None = None

    def __post_init__(self):
        if self.total_classes <= 0 or self.classes_per_task <= 0:
            raise ConfigurationError("class counts must be positive")
        if self.total_classes % self.classes_per_task != 0:
            raise ConfigurationError(
                f"{self.total_classes} classes not divisible into tasks of "
                f"{self.classes_per_task}"
            )

    @property
    def num_tasks(self) -> int:
        return self.total_classes // self.classes_per_task


@dataclass
class TrainConfig:
    """SGD session settings; the schedule anneals the rate to zero."""

    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 24
    epochs: int = 20

    def __post_init__(self):
        if min(self.learning_rate, self.batch_size, self.epochs) <= 0 or self.momentum < 0:
            raise ConfigurationError("train config values must be positive")


@dataclass
class TaskModelSpec:
    """Per-task trainable-state layout and loss settings."""

    visual_prompt_length: int = 10
    bottleneck_dim: int = 8
    adapter_layers: tuple[int, ...] = (0, 1)
    contrast_alpha: float = 0.3
    temperature: float = 1.0
    semantic_prompt_trainable: bool = False  # True only for the prompt ablation


@dataclass
class SessionReport:
    task_id: int
    final_losses: dict[str, float]
    epoch_losses: list[float]
    wall_time: float
    bundle_checksum: str
    steps: int


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """Cosine annealing from base_lr at step 0 to exactly 0 at total_steps."""
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * step / total_steps))


def split_tasks(class_ids, spec: ProtocolSpec) -> LabelSpace:
    """Deterministic class-to-task assignment for the protocol."""
    if len(class_ids) != spec.total_classes:
        raise ConfigurationError(
            f"{len(class_ids)} class ids for a {spec.total_classes}-class protocol"
        )
    return split_classes(class_ids, spec.classes_per_task, spec.order_seed)


def build_bundle(
    task_id: int,
    class_ids: tuple[int, ...],
    class_names: tuple[str, ...],
    embed_dim: int,
    model_spec: TaskModelSpec,
    semantic_prompt: np.ndarray,
    class_embeddings: np.ndarray,
    seed: int,
) -> TaskBundle:
    """Fresh trainable state for one task.

    The visual prompt starts uniform in +-1/sqrt(d) so its token norms match
    embedded tokens; keys start Gaussian at 1/sqrt(d) scale; adapters start
    with a zero up-projection so the first forward is the frozen function.
    """
    gen = torch.Generator().manual_seed(derive_seed(seed, "task", task_id))
    d = embed_dim
    bound = d**-0.5
    visual = (torch.rand(model_spec.visual_prompt_length, d, generator=gen, dtype=torch.float64) * 2 - 1) * bound
    visual.requires_grad_(True)
    keys = torch.randn(len(class_ids), d, generator=gen, dtype=torch.float64) * bound
    keys.requires_grad_(True)
    if model_spec.semantic_prompt_trainable:
        sem = (torch.rand(d, generator=gen, dtype=torch.float64) * 2 - 1) * bound
        sem.requires_grad_(True)
    else:
        sem = torch.from_numpy(np.ascontiguousarray(semantic_prompt)).clone()
    adapter_stack = {
        layer: init_adapter(layer, d, model_spec.bottleneck_dim, gen)
        for layer in model_spec.adapter_layers
    }
    classifier = torch.nn.Linear(d, len(class_ids), dtype=torch.float64)
    with torch.no_grad():
        classifier.weight.copy_(
            (torch.rand(classifier.weight.shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound
        )
        classifier.bias.zero_()
    return TaskBundle(
        task_id=task_id,
        class_ids=tuple(class_ids),
        class_names=tuple(class_names),
        visual_prompt=visual,
        semantic_prompt=sem,
        key_set=keys,
        adapter_stack=adapter_stack,
        classifier=classifier,
        class_semantic_embeddings=torch.from_numpy(np.ascontiguousarray(class_embeddings)).clone(),
    )


def compute_prototypes(
    backbone: VisionBackbone, images_per_class: list[np.ndarray]
) -> torch.Tensor:
    """Per-class mean of frozen-path query features, one row per class."""
    rows = []
    for idx, images in enumerate(images_per_class):
        if len(images) == 0:
            raise EmptyClassError(f"class index {idx} has no samples for prototypes")
        feats = backbone.query_features(torch.from_numpy(np.ascontiguousarray(images)))
        rows.append(feats.mean(dim=0))
    return torch.stack(rows)


def train_task(
    task_id: int,
    dataset: IndexedDataset,
    pool: PromptPool,
    train_cfg: TrainConfig,
    *,
    backbone: VisionBackbone,
    label_space: LabelSpace,
    model_spec: TaskModelSpec,
    semantic_prompt: np.ndarray,
    class_embeddings: np.ndarray,
    seed: int,
    session_dir: Path | None = None,
) -> tuple[TaskBundle, SessionReport]:
    """Run one training session and append its frozen bundle to the pool."""
    if task_id != pool.num_tasks_seen + 1:
        raise ProtocolError(
            f"task {task_id} trained after {pool.num_tasks_seen} sessions; "
            f"sessions must run in order"
        )
    class_ids = label_space.classes_for(task_id)
    missing = [c for c in class_ids if c not in dataset.train]
    if missing:
        raise DataError(f"dataset lacks training data for classes {missing}")
    class_names = tuple(dataset.name_of(c) for c in class_ids)
    bundle = build_bundle(
        task_id, class_ids, class_names, backbone.cfg.embed_dim,
        model_spec, semantic_prompt, class_embeddings, seed,
    )

    start = time.perf_counter()
    images = []
    labels = []
    for local, cid in enumerate(class_ids):
        samples = dataset.train_samples(cid)
        images.append(samples)
        labels.extend([local] * len(samples))
    images_np = np.concatenate(images)
    images_t = torch.from_numpy(np.ascontiguousarray(images_np))
    labels_t = torch.tensor(labels)
    num_samples = len(labels)

    # Queries come from the frozen prompt-free path; constant for the session.
    queries = backbone.query_features(images_t)
    queries_n = F.normalize(queries, dim=1)

    params = list(bundle.trainable_parameters().values())
    optimizer = torch.optim.SGD(params, lr=train_cfg.learning_rate, momentum=train_cfg.momentum)
    contrast_cfg = ContrastConfig(alpha=model_spec.contrast_alpha)
    batch_rng = np.random.default_rng(derive_seed(seed, "batches", task_id))
    steps_per_epoch = math.ceil(num_samples / train_cfg.batch_size)
    total_steps = train_cfg.epochs * steps_per_epoch

    loss_records: list[LossRecord] = []
    epoch_losses: list[float] = []
    final: dict[str, float] = {}
    step = 0
    for _ in range(train_cfg.epochs):
        order = batch_rng.permutation(num_samples)
        epoch_total = 0.0
        for lo in range(0, num_samples, train_cfg.batch_size):
            idx = torch.from_numpy(order[lo : lo + train_cfg.batch_size])
            lr = cosine_lr(step, total_steps, train_cfg.learning_rate)
            for group in optimizer.param_groups:
                group["lr"] = lr
            batch_images = images_t[idx]
            batch_labels = labels_t[idx]

            raw = queries_n[idx] @ F.normalize(bundle.key_set, dim=1).T
            key_loss = multi_key_loss_batch(raw, batch_labels, model_spec.temperature)
            cls_feat, sem_out, _ = backbone.forward_batch(batch_images, bundle)
            contrast = semantic_contrast_loss_batch(
                sem_out, bundle.class_semantic_embeddings, batch_labels, contrast_cfg
            )
            ce = F.cross_entropy(bundle.classifier(cls_feat), batch_labels)
            loss = total_loss(key_loss, contrast, ce)
            if not torch.isfinite(loss):
                raise NumericalError(f"total loss non-finite at step {step}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

            final = {
                "multi_key": float(key_loss.detach()),
                "contrast": float(contrast.detach()),
                "classification": float(ce.detach()),
                "total": float(loss.detach()),
            }
            loss_records.append(
                LossRecord(step, final["multi_key"], final["contrast"],
                           final["classification"], final["total"])
            )
            epoch_total += final["total"]
            step += 1
        epoch_losses.append(epoch_total / steps_per_epoch)

    bundle.prototypes = compute_prototypes(backbone, images)
    bundle.freeze()
    pool.append(bundle)
    wall = time.perf_counter() - start
    report = SessionReport(
        task_id=task_id,
        final_losses=final,
        epoch_losses=epoch_losses,
        wall_time=wall,
        bundle_checksum=bundle_checksum(bundle),
        steps=step,
    )
    if session_dir is not None:
        session_dir.mkdir(parents=True, exist_ok=True)
        write_loss_log(loss_records, session_dir / "loss_log.csv")
        write_json(
            session_dir / "report.json",
            {
                "task_id": report.task_id,
                "final_losses": report.final_losses,
                "epoch_losses": report.epoch_losses,
                "wall_time": report.wall_time,
                "bundle_checksum": report.bundle_checksum,
                "steps": report.steps,
            },
        )
    return bundle, report


def evaluate_pool(
    pool: PromptPool,
    backbone: VisionBackbone,
    dataset: IndexedDataset,
    label_space: LabelSpace,
    *,
    selection_mode: str = "full",
    temperature: float = 1.0,
    oracle_routing: bool = False,
) -> tuple[dict[int, float], list[SelectionRecord]]:
    """Accuracy per seen task plus the per-query selection records.

    A query routed to the wrong task cannot be correct: its true class has no
    logit in the chosen task's classifier. Oracle routing replaces the vote
    with the ground-truth task id to isolate representation error.
    """
    if pool.num_tasks_seen == 0:
        raise ProtocolError("cannot evaluate an empty pool")
    accuracies: dict[int, float] = {}
    records: list[SelectionRecord] = []
    query_id = 0
    for task in range(1, pool.num_tasks_seen + 1):
        class_ids = label_space.classes_for(task)
        correct = 0
        total = 0
        for local, cid in enumerate(class_ids):
            images = torch.from_numpy(np.ascontiguousarray(dataset.test_samples(cid)))
            feats = backbone.query_features(images)
            for row in range(images.shape[0]):
                record = select_task(
                    feats[row], pool, mode=selection_mode, temperature=temperature,
                    ground_truth_task=task, query_id=query_id,
                )
                records.append(record)
                routed = task if oracle_routing else record.chosen
                chosen_bundle = pool.get(routed)
                with torch.no_grad():
                    cls_feat, _, _ = backbone.forward_batch(
                        images[row : row + 1], chosen_bundle
                    )
                    pred_local = int(bundle_logits(chosen_bundle, cls_feat)[0].argmax())
                pred_global = chosen_bundle.class_ids[pred_local]
                correct += int(pred_global == cid)
                total += 1
                query_id += 1
        accuracies[task] = correct / total
    return accuracies, records


def bundle_logits(bundle: TaskBundle, cls_feat: torch.Tensor) -> torch.Tensor:
    return bundle.classifier(cls_feat)


@dataclass
class RunState:
    """Everything a protocol run accumulates on disk and in memory."""

    pool: PromptPool
    matrix: AccuracyMatrix
    label_space: LabelSpace
    records_by_session: dict[int, list[SelectionRecord]] = field(default_factory=dict)


def run_protocol(
    protocol: ProtocolSpec,
    train_cfg: TrainConfig,
    model_spec: TaskModelSpec,
    dataset: IndexedDataset,
    backbone: VisionBackbone,
    semantics_fn,
    run_dir: str | Path,
    seed: int,
    *,
    selection_mode: str = "full",
    stop_after: int | None = None,
) -> RunState:
    """Train tasks in order, evaluating on all seen tasks after each session.

    ``semantics_fn(class_names) -> (prompt, class_embeddings)`` supplies the
    encoder-derived vectors in backbone width. The run directory receives the
    pool checkpoints, per-session logs, and a resumable state file; calling
    again on a partially complete directory continues after the last finished
    session and produces bit-identical results to an uninterrupted run.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    label_space = split_tasks(dataset.class_ids, protocol)
    matrix = AccuracyMatrix(
        num_tasks=protocol.num_tasks,
        test_sizes={
            t: sum(dataset.num_test(c) for c in label_space.classes_for(t))
            for t in range(1, protocol.num_tasks + 1)
        },
    )
    state_path = run_dir / "protocol_state.json"
    pool = PromptPool()
    start_task = 1
    if state_path.exists():
        from .serialization import load_pool, read_json

        saved = read_json(state_path)
        completed = saved["completed_sessions"]
        if saved["accuracy_rows"] and completed:
            pool = load_pool(run_dir / "pool", upto=completed)
            for t_str, row in sorted(saved["accuracy_rows"].items(), key=lambda kv: int(kv[0])):
                matrix.add_session(int(t_str), {int(i): a for i, a in row.items()})
            start_task = completed + 1

    checksum_before = backbone.weights_checksum()
    last_task = min(stop_after or protocol.num_tasks, protocol.num_tasks)
    state = RunState(pool=pool, matrix=matrix, label_space=label_space)
    for task in range(start_task, last_task + 1):
        class_ids = label_space.classes_for(task)
        class_names = tuple(dataset.name_of(c) for c in class_ids)
        prompt, class_emb = semantics_fn(class_names)
        session_dir = run_dir / "sessions" / f"session_{task:03d}"
        train_task(
            task, dataset, pool, train_cfg,
            backbone=backbone, label_space=label_space, model_spec=model_spec,
            semantic_prompt=prompt, class_embeddings=class_emb,
            seed=seed, session_dir=session_dir,
        )
        if backbone.weights_checksum() != checksum_before:
            raise ProtocolError("backbone weights changed during a training session")
        save_pool(pool, run_dir / "pool")
        accuracies, records = evaluate_pool(
            pool, backbone, dataset, label_space,
            selection_mode=selection_mode, temperature=model_spec.temperature,
        )
        matrix.add_session(task, accuracies)
        state.records_by_session[task] = records
        write_selection_log(records, session_dir / "selection_log.csv")
        write_json(
            state_path,
            {
                "completed_sessions": task,
                "accuracy_rows": {
                    str(t): {str(i): a for i, a in matrix.rows[t].items()}
                    for t in range(1, task + 1)
                },
            },
        )
    return state
