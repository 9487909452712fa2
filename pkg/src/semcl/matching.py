"""Query-key task selection: multi-key scores, entropy, prototypes, and the vote.

A query is the frozen-path class-token feature of an image. Each stored task
is scored three ways -- best raw key cosine, entropy of the softmaxed key
scores, peak prototype probability -- and a majority vote picks the task,
falling back to the key-score winner when all three disagree. Cross-task ties
inside each strategy break toward the lowest task id.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as F

from .core import PromptPool, TaskBundle
from .errors import DegenerateInputError, NumericalError, ProtocolError

SELECTION_MODES = ("full", "multi-key-only", "entropy-only", "prototype-only")


@dataclass
class ScoreVector:
    """Raw cosine scores against one task's keys and their softmax."""

    raw: torch.Tensor  # [N_inc], entries in [-1, 1]
    softmaxed: torch.Tensor  # [N_inc], sums to 1

    def __post_init__(self):
        raw_max = float(self.raw.detach().abs().max())
        if not raw_max <= 1.0 + 1e-9:  # also rejects NaN
            raise ProtocolError("raw scores must be cosines in [-1, 1]")
        total = float(self.softmaxed.detach().sum())
        if not abs(total - 1.0) <= 1e-9:
            raise ProtocolError("softmaxed scores must sum to 1")

    @classmethod
    def from_raw(cls, raw: torch.Tensor, temperature: float = 1.0) -> "ScoreVector":
        return cls(raw=raw, softmaxed=torch.softmax(raw / temperature, dim=-1))


@dataclass
class SelectionRecord:
    """Per-query outputs of the three matchers and the final choice."""

    p1: int
    p2: int
    p3: int
    chosen: int
    ground_truth_task: int | None = None
    query_id: int | None = None

    def __post_init__(self):
        if self.chosen not in (self.p1, self.p2, self.p3):
            raise ProtocolError("chosen task must come from one of the three strategies")


def _cosine_scores(q: torch.Tensor, rows: torch.Tensor, what: str) -> torch.Tensor:
    qn = q.norm()
    if float(qn.detach()) == 0.0:
        raise DegenerateInputError("query feature has zero norm")
    norms = rows.norm(dim=1)
    bad = (norms.detach() == 0).nonzero()
    if len(bad):
        raise DegenerateInputError(f"{what} for class index {int(bad[0])} has zero norm")
    return (rows @ q) / (norms * qn)


def score_against_task(
    q: torch.Tensor, bundle: TaskBundle, temperature: float = 1.0
) -> ScoreVector:
    """Cosine of the query against each of the task's class keys."""
    raw = _cosine_scores(q, bundle.key_set, "key")
    return ScoreVector.from_raw(raw, temperature)


def multi_key_loss(score: ScoreVector, true_class_index: int) -> torch.Tensor:
    """Cross-entropy of the softmaxed key scores against the true class."""
    n = score.raw.shape[0]
    if not 0 <= true_class_index < n:
        raise ProtocolError(f"class index {true_class_index} outside 0..{n - 1}")
    return -torch.log(score.softmaxed[true_class_index])


def multi_key_loss_batch(
    raw: torch.Tensor, targets: torch.Tensor, temperature: float = 1.0
) -> torch.Tensor:
    """Batched form: mean over samples of the per-sample multi-key loss."""
    return F.cross_entropy(raw / temperature, targets)


def entropy(score: ScoreVector) -> torch.Tensor:
    """Shannon entropy of the softmaxed scores, with 0 log 0 = 0."""
    p = score.softmaxed
    terms = torch.where(p > 0, p * torch.log(p), torch.zeros_like(p))
    return -terms.sum()


def prototype_distribution(q: torch.Tensor, bundle: TaskBundle) -> torch.Tensor:
    """Softmax over the task's classes of query-prototype cosines."""
    if bundle.prototypes is None:
        raise ProtocolError(
            f"task {bundle.task_id} has no prototypes; its session never finalized"
        )
    raw = _cosine_scores(q, bundle.prototypes, "prototype")
    return torch.softmax(raw, dim=-1)


def vote(p1: int, p2: int, p3: int) -> int:
    """Majority over the three strategy picks; all-distinct falls back to p1."""
    if p1 == p2 or p1 == p3:
        return p1
    if p2 == p3:
        return p2
    return p1


def select_task(
    q: torch.Tensor,
    pool: PromptPool,
    mode: str = "full",
    temperature: float = 1.0,
    ground_truth_task: int | None = None,
    query_id: int | None = None,
) -> SelectionRecord:
    """Pick the task whose stored parameters should process this query.

    Per task: strategy 1 keeps the best raw key cosine, strategy 2 the score
    entropy (lower is more confident), strategy 3 the peak prototype
    probability. ``mode`` restricts the decision to a single strategy for the
    ablations; the record always carries all three picks.
    """
    if pool.num_tasks_seen == 0:
        raise ProtocolError("cannot select a task from an empty pool")
    if mode not in SELECTION_MODES:
        raise ProtocolError(f"unknown selection mode {mode!r}; options: {SELECTION_MODES}")
    best_raw: list[float] = []
    entropies: list[float] = []
    proto_peaks: list[float] = []
    with torch.no_grad():
        for bundle in pool.bundles:
            score = score_against_task(q, bundle, temperature)
            best_raw.append(float(score.raw.max()))
            entropies.append(float(entropy(score)))
            proto_peaks.append(float(prototype_distribution(q, bundle).max()))

    def argbest(values: list[float], largest: bool) -> int:
        best = max(values) if largest else min(values)
        return values.index(best) + 1  # ties resolve to the lowest task id

    p1 = argbest(best_raw, largest=True)
    p2 = argbest(entropies, largest=False)
    p3 = argbest(proto_peaks, largest=True)
    if mode == "multi-key-only":
        chosen = p1
    elif mode == "entropy-only":
        chosen = p2
    elif mode == "prototype-only":
        chosen = p3
    else:
        chosen = vote(p1, p2, p3)
    return SelectionRecord(
        p1=p1, p2=p2, p3=p3, chosen=chosen,
        ground_truth_task=ground_truth_task, query_id=query_id,
    )


def train_keys(
    batch: list[tuple[torch.Tensor, int]],
    bundle: TaskBundle,
    learning_rate: float = 0.01,
    momentum: float = 0.9,
    temperature: float = 1.0,
) -> float:
    """One optimizer step on the bundle's keys against the multi-key loss."""
    if bundle.frozen:
        raise ProtocolError(f"task {bundle.task_id} is frozen; keys cannot be trained")
    queries = torch.stack([q for q, _ in batch])
    targets = torch.tensor([c for _, c in batch])
    keys = bundle.key_set
    opt = torch.optim.SGD([keys], lr=learning_rate, momentum=momentum)
    raw = F.normalize(queries, dim=1) @ F.normalize(keys, dim=1).T
    loss = multi_key_loss_batch(raw, targets, temperature)
    if not torch.isfinite(loss):
        raise NumericalError("multi-key loss is non-finite; aborting key update")
    opt.zero_grad()
    loss.backward()
    opt.step()
    return float(loss.detach())


SELECTION_LOG_FIELDS = ("query_id", "true_task", "p1", "p2", "p3", "chosen")


def write_selection_log(records: list[SelectionRecord], path: str | Path) -> None:
    """One CSV row per query: id, ground-truth task, the three picks, the choice."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SELECTION_LOG_FIELDS)
        for rec in records:
            writer.writerow(
                [rec.query_id, rec.ground_truth_task, rec.p1, rec.p2, rec.p3, rec.chosen]
            )


def read_selection_log(path: str | Path) -> list[SelectionRecord]:
    records = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            records.append(
                SelectionRecord(
                    p1=int(row["p1"]),
                    p2=int(row["p2"]),
                    p3=int(row["p3"]),
                    chosen=int(row["chosen"]),
                    ground_truth_task=int(row["true_task"]) if row["true_task"] else None,
                    query_id=int(row["query_id"]) if row["query_id"] else None,
                )
            )
    return records
