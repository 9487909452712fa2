"""Training objectives: semantic contrast, classification, and their sum.

The semantic contrast loss pulls the backbone's semantic output token toward
the true class's text embedding and pushes it (weighted by alpha) away from
the other classes of the current task. All terms combine with unit weights.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as F

from .core import cosine
from .errors import ConfigurationError, NumericalError, ProtocolError


@dataclass
class ContrastConfig:
    """Trade-off factor between the positive pull and negative push terms."""

    alpha: float = 0.3

    def __post_init__(self):
        if self.alpha <= 0:
            raise ConfigurationError(f"alpha must be positive, got {self.alpha}")


@dataclass
class PairIndicator:
    """One-hot marker of the sample's class among the task's classes."""

    values: tuple[int, ...]

    def __post_init__(self):
        if any(v not in (0, 1) for v in self.values):
            raise ProtocolError("indicator entries must be 0 or 1")
        if sum(self.values) != 1:
            raise ProtocolError("indicator must contain exactly one 1")

    @classmethod
    def one_hot(cls, index: int, length: int) -> "PairIndicator":
        if not 0 <= index < length:
            raise ProtocolError(f"class index {index} outside 0..{length - 1}")
        return cls(tuple(1 if i == index else 0 for i in range(length)))


def semantic_contrast_loss(
    sem_out: torch.Tensor,
    class_embeddings: torch.Tensor,
    indicator: PairIndicator,
    cfg: ContrastConfig,
) -> torch.Tensor:
    """Cosine pull to the positive class embedding, |cosine| push from the rest.

    Averaged over the task's classes. The absolute value's subgradient at
    zero is taken as 0, so the loss is finite and continuous everywhere.
    """
    n = class_embeddings.shape[0]
    if len(indicator.values) != n:
        raise ProtocolError("indicator length does not match class embeddings")
    total = sem_out.new_zeros(())
    for i in range(n):
        sim = cosine(sem_out, class_embeddings[i])
        if indicator.values[i]:
            total = total + (1.0 - sim)
        else:
            total = total + cfg.alpha * sim.abs()
    return total / n


def semantic_contrast_loss_batch(
    sem_out: torch.Tensor,
    class_embeddings: torch.Tensor,
    targets: torch.Tensor,
    cfg: ContrastConfig,
) -> torch.Tensor:
    """Batched mean of the per-sample contrast loss (identical math)."""
    sims = F.normalize(sem_out, dim=1) @ F.normalize(class_embeddings, dim=1).T
    n = class_embeddings.shape[0]
    onehot = F.one_hot(targets, num_classes=n).to(sims.dtype)
    per_sample = (onehot * (1.0 - sims) + cfg.alpha * (1.0 - onehot) * sims.abs()).sum(dim=1)
    return per_sample.mean() / n


def classification_loss(
    cls_feature: torch.Tensor, classifier: torch.nn.Linear, true_class_index: int
) -> torch.Tensor:
    """Cross-entropy of the task classifier's logits against the true class."""
    n = classifier.out_features
    if not 0 <= true_class_index < n:
        raise ProtocolError(f"class index {true_class_index} outside 0..{n - 1}")
    logits = classifier(cls_feature)
    return F.cross_entropy(logits.unsqueeze(0), torch.tensor([true_class_index]))


def total_loss(multi_key, contrast, classification) -> torch.Tensor:
    """Sum of the three terms with unit weights; aborts on non-finite input."""
    terms = {"multi_key": multi_key, "contrast": contrast, "classification": classification}
    for name, value in terms.items():
        scalar = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
        if not math.isfinite(scalar):
            raise NumericalError(f"loss term {name!r} is non-finite ({scalar})")
    return multi_key + contrast + classification


LOSS_LOG_FIELDS = ("step", "multi_key", "contrast", "classification", "total")


@dataclass
class LossRecord:
    step: int
    multi_key: float
    contrast: float
    classification: float
    total: float


def write_loss_log(records: list[LossRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOSS_LOG_FIELDS)
        for rec in records:
            writer.writerow(
                [rec.step, repr(rec.multi_key), repr(rec.contrast),
                 repr(rec.classification), repr(rec.total)]
            )
