"""Shared domain types and the basic vector math used across the framework.

Conventions: task ids are 1-based, class ids are global integers, local class
indices are 0-based positions inside a task's class list. All trainable state
of one task lives in a :class:`TaskBundle`; bundles are frozen at the end of
their training session and collected append-only in a :class:`PromptPool`.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Sequence

import torch

from .errors import ConfigurationError, DegenerateInputError, ProtocolError

if TYPE_CHECKING:  # pragma: no cover
    from .backbone import AdapterParams


def derive_seed(base: int, *parts) -> int:
    """Derive a stable sub-seed from a base seed and a label path.

    Uses sha256 so sub-streams are independent of each other and of the
    platform; keeping sessions on disjoint streams is what makes a resumed
    run bit-identical to an uninterrupted one.
    """
    text = "|".join([str(base), *map(str, parts)])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)


def _plain_float(value) -> float:
    if isinstance(value, torch.Tensor):
        return float(value.detach())
    return float(value)


def cosine(u, v):
    """Cosine similarity of two vectors, in [-1, 1].

    Works on numpy arrays and torch tensors alike (differentiable for torch
    inputs). Zero-norm inputs raise instead of propagating NaN.
    """
    nu = (u * u).sum() ** 0.5
    nv = (v * v).sum() ** 0.5
    if _plain_float(nu) == 0.0 or _plain_float(nv) == 0.0:
        raise DegenerateInputError("cosine of a zero-norm vector is undefined")
    return (u * v).sum() / (nu * nv)


@dataclass
class TokenSequence:
    """Backbone input: [class token, image tokens, semantic prompt, visual prompt].

    Tokens are pre-position-embedding; the backbone adds positional terms to
    the class/image rows itself. Rows all share the embedding width d.
    """

    class_token: torch.Tensor  # [d]
    image_tokens: torch.Tensor  # [L_img, d]
    semantic_prompt: torch.Tensor  # [d]
    visual_prompt: torch.Tensor  # [L_vp, d]

    def __post_init__(self):
        d = self.class_token.shape[-1]
        for name in ("image_tokens", "semantic_prompt", "visual_prompt"):
            t = getattr(self, name)
            if t.shape[-1] != d:
                raise ConfigurationError(
                    f"{name} has width {t.shape[-1]}, expected embedding dim {d}"
                )

    @property
    def num_image_tokens(self) -> int:
        return self.image_tokens.shape[0]

    @property
    def num_visual_tokens(self) -> int:
        return self.visual_prompt.shape[0]

    def __len__(self) -> int:
        return 1 + self.num_image_tokens + 1 + self.num_visual_tokens

    # Position map: slot index of each named part. The semantic-prompt slot
    # sits right after the image tokens, the visual prompt fills the tail.
    @property
    def class_index(self) -> int:
        return 0

    @property
    def image_slice(self) -> slice:
        return slice(1, 1 + self.num_image_tokens)

    @property
    def semantic_index(self) -> int:
        return 1 + self.num_image_tokens

    @property
    def visual_slice(self) -> slice:
        return slice(2 + self.num_image_tokens, len(self))

    def to_matrix(self) -> torch.Tensor:
        """Concatenate all parts into the [L, d] input matrix."""
        return torch.cat(
            [
                self.class_token.unsqueeze(0),
                self.image_tokens,
                self.semantic_prompt.unsqueeze(0),
                self.visual_prompt,
            ],
            dim=0,
        )

    @classmethod
    def from_matrix(cls, matrix: torch.Tensor, num_image_tokens: int) -> "TokenSequence":
        """Rebuild the named parts from a concatenated matrix."""
        sem = 1 + num_image_tokens
        return cls(
            class_token=matrix[0],
            image_tokens=matrix[1:sem],
            semantic_prompt=matrix[sem],
            visual_prompt=matrix[sem + 1 :],
        )


@dataclass
class TaskBundle:
    """All trainable per-task state, immutable once the session finishes."""

    task_id: int
    class_ids: tuple[int, ...]
    class_names: tuple[str, ...]
    visual_prompt: torch.Tensor  # [L_vp, d]
    semantic_prompt: torch.Tensor  # [d]
    key_set: torch.Tensor  # [N_inc, d]
    adapter_stack: dict[int, "AdapterParams"]
    classifier: torch.nn.Linear  # d -> N_inc
    class_semantic_embeddings: torch.Tensor  # [N_inc, d]
    prototypes: torch.Tensor | None = None  # [N_inc, d], set at session end
    frozen: bool = False

    def __post_init__(self):
        if self.task_id < 1:
            raise ProtocolError(f"task ids are 1-based, got {self.task_id}")
        n = len(self.class_ids)
        if len(self.class_names) != n:
            raise ConfigurationError("class_names and class_ids lengths differ")
        if self.key_set.shape[0] != n or self.class_semantic_embeddings.shape[0] != n:
            raise ConfigurationError("per-class matrices must have one row per class")

    @property
    def num_classes(self) -> int:
        return len(self.class_ids)

    @property
    def embed_dim(self) -> int:
        return self.key_set.shape[1]

    def trainable_parameters(self) -> dict[str, torch.Tensor]:
        """Named tensors updated during this task's session."""
        params: dict[str, torch.Tensor] = {
            "visual_prompt": self.visual_prompt,
            "keys": self.key_set,
            "classifier.weight": self.classifier.weight,
            "classifier.bias": self.classifier.bias,
        }
        if self.semantic_prompt.requires_grad:
            params["semantic_prompt"] = self.semantic_prompt
        for layer, adapter in sorted(self.adapter_stack.items()):
            params[f"adapters.layer{layer}.down"] = adapter.w_down
            params[f"adapters.layer{layer}.up"] = adapter.w_up
        return params

    def freeze(self) -> None:
        """Mark the session finished; no parameter may change afterwards."""
        for tensor in self.trainable_parameters().values():
            tensor.requires_grad_(False)
        self.frozen = True

    def local_index(self, class_id: int) -> int:
        return self.class_ids.index(class_id)


@dataclass
class PromptPool:
    """Append-only store of task bundles, ordered by task id."""

    bundles: list[TaskBundle] = field(default_factory=list)

    @property
    def num_tasks_seen(self) -> int:
        return len(self.bundles)

    def append(self, bundle: TaskBundle) -> None:
        if bundle.task_id != self.num_tasks_seen + 1:
            raise ProtocolError(
                f"bundle for task {bundle.task_id} appended after "
                f"{self.num_tasks_seen} tasks; sessions must run in order"
            )
        seen = {c for b in self.bundles for c in b.class_ids}
        overlap = seen.intersection(bundle.class_ids)
        if overlap:
            raise ProtocolError(f"class ids {sorted(overlap)} already owned by an earlier task")
        self.bundles.append(bundle)

    def get(self, task_id: int) -> TaskBundle:
        if not 1 <= task_id <= self.num_tasks_seen:
            raise ProtocolError(f"no bundle for task {task_id}")
        return self.bundles[task_id - 1]

    def upto(self, task_id: int) -> "PromptPool":
        """View of the pool as it was after the given session (bundles are shared)."""
        return PromptPool(bundles=self.bundles[:task_id])


@dataclass
class LabelSpace:
    """Disjoint per-task class sets and their cumulative union."""

    task_classes: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        sizes = {len(block) for block in self.task_classes}
        if len(sizes) > 1:
            raise ConfigurationError(f"unequal task sizes {sorted(sizes)}")
        flat = [c for block in self.task_classes for c in block]
        if len(flat) != len(set(flat)):
            raise ConfigurationError("task class sets overlap")

    @property
    def num_tasks(self) -> int:
        return len(self.task_classes)

    @property
    def classes_per_task(self) -> int:
        return len(self.task_classes[0]) if self.task_classes else 0

    def classes_for(self, task_id: int) -> tuple[int, ...]:
        if not 1 <= task_id <= self.num_tasks:
            raise ProtocolError(f"task {task_id} outside 1..{self.num_tasks}")
        return self.task_classes[task_id - 1]

    def cumulative(self, task_id: int) -> tuple[int, ...]:
        return tuple(c for block in self.task_classes[:task_id] for c in block)

    def task_of(self, class_id: int) -> int:
        for t, block in enumerate(self.task_classes, start=1):
            if class_id in block:
                return t
        raise ProtocolError(f"class {class_id} belongs to no task")


def assemble_input(
    class_token: torch.Tensor,
    image_tokens: torch.Tensor,
    bundle: TaskBundle,
) -> TokenSequence:
    """Compose the backbone input for one sample using a task's prompts.

    Order is fixed: class token, image tokens, semantic prompt, visual prompt.
    """
    d = class_token.shape[-1]
    if image_tokens.ndim != 2 or image_tokens.shape[1] != d:
        raise ConfigurationError(
            f"image tokens shaped {tuple(image_tokens.shape)} do not match embedding dim {d}"
        )
    if bundle.semantic_prompt.shape[-1] != d or bundle.visual_prompt.shape[-1] != d:
        raise ConfigurationError("bundle prompts do not match the backbone embedding dim")
    return TokenSequence(
        class_token=class_token,
        image_tokens=image_tokens,
        semantic_prompt=bundle.semantic_prompt,
        visual_prompt=bundle.visual_prompt,
    )


def split_classes(class_ids: Sequence[int], classes_per_task: int, order_seed: int | None) -> LabelSpace:
    """Permute class ids (identity when order_seed is None) and cut equal blocks."""
    ids = list(class_ids)
    if classes_per_task <= 0:
        raise ConfigurationError("classes_per_task must be positive")
    if len(ids) % classes_per_task != 0:
        raise ConfigurationError(
            f"{len(ids)} classes not divisible into tasks of {classes_per_task}"
        )
    if order_seed is not None:
        import numpy as np

        rng = np.random.default_rng(order_seed)
        ids = [ids[i] for i in rng.permutation(len(ids))]
    blocks = tuple(
        tuple(ids[i : i + classes_per_task]) for i in range(0, len(ids), classes_per_task)
    )
    return LabelSpace(task_classes=blocks)
