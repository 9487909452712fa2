"""Text templates, pluggable sentence encoders, and the embedding cache.

Task templates name every class of a task ("A photo of cat or dog."); class
templates name one class. Encoders map template text to a single vector;
desk-scale runs use a seeded hash-to-vector fixture so nothing needs to be
downloaded, and precomputed caches serve the same texts offline. A fixed
projection bridges encoder width to backbone width when they differ.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from .errors import ConfigurationError, MissingEmbeddingError, ProtocolError
from .serialization import load_arrays, read_json, save_arrays, write_json


@dataclass(frozen=True)
class TaskTemplate:
    """'A photo of {c1} or {c2} ... or {cN}.' over a task's class names."""

    class_names: tuple[str, ...]
    text: str

    @classmethod
    def build(cls, class_names: list[str] | tuple[str, ...]) -> "TaskTemplate":
        if not class_names:
            raise ProtocolError("a task template needs at least one class name")
        if any(not name for name in class_names):
            raise ProtocolError("class names must be non-empty")
        return cls(
            class_names=tuple(class_names),
            text="A photo of " + " or ".join(class_names) + ".",
        )


@dataclass(frozen=True)
class ClassTemplate:
    """'A photo of {class}.' for a single class."""

    class_name: str
    text: str

    @classmethod
    def build(cls, class_name: str) -> "ClassTemplate":
        if not class_name:
            raise ProtocolError("class name must be non-empty")
        return cls(class_name=class_name, text=f"A photo of {class_name}.")


def build_task_template(class_names) -> TaskTemplate:
    return TaskTemplate.build(class_names)


def build_class_template(class_name: str) -> ClassTemplate:
    return ClassTemplate.build(class_name)


class TextEncoder(Protocol):
    """Anything that turns template text into one fixed-width vector."""

    name: str
    dim: int
    pooling: str

    def encode(self, text: str) -> np.ndarray: ...


def _text_digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


class FixtureEncoder:
    """Deterministic hash-to-vector encoder for tests and desk-scale runs.

    The vector for a text is drawn from a generator seeded by
    sha256(seed:text), so it is stable across processes and platforms and
    needs no model files.
    """

    pooling = "hash"

    def __init__(self, dim: int = 32, seed: int = 0):
        self.dim = dim
        self.seed = seed
        self.name = f"fixture:{seed}"

    def encode(self, text: str) -> np.ndarray:
        digest = hashlib.sha256(f"{self.seed}:{text}".encode("utf-8")).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        return rng.standard_normal(self.dim)


@dataclass
class EmbeddingCache:
    """Exact-text lookup of precomputed template embeddings."""

    encoder_name: str
    dim: int
    pooling: str
    entries: dict[str, np.ndarray] = field(default_factory=dict)

    def put(self, text: str, vector: np.ndarray) -> None:
        if vector.shape != (self.dim,):
            raise ConfigurationError(
                f"vector shaped {vector.shape} does not match cache width {self.dim}"
            )
        self.entries[text] = np.asarray(vector, dtype=np.float64)

    def get(self, text: str) -> np.ndarray:
        if text not in self.entries:
            raise MissingEmbeddingError(
                f"no cached embedding for text {text!r} and no live encoder configured"
            )
        return self.entries[text]

    def __contains__(self, text: str) -> bool:
        return text in self.entries

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        arrays = {_text_digest(t): v for t, v in self.entries.items()}
        save_arrays(directory / "embeddings.npz", arrays)
        write_json(
            directory / "manifest.json",
            {
                "encoder_name": self.encoder_name,
                "d_text": self.dim,
                "pooling": self.pooling,
                "texts": {_text_digest(t): t for t in sorted(self.entries)},
            },
        )

    @classmethod
    def load(cls, directory: str | Path) -> "EmbeddingCache":
        directory = Path(directory)
        manifest = read_json(directory / "manifest.json")
        arrays = load_arrays(directory / "embeddings.npz")
        cache = cls(
            encoder_name=manifest["encoder_name"],
            dim=manifest["d_text"],
            pooling=manifest["pooling"],
        )
        for digest, text in manifest["texts"].items():
            if digest not in arrays:
                raise MissingEmbeddingError(f"cache is missing the array for {text!r}")
            cache.entries[text] = arrays[digest].astype(np.float64)
        return cache


class CachedEncoder:
    """Serve embeddings from a cache, optionally falling back to a live encoder."""

    def __init__(self, cache: EmbeddingCache, fallback: TextEncoder | None = None):
        self.cache = cache
        self.fallback = fallback
        self.name = cache.encoder_name
        self.dim = cache.dim
        self.pooling = cache.pooling

    def encode(self, text: str) -> np.ndarray:
        if text in self.cache:
            return self.cache.get(text)
        if self.fallback is None:
            return self.cache.get(text)  # raises MissingEmbeddingError naming the text
        vector = self.fallback.encode(text)
        self.cache.put(text, vector)
        return vector


def get_encoder(name: str, dim: int = 32) -> TextEncoder:
    """Resolve an encoder by name: 'fixture[:seed]' or a sentence-transformers id."""
    if name.startswith("fixture"):
        seed = int(name.split(":", 1)[1]) if ":" in name else 0
        return FixtureEncoder(dim=dim, seed=seed)
    try:
        from sentence_transformers import SentenceTransformer
    except ImportError as exc:  # pragma: no cover - depends on environment
        raise ConfigurationError(
            f"encoder {name!r} needs the sentence-transformers package; install it "
            f"or point the config at an embedding cache"
        ) from exc
    model = SentenceTransformer(name)

    class _LiveEncoder:
        pooling = "sentence"

        def __init__(self):
            self.name = name
            self.dim = model.get_sentence_embedding_dimension()

        def encode(self, text: str) -> np.ndarray:
            return np.asarray(model.encode([text])[0], dtype=np.float64)

    return _LiveEncoder()


def encode(template_text: str, encoder: TextEncoder) -> np.ndarray:
    """Single-vector embedding of one template text."""
    return np.asarray(encoder.encode(template_text), dtype=np.float64)


@dataclass
class SemanticProjector:
    """Fixed linear bridge from encoder width to backbone width.

    Identity when the widths agree and no matrix is given. The matrix is
    created once per experiment (seeded orthonormal rows) and shared by all
    tasks.
    """

    text_dim: int
    target_dim: int
    matrix: np.ndarray | None = None  # [target_dim, text_dim]

    def __post_init__(self):
        if self.matrix is None:
            if self.text_dim != self.target_dim:
                raise ConfigurationError(
                    f"no projection configured but encoder width {self.text_dim} "
                    f"differs from backbone width {self.target_dim}"
                )
        elif self.matrix.shape != (self.target_dim, self.text_dim):
            raise ConfigurationError(
                f"projection shaped {self.matrix.shape}, expected "
                f"({self.target_dim}, {self.text_dim})"
            )

    @classmethod
    def identity(cls, dim: int) -> "SemanticProjector":
        return cls(text_dim=dim, target_dim=dim)

    @classmethod
    def seeded(cls, text_dim: int, target_dim: int, seed: int) -> "SemanticProjector":
        if text_dim == target_dim:
            return cls.identity(text_dim)
        rng = np.random.default_rng(seed)
        a = rng.standard_normal((max(text_dim, target_dim), min(text_dim, target_dim)))
        q, r = np.linalg.qr(a)
        q = q * np.sign(np.diag(r))
        matrix = q.T if text_dim >= target_dim else q
        return cls(text_dim=text_dim, target_dim=target_dim, matrix=matrix)

    def project(self, vector: np.ndarray) -> np.ndarray:
        if vector.shape != (self.text_dim,):
            raise ConfigurationError(
                f"vector shaped {vector.shape} does not match encoder width {self.text_dim}"
            )
        if self.matrix is None:
            return np.asarray(vector, dtype=np.float64)
        return self.matrix @ np.asarray(vector, dtype=np.float64)


def project_to_backbone(embedding: np.ndarray, projector: SemanticProjector) -> np.ndarray:
    return projector.project(embedding)


def task_semantics(
    class_names: list[str] | tuple[str, ...],
    encoder: TextEncoder,
    projector: SemanticProjector,
) -> tuple[np.ndarray, np.ndarray]:
    """Semantic prompt and per-class embeddings for one task, in backbone width."""
    prompt = projector.project(encode(build_task_template(class_names).text, encoder))
    rows = [
        projector.project(encode(build_class_template(name).text, encoder))
        for name in class_names
    ]
    return prompt, np.stack(rows)
