"""Dataset specs, synthetic cluster generation, and class-indexed access.

The synthetic generator draws one unit direction per class, scales it by a
margin, and adds isotropic pixel noise; samples render as small single-channel
images. The index counts train-split reads per class so the protocol's
replay-freedom (no foreign-class reads during a session) can be asserted.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DataError, EmptyClassError


@dataclass
class DatasetSpec:
    """Either a synthetic generator spec or a directory-tree dataset."""

    kind: str = "synthetic"  # synthetic | directory
    num_classes: int = 10
    train_per_class: int = 30
    test_per_class: int = 10
    image_size: int = 8
    margin: float = 12.0
    noise_std: float = 0.2
    seed: int = 5
    root: str | None = None
    class_names: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.kind not in ("synthetic", "directory"):
            raise ConfigurationError(f"unknown dataset kind {self.kind!r}")
        if self.kind == "directory" and not self.root:
            raise ConfigurationError("directory datasets need a root path")
        if self.class_names is not None:
            self.class_names = tuple(self.class_names)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "num_classes": self.num_classes,
            "train_per_class": self.train_per_class,
            "test_per_class": self.test_per_class,
            "image_size": self.image_size,
            "margin": self.margin,
            "noise_std": self.noise_std,
            "seed": self.seed,
            "root": self.root,
            "class_names": list(self.class_names) if self.class_names else None,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "DatasetSpec":
        names = payload.get("class_names")
        return cls(
            kind=payload.get("kind", "synthetic"),
            num_classes=payload.get("num_classes", 10),
            train_per_class=payload.get("train_per_class", 30),
            test_per_class=payload.get("test_per_class", 10),
            image_size=payload.get("image_size", 8),
            margin=payload.get("margin", 12.0),
            noise_std=payload.get("noise_std", 0.2),
            seed=payload.get("seed", 5),
            root=payload.get("root"),
            class_names=tuple(names) if names else None,
        )


@dataclass
class IndexedDataset:
    """Per-class train/test arrays with instrumented train access."""

    class_ids: tuple[int, ...]
    class_names: tuple[str, ...]
    train: dict[int, np.ndarray]  # class id -> [n, H, W]
    test: dict[int, np.ndarray]
    image_size: int
    train_access_counts: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        for cid in self.class_ids:
            if cid not in self.train or len(self.train[cid]) == 0:
                raise EmptyClassError(f"class {cid} has no training samples")
            if cid not in self.test or len(self.test[cid]) == 0:
                raise DataError(f"class {cid} has no test samples")
        self.train_access_counts = {cid: 0 for cid in self.class_ids}

    def name_of(self, class_id: int) -> str:
        return self.class_names[self.class_ids.index(class_id)]

    def train_samples(self, class_id: int) -> np.ndarray:
        """Read a class's training images; every call is counted."""
        if class_id not in self.train:
            raise DataError(f"class {class_id} is not in this dataset")
        self.train_access_counts[class_id] += 1
        return self.train[class_id]

    def test_samples(self, class_id: int) -> np.ndarray:
        if class_id not in self.test:
            raise DataError(f"class {class_id} is not in this dataset")
        return self.test[class_id]

    def num_train(self, class_id: int) -> int:
        return len(self.train[class_id])

    def num_test(self, class_id: int) -> int:
        return len(self.test[class_id])


def generate_synthetic(spec: DatasetSpec) -> IndexedDataset:
    """Seeded Gaussian clusters rendered as [H, W] float images."""
    rng = np.random.default_rng(spec.seed)
    size = spec.image_size
    dim = size * size
    names = spec.class_names or tuple(f"class{c:02d}" for c in range(spec.num_classes))
    if len(names) != spec.num_classes:
        raise ConfigurationError(
            f"{len(names)} class names for {spec.num_classes} classes"
        )
    train: dict[int, np.ndarray] = {}
    test: dict[int, np.ndarray] = {}
    for cid in range(spec.num_classes):
        direction = rng.standard_normal(dim)
        mean = spec.margin * direction / np.linalg.norm(direction)
        def draw(count: int) -> np.ndarray:
            flat = mean + spec.noise_std * rng.standard_normal((count, dim))
            return flat.reshape(count, size, size)
        train[cid] = draw(spec.train_per_class)
        test[cid] = draw(spec.test_per_class)
    return IndexedDataset(
        class_ids=tuple(range(spec.num_classes)),
        class_names=names,
        train=train,
        test=test,
        image_size=size,
    )


def _load_directory(spec: DatasetSpec) -> IndexedDataset:
    """root/<split>/<class_name>/*.png|jpg, grayscale, resized to image_size."""
    try:
        from PIL import Image
    except ImportError as exc:  # pragma: no cover - depends on environment
        raise DataError("directory datasets need Pillow installed") from exc

    root = Path(spec.root)
    if not root.exists():
        raise DataError(f"dataset root {root} does not exist")
    names = spec.class_names
    if names is None:
        names = tuple(sorted(p.name for p in (root / "train").iterdir() if p.is_dir()))
    splits: dict[str, dict[int, np.ndarray]] = {}
    for split in ("train", "test"):
        per_class: dict[int, np.ndarray] = {}
        for cid, name in enumerate(names):
            class_dir = root / split / name
            if not class_dir.is_dir():
                raise DataError(f"missing class directory {class_dir} (class {name!r})")
            files = sorted(
                p for p in class_dir.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg")
            )
            if not files:
                raise DataError(f"class {name!r} has no {split} images in {class_dir}")
            images = []
            for path in files:
                try:
                    with Image.open(path) as img:
                        img = img.convert("L").resize((spec.image_size, spec.image_size))
                        images.append(np.asarray(img, dtype=np.float64) / 255.0)
                except Exception as exc:
                    raise DataError(f"cannot decode {path}: {exc}") from exc
            per_class[cid] = np.stack(images)
        splits[split] = per_class
    return IndexedDataset(
        class_ids=tuple(range(len(names))),
        class_names=tuple(names),
        train=splits["train"],
        test=splits["test"],
        image_size=spec.image_size,
    )


def ingest(spec: DatasetSpec) -> IndexedDataset:
    """Materialize a dataset spec into a class-indexed dataset."""
    if spec.kind == "synthetic":
        return generate_synthetic(spec)
    return _load_directory(spec)
