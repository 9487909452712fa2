"""Checkpoint I/O: deterministic array containers, bundle and pool directories.

A pool serializes to one JSON manifest plus one ``.npz`` per bundle. The npz
writer fixes zip timestamps so identical arrays always produce identical
bytes; append-only and reproducibility checks compare these bytes directly.
"""
from __future__ import annotations

import hashlib
import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch

from .core import PromptPool, TaskBundle
from .errors import ChecksumError, ConfigurationError

_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray]) -> bytes:
    """Write arrays to an npz-compatible container with fixed timestamps.

    Returns the bytes written, so callers can checksum without re-reading.
    """
    payload = arrays_to_bytes(arrays)
    Path(path).write_bytes(payload)
    return payload


def arrays_to_bytes(arrays: dict[str, np.ndarray]) -> bytes:
    sink = io.BytesIO()
    with zipfile.ZipFile(sink, "w", zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(
                buf, np.ascontiguousarray(arrays[name]), allow_pickle=False
            )
            info = zipfile.ZipInfo(name + ".npy", date_time=_ZIP_EPOCH)
            zf.writestr(info, buf.getvalue())
    return sink.getvalue()


def load_arrays(path: str | Path) -> dict[str, np.ndarray]:
    with np.load(path) as data:
        return {name: data[name] for name in data.files}


def sha256_bytes(payload: bytes) -> str:
    return hashlib.sha256(payload).hexdigest()


def sha256_file(path: str | Path) -> str:
    return sha256_bytes(Path(path).read_bytes())


def write_json(path: str | Path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_json(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())


def bundle_to_arrays(bundle: TaskBundle) -> dict[str, np.ndarray]:
    """Flatten a bundle into canonically named float arrays."""

    def arr(t: torch.Tensor) -> np.ndarray:
        return t.detach().cpu().numpy()

    arrays = {
        "visual_prompt": arr(bundle.visual_prompt),
        "semantic_prompt": arr(bundle.semantic_prompt),
        "keys": arr(bundle.key_set),
        "classifier.weight": arr(bundle.classifier.weight),
        "classifier.bias": arr(bundle.classifier.bias),
        "class_semantics": arr(bundle.class_semantic_embeddings),
    }
    if bundle.prototypes is not None:
        arrays["prototypes"] = arr(bundle.prototypes)
    for layer, adapter in sorted(bundle.adapter_stack.items()):
        arrays[f"adapters.layer{layer}.down"] = arr(adapter.w_down)
        arrays[f"adapters.layer{layer}.up"] = arr(adapter.w_up)
    return arrays


def bundle_from_arrays(
    arrays: dict[str, np.ndarray],
    task_id: int,
    class_ids: tuple[int, ...],
    class_names: tuple[str, ...],
) -> TaskBundle:
    from .backbone import AdapterParams  # local import to avoid a cycle

    def ten(name: str) -> torch.Tensor:
        return torch.from_numpy(np.ascontiguousarray(arrays[name]))

    adapter_stack: dict[int, AdapterParams] = {}
    for name in arrays:
        if name.startswith("adapters.layer") and name.endswith(".down"):
            layer = int(name[len("adapters.layer") : -len(".down")])
            adapter_stack[layer] = AdapterParams(
                w_down=ten(f"adapters.layer{layer}.down"),
                w_up=ten(f"adapters.layer{layer}.up"),
                layer_index=layer,
            )
    weight = ten("classifier.weight")
    classifier = torch.nn.Linear(weight.shape[1], weight.shape[0], dtype=weight.dtype)
    with torch.no_grad():
        classifier.weight.copy_(weight)
        classifier.bias.copy_(ten("classifier.bias"))
    classifier.requires_grad_(False)
    bundle = TaskBundle(
        task_id=task_id,
        class_ids=tuple(class_ids),
        class_names=tuple(class_names),
        visual_prompt=ten("visual_prompt"),
        semantic_prompt=ten("semantic_prompt"),
        key_set=ten("keys"),
        adapter_stack=adapter_stack,
        classifier=classifier,
        class_semantic_embeddings=ten("class_semantics"),
        prototypes=ten("prototypes") if "prototypes" in arrays else None,
        frozen=True,
    )
    return bundle


def bundle_checksum(bundle: TaskBundle) -> str:
    return sha256_bytes(arrays_to_bytes(bundle_to_arrays(bundle)))


def save_pool(pool: PromptPool, directory: str | Path) -> dict:
    """Write the pool manifest and any bundle file not already on disk.

    Existing bundle files are left untouched (append-only on disk); a changed
    checksum for a previously saved task is a contract violation.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest_path = directory / "manifest.json"
    previous = read_json(manifest_path)["tasks"] if manifest_path.exists() else []
    tasks = []
    for bundle in pool.bundles:
        fname = f"task_{bundle.task_id:03d}.npz"
        fpath = directory / fname
        payload = arrays_to_bytes(bundle_to_arrays(bundle))
        digest = sha256_bytes(payload)
        if fpath.exists():
            if sha256_file(fpath) != digest:
                raise ChecksumError(
                    f"bundle file {fpath} differs from the in-memory task "
                    f"{bundle.task_id}; prior tasks are immutable"
                )
        else:
            fpath.write_bytes(payload)
        tasks.append(
            {
                "task_id": bundle.task_id,
                "class_ids": list(bundle.class_ids),
                "class_names": list(bundle.class_names),
                "file": fname,
                "sha256": digest,
                "embed_dim": bundle.embed_dim,
                "num_classes": bundle.num_classes,
            }
        )
    for old in previous[len(tasks) :]:  # pragma: no cover - defensive
        raise ChecksumError(f"pool on disk has extra task {old['task_id']}")
    manifest = {"format": 1, "num_tasks": len(tasks), "tasks": tasks}
    write_json(manifest_path, manifest)
    return manifest


def load_pool(directory: str | Path, upto: int | None = None) -> PromptPool:
    """Load bundles from a pool directory, verifying stored checksums."""
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise ConfigurationError(f"no pool manifest at {manifest_path}")
    manifest = read_json(manifest_path)
    pool = PromptPool()
    for entry in manifest["tasks"]:
        if upto is not None and entry["task_id"] > upto:
            break
        fpath = directory / entry["file"]
        if not fpath.exists():
            raise ChecksumError(f"missing bundle file {fpath}")
        if sha256_file(fpath) != entry["sha256"]:
            raise ChecksumError(f"checksum mismatch for {fpath}")
        arrays = load_arrays(fpath)
        pool.append(
            bundle_from_arrays(
                arrays,
                task_id=entry["task_id"],
                class_ids=tuple(entry["class_ids"]),
                class_names=tuple(entry["class_names"]),
            )
        )
    return pool
