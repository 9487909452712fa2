"""Experiment configuration: strict YAML schema with round-trip serialization.

Unknown keys are rejected with their full path so config typos fail before
any work starts. The parsed object regenerates the exact same YAML mapping,
which keeps run manifests self-describing.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .backbone import BackboneConfig
from .data import DatasetSpec
from .errors import ConfigurationError
from .matching import SELECTION_MODES
from .training import ProtocolSpec, TaskModelSpec, TrainConfig

_SCHEMA: dict[str, dict] = {
    "protocol": {
        "total_classes": int,
        "classes_per_task": int,
        "order_seed": (int, type(None)),
    },
    "train": {
        "learning_rate": float,
        "momentum": float,
        "batch_size": int,
        "epochs": int,
    },
    "backbone": {
        "provider": str,  # toy | pretrained
        "pretrained_path": (str, type(None)),
        "num_layers": int,
        "embed_dim": int,
        "num_heads": int,
        "image_size": int,
        "patch_size": int,
        "in_channels": int,
        "adapter_layers": (list, str),  # explicit list or "all"
        "bottleneck_dim": int,
        "seed": int,
    },
    "encoder": {
        "name": str,  # fixture[:seed] | sentence-transformers id
        "dim": int,
        "cache_path": (str, type(None)),
        "projection_seed": int,
    },
    "model": {
        "visual_prompt_length": int,
        "contrast_alpha": float,
        "temperature": float,
    },
    "selection_mode": str,
    "ablation": {
        "use_adapter": bool,
        "use_semantic_prompt": bool,
    },
    "dataset": {
        "kind": str,
        "num_classes": int,
        "train_per_class": int,
        "test_per_class": int,
        "image_size": int,
        "margin": float,
        "noise_std": float,
        "seed": int,
        "root": (str, type(None)),
        "class_names": (list, type(None)),
    },
    "seeds": list,
    "output_dir": str,
}

_DEFAULTS: dict = {
    "protocol": {"total_classes": 10, "classes_per_task": 2, "order_seed": None},
    "train": {"learning_rate": 0.01, "momentum": 0.9, "batch_size": 24, "epochs": 20},
    "backbone": {
        "provider": "toy",
        "pretrained_path": None,
        "num_layers": 2,
        "embed_dim": 32,
        "num_heads": 4,
        "image_size": 8,
        "patch_size": 4,
        "in_channels": 1,
        "adapter_layers": "all",
        "bottleneck_dim": 8,
        "seed": 11,
    },
    "encoder": {"name": "fixture", "dim": 32, "cache_path": None, "projection_seed": 23},
    "model": {"visual_prompt_length": 10, "contrast_alpha": 0.3, "temperature": 1.0},
    "selection_mode": "full",
    "ablation": {"use_adapter": True, "use_semantic_prompt": True},
    "dataset": {
        "kind": "synthetic",
        "num_classes": 10,
        "train_per_class": 30,
        "test_per_class": 10,
        "image_size": 8,
        "margin": 12.0,
        "noise_std": 0.2,
        "seed": 5,
        "root": None,
        "class_names": None,
    },
    "seeds": [1],
    "output_dir": "runs/experiment",
}


def _check_section(path: str, value, schema) -> None:
    if isinstance(schema, dict):
        if not isinstance(value, dict):
            raise ConfigurationError(f"config field {path!r} must be a mapping")
        unknown = set(value) - set(schema)
        if unknown:
            raise ConfigurationError(
                f"unknown config key {path + '.' + sorted(unknown)[0]!r}"
            )
        for key, sub in schema.items():
            if key in value:
                _check_section(f"{path}.{key}" if path else key, value[key], sub)
        return
    types = schema if isinstance(schema, tuple) else (schema,)
    if float in types and isinstance(value, int) and not isinstance(value, bool):
        return  # ints are acceptable floats
    if not isinstance(value, tuple(t for t in types)) or (
        isinstance(value, bool) and bool not in types
    ):
        names = "/".join(t.__name__ for t in types)
        raise ConfigurationError(
            f"config field {path!r} must be {names}, got {type(value).__name__}"
        )


def _merge(defaults: dict, overrides: dict) -> dict:
    merged = {}
    for key, default in defaults.items():
        if key in overrides and isinstance(default, dict):
            merged[key] = _merge(default, overrides[key])
        elif key in overrides:
            merged[key] = overrides[key]
        else:
            merged[key] = default if not isinstance(default, (dict, list)) else (
                dict(default) if isinstance(default, dict) else list(default)
            )
    return merged


@dataclass
class ExperimentConfig:
    """Validated experiment settings; construct via ``from_dict`` or ``load``."""

    values: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, payload: dict) -> "ExperimentConfig":
        if not isinstance(payload, dict):
            raise ConfigurationError("config root must be a mapping")
        _check_section("", payload, _SCHEMA)
        values = _merge(_DEFAULTS, payload)
        cfg = cls(values=values)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            payload = yaml.safe_load(Path(path).read_text())
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"cannot parse config {path}: {exc}") from exc
        return cls.from_dict(payload or {})

    def to_dict(self) -> dict:
        return self.values

    def save(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.values, sort_keys=True))

    def validate(self) -> None:
        v = self.values
        if v["selection_mode"] not in SELECTION_MODES:
            raise ConfigurationError(
                f"selection_mode must be one of {SELECTION_MODES}, "
                f"got {v['selection_mode']!r}"
            )
        if v["backbone"]["provider"] not in ("toy", "pretrained"):
            raise ConfigurationError("backbone.provider must be 'toy' or 'pretrained'")
        if v["backbone"]["provider"] == "pretrained" and not v["backbone"]["pretrained_path"]:
            raise ConfigurationError("pretrained backbone needs backbone.pretrained_path")
        if not v["seeds"]:
            raise ConfigurationError("seeds must list at least one seed")
        if not all(isinstance(s, int) and not isinstance(s, bool) for s in v["seeds"]):
            raise ConfigurationError("seeds must be integers")
        if v["dataset"]["num_classes"] != v["protocol"]["total_classes"]:
            raise ConfigurationError(
                f"dataset has {v['dataset']['num_classes']} classes but the "
                f"protocol expects {v['protocol']['total_classes']}"
            )
        if v["dataset"]["image_size"] != v["backbone"]["image_size"]:
            raise ConfigurationError("dataset and backbone image sizes differ")
        # constructing the component configs surfaces their own errors early
        self.protocol_spec()
        self.train_config()
        self.backbone_config()
        self.model_spec()
        self.dataset_spec()

    # ------------------------------------------------------------------
    # typed views
    # ------------------------------------------------------------------
    def protocol_spec(self) -> ProtocolSpec:
        p = self.values["protocol"]
        return ProtocolSpec(
            total_classes=p["total_classes"],
            classes_per_task=p["classes_per_task"],
            order_seed=p["order_seed"],
        )

    def train_config(self) -> TrainConfig:
        t = self.values["train"]
        return TrainConfig(
            learning_rate=float(t["learning_rate"]),
            momentum=float(t["momentum"]),
            batch_size=t["batch_size"],
            epochs=t["epochs"],
        )

    def adapter_layers(self) -> tuple[int, ...]:
        b = self.values["backbone"]
        if not self.values["ablation"]["use_adapter"]:
            return ()
        if b["adapter_layers"] == "all":
            return tuple(range(b["num_layers"]))
        if isinstance(b["adapter_layers"], str):
            raise ConfigurationError(
                f"backbone.adapter_layers must be 'all' or a list, got "
                f"{b['adapter_layers']!r}"
            )
        return tuple(int(x) for x in b["adapter_layers"])

    def backbone_config(self) -> BackboneConfig:
        b = self.values["backbone"]
        return BackboneConfig(
            num_layers=b["num_layers"],
            embed_dim=b["embed_dim"],
            num_heads=b["num_heads"],
            image_size=b["image_size"],
            patch_size=b["patch_size"],
            in_channels=b["in_channels"],
            adapter_layers=self.adapter_layers(),
            seed=b["seed"],
        )

    def model_spec(self) -> TaskModelSpec:
        m = self.values["model"]
        return TaskModelSpec(
            visual_prompt_length=m["visual_prompt_length"],
            bottleneck_dim=self.values["backbone"]["bottleneck_dim"],
            adapter_layers=self.adapter_layers(),
            contrast_alpha=float(m["contrast_alpha"]),
            temperature=float(m["temperature"]),
            semantic_prompt_trainable=not self.values["ablation"]["use_semantic_prompt"],
        )

    def dataset_spec(self) -> DatasetSpec:
        return DatasetSpec.from_dict(self.values["dataset"])
