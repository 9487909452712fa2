import numpy as np
import pytest
import torch

from semcl.backbone import BackboneConfig, VisionBackbone, init_adapter
from semcl.config import ExperimentConfig
from semcl.core import TaskBundle
from semcl.runner import run_single


def desk_config_dict(**overrides) -> dict:
    """The desk-scale experiment: 5 tasks x 2 classes on the seeded toy backbone."""
    base = {
        "protocol": {"total_classes": 10, "classes_per_task": 2},
        "train": {"learning_rate": 0.1, "epochs": 20},
        "model": {"visual_prompt_length": 4},
        "dataset": {"seed": 9, "margin": 12.0, "noise_std": 0.2},
        "seeds": [1],
    }
    for key, value in overrides.items():
        if isinstance(value, dict):
            base.setdefault(key, {}).update(value)
        else:
            base[key] = value
    return base


def tiny_config_dict(**overrides) -> dict:
    """A 2-task protocol small enough for per-test CLI runs."""
    return desk_config_dict(
        protocol={"total_classes": 4, "classes_per_task": 2},
        train={"learning_rate": 0.1, "epochs": 6},
        dataset={"seed": 9, "num_classes": 4, "train_per_class": 10, "test_per_class": 5},
        **overrides,
    )


@pytest.fixture(scope="session")
def toy_backbone() -> VisionBackbone:
    return VisionBackbone.toy(BackboneConfig())


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """One completed desk-scale run, shared by every test that only reads it."""
    run_dir = tmp_path_factory.mktemp("desk") / "run"
    config = ExperimentConfig.from_dict(desk_config_dict())
    summary = run_single(config, seed=1, run_dir=run_dir)
    return {"run_dir": run_dir, "config": config, "summary": summary}


def make_bundle(
    d: int = 32,
    n_classes: int = 2,
    l_vp: int = 4,
    adapter_layers: tuple[int, ...] = (0, 1),
    bottleneck: int = 8,
    seed: int = 3,
    with_prototypes: bool = True,
    nonzero_adapters: bool = False,
) -> TaskBundle:
    """Hand-built bundle for unit tests; values are seeded, not trained.

    Adapters draw from the generator last, so bundles with and without them
    share every other tensor for the same seed.
    """
    gen = torch.Generator().manual_seed(seed)

    def rand(*shape):
        return torch.randn(*shape, generator=gen, dtype=torch.float64)

    visual_prompt = rand(l_vp, d).requires_grad_(True)
    semantic_prompt = rand(d)
    key_set = rand(n_classes, d).requires_grad_(True)
    class_semantics = rand(n_classes, d)
    prototypes = rand(n_classes, d) if with_prototypes else None
    classifier = torch.nn.Linear(d, n_classes, dtype=torch.float64)
    with torch.no_grad():
        classifier.weight.copy_(rand(n_classes, d) * d**-0.5)
        classifier.bias.zero_()
    adapters = {}
    for layer in adapter_layers:
        params = init_adapter(layer, d, bottleneck, gen)
        if nonzero_adapters:
            with torch.no_grad():
                params.w_up.copy_(rand(bottleneck, d) * 0.2)
        adapters[layer] = params
    return TaskBundle(
        task_id=1,
        class_ids=tuple(range(n_classes)),
        class_names=tuple(f"class{i:02d}" for i in range(n_classes)),
        visual_prompt=visual_prompt,
        semantic_prompt=semantic_prompt,
        key_set=key_set,
        adapter_stack=adapters,
        classifier=classifier,
        class_semantic_embeddings=class_semantics,
        prototypes=prototypes,
    )


def rand_images(count: int, size: int = 8, seed: int = 0) -> torch.Tensor:
    rng = np.random.default_rng(seed)
    return torch.from_numpy(rng.standard_normal((count, size, size)))
