"""Continual learning with per-task multimodal prompts and semantic adapters.

A frozen vision transformer is adapted to each incremental task through a
trainable visual prompt, a text-encoder-derived semantic prompt, per-layer
bottleneck adapters, class keys, and a task classifier, all stored in an
append-only pool. At inference, three query-key matching strategies vote on
which task's parameters to apply.
"""

from .backbone import (
    AdapterParams,
    BackboneConfig,
    ForwardOutput,
    VisionBackbone,
    adapter_forward,
    finite_difference_check,
)
from .core import (
    LabelSpace,
    PromptPool,
    TaskBundle,
    TokenSequence,
    assemble_input,
    cosine,
)
from .config import ExperimentConfig
from .data import DatasetSpec, IndexedDataset, ingest
from .errors import (
    ChecksumError,
    ConfigurationError,
    DataError,
    DegenerateInputError,
    EmptyClassError,
    MissingEmbeddingError,
    NumericalError,
    ProtocolError,
    SemclError,
)
from .losses import (
    ContrastConfig,
    PairIndicator,
    classification_loss,
    semantic_contrast_loss,
    total_loss,
)
from .matching import (
    ScoreVector,
    SelectionRecord,
    entropy,
    multi_key_loss,
    prototype_distribution,
    score_against_task,
    select_task,
    train_keys,
    vote,
)
from .metrics import (
    AccuracyMatrix,
    SelectionMatrix,
    avg_acc,
    forgetting,
    last_acc,
    selection_accuracy,
    selection_matrix,
)
from .text import (
    ClassTemplate,
    EmbeddingCache,
    FixtureEncoder,
    SemanticProjector,
    TaskTemplate,
    build_class_template,
    build_task_template,
    encode,
    project_to_backbone,
)
from .training import (
    ProtocolSpec,
    SessionReport,
    TaskModelSpec,
    TrainConfig,
    compute_prototypes,
    cosine_lr,
    evaluate_pool,
    run_protocol,
    split_tasks,
    train_task,
)

__version__ = "0.1.0"

__all__ = [
    "AccuracyMatrix",
    "AdapterParams",
    "BackboneConfig",
    "ChecksumError",
    "ClassTemplate",
    "ConfigurationError",
    "ContrastConfig",
    "DataError",
    "DatasetSpec",
    "DegenerateInputError",
    "EmbeddingCache",
    "EmptyClassError",
    "ExperimentConfig",
    "FixtureEncoder",
    "ForwardOutput",
    "IndexedDataset",
    "LabelSpace",
    "MissingEmbeddingError",
    "NumericalError",
    "PairIndicator",
    "PromptPool",
    "ProtocolError",
    "ProtocolSpec",
    "ScoreVector",
    "SelectionMatrix",
    "SelectionRecord",
    "SemanticProjector",
    "SemclError",
    "SessionReport",
    "TaskBundle",
    "TaskModelSpec",
    "TaskTemplate",
    "TokenSequence",
    "TrainConfig",
    "VisionBackbone",
    "adapter_forward",
    "assemble_input",
    "avg_acc",
    "build_class_template",
    "build_task_template",
    "classification_loss",
    "compute_prototypes",
    "cosine",
    "cosine_lr",
    "encode",
    "entropy",
    "evaluate_pool",
    "finite_difference_check",
    "forgetting",
    "ingest",
    "last_acc",
    "multi_key_loss",
    "project_to_backbone",
    "prototype_distribution",
    "run_protocol",
    "score_against_task",
    "select_task",
    "selection_accuracy",
    "selection_matrix",
    "semantic_contrast_loss",
    "split_tasks",
    "total_loss",
    "train_keys",
    "train_task",
    "vote",
]
