"""Desk-scale continual-learning lab: sequential adapter training with
task-vector perturbation, diagonal curvature estimation, and closed-form
convex merging of successive task solutions."""

from .errors import (
    ConfigError,
    DegenerateTaskVector,
    DimensionError,
    DivergenceError,
    EmptyDataError,
    FormatError,
    IncompleteRunError,
    LabelError,
    NumericalError,
    PamError,
    UnsupportedModelError,
)
from .fisher import fd_quad_form, fisher_diag, quad_form, quad_form_fd
from .merging import (
    MergeInfo,
    MergeState,
    apply_alpha,
    bound_check,
    merge,
    objective_J,
    optimal_alpha,
)
from .models import Batch, ModelSpec, accuracy, ce_loss, loss_and_grad, predict
from .params import (
    FisherDiag,
    Layout,
    LowRankAdapter,
    TaskCheckpoint,
    as_vector,
    load_checkpoint,
    materialize,
    save_checkpoint,
)
from .streams import StreamSpec, TaskDataset, generate, generate_task
from .training import PerturbConfig, TrainConfig, train_task

__version__ = "0.1.0"

__all__ = [
    "Batch",
    "ConfigError",
    "DegenerateTaskVector",
    "DimensionError",
    "DivergenceError",
    "EmptyDataError",
    "FisherDiag",
    "FormatError",
    "IncompleteRunError",
    "LabelError",
    "Layout",
    "LowRankAdapter",
    "MergeInfo",
    "MergeState",
    "ModelSpec",
    "NumericalError",
    "PamError",
    "PerturbConfig",
    "StreamSpec",
    "TaskCheckpoint",
    "TaskDataset",
    "TrainConfig",
    "UnsupportedModelError",
    "accuracy",
    "apply_alpha",
    "as_vector",
    "bound_check",
    "ce_loss",
    "fd_quad_form",
    "fisher_diag",
    "generate",
    "generate_task",
    "load_checkpoint",
    "loss_and_grad",
    "materialize",
    "merge",
    "objective_J",
    "optimal_alpha",
    "predict",
    "quad_form",
    "quad_form_fd",
    "save_checkpoint",
    "train_task",
    "__version__",
]
