"""Focal-stack depth estimation on a self-contained float64 autodiff core."""

from .cmfa import Cmfa, CmfaConfig, cmfa_forward
from .cru import Cru, CruConfig, cru_forward, node_count, zero_fuse
from .errors import (
    ConfigError,
    DomainError,
    EvaluationError,
    FormatError,
    LfdepthError,
    NumericalCheckError,
    ShapeError,
    UsageError,
)
from .metrics import DepthMetrics, aggregate, evaluate
from .model import (
    LADDER,
    DepthNet,
    DepthPrediction,
    NetworkConfig,
    depth_loss,
    ladder_config,
    loss_terms,
    prediction_loss,
)
from .params import ModuleParams, load_params, save_params
from .synthdata import (
    GenSpec,
    Scene,
    augment,
    generate_dataset,
    generate_scene,
    load_split,
    read_scene,
    write_scene,
)
from .tensor import Tensor, as_tensor, no_grad
from .train import (
    Adam,
    TrainState,
    ablation_run,
    evaluate_model,
    format_table,
    load_checkpoint,
    save_checkpoint,
    train_model,
)

__version__ = "0.1.0"
