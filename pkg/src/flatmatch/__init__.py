"""Cross-sharpness regularized semi-supervised learning on small MLPs."""

from .autodiff import Tape, Tensor, backward, finite_diff_check, no_grad, value_and_grad
from .config import build_config, load_config
from .data import AugmentationSpec, SslDataset, augment, batch_sampler, make_dataset, split_ssl
from .diagnostics import LandscapeGrid, gradient_angle, landscape_1d, landscape_2d, sharpness_probe
from .errors import ConfigError, ContractError, DimensionError, DomainError, FlatMatchError, NumericError
from .estimator import FlatMatchClassifier
from .losses import MaskedTargets, consistency_loss, cross_entropy, pseudo_targets
from .model import MlpSpec, ParamVector, forward, init_params, perturb, random_direction
from .optim import (
    FlatMatchConfig,
    GradBuffer,
    SgdState,
    cross_sharpness,
    ema_update,
    flatmatch_step,
    sam_perturbation,
    sgd_step,
)
from .trainers import (
    ExperimentRecord,
    TrainConfig,
    select_topk_confident,
    train_flatmatch,
    train_flatmatch_fixed_labels,
    train_ssl_baseline,
    train_supervised,
)

__version__ = "0.1.0"

__all__ = [
    "AugmentationSpec",
    "ConfigError",
    "ContractError",
    "DimensionError",
    "DomainError",
    "ExperimentRecord",
    "FlatMatchClassifier",
    "FlatMatchConfig",
    "FlatMatchError",
    "GradBuffer",
    "LandscapeGrid",
    "MaskedTargets",
    "MlpSpec",
    "NumericError",
    "ParamVector",
    "SgdState",
    "SslDataset",
    "Tape",
    "Tensor",
    "TrainConfig",
    "augment",
    "backward",
    "batch_sampler",
    "build_config",
    "consistency_loss",
    "cross_entropy",
    "cross_sharpness",
    "ema_update",
    "finite_diff_check",
    "flatmatch_step",
    "forward",
    "gradient_angle",
    "init_params",
    "landscape_1d",
    "landscape_2d",
    "load_config",
    "make_dataset",
    "no_grad",
    "perturb",
    "pseudo_targets",
    "random_direction",
    "sam_perturbation",
    "select_topk_confident",
    "sgd_step",
    "sharpness_probe",
    "split_ssl",
    "train_flatmatch",
    "train_flatmatch_fixed_labels",
    "train_ssl_baseline",
    "train_supervised",
    "value_and_grad",
]
