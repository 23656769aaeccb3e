"""Local and global cross-modal attention fusion of fundus and OCT features.

A small numpy autograd engine, toy encoders for both modalities, the two
attention fusion modules, metrics for ordinal grading, and a training and
ablation pipeline driven from the ``elf-fusion`` command line.
"""

from .config import FusionConfig, RunConfig, SynthSpec, TrainConfig, load_config
from .fusion import forward, init_params
from .metrics import ConfusionMatrix, accuracy, quadratic_weighted_kappa
from .tensor import Tensor, backward, no_grad
from .train import evaluate, train

__version__ = "0.1.0"

__all__ = [
    "ConfusionMatrix",
    "FusionConfig",
    "RunConfig",
    "SynthSpec",
    "Tensor",
    "TrainConfig",
    "accuracy",
    "backward",
    "evaluate",
    "forward",
    "init_params",
    "load_config",
    "no_grad",
    "quadratic_weighted_kappa",
    "train",
]
