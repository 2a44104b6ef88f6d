"""Adversarial symmetric variational autoencoders.

A VAE whose training objective is the symmetric KL divergence between
the encoder joint q(x)q(z|x) and the decoder joint p(z)p(x|z), driven
by two adversarial ratio estimators, next to an exact discrete-space
oracle that verifies the theory the estimators rely on.

The heavy lifting happens in plain numpy on a small reverse-mode tape
(autodiff). Start with the ASVAE estimator or the command line tool.
"""

from .autodiff import Tensor, backward, checked, finite_diff_check, unchecked
from .errors import (
    AsvaeError,
    ConfigError,
    ContractError,
    DomainError,
    FormatError,
    NumericsError,
    ShapeError,
    StateError,
    TrainingError,
)
from .estimator import ASVAE
from .networks import ModelBundle, build_bundle
from .oracle import verify_all
from .rng import RngStream
from .trainer import TrainConfig, run_training, train_on_arrays

__version__ = "0.1.0"

__all__ = [
    "ASVAE",
    "AsvaeError",
    "ConfigError",
    "ContractError",
    "DomainError",
    "FormatError",
    "ModelBundle",
    "NumericsError",
    "RngStream",
    "ShapeError",
    "StateError",
    "Tensor",
    "TrainConfig",
    "TrainingError",
    "backward",
    "build_bundle",
    "checked",
    "finite_diff_check",
    "run_training",
    "train_on_arrays",
    "unchecked",
    "verify_all",
    "__version__",
]
