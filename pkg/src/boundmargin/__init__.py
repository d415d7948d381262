"""SoftMax-slope regularized training with generated unlabeled data.

A small numpy autodiff engine, MLP and LeNet models, Gaussian unlabeled and
neighbor generation, the slope regularizer, white-box attacks (FGSM, PGD,
DeepFool) and a config-driven command line.
"""

from .errors import (
    BoundMarginError,
    ConfigError,
    ContractError,
    DimensionError,
    FormatError,
    NonFiniteError,
    TrainingAborted,
)

__version__ = "0.1.0"

__all__ = [
    "BoundMarginError",
    "ConfigError",
    "ContractError",
    "DimensionError",
    "FormatError",
    "NonFiniteError",
    "TrainingAborted",
    "__version__",
]
