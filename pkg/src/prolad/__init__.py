"""Progressive adapter fine-tuning with adaptive distillation, at desk scale.

Subpackages follow the data flow: :mod:`tensor` (autodiff), :mod:`nn`
(backbone, losses, optimizers), :mod:`adapters`, :mod:`data` (synthetic
domains and episodes), :mod:`similarity` (coefficients, EMD, statistics
profiles), :mod:`pipeline` (the three training stages), :mod:`harness`
(evaluation and ablations) and :mod:`cli`.
"""
from .errors import (ConfigurationError, ContractError, DimensionError, FormatError, InputError,
                     ProladError, TrainingError)
from .kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = ["ConfigurationError", "ContractError", "DimensionError", "FormatError", "InputError",
           "ProladError", "TrainingError", "KERNEL_BACKEND", "__version__"]
