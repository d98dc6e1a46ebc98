"""flowkan: a self-contained flow-matching visuomotor policy library.

A minimal reverse-mode autodiff core, an RWKV-KAN velocity network,
consistency flow-matching training with action consistency regularization,
and built-in toy manipulation environments for end-to-end verification.
"""

from .backbone import BackboneConfig, VelocityNet, count_params
from .config import RunConfig, load_config, save_config
from .diffcore import DiffTensor, Tape, no_grad
from .envsuite import EnvConfig, ToyEnv, evaluate_policy
from .flowmatch import Policy

__version__ = "0.1.0"

__all__ = [
    "BackboneConfig", "VelocityNet", "count_params",
    "RunConfig", "load_config", "save_config",
    "DiffTensor", "Tape", "no_grad",
    "EnvConfig", "ToyEnv", "evaluate_policy",
    "Policy", "__version__",
]
