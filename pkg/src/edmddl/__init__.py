"""Koopman operator approximation by EDMD with trainable dictionaries.

The dictionary networks are residual MLPs or neural ODEs trained with the
adjoint method; the learned eigendecomposition gives multi-step predictions,
eigenfunctions and basin classification.
"""

__version__ = "0.1.0"

from .data import TimeSeriesDataset
from .edmd import EDMD, Dictionary, KoopmanModel, compute_gram, compute_K, decompose
from .networks import init_mlp, init_node
from .trainer import EDMDDL, TrainConfig, train

__all__ = [
    "EDMD",
    "EDMDDL",
    "Dictionary",
    "KoopmanModel",
    "TimeSeriesDataset",
    "TrainConfig",
    "compute_K",
    "compute_gram",
    "decompose",
    "init_mlp",
    "init_node",
    "train",
]
