"""mapnet: train a network by training a small latent that generates its parameters.

A fixed orthonormal matrix ``W0`` (``P x d``), modulated by the latent ``z``
itself, maps ``z`` to the full parameter vector of a target network::

    theta = out_scale * act(W0 z + alpha * ||z||^2)

Only ``z`` (and the log-weights of the regularisers) are trained.
"""

from .config import DEFAULTS, load_config, validate_config
from .data import Dataset, load_csv_series, load_idx_dir, read_idx, synth, write_idx
from .errors import ConfigError, ContractError, DataError, FormatError, NumericalAbort, PretrainedImportError
from .estimators import MappingNetworkClassifier, MappingNetworkRegressor, WeightManifoldPCA
from .mapping import build_plan, generate, init_orthogonal, make_state
from .trainer import ablation_sweep, evaluate, load_checkpoint, load_model, save_checkpoint, train
from .zoo import TargetArchitecture

__version__ = "0.1.0"

__all__ = [
    "DEFAULTS", "load_config", "validate_config",
    "Dataset", "load_csv_series", "load_idx_dir", "read_idx", "synth", "write_idx",
    "ConfigError", "ContractError", "DataError", "FormatError", "NumericalAbort", "PretrainedImportError",
    "MappingNetworkClassifier", "MappingNetworkRegressor", "WeightManifoldPCA",
    "build_plan", "generate", "init_orthogonal", "make_state",
    "ablation_sweep", "evaluate", "load_checkpoint", "load_model", "save_checkpoint", "train",
    "TargetArchitecture",
]
