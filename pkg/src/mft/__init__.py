"""Multi-context fusion transformer for pedestrian crossing-intention prediction.

The package is organised bottom-up:

* ``tensor``     numpy-backed tensors with a reverse-mode tape
* ``ingest``     annotation parsing, clip sampling and feature encoding
* ``synth``      synthetic annotated tracks with a known labelling rule
* ``model``      the fusion transformer and its parameter ledger
* ``train``      weighted BCE and Adam
* ``evaluate``   metrics, attention summaries and the ablation grid
* ``checkpoint``, ``config``, ``gradcheck``, ``cli``
"""

from .errors import ConfigError, ContractError, DataError, MFTError, NumericError, ParseError, SchemaError, ShapeError
from .model import MFTConfig, forward, forward_batch, init_parameters, param_count, predict
from .train import TrainConfig, train
from .evaluate import compute_metrics, roc_auc

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractError",
    "DataError",
    "MFTError",
    "NumericError",
    "ParseError",
    "SchemaError",
    "ShapeError",
    "MFTConfig",
    "TrainConfig",
    "compute_metrics",
    "forward",
    "forward_batch",
    "init_parameters",
    "param_count",
    "predict",
    "roc_auc",
    "train",
]
