"""Two-stream audiovisual classifiers with learnable cross-modal connections.

Modules: ``tensor`` (numeric kernels), ``autodiff`` (reverse-mode graph),
``nn`` (layers), ``xconn`` (1D/2D connection pipelines), ``models``
(architectures, archives), ``optim`` (Adam, training loop), ``data``
(tensor files, datasets, synthetic generator), ``evaluation`` (cross-validation,
t-test, ablation), ``analysis`` (interpretability exports), ``cli``.
"""
from xflow._backend import NAME as BACKEND
from xflow.data import Dataset, Example, gen_synthetic, load_dataset, save_dataset
from xflow.errors import ContractError, FormatError, ValidationError
from xflow.evaluation import ablate, crossval, paired_t_test
from xflow.models import ModelConfig, build_model, load_params, param_count, save_params
from xflow.optim import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "ContractError", "Dataset", "Example", "FormatError", "ModelConfig", "TrainConfig",
    "ValidationError", "ablate", "build_model", "crossval", "evaluate", "gen_synthetic", "load_dataset",
    "load_params", "paired_t_test", "param_count", "save_dataset", "save_params", "train",
]
