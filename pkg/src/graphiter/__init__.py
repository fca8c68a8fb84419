"""Scale-generalizing graph networks on a small numpy autodiff engine.

Submodules: ``tensor`` (autodiff), ``graph`` (graphs and generators),
``oracles`` (exact solvers), ``layers`` and ``model`` (network layers and
composition), ``iterative`` (halting controllers), ``tasks`` (datasets),
``training`` (optimisation and evaluation), ``experiments`` and ``cli``.
"""

__version__ = "0.1.0"

from .graph import Graph, generate
from .iterative import IterConfig, IterTrace, iterate
from .model import ModelSpec, forward, init_params, load_checkpoint, predict, save_checkpoint
from .tasks import DatasetSpec, TaskSample, generate_dataset, read_dataset, write_dataset
from .training import TrainConfig, evaluate, success_rate, train

__all__ = [
    "Graph", "generate", "IterConfig", "IterTrace", "iterate", "ModelSpec", "forward", "init_params",
    "load_checkpoint", "predict", "save_checkpoint", "DatasetSpec", "TaskSample", "generate_dataset",
    "read_dataset", "write_dataset", "TrainConfig", "evaluate", "success_rate", "train",
]
