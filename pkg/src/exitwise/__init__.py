"""Multi-exit classifiers: diversity-aware training and early-exit evaluation."""

from ._math import argmax_class, cross_entropy, entropy, softmax
from .estimator import MultiExitClassifier
from .exceptions import (
    DataFormatError,
    ExitwiseError,
    InvalidInputError,
    StaleCacheError,
    TrainingDivergedError,
)
from .harness import (
    Dataset,
    ExitLog,
    LayerTrace,
    SweepPoint,
    compare_policies,
    dump_exitlog,
    evaluate,
    gen_synthetic,
    load_csv_dataset,
    load_exitlog,
    sweep,
)
from .model import ModelConfig, MultiExitModel, forward, forward_prefix, init_model, load_checkpoint, save_checkpoint
from .objective import ObjectiveConfig, combined_loss, diversity_loss, relevancy_loss, train
from .strategies import ExitOutcome, ExitPolicy, parse_policy, vote_score

__version__ = "0.1.0"
