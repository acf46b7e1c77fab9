"""Differential corner-case generation for small image classifiers.

Three classifiers trained for the same task are pushed, by constrained
gradient ascent, toward inputs on which they disagree while the ascent also
tries to activate neurons not yet covered. The disagreeing inputs are
collected as a corpus and used to retrain the models.
"""

from .coverage import CoverageMap, NeuronId
from .exceptions import CornerCaseError, DatasetError, NumericalError, ShapeError, TrainingError, UsageError
from .generator import CornerCase, CornerCaseGenerator, GenerationConfig, generate_from_seed, run_campaign
from .model_zoo import LeNetClassifier, ModelEnsemble, build_variant, train_ensemble
from .tensor_core import Network

__version__ = "0.1.0"

__all__ = [
    "CornerCase",
    "CornerCaseError",
    "CornerCaseGenerator",
    "CoverageMap",
    "DatasetError",
    "GenerationConfig",
    "LeNetClassifier",
    "ModelEnsemble",
    "Network",
    "NeuronId",
    "NumericalError",
    "ShapeError",
    "TrainingError",
    "UsageError",
    "build_variant",
    "generate_from_seed",
    "run_campaign",
    "train_ensemble",
]
