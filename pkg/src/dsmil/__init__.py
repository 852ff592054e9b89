"""Weakly supervised object detection over bags of proposal features.

Multiple-instance image classification, instance-level attention, EM proposal
selection and cascaded refinement with box regression, plus VOC-style
evaluation and a synthetic planted-object data generator.
"""
from .data import ProposalBag, SyntheticConfig, generate_dataset, read_dataset, write_dataset
from .evaluation import DetectionResult, evaluate
from .model import ModelParameters
from .numerics import Tensor
from .trainer import TrainConfig, train

__all__ = [
    "DetectionResult",
    "ModelParameters",
    "ProposalBag",
    "SyntheticConfig",
    "Tensor",
    "TrainConfig",
    "evaluate",
    "generate_dataset",
    "read_dataset",
    "train",
    "write_dataset",
]
__version__ = "0.1.0"
