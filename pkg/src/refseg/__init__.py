"""Referring image segmentation via query-conditioned dynamic convolution
kernels, built on a small tape-based tensor engine."""

from .autodiff import Parameter, Tape, Tensor, backward
from .config import ModelConfig, TrainConfig
from .data import GrammarConfig, Sample, generate_scene, generate_split
from .encoders import TokenSequence, Vocabulary, tokenize
from .gradcheck import grad_check
from .metrics import EvalReport, bce_loss, evaluate, iou
from .model import Model

__version__ = "0.1.0"

__all__ = [
    "Parameter",
    "Tape",
    "Tensor",
    "backward",
    "ModelConfig",
    "TrainConfig",
    "GrammarConfig",
    "Sample",
    "generate_scene",
    "generate_split",
    "TokenSequence",
    "Vocabulary",
    "tokenize",
    "grad_check",
    "EvalReport",
    "bce_loss",
    "evaluate",
    "iou",
    "Model",
    "__version__",
]
