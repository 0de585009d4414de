"""Bias unlearning on synthetic skin-lesion images with a small numpy autodiff."""

from .autodiff import Tensor, backward, grad_reverse, no_grad
from .models import ExtractorConfig, HeadSpec, ModelBundle
from .synthdata import Dataset, DatasetRecipe, generate
from .unlearn import TrainConfig, train

__all__ = [
    "Tensor", "backward", "grad_reverse", "no_grad",
    "ExtractorConfig", "HeadSpec", "ModelBundle",
    "Dataset", "DatasetRecipe", "generate",
    "TrainConfig", "train",
]
__version__ = "0.1.0"
