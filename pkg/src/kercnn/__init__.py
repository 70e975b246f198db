"""CNNs with parameter-free lateral kernels derived from their own filters.

Numpy-only reverse-mode autodiff, the base CNN / KerCNN / RecCNN models,
test-time corruptions, training, and a sweep driver.
"""

from .autodiff import NonFiniteError, Tensor, no_grad, set_dtype
from .corruptions import CorruptionSpec
from .data import Dataset, load_dataset
from .lateral import LateralKernel, apply_kernel, kernel_action, lateral_kernel, propagate_kernel
from .models import ModelConfig, ModelState, count_parameters, forward, mnist_cnn, mnist_kercnn, mnist_reccnn, predict
from .train import TrainConfig, evaluate, init_state, train

__version__ = "0.1.0"

__all__ = [
    "NonFiniteError",
    "Tensor",
    "no_grad",
    "set_dtype",
    "CorruptionSpec",
    "Dataset",
    "load_dataset",
    "LateralKernel",
    "apply_kernel",
    "kernel_action",
    "lateral_kernel",
    "propagate_kernel",
    "ModelConfig",
    "ModelState",
    "count_parameters",
    "forward",
    "mnist_cnn",
    "mnist_kercnn",
    "mnist_reccnn",
    "predict",
    "TrainConfig",
    "evaluate",
    "init_state",
    "train",
]
