"""polylab: a numerical laboratory for polynomial-composition activations.

Subpackages:
  tensor        dense float64 autodiff core with a finite-difference oracle
  activations   the polynomial composites and baseline activations
  transformer   toy causal decoder with swappable feed-forward activations
  trainer       AdamW + cosine schedule training loop over byte-level data
  analysis      effective rank, layer similarity, activation cost accounting
  netconstruct  exact and approximate network conversion constructions
  cli           the `polylab` command (train / analyze / theory / flops)
"""

from .activations import ActivationSpec, PolyCoeffs, init_coeffs, polynorm, polyrelu
from .tensor import Tensor, finite_diff_grad
from .transformer import Model, TransformerConfig
from .trainer import TrainConfig, train_loop

__version__ = "0.1.0"

__all__ = [
    "ActivationSpec",
    "PolyCoeffs",
    "Model",
    "Tensor",
    "TrainConfig",
    "TransformerConfig",
    "finite_diff_grad",
    "init_coeffs",
    "polynorm",
    "polyrelu",
    "train_loop",
    "__version__",
]
