"""gausstok: a dual-branch image tokenizer.

A vector-quantized latent grid is fused (elementwise product by default) with
a feature map splatted from fully discretized 2D Gaussians; a convolutional
decoder reconstructs the image from the fused map. Every differentiable kernel
ships with an independent oracle and a finite-difference gradient check.
"""

from .codebook import Codebook, QuantizationResult, ema_update, quantize_nn, straight_through
from .gaussian2d import Gaussian2D, build_covariance, eval_gaussian, eval_gaussian_grad
from .nets import ModelConfig, TokenizerModel
from .splat import SplatBatch, splat_backward, splat_forward, splat_reference
from .train import TrainConfig, train_loop

__version__ = "0.1.0"

__all__ = [
    "Codebook",
    "Gaussian2D",
    "ModelConfig",
    "QuantizationResult",
    "SplatBatch",
    "TokenizerModel",
    "TrainConfig",
    "build_covariance",
    "ema_update",
    "eval_gaussian",
    "eval_gaussian_grad",
    "quantize_nn",
    "splat_backward",
    "splat_forward",
    "splat_reference",
    "straight_through",
    "train_loop",
]
