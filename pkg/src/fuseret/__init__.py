"""fuseret: desk-scale multimodal diabetic-retinopathy severity grading.

A 2D fundus-photo encoder and a 3D angiography-volume encoder (both
squeeze-and-excitation residual networks) are fused at the feature level and
regularized with manifold mixup at the fusion layer. Everything runs on a
small reverse-mode autodiff core with compiled convolution kernels and a
numpy fallback.
"""

__version__ = "0.1.0"

from .tensor import Tensor  # noqa: F401
