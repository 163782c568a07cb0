"""Tri-branch fully convolutional curriculum adaptation for segmentation."""

__version__ = "0.1.0"

from .tensor import Tensor, no_grad  # noqa: F401
