"""Spatio-temporal graph attention pipeline for accident anticipation.

The package trains and evaluates a frame-level accident predictor on
precomputed feature bundles: per-object detections with visual and label
embeddings plus one global descriptor per frame. Everything runs on a small
built-in autodiff engine; no deep-learning framework is required.
"""

from stagnet.tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = ["Tensor", "no_grad", "__version__"]
