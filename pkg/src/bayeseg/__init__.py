"""Variational Bayesian U-Net segmentation with Monte-Carlo uncertainty.

Submodules: ``tensor`` (autograd), ``variational`` (Gaussian conv layers),
``unet``, ``training``, ``uncertainty``, ``evaluation``, ``data``,
``biomarkers``, ``io``, ``checkpoint``, ``config`` and ``cli``.
"""

from .kernels import BACKEND
from .training import TrainConfig, train
from .uncertainty import SampleStack, mc_sample, total
from .unet import BayesUNet, UNetConfig

__version__ = "0.1.0"

__all__ = ["BACKEND", "BayesUNet", "SampleStack", "TrainConfig", "UNetConfig", "mc_sample", "total", "train"]
