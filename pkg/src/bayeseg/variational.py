"""Mean-field Gaussian convolution layers.

Each weight is ``N(mu, softplus(rho)^2)``; a forward pass draws one weight
sample with the reparameterization ``w = mu + softplus(rho) * eps``, so the
gradient reaches both ``mu`` and ``rho``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, conv2d, conv_transpose2d, log, softplus, tsum

DEFAULT_INIT_SIGMA = 1e-3


def softplus_inv(sigma):
    """``rho`` such that ``softplus(rho) == sigma``."""
    sigma = np.asarray(sigma, dtype=np.float64)
    return sigma + np.log(-np.expm1(-sigma))


@dataclass
class VariationalParams:
    mu: Tensor
    rho: Tensor
    prior_sigma: float = 1.0

    def __post_init__(self):
        if self.mu.shape != self.rho.shape:
            raise ValueError(f"mu shape {list(self.mu.shape)} != rho shape {list(self.rho.shape)}")
        if not self.prior_sigma > 0:
            raise ValueError("prior_sigma must be positive")

    @property
    def shape(self):
        return self.mu.shape

    @property
    def sigma(self) -> np.ndarray:
        return np.logaddexp(0.0, self.rho.data)

    @classmethod
    def create(cls, mu, sigma, prior_sigma=1.0):
        mu = np.asarray(mu, dtype=np.float64)
        rho = np.broadcast_to(softplus_inv(sigma), mu.shape)
        return cls(Tensor(mu, requires_grad=True), Tensor(rho, requires_grad=True), prior_sigma)


def sample_weights(params: VariationalParams, rng=None, eps=None) -> Tensor:
    """Draw one reparameterized sample. Pass ``eps`` to hold the noise fixed."""
    if eps is None:
        eps = rng.standard_normal(params.shape)
    return params.mu + softplus(params.rho) * Tensor(eps)


def kl_to_prior(params: VariationalParams) -> Tensor:
    """Closed-form ``KL(N(mu, sigma^2) || N(0, prior_sigma^2))`` summed over entries."""
    sp = params.prior_sigma
    sigma = softplus(params.rho)
    per_weight = (
        math.log(sp)
        - log(sigma)
        + (sigma * sigma + params.mu * params.mu) * (0.5 / sp**2)
        - 0.5
    )
    return tsum(per_weight)


class BayesConvLayer:
    """Variational 2-d convolution (or transposed convolution).

    Weight layout is ``[Cout, Cin, k, k]`` for a plain conv and
    ``[Cin, Cout, k, k]`` for a transposed one, matching the tensor ops.
    """

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0,
                 transposed=False, prior_sigma=1.0, init_sigma=DEFAULT_INIT_SIGMA, init="lecun",
                 rng=None):
        rng = np.random.default_rng() if rng is None else rng
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        self.transposed = transposed
        k = kernel_size
        if transposed:
            wshape = (in_channels, out_channels, k, k)
        else:
            wshape = (out_channels, in_channels, k, k)
        # a transposed conv output pixel sees k*k/stride^2 taps per input channel
        taps = k * k / (stride * stride) if transposed else k * k
        fan_in, fan_out = in_channels * taps, out_channels * taps
        bias_mu = np.zeros(out_channels)
        if init == "he":
            bound = math.sqrt(6.0 / fan_in)
        elif init == "glorot":
            bound = math.sqrt(6.0 / (fan_in + fan_out))
        elif init == "lecun":
            bound = math.sqrt(3.0 / fan_in)  # unit-variance-preserving for linear layers
        elif init == "fan_in":
            bound = 1.0 / math.sqrt(fan_in)
        else:
            raise ValueError(f"unknown init {init!r}")
        weight_mu = rng.uniform(-bound, bound, size=wshape)
        if init in ("fan_in", "lecun"):
            bias_mu = rng.uniform(-bound, bound, size=out_channels)
        self.weight = VariationalParams.create(weight_mu, init_sigma, prior_sigma)
        self.bias = VariationalParams.create(bias_mu, init_sigma, prior_sigma)

    def variational_params(self):
        return [self.weight, self.bias]

    def parameters(self):
        return [self.weight.mu, self.weight.rho, self.bias.mu, self.bias.rho]

    def kl(self) -> Tensor:
        return kl_to_prior(self.weight) + kl_to_prior(self.bias)

    def forward(self, x, rng) -> Tensor:
        return bayes_forward(self, x, rng)

    __call__ = forward

    def __repr__(self):
        kind = "BayesConvTranspose2d" if self.transposed else "BayesConv2d"
        return (f"{kind}({self.in_channels}, {self.out_channels}, k={self.kernel_size}, "
                f"stride={self.stride}, padding={self.padding})")


def bayes_forward(layer: BayesConvLayer, x, rng) -> Tensor:
    """Sample fresh weights and bias from ``rng`` and apply the convolution."""
    w = sample_weights(layer.weight, rng)
    b = sample_weights(layer.bias, rng)
    op = conv_transpose2d if layer.transposed else conv2d
    return op(x, w, b, stride=layer.stride, padding=layer.padding)
