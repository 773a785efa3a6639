"""Bayesian U-Net built entirely from variational conv layers."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .tensor import Tensor, concat, max_pool2d, relu
from .variational import DEFAULT_INIT_SIGMA, BayesConvLayer


INITS = ("lecun", "fan_in", "he", "glorot")


@dataclass
class UNetConfig:
    in_channels: int = 1
    num_classes: int = 4
    depth: int = 3
    base_channels: int = 8
    image_size: tuple = (64, 64)
    prior_sigma: float = 1.0
    init_sigma: float = DEFAULT_INIT_SIGMA
    init: str = "lecun"

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)

    def validate(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.depth < 1 or self.base_channels < 1 or self.in_channels < 1:
            raise ValueError("depth, base_channels and in_channels must be positive")
        div = 2 ** self.depth
        h, w = self.image_size
        if h % div or w % div:
            raise ValueError(
                f"image_size {h}x{w} must be divisible by 2**depth = {div}"
            )
        if self.init not in INITS:
            raise ValueError(f"init must be one of {INITS}")
        if self.prior_sigma <= 0 or self.init_sigma <= 0:
            raise ValueError("prior_sigma and init_sigma must be positive")
        return self

    def to_dict(self):
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def full_scale(cls, **kw):
        return cls(**{"num_classes": 10, "depth": 4, "base_channels": 64,
                      "image_size": (512, 512), **kw})


class BayesUNet:
    """Encoder/decoder with skip connections; every learnable layer is variational.

    Layers are kept in a name -> layer dict in construction order, which is
    also the order weight noise is drawn in during a forward pass.
    """

    def __init__(self, config: UNetConfig, rng=None):
        config.validate()
        self.config = config
        rng = np.random.default_rng(0) if rng is None else rng
        self.layers = {}
        base, depth = config.base_channels, config.depth

        def conv(name, cin, cout, k=3, **kw):
            self.layers[name] = BayesConvLayer(
                cin, cout, k, padding=(k - 1) // 2 if not kw.get("transposed") else 0,
                prior_sigma=config.prior_sigma, init_sigma=config.init_sigma, init=config.init,
                rng=rng, **kw)

        cin = config.in_channels
        for lvl in range(depth):
            ch = base * 2**lvl
            conv(f"enc{lvl}.conv1", cin, ch)
            conv(f"enc{lvl}.conv2", ch, ch)
            cin = ch
        ch = base * 2**depth
        conv("bottleneck.conv1", cin, ch)
        conv("bottleneck.conv2", ch, ch)
        for lvl in reversed(range(depth)):
            skip = base * 2**lvl
            conv(f"dec{lvl}.up", ch, skip, k=2, stride=2, transposed=True)
            conv(f"dec{lvl}.conv1", 2 * skip, skip)
            conv(f"dec{lvl}.conv2", skip, skip)
            ch = skip
        conv("head", ch, config.num_classes, k=1)

    def forward(self, images, rng) -> Tensor:
        cfg = self.config
        x = images if isinstance(images, Tensor) else Tensor(images)
        expected = (cfg.in_channels,) + cfg.image_size
        if x.ndim != 4 or x.shape[1:] != expected:
            raise ValueError(f"expected input [N, {', '.join(map(str, expected))}], got {list(x.shape)}")
        L = self.layers
        skips = []
        for lvl in range(cfg.depth):
            x = relu(L[f"enc{lvl}.conv1"](x, rng))
            x = relu(L[f"enc{lvl}.conv2"](x, rng))
            skips.append(x)
            x = max_pool2d(x, 2)
        x = relu(L["bottleneck.conv1"](x, rng))
        x = relu(L["bottleneck.conv2"](x, rng))
        for lvl in reversed(range(cfg.depth)):
            x = L[f"dec{lvl}.up"](x, rng)
            x = concat([skips[lvl], x], axis=1)
            x = relu(L[f"dec{lvl}.conv1"](x, rng))
            x = relu(L[f"dec{lvl}.conv2"](x, rng))
        return L["head"](x, rng)

    __call__ = forward

    def kl_total(self) -> Tensor:
        total = None
        for layer in self.layers.values():
            k = layer.kl()
            total = k if total is None else total + k
        return total

    def parameters(self):
        return [p for layer in self.layers.values() for p in layer.parameters()]

    def named_parameters(self):
        """``(name, tensor)`` pairs in a fixed order, used for checkpoints."""
        out = []
        for name, layer in self.layers.items():
            for part, vp in (("weight", layer.weight), ("bias", layer.bias)):
                out.append((f"{name}.{part}.mu", vp.mu))
                out.append((f"{name}.{part}.rho", vp.rho))
        return out

    def num_weights(self) -> int:
        """Number of variational weights (each carries a mu and a rho)."""
        return sum(l.weight.mu.size + l.bias.mu.size for l in self.layers.values())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def build(config: UNetConfig, rng=None) -> BayesUNet:
    return BayesUNet(config, rng)


def forward(net: BayesUNet, images, rng) -> Tensor:
    return net.forward(images, rng)


def kl_total(net: BayesUNet) -> Tensor:
    return net.kl_total()
