"""Sparse U-Net feature extractor with a linear classification head."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .nn.layers import (BasicBlock, BatchNorm, ConvBN, InverseConv, Layer, Linear, ReLU,
                        Sequential, StridedConv)
from .sparse.ops import concat_channels
from .sparse.tensor import SparseTensor

PAPER_CHANNELS = (32, 64, 128, 256, 512, 1024)
DESK_CHANNELS = (16, 32, 64, 128)


class ConfigError(ValueError):
    pass


@dataclass
class RefinerConfig:
    channels: tuple = PAPER_CHANNELS
    num_classes: int = 19
    in_channels: int = 3
    enc_blocks: int = 2
    dec_blocks: int = 2

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if not self.channels or any(c < 1 for c in self.channels):
            raise ConfigError(f"need at least one stage with positive width, got {self.channels}")
        if self.num_classes < 1 or self.in_channels < 1:
            raise ConfigError("num_classes and in_channels must be positive")
        if self.enc_blocks < 0 or (self.num_stages > 1 and self.dec_blocks < 1):
            raise ConfigError("need enc_blocks >= 0 and at least one decoder block per stage")

    @property
    def num_stages(self) -> int:
        return len(self.channels)

    def to_dict(self):
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _resample(cls, cin, cout, rng, dtype):
    return Sequential(cls(cin, cout, rng, dtype), BatchNorm(cout, dtype), ReLU())


class SparseUNet(Layer):
    """Encoder-decoder over one stride-1 sparse tensor.

    Stage ``i`` runs at tensor stride ``2**i``. Decoder stages concatenate the
    upsampled features with the matching encoder output before their blocks.
    """

    def __init__(self, cfg: RefinerConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        ch = cfg.channels
        deep = cfg.num_stages - 1
        self.stem = ConvBN(cfg.in_channels, ch[0], 3, rng, True, dtype)
        self.enc = [Sequential(*[BasicBlock(ch[i], ch[i], rng, dtype) for _ in range(cfg.enc_blocks)])
                    for i in range(deep)]
        self.down = [_resample(StridedConv, ch[i], ch[i + 1], rng, dtype) for i in range(deep)]
        self.mid = Sequential(*[BasicBlock(ch[deep], ch[deep], rng, dtype)
                                for _ in range(cfg.enc_blocks)])
        self.up = [_resample(InverseConv, ch[i + 1], ch[i], rng, dtype) for i in range(deep)]
        self.dec = [Sequential(*[BasicBlock(2 * ch[i] if j == 0 else ch[i], ch[i], rng, dtype)
                                 for j in range(cfg.dec_blocks)])
                    for i in range(deep)]
        self.head = Linear(ch[0], cfg.num_classes, rng, dtype, gain=1.0)
        self.stage_sites = []
        self.decoder_sites = []

    def forward(self, x: SparseTensor) -> SparseTensor:
        if x.stride != 1:
            raise ValueError("refiner input must be at stride 1")
        x = self.stem.forward(x)
        skips = []
        self.stage_sites = [x.cset]
        for enc, down in zip(self.enc, self.down):
            x = enc.forward(x)
            skips.append(x)
            x = down.forward(x)
            self.stage_sites.append(x.cset)
        x = self.mid.forward(x)
        self.decoder_sites = [None] * len(self.up) + [x.cset]
        for i in reversed(range(len(self.up))):
            x = self.up[i].forward(x)
            x = concat_channels(x, skips[i])
            x = self.dec[i].forward(x)
            self.decoder_sites[i] = x.cset
        return self.head.forward(x)

    def backward(self, grad):
        grad = self.head.backward(grad)
        skip_grads = [None] * len(self.up)
        for i in range(len(self.up)):
            grad = self.dec[i].backward(grad)
            c = self.cfg.channels[i]
            skip_grads[i] = grad[:, c:]
            grad = self.up[i].backward(grad[:, :c])
        grad = self.mid.backward(grad)
        for i in reversed(range(len(self.enc))):
            grad = self.down[i].backward(grad) + skip_grads[i]
            grad = self.enc[i].backward(grad)
        return self.stem.backward(grad)

    def features_before_head(self):
        """Input rows of the head from the latest forward (for the magnitude selector)."""
        return self.head._need(self.head._cache)


def build_refiner(cfg: RefinerConfig, seed: int = 0, dtype=np.float32) -> SparseUNet:
    return SparseUNet(cfg, seed, dtype)


def parameter_count(net: Layer) -> int:
    return sum(p.value.size for p in net.parameters())
