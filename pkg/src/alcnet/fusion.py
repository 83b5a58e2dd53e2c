"""Cross-layer feature fusion: local/global channel attention and the five
fusion formulations (addition, maximum, bottom-up local, bottom-up global,
top-down local).

With X the low-level (shallower) map and Y the high-level map after channel
adjustment and upsampling:

    add   X + Y
    max   max(X, Y)
    blam  X + L(X) * Y
    bgam  X + G(X) * Y     (G = bottleneck applied after global avg pool)
    tlam  L(X) * X + Y
"""

import numpy as np

from .autodiff import Tensor, global_avg_pool, maximum, relu, sigmoid, upsample_nearest
from .contrast import MultiScaleContrast
from .nn import BatchNorm2d, Conv2d, Module

FUSION_KINDS = ("add", "max", "blam", "bgam", "tlam", "none")
ATTENTION_KINDS = ("blam", "bgam", "tlam")


class AttentionBottleneck(Module):
    """Point-wise bottleneck producing per-position channel attention.

    sigmoid(BN(PWConv2(relu(BN(PWConv1(x)))))) with a fixed channel
    reduction ratio of 4; output has the input's shape and lies in (0,1).
    """

    def __init__(self, channels, rng=None):
        super().__init__()
        if channels % 4 != 0:
            raise ValueError(f"attention bottleneck needs channels divisible by 4, got {channels}")
        if rng is None:
            rng = np.random.default_rng(0)
        mid = channels // 4
        self.pw1 = Conv2d(channels, mid, 1, rng=rng)
        self.bn1 = BatchNorm2d(mid)
        self.pw2 = Conv2d(mid, channels, 1, rng=rng)
        self.bn2 = BatchNorm2d(channels)

    def forward(self, x: Tensor) -> Tensor:
        return sigmoid(self.bn2(self.pw2(relu(self.bn1(self.pw1(x))))))


def local_attention(x: Tensor, weights: AttentionBottleneck) -> Tensor:
    """Attention map with the same shape as x, values strictly in (0,1)."""
    return weights(x)


def fuse(x: Tensor, y: Tensor, kind: str, weights: AttentionBottleneck | None = None) -> Tensor:
    """Fuse low-level x with high-level y according to `kind`."""
    if x.data.shape != y.data.shape:
        raise ValueError(f"fuse: shape mismatch {x.data.shape} vs {y.data.shape}")
    kind = kind.lower()
    if kind == "add":
        return x + y
    if kind == "max":
        return maximum(x, y)
    if kind in ATTENTION_KINDS:
        if weights is None:
            raise ValueError(f"fusion kind {kind!r} requires attention weights")
        if kind == "blam":
            return x + local_attention(x, weights) * y
        if kind == "tlam":
            return local_attention(x, weights) * x + y
        gate = weights(global_avg_pool(x))  # (C,1,1), broadcast spatially
        return x + gate * y
    raise ValueError(f"unknown fusion kind {kind!r} (expected one of {FUSION_KINDS})")


class CrossLayerFuser(Module):
    """Same-layer contrast followed by a deep-to-shallow fusion fold.

    Each stage map passes through MLC (identity when no dilations are
    given), then the deepest result is folded into the next-shallower one:
    1x1 channel adjustment, x2 nearest upsampling, then `fuse`. The output
    lives at stage-1 resolution with stage-1 channels.
    """

    def __init__(self, stage_channels, dilations, kind, reduction="min", rng=None):
        super().__init__()
        kind = kind.lower()
        if kind not in FUSION_KINDS:
            raise ValueError(f"unknown fusion kind {kind!r}")
        if kind == "none" and len(stage_channels) != 1:
            raise ValueError("fusion kind 'none' requires exactly 1 stage")
        if kind != "none" and len(stage_channels) < 2:
            raise ValueError(f"fusion kind {kind!r} requires at least 2 stages")
        if rng is None:
            rng = np.random.default_rng(0)
        self.kind = kind
        self.stage_channels = tuple(stage_channels)
        self.dilations = tuple(dilations)
        if self.dilations:
            self.mlc = MultiScaleContrast(self.dilations, reduction)
        else:
            self.mlc = None
        for i in range(len(stage_channels) - 1):
            setattr(self, f"adjust{i}", Conv2d(stage_channels[i + 1], stage_channels[i], 1, rng=rng))
            if kind in ATTENTION_KINDS:
                setattr(self, f"attention{i}", AttentionBottleneck(stage_channels[i], rng=rng))

    def _same_layer(self, x: Tensor) -> Tensor:
        return x if self.mlc is None else self.mlc(x)

    def forward(self, stages) -> Tensor:
        if len(stages) != len(self.stage_channels):
            raise ValueError(
                f"expected {len(self.stage_channels)} stage maps, got {len(stages)}")
        transformed = [self._same_layer(s) for s in stages]
        z = transformed[-1]
        for i in reversed(range(len(stages) - 1)):
            adjusted = getattr(self, f"adjust{i}")(z)
            y = upsample_nearest(adjusted, 2)
            w = getattr(self, f"attention{i}") if self.kind in ATTENTION_KINDS else None
            z = fuse(transformed[i], y, self.kind, w)
        return z


def m2lc_fuse(stages, dilations, kind, reduction="min", rng=None, fuser=None) -> Tensor:
    """Functional form of the cross-layer fold (builds weights when needed)."""
    if fuser is None:
        channels = tuple(s.data.shape[0] for s in stages)
        fuser = CrossLayerFuser(channels, dilations, kind, reduction, rng=rng)
    return fuser(stages)
