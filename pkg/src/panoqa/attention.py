"""Gate blocks shared by the task branches.

Three sigmoid gates at different granularities, each applied per viewport:

    ViewportAttention  one scalar per viewport, from spatially pooled features
    SpatialAttention   one map per viewport, built from dilated convolutions
                       over a channel-collapsed copy (kernels 3/5/3 with
                       dilations 3/5/1, same-padded)
    ChannelAttention   a full-resolution per-channel gate

All biases start at zero, so a zero input yields exactly 0.5 gates until
training moves them. Inputs are (..., C, h, w); any leading axes (viewport,
batch) are folded into one batch dimension, so every gate treats viewports
independently.
"""

import torch
from torch import nn
from torch.nn import functional as F


def fold_leading(x: torch.Tensor):
    """Collapse all axes before (C, h, w) into one batch axis."""
    lead = x.shape[:-3]
    return x.reshape(-1, *x.shape[-3:]), lead


def unfold_leading(x: torch.Tensor, lead) -> torch.Tensor:
    return x.reshape(*lead, *x.shape[1:])


def zero_bias_(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)) and m.bias is not None:
            nn.init.zeros_(m.bias)


def init_variance_preserving_(module: nn.Module) -> None:
    """Glorot weights for every conv and linear under `module`.

    The torch default targets a leaky-relu after every layer and shrinks a
    pure-linear signal by roughly sqrt(3) per layer; the bias-free reduction
    chains in this network are linear (or end in sigmoid/softmax), so a deep
    stack under the default init collapses activations to numerical dust and
    the heads stop learning. Glorot scaling keeps variance level. Biases are
    untouched; run zero_bias_ separately where zero gates are required.
    """
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.xavier_uniform_(m.weight)


class ViewportAttention(nn.Module):
    """(..., C, h, w) -> (..., 1, 1, 1) gate in (0, 1)."""

    def __init__(self, channels: int):
        super().__init__()
        self.squeeze = nn.Conv2d(channels, channels // 2, kernel_size=1)
        self.score = nn.Conv2d(channels // 2, 1, kernel_size=1)
        init_variance_preserving_(self)
        zero_bias_(self)

    def forward(self, x):
        flat, lead = fold_leading(x)
        g = F.adaptive_avg_pool2d(flat, 1)
        g = torch.sigmoid(self.score(F.gelu(self.squeeze(g))))
        return unfold_leading(g, lead)


class SpatialAttention(nn.Module):
    """(..., C, h, w) -> (..., 1, h, w) gate in (0, 1)."""

    def __init__(self, channels: int):
        super().__init__()
        self.collapse = nn.Conv2d(channels, 1, kernel_size=1)
        self.dilated = nn.ModuleList(
            [
                nn.Conv2d(1, 1, kernel_size=3, padding=3, dilation=3),
                nn.Conv2d(1, 1, kernel_size=5, padding=10, dilation=5),
                nn.Conv2d(1, 1, kernel_size=3, padding=1, dilation=1),
            ]
        )
        self.fuse = nn.Conv2d(3, 1, kernel_size=1)
        init_variance_preserving_(self)
        zero_bias_(self)

    def forward(self, x):
        flat, lead = fold_leading(x)
        s = self.collapse(flat)
        m = torch.cat([conv(s) for conv in self.dilated], dim=1)
        m = torch.sigmoid(self.fuse(m))
        return unfold_leading(m, lead)


class ChannelAttention(nn.Module):
    """(..., C, h, w) -> (..., C, h, w) gate in (0, 1), no spatial pooling."""

    def __init__(self, channels: int):
        super().__init__()
        self.reduce = nn.Conv2d(channels, channels // 2, kernel_size=1)
        self.expand = nn.Conv2d(channels // 2, channels, kernel_size=1)
        init_variance_preserving_(self)
        zero_bias_(self)

    def forward(self, x):
        flat, lead = fold_leading(x)
        g = torch.sigmoid(self.expand(F.gelu(self.reduce(flat))))
        return unfold_leading(g, lead)
