"""Auxiliary classification branches.

Each branch refines its selected feature tensor with a stack of gated blocks
(fresh parameters per repeat, nothing shared across repeats) and classifies
the pooled result:

    range branch   8 blocks of W(cat(viewport_gate * x, x))
    type branch    4 blocks of W(cat(spatial_gate * x, viewport_gate * x))
    degree branch  4 blocks of W(cat(channel_gate_map, viewport_gate * x))

The degree block feeds the raw channel-gate map into the concat rather than
multiplying it with the features; `gate_multiplies` switches to the
multiplicative variant. Reduce maps are bias-free 1x1 convolutions back to C.

The classifier is shared in shape across branches: spatial mean pool, flatten
the (V, C) matrix, one hidden fully connected stage (width V*C/8) with GELU,
then a linear map to class probabilities via softmax. A trainer-estimated
feature center is subtracted from the flattened vector before the FC stages.
"""

import torch
from torch import nn
from torch.nn import functional as F

from .attention import (
    ChannelAttention,
    SpatialAttention,
    ViewportAttention,
    fold_leading,
    init_variance_preserving_,
    unfold_leading,
    zero_bias_,
)

TYPE_CLASSES = 4
DEGREE_CLASSES = 3


class ViewportGatedBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.va = ViewportAttention(channels)
        self.reduce = nn.Conv2d(2 * channels, channels, 1, bias=False)
        # per-item norm so a stack of gated blocks keeps its scale
        self.norm = nn.GroupNorm(1, channels)
        init_variance_preserving_(self.reduce)

    def forward(self, x):
        gated = self.va(x) * x
        flat, lead = fold_leading(torch.cat([gated, x], dim=-3))
        return unfold_leading(self.norm(self.reduce(flat)), lead)


class SpatialGatedBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.va = ViewportAttention(channels)
        self.ta = SpatialAttention(channels)
        self.reduce = nn.Conv2d(2 * channels, channels, 1, bias=False)
        self.norm = nn.GroupNorm(1, channels)
        init_variance_preserving_(self.reduce)

    def forward(self, x):
        flat, lead = fold_leading(torch.cat([self.ta(x) * x, self.va(x) * x], dim=-3))
        return unfold_leading(self.norm(self.reduce(flat)), lead)


class ChannelGatedBlock(nn.Module):
    def __init__(self, channels: int, gate_multiplies: bool = False):
        super().__init__()
        self.va = ViewportAttention(channels)
        self.da = ChannelAttention(channels)
        self.gate_multiplies = gate_multiplies
        self.reduce = nn.Conv2d(2 * channels, channels, 1, bias=False)
        self.norm = nn.GroupNorm(1, channels)
        init_variance_preserving_(self.reduce)

    def forward(self, x):
        gate = self.da(x)
        first = gate * x if self.gate_multiplies else gate
        flat, lead = fold_leading(torch.cat([first, self.va(x) * x], dim=-3))
        return unfold_leading(self.norm(self.reduce(flat)), lead)


class ProbClassifier(nn.Module):
    """Pool, flatten over (V, C), hidden FC with GELU, linear, softmax."""

    def __init__(self, channels: int, num_views: int, classes: int):
        super().__init__()
        self.num_views = num_views
        hidden = max(4, num_views * channels // 8)
        self.fc1 = nn.Linear(num_views * channels, hidden)
        self.fc2 = nn.Linear(hidden, classes)
        # pooled features are dominated by a sample-independent component, with
        # the label-bearing part orders of magnitude smaller; a trainer stores
        # its mean and spread here so the FC stages see the standardized
        # residual. Identity until calibrated, so a fresh classifier is
        # unaffected.
        self.register_buffer("pool_center", torch.zeros(num_views * channels))
        self.register_buffer("pool_scale", torch.ones(num_views * channels))
        init_variance_preserving_(self)
        zero_bias_(self)
        # the last layer opens near zero: probabilities start by the uniform
        # prior, so cross entropy improves along label-correlated directions
        # instead of flattening the features
        nn.init.xavier_uniform_(self.fc2.weight, gain=0.01)

    def pooled_vector(self, x):
        """Spatial mean pool and flatten to (B, V*C), before standardization.

        The cross-view mean is removed per item first: source content shifts
        all viewports of a panorama together, while distortion placement does
        not, so the view-relative profile is what carries over to unseen
        content.
        """
        flat, lead = fold_leading(x)
        pooled = F.adaptive_avg_pool2d(flat, 1)
        pooled = unfold_leading(pooled, lead).squeeze(-1).squeeze(-1)
        if pooled.dim() == 2:
            pooled = pooled.unsqueeze(0)
        if pooled.shape[1] != self.num_views:
            raise ValueError(
                f"classifier built for {self.num_views} viewports, got {pooled.shape[1]}"
            )
        pooled = pooled - pooled.mean(dim=1, keepdim=True)
        return pooled.reshape(pooled.shape[0], -1)

    def forward(self, x):
        vec = (self.pooled_vector(x) - self.pool_center) / self.pool_scale
        h = F.gelu(self.fc1(vec))
        return torch.softmax(self.fc2(h), dim=-1)


_BLOCKS = {
    "range": (ViewportGatedBlock, 8),
    "type": (SpatialGatedBlock, 4),
    "degree": (ChannelGatedBlock, 4),
}


class AuxHead(nn.Module):
    """One auxiliary branch: a gated block stack plus a probability classifier."""

    def __init__(
        self,
        task: str,
        channels: int,
        num_views: int,
        classes: int,
        gate_multiplies: bool = False,
    ):
        super().__init__()
        if task not in _BLOCKS:
            raise ValueError(f"unknown auxiliary task {task!r}")
        block_cls, repeats = _BLOCKS[task]
        kwargs = {"gate_multiplies": gate_multiplies} if task == "degree" else {}
        self.task = task
        self.blocks = nn.ModuleList(block_cls(channels, **kwargs) for _ in range(repeats))
        self.classifier = ProbClassifier(channels, num_views, classes)

    def refine(self, x):
        for block in self.blocks:
            x = block(x)
        return x

    def pooled_vector(self, x):
        """Uncentered pooled feature of the refined tensor, for calibration."""
        return self.classifier.pooled_vector(self.refine(x))

    def forward(self, x):
        return self.classifier(self.refine(x))
