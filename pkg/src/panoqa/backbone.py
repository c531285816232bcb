"""Hierarchical feature extractor applied to each viewport independently.

Four stages at cumulative strides 8 / 16 / 32 / 32. Each stage is a strided
patch-merge convolution followed by residual depthwise-separable mixing with a
pointwise expansion, no attention anywhere, so compute stays flat in the
number of viewports and the desk-scale profile runs comfortably on CPU.

Profiles:
    paper  stage widths (256, 512, 1024, 1024)
    tiny   stage widths (32, 64, 128, 128)
"""

from dataclasses import dataclass

import torch
from torch import nn

PROFILES = {
    "paper": (256, 512, 1024, 1024),
    "tiny": (32, 64, 128, 128),
}
STAGE_STRIDES = (8, 16, 32, 32)
_MERGE_STRIDES = (8, 2, 2, 1)


@dataclass(frozen=True)
class BackboneConfig:
    widths: tuple = PROFILES["paper"]
    in_channels: int = 3

    @classmethod
    def from_profile(cls, name: str) -> "BackboneConfig":
        if name not in PROFILES:
            raise ValueError(f"unknown backbone profile {name!r}")
        return cls(widths=PROFILES[name])


class Stage(nn.Module):
    def __init__(self, c_in: int, c_out: int, merge_stride: int):
        super().__init__()
        # merging happens in stride-2 steps with an activation between each,
        # so local contrast turns into features before resolution is gone; a
        # single k=8 projection would average the fine evidence away first
        steps = []
        c = c_in
        remaining = max(merge_stride, 1)
        while remaining > 1:
            nxt = c_out if remaining == 2 else max(8, c_out // remaining)
            steps.append(nn.Conv2d(c, nxt, kernel_size=3, stride=2, padding=1))
            c = nxt
            remaining //= 2
        if not steps or c != c_out:
            steps.append(nn.Conv2d(c, c_out, kernel_size=3, stride=1, padding=1))
        self.merge = nn.ModuleList(steps)
        self.mix_dw = nn.Conv2d(c_out, c_out, kernel_size=3, padding=1, groups=c_out)
        self.mix_pw = nn.Conv2d(c_out, c_out, kernel_size=1)
        # per-item norm: keeps stage output scale level however training
        # bends the convs, and never mixes statistics across viewports
        self.norm = nn.GroupNorm(1, c_out)
        self.act = nn.GELU()
        # the torch default underscales convs that feed an activation; keep
        # variance level so deep stacks do not fade out
        for conv in self.merge:
            nn.init.kaiming_uniform_(conv.weight, nonlinearity="relu")
        nn.init.kaiming_uniform_(self.mix_dw.weight, nonlinearity="relu")
        nn.init.xavier_uniform_(self.mix_pw.weight)

    def forward(self, x):
        h = x
        for conv in self.merge:
            h = self.act(conv(h))
        return self.norm(h + self.mix_pw(self.act(self.mix_dw(h))))


class Backbone(nn.Module):
    """Maps a viewport stack to four per-viewport feature pyramids.

    Accepts (V, 3, S, S) or batched (B, V, 3, S, S); S must be divisible by
    32. Returns a tuple of four tensors shaped like the input rank, channels
    per the configured widths, spatial sides S/8, S/16, S/32, S/32.
    """

    def __init__(self, cfg: BackboneConfig = BackboneConfig()):
        super().__init__()
        self.cfg = cfg
        chans = (cfg.in_channels,) + tuple(cfg.widths)
        self.stages = nn.ModuleList(
            Stage(chans[i], chans[i + 1], _MERGE_STRIDES[i]) for i in range(4)
        )

    def forward(self, x):
        batched = x.dim() == 5
        if not batched:
            x = x.unsqueeze(0)
        if x.dim() != 5:
            raise ValueError(f"expected (V,3,S,S) or (B,V,3,S,S), got {tuple(x.shape)}")
        b, v = x.shape[:2]
        side = x.shape[-1]
        if side % 32 != 0 or x.shape[-2] != side:
            raise ValueError(f"viewports must be square with side divisible by 32, got {tuple(x.shape[-2:])}")
        h = x.reshape(b * v, *x.shape[2:])
        feats = []
        for stage in self.stages:
            h = stage(h)
            feats.append(h.reshape(b, v, *h.shape[1:]))
        if not batched:
            feats = [f.squeeze(0) for f in feats]
        return tuple(feats)
