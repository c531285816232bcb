"""Quality regression branch.

The selected quality tensor passes through a stack of integration blocks that
concatenate all three gate views of the features, W(cat(va*x, ta*x, da_map)),
reduced back to C (the channel-gate map enters unmultiplied by default,
matching the degree branch convention). Pooling, subtraction of a
trainer-estimated feature center, and a linear map give the panorama
embedding F of width V*C/8.

When auxiliary tasks are active their class probabilities are embedded to a
common width, concatenated, reduced to one semantic vector, and fused with F
by three single-token cross-attention readouts

    CA(X1, X2) = softmax(Q K^T / sqrt(d2)) V,  Q = X1 Wq,  K = V = X2 Wk

stacked as cat(CA(sem, F), CA(F, sem), CA(sem, sem)), then two linear stages
produce the scalar score. With one token per side the softmax weight is
exactly 1 and CA(X1, X2) collapses to X2 Wk; the general formula is kept so
the code path stays honest for longer token sequences.

Without auxiliary tasks (or with fusion disabled) the score is a single
linear map on F. The fusion path requires the embedding width V*C/8 to equal
C; construction fails otherwise unless `allow_projection` inserts an explicit
bridge layer.
"""

import math

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


class IntegrationBlock(nn.Module):
    def __init__(self, channels: int, gate_multiplies: bool = False):
        super().__init__()
        self.va = ViewportAttention(channels)
        self.ta = SpatialAttention(channels)
        self.da = ChannelAttention(channels)
        self.gate_multiplies = gate_multiplies
        self.reduce = nn.Conv2d(3 * channels, channels, 1, bias=False)
        self.norm = nn.GroupNorm(1, channels)
        init_variance_preserving_(self.reduce)

    def forward(self, x):
        gate = self.da(x)
        third = gate * x if self.gate_multiplies else gate
        parts = torch.cat([self.va(x) * x, self.ta(x) * x, third], dim=-3)
        flat, lead = fold_leading(parts)
        return unfold_leading(self.norm(self.reduce(flat)), lead)


class CrossAttention(nn.Module):
    """Single-head cross attention between token sequences (B, n, d)."""

    def __init__(self, d1: int, d2: int, d_out: int):
        super().__init__()
        self.wq = nn.Linear(d1, d_out, bias=False)
        self.wk = nn.Linear(d2, d_out, bias=False)
        init_variance_preserving_(self)
        self.scale = math.sqrt(d2)

    def forward(self, x1, x2):
        q = self.wq(x1)
        k = self.wk(x2)
        attn = torch.softmax(q @ k.transpose(-2, -1) / self.scale, dim=-1)
        return attn @ k


class QualityHead(nn.Module):
    def __init__(
        self,
        channels: int,
        num_views: int,
        aux_classes: dict | None = None,
        repeats: int = 4,
        use_integration: bool = True,
        use_fusion: bool = True,
        gate_multiplies: bool = False,
        allow_projection: bool = False,
    ):
        super().__init__()
        aux_classes = dict(aux_classes or {})
        self.channels = channels
        self.num_views = num_views
        self.tasks = tuple(aux_classes)
        self.use_integration = use_integration
        self.use_fusion = use_fusion and bool(aux_classes)

        if use_integration:
            self.blocks = nn.ModuleList(
                IntegrationBlock(channels, gate_multiplies) for _ in range(repeats)
            )
        else:
            self.blocks = nn.ModuleList()

        embed_dim = num_views * channels // 8
        self.embed_dim = embed_dim
        self.embed = nn.Linear(num_views * channels, embed_dim)
        self.direct = nn.Linear(embed_dim, 1)
        # trainer-calibrated mean and spread of the pooled feature; the head
        # works on the standardized residual, where score differences live.
        # Identity until set, so a fresh head is unaffected.
        self.register_buffer("pool_center", torch.zeros(num_views * channels))
        self.register_buffer("pool_scale", torch.ones(num_views * channels))

        if self.use_fusion:
            if embed_dim != channels and not allow_projection:
                raise ValueError(
                    f"fusion needs embedding width {embed_dim} == channels {channels}; "
                    "set allow_projection to bridge them"
                )
            self.bridge = (
                nn.Linear(embed_dim, channels) if embed_dim != channels else None
            )
            d_f = channels
            # "task_" prefix keeps keys clear of reserved nn.Module attribute names
            self.task_embeds = nn.ModuleDict(
                {"task_" + t: nn.Linear(c, channels) for t, c in aux_classes.items()}
            )
            self.task_classes = dict(aux_classes)
            self.sem_reduce = nn.Linear(len(aux_classes) * channels, channels)
            self.ca_sem_f = CrossAttention(channels, d_f, channels)
            self.ca_f_sem = CrossAttention(d_f, channels, channels)
            self.ca_sem_sem = CrossAttention(channels, channels, channels)
            self.fuse_fc = nn.Linear(3 * channels, channels)
            self.score_fc = nn.Linear(channels, 1)
        init_variance_preserving_(self)
        zero_bias_(self)
        # scoring layers open near zero so the first gradient steps move
        # along target-correlated directions instead of amplifying noise
        nn.init.xavier_uniform_(self.direct.weight, gain=0.01)
        if self.use_fusion:
            nn.init.xavier_uniform_(self.score_fc.weight, gain=0.01)

    # -- pieces ------------------------------------------------------------

    def integrate(self, x):
        for block in self.blocks:
            x = block(x)
        return x

    def pooled_vector(self, x):
        """Integrate, pool, and flatten to (B, V*C), before standardization.

        The cross-view mean is removed per item: the view-relative profile of
        the pooled features tracks distortion rather than source content, so
        it is the part that carries over to unseen panoramas.
        """
        refined = self.integrate(x)
        flat, lead = fold_leading(refined)
        pooled = F.adaptive_avg_pool2d(flat, 1)
        pooled = unfold_leading(pooled, lead).squeeze(-1).squeeze(-1)
        if pooled.dim() == 2:
            pooled = pooled.unsqueeze(0)
        if pooled.shape[1] != self.num_views:
            raise ValueError(
                f"head built for {self.num_views} viewports, got {pooled.shape[1]}"
            )
        pooled = pooled - pooled.mean(dim=1, keepdim=True)
        return pooled.reshape(pooled.shape[0], -1)

    def embed_main(self, vec):
        """Standardize a pooled vector and map to the (B, embed_dim) vector F."""
        return self.embed((vec - self.pool_center) / self.pool_scale)

    def embed_semantics(self, aux_probs: dict):
        """Map auxiliary class probabilities to one (B, C) semantic vector.

        The uniform prior is subtracted first: what distinguishes samples is
        how far the probabilities lean from it, and feeding the deviation
        keeps the fusion stack free of a large shared component.
        """
        if set(aux_probs) != set(self.tasks):
            raise ValueError(
                f"expected probabilities for tasks {self.tasks}, got {tuple(aux_probs)}"
            )
        parts = [
            self.task_embeds["task_" + t](aux_probs[t] - 1.0 / self.task_classes[t])
            for t in self.tasks
        ]
        return self.sem_reduce(torch.cat(parts, dim=-1))

    def fuse(self, main_vec, sem_vec):
        """Three cross-attention readouts, concatenated and mapped to a score."""
        f = main_vec if self.bridge is None else self.bridge(main_vec)
        f_tok = f.unsqueeze(1)
        s_tok = sem_vec.unsqueeze(1)
        stacked = torch.cat(
            [
                self.ca_sem_f(s_tok, f_tok),
                self.ca_f_sem(f_tok, s_tok),
                self.ca_sem_sem(s_tok, s_tok),
            ],
            dim=-1,
        ).squeeze(1)
        return self.score_fc(F.gelu(self.fuse_fc(stacked))).squeeze(-1)

    def predict_direct(self, main_vec):
        """Score without any auxiliary context, a single linear map on F."""
        return self.direct(main_vec).squeeze(-1)

    # -- full branch ---------------------------------------------------------

    def forward(self, x, aux_probs: dict | None = None):
        main_vec = self.embed_main(self.pooled_vector(x))
        if self.use_fusion and aux_probs:
            return self.fuse(main_vec, self.embed_semantics(aux_probs))
        return self.predict_direct(main_vec)
