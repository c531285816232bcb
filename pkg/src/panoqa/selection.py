"""Multitask feature selection over the backbone pyramid.

Pipeline per panorama:
    1. unify: bias-free 1x1 maps take every stage to a common width C
    2. cross-resolution fuse: for level m, sum over the other levels n of
       concat(level_m, resize(level_n -> level_m)), then a bias-free per-level
       1x1 map back to C; levels 2..4 are finally upsampled to the stride-8
       grid so all four fused maps M1..M4 share one resolution
    3. a shared trunk pools the concatenated maps to a (V*C) vector and two
       fully connected stages emit a 4-way level-weight softmax plus one
       15-way combination softmax per task
    4. each task receives the fused tensor of one of the 15 non-empty level
       combinations: members are scaled by their level weight, concatenated,
       and reduced to C by a 1x1 map shared per combination size

Training uses the soft expectation over all 15 combination tensors so
selection stays differentiable; evaluation indexes the argmax combination
(bit-equal to the indexed tensor, no arithmetic on the winner).
"""

from dataclasses import dataclass
from itertools import combinations

import torch
from torch import nn
from torch.nn import functional as F

from .attention import (
    fold_leading,
    init_variance_preserving_,
    unfold_leading,
    zero_bias_,
)

# all non-empty subsets of the four pyramid levels, ordered by size then
# lexicographically; selection scores index this list
COMBINATIONS = tuple(
    combo for size in range(1, 5) for combo in combinations(range(4), size)
)

QUALITY = "quality"
DEFAULT_TASKS = (QUALITY, "range", "type", "degree")


@dataclass
class SelectionState:
    """Per-panorama record of what the selector chose.

    level_weights: (B, 4) softmax over pyramid levels
    scores:        task -> (B, 15) softmax over COMBINATIONS
    chosen:        task -> (B,) argmax combination index
    """

    level_weights: torch.Tensor
    scores: dict
    chosen: dict

    def to_lists(self) -> dict:
        return {
            "level_weights": self.level_weights.detach().cpu().tolist(),
            "scores": {t: s.detach().cpu().tolist() for t, s in self.scores.items()},
            "chosen": {t: c.detach().cpu().tolist() for t, c in self.chosen.items()},
        }


def _resize(x: torch.Tensor, size) -> torch.Tensor:
    if x.shape[-2:] == tuple(size):
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


class FeatureSelection(nn.Module):
    def __init__(
        self,
        stage_widths,
        channels: int = 128,
        num_views: int = 8,
        tasks=DEFAULT_TASKS,
        hidden: int | None = None,
    ):
        super().__init__()
        if len(stage_widths) != 4:
            raise ValueError("expected four stage widths")
        self.channels = channels
        self.num_views = num_views
        self.tasks = tuple(tasks)
        c = channels
        self.unify = nn.ModuleList(nn.Conv2d(w, c, 1, bias=False) for w in stage_widths)
        self.fuse = nn.ModuleList(nn.Conv2d(2 * c, c, 1, bias=False) for _ in range(4))
        # per-item norms keep the shared trunk bounded so the selection
        # softmaxes stay soft instead of saturating as the convs grow
        self.fuse_norm = nn.ModuleList(nn.GroupNorm(1, c) for _ in range(4))
        self.combo_norm = nn.GroupNorm(1, c)
        self.trunk_reduce = nn.Conv2d(4 * c, c, 1, bias=False)
        hidden = hidden or max(16, num_views * c // 8)
        self.trunk_fc = nn.Linear(num_views * c, hidden)
        self.weight_head = nn.Linear(hidden, 4)
        # "task_" prefix keeps keys clear of reserved nn.Module attribute names
        self.score_heads = nn.ModuleDict(
            {"task_" + t: nn.Linear(hidden, len(COMBINATIONS)) for t in self.tasks}
        )
        self.combo_reduce = nn.ModuleList(
            nn.Conv2d(k * c, c, 1, bias=False) for k in range(1, 5)
        )
        init_variance_preserving_(self)
        zero_bias_(self)

    # -- stage 1 + 2 -------------------------------------------------------

    def unify_channels(self, feats) -> list:
        if len(feats) != 4:
            raise ValueError("expected four pyramid levels")
        out = []
        for conv, f in zip(self.unify, feats):
            flat, lead = fold_leading(f)
            out.append(unfold_leading(conv(flat), lead))
        return out

    def fuse_levels(self, unified) -> list:
        """Cross-resolution fusion; returns M1..M4, all on the stride-8 grid."""
        flats = []
        lead = None
        for u in unified:
            flat, lead = fold_leading(u)
            flats.append(flat)
        base_size = flats[0].shape[-2:]
        fused = []
        for m in range(4):
            size_m = flats[m].shape[-2:]
            acc = None
            for n in range(4):
                if n == m:
                    continue
                pair = torch.cat([flats[m], _resize(flats[n], size_m)], dim=1)
                acc = pair if acc is None else acc + pair
            level = self.fuse_norm[m](self.fuse[m](acc))
            fused.append(unfold_leading(_resize(level, base_size), lead))
        return fused

    # -- stage 3 -----------------------------------------------------------

    def selection_vectors(self, fused):
        """Level-weight and per-task combination softmaxes from the shared trunk."""
        flat, lead = fold_leading(torch.cat(fused, dim=-3))
        pooled = F.adaptive_avg_pool2d(self.trunk_reduce(flat), 1)
        pooled = unfold_leading(pooled, lead).squeeze(-1).squeeze(-1)
        if pooled.dim() == 2:
            pooled = pooled.unsqueeze(0)
        b = pooled.shape[0]
        if pooled.shape[1] != self.num_views:
            raise ValueError(
                f"selector built for {self.num_views} viewports, got {pooled.shape[1]}"
            )
        h = F.gelu(self.trunk_fc(pooled.reshape(b, -1)))
        weights = torch.softmax(self.weight_head(h), dim=-1)
        scores = {
            t: torch.softmax(self.score_heads["task_" + t](h), dim=-1) for t in self.tasks
        }
        return weights, scores

    # -- stage 4 -----------------------------------------------------------

    def combination_tensors(self, fused, level_weights) -> list:
        """All 15 combination features, shared across tasks.

        level_weights is (B, 4); fused tensors are (B, V, C, h, w) or
        (V, C, h, w) with B == 1.
        """
        batched = fused[0].dim() == 5
        scaled = []
        for m in range(4):
            f = fused[m] if batched else fused[m].unsqueeze(0)
            w = level_weights[:, m].reshape(-1, 1, 1, 1, 1)
            scaled.append(f * w)
        combos = []
        for combo in COMBINATIONS:
            cat = torch.cat([scaled[m] for m in combo], dim=-3)
            flat, lead = fold_leading(cat)
            out = unfold_leading(self.combo_norm(self.combo_reduce[len(combo) - 1](flat)), lead)
            combos.append(out if batched else out.squeeze(0))
        return combos

    def forward(
        self,
        feats,
        mode: str = "soft",
        override_weights: torch.Tensor | None = None,
        override_scores: dict | None = None,
    ):
        """Returns ({task: tensor on the stride-8 grid}, SelectionState)."""
        if mode not in ("soft", "hard"):
            raise ValueError(f"mode must be 'soft' or 'hard', got {mode!r}")
        batched = feats[0].dim() == 5
        unified = self.unify_channels(feats)
        fused = self.fuse_levels(unified)
        weights, scores = self.selection_vectors(fused)
        if override_weights is not None:
            weights = override_weights.reshape(weights.shape).to(weights)
        if override_scores is not None:
            scores = {
                t: override_scores[t].reshape(scores[t].shape).to(scores[t])
                for t in scores
            }
        combos = self.combination_tensors(fused, weights)
        chosen = {t: torch.argmax(s, dim=-1) for t, s in scores.items()}

        outputs = {}
        for t in self.tasks:
            if mode == "soft":
                s = scores[t]
                acc = None
                for k, combo in enumerate(combos):
                    c = combo if batched else combo.unsqueeze(0)
                    term = c * s[:, k].reshape(-1, 1, 1, 1, 1)
                    acc = term if acc is None else acc + term
                outputs[t] = acc if batched else acc.squeeze(0)
            else:
                idx = chosen[t]
                if batched:
                    outputs[t] = torch.stack(
                        [combos[int(i)][b] for b, i in enumerate(idx)]
                    )
                else:
                    outputs[t] = combos[int(idx[0])]
        return outputs, SelectionState(level_weights=weights, scores=scores, chosen=chosen)


class FixedFusion(nn.Module):
    """Selection-free stand-in: unify each level, lift to the stride-8 grid,
    and average. Every task receives the same tensor and no state is kept."""

    def __init__(self, stage_widths, channels: int = 128, tasks=DEFAULT_TASKS):
        super().__init__()
        self.tasks = tuple(tasks)
        self.unify = nn.ModuleList(
            nn.Conv2d(w, channels, 1, bias=False) for w in stage_widths
        )
        init_variance_preserving_(self)

    def forward(self, feats, mode: str = "soft", **_ignored):
        levels = []
        base_size = None
        for conv, f in zip(self.unify, feats):
            flat, lead = fold_leading(f)
            u = conv(flat)
            if base_size is None:
                base_size = u.shape[-2:]
            levels.append(unfold_leading(_resize(u, base_size), lead))
        avg = torch.stack(levels).mean(dim=0)
        return {t: avg for t in self.tasks}, None
