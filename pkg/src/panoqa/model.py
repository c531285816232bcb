"""Full network assembly: backbone, selection, auxiliary branches, quality branch."""

from dataclasses import dataclass, asdict

import torch
from torch import nn

from .backbone import Backbone, BackboneConfig, PROFILES
from .heads import AuxHead, TYPE_CLASSES, DEGREE_CLASSES
from .fusion import QualityHead
from .selection import FeatureSelection, FixedFusion, SelectionState, QUALITY

AUX_TASKS = ("range", "type", "degree")


@dataclass(frozen=True)
class ModelConfig:
    profile: str = "paper"
    num_views: int = 8
    channels: int = 128
    tasks: tuple = AUX_TASKS
    range_classes: int = 2
    use_selection: bool = True
    use_integration: bool = True
    use_fusion: bool = True
    gate_multiplies: bool = False
    allow_projection: bool = False
    init_seed: int = 0

    def __post_init__(self):
        unknown = set(self.tasks) - set(AUX_TASKS)
        if unknown:
            raise ValueError(f"unknown auxiliary tasks {sorted(unknown)}")
        if self.profile not in PROFILES:
            raise ValueError(f"unknown profile {self.profile!r}")

    def aux_classes(self) -> dict:
        counts = {"range": self.range_classes, "type": TYPE_CLASSES, "degree": DEGREE_CLASSES}
        return {t: counts[t] for t in self.tasks}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tasks"] = list(self.tasks)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["tasks"] = tuple(d.get("tasks", AUX_TASKS))
        return cls(**d)


@dataclass
class ModelOutput:
    score: torch.Tensor
    aux_probs: dict
    selection: SelectionState | None = None


class QualityModel(nn.Module):
    """End-to-end scorer for a stack of viewports.

    forward accepts (V, 3, S, S) or (B, V, 3, S, S) with S divisible by 32 and
    returns per-panorama scores, auxiliary class probabilities, and the
    selection state. Selection runs soft while self.training is set and
    hard otherwise; pass mode explicitly to override.
    """

    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        torch.manual_seed(cfg.init_seed)
        self.cfg = cfg
        self.backbone = Backbone(BackboneConfig.from_profile(cfg.profile))
        widths = PROFILES[cfg.profile]
        sel_tasks = (QUALITY,) + tuple(cfg.tasks)
        if cfg.use_selection:
            self.selection = FeatureSelection(
                widths, cfg.channels, cfg.num_views, tasks=sel_tasks
            )
        else:
            self.selection = FixedFusion(widths, cfg.channels, tasks=sel_tasks)
        # "task_" prefix keeps keys clear of reserved nn.Module attribute names
        self.heads = nn.ModuleDict(
            {
                "task_" + t: AuxHead(
                    t,
                    cfg.channels,
                    cfg.num_views,
                    classes=cfg.aux_classes()[t],
                    gate_multiplies=cfg.gate_multiplies,
                )
                for t in cfg.tasks
            }
        )
        self.quality = QualityHead(
            cfg.channels,
            cfg.num_views,
            aux_classes=cfg.aux_classes(),
            use_integration=cfg.use_integration,
            use_fusion=cfg.use_fusion,
            gate_multiplies=cfg.gate_multiplies,
            allow_projection=cfg.allow_projection,
        )
        # affine placed on the raw score so the head regresses a standardized
        # target; the trainer fills these from the training split
        self.register_buffer("score_loc", torch.zeros(()))
        self.register_buffer("score_scale", torch.ones(()))

    def set_score_stats(self, loc: float, scale: float) -> None:
        if scale <= 0:
            raise ValueError("score scale must be positive")
        self.score_loc.fill_(loc)
        self.score_scale.fill_(scale)

    @torch.no_grad()
    def pooled_features(self, x, mode: str = "soft") -> dict:
        """Raw pooled head inputs, keyed by 'main' and each task name.

        A trainer estimates their mean and spread over its split and stores
        them with set_feature_stats, so the final FC stages see the
        standardized per-sample residual of the pooled features.
        """
        feats = self.backbone(x)
        selected, _ = self.selection(feats, mode=mode)
        out = {"main": self.quality.pooled_vector(selected[QUALITY])}
        for t in self.cfg.tasks:
            out[t] = self.heads["task_" + t].pooled_vector(selected[t])
        return out

    def set_feature_stats(self, stats: dict) -> None:
        """Store per-head pooled feature means and scales, as {name: (loc, scale)}."""
        targets = {"main": self.quality}
        for t in self.cfg.tasks:
            targets[t] = self.heads["task_" + t].classifier
        if set(stats) != set(targets):
            raise ValueError(
                f"expected stats for {sorted(targets)}, got {sorted(stats)}"
            )
        for name, (loc, scale) in stats.items():
            head = targets[name]
            loc = torch.as_tensor(loc, dtype=head.pool_center.dtype)
            scale = torch.as_tensor(scale, dtype=head.pool_scale.dtype)
            if loc.shape != head.pool_center.shape or scale.shape != loc.shape:
                raise ValueError(f"stats for {name!r} have the wrong shape")
            if not torch.all(scale > 0):
                raise ValueError(f"scale for {name!r} must be positive")
            head.pool_center.copy_(loc)
            head.pool_scale.copy_(scale)

    def forward(self, x, mode: str | None = None) -> ModelOutput:
        if mode is None:
            mode = "soft" if self.training else "hard"
        feats = self.backbone(x)
        selected, state = self.selection(feats, mode=mode)
        aux_probs = {t: self.heads["task_" + t](selected[t]) for t in self.cfg.tasks}
        raw = self.quality(selected[QUALITY], aux_probs if aux_probs else None)
        score = raw * self.score_scale + self.score_loc
        return ModelOutput(score=score, aux_probs=aux_probs, selection=state)

    def aux_parameter_count(self) -> int:
        """Parameters exclusive to auxiliary processing: the branches plus the
        fusion-side semantic machinery."""
        total = sum(p.numel() for p in self.heads.parameters())
        for name in ("task_embeds", "sem_reduce", "ca_sem_f", "ca_f_sem", "ca_sem_sem", "fuse_fc", "score_fc"):
            mod = getattr(self.quality, name, None)
            if isinstance(mod, nn.Module):
                total += sum(p.numel() for p in mod.parameters())
        return total
