"""Losses, uncertainty weighting, and the training loop.

The total objective balances the quality regression (mean squared error)
against the active auxiliary cross-entropies with one learned uncertainty per
loss term:

    total = sum_k  L_k / (2 * sigma_k^2) + log(sigma_k)

sigma is parameterized through log_sigma so positivity needs no constraint.
Auxiliary branches emit probabilities (softmax already applied), so their
cross-entropy takes -log(p[label]) directly, clamped at 1e-12; every clamp is
counted and surfaced as a warning since it signals a saturated softmax.
"""

import csv
import logging
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import metrics
from .distortion import Manifest, load_png, record_source
from .model import ModelConfig, QualityModel
from .projection import equatorial_sample

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
CHECKPOINT_FORMAT = "panoqa-checkpoint"


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-5
    # the trunk moves slower than the heads: the heads read standardized
    # pooled residuals, and those statistics only stay valid between the
    # per-epoch recalibrations if the feature extractor drifts gently
    trunk_lr_scale: float = 0.02
    batch_size: int = 8
    epochs: int = 50
    seed: int = 0
    val_fraction: float = 0.1
    precision: str = "float32"
    viewport_size: int = 224
    num_views: int = 8
    fov: float = float(np.pi / 2.0)
    # selection runs soft during optimization, hard for any evaluation pass
    soft_selection: bool = True

    def __post_init__(self):
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision!r}")

    def dtype(self):
        return torch.float64 if self.precision == "float64" else torch.float32


def mse_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return ((pred - target) ** 2).mean()


class ClampCounter:
    def __init__(self):
        self.count = 0


def ce_loss(probs: torch.Tensor, labels: torch.Tensor, counter: ClampCounter | None = None):
    """Cross entropy on probability vectors; labels < 0 are masked out.

    Returns None when no label in the batch is valid.
    """
    valid = labels >= 0
    if valid.sum() == 0:
        return None
    p = probs[valid, labels[valid]]
    floor = (p < PROB_FLOOR).sum().item()
    if floor and counter is not None:
        counter.count += int(floor)
        log.warning("clamped %d probabilities at %g in cross entropy", floor, PROB_FLOOR)
    return -torch.log(p.clamp_min(PROB_FLOOR)).mean()


class UncertaintyWeighting(nn.Module):
    """Learned per-loss uncertainty balancing, one log-sigma per term."""

    def __init__(self, names):
        super().__init__()
        self.names = tuple(names)
        self.log_sigma = nn.Parameter(torch.zeros(len(self.names)))

    def forward(self, losses: dict) -> torch.Tensor:
        total = None
        for i, name in enumerate(self.names):
            loss = losses.get(name)
            if loss is None:
                continue
            ls = self.log_sigma[i]
            term = loss * torch.exp(-2.0 * ls) / 2.0 + ls
            total = term if total is None else total + term
        if total is None:
            raise ValueError("no losses supplied")
        return total

    def sigmas(self) -> dict:
        values = torch.exp(self.log_sigma.detach())
        return {name: float(values[i]) for i, name in enumerate(self.names)}


# ---------------------------------------------------------------------------
# data plumbing


@dataclass
class RenderedSample:
    viewports: torch.Tensor  # (V, 3, S, S)
    mos: float
    labels: dict
    record: object


def render_records(records, root, cfg: TrainConfig) -> list:
    """Render each record's viewports once and keep them in memory."""
    root = Path(root)
    out = []
    for rec in records:
        img = load_png(root / rec.path)
        seq = equatorial_sample(img, count=cfg.num_views, fov=cfg.fov, size=cfg.viewport_size)
        views = torch.from_numpy(seq.viewports).permute(0, 3, 1, 2).contiguous()
        out.append(
            RenderedSample(
                viewports=views,
                mos=float(rec.pseudo_mos),
                labels={
                    "range": rec.range_label,
                    "type": rec.type_label,
                    "degree": rec.degree_label,
                },
                record=rec,
            )
        )
    return out


def split_train_val(records, val_fraction: float, seed: int):
    """Hold out a fraction of the training sources (whole panoramas)."""
    sources = sorted({record_source(r) for r in records})
    if len(sources) < 2 or val_fraction <= 0:
        return list(records), []
    rng = np.random.default_rng(seed)
    order = list(rng.permutation(sources))
    n_val = max(1, int(round(val_fraction * len(sources))))
    n_val = min(n_val, len(sources) - 1)
    val_sources = set(order[:n_val])
    train = [r for r in records if record_source(r) not in val_sources]
    val = [r for r in records if record_source(r) in val_sources]
    return train, val


def _stack_batch(samples, idxs, dtype):
    views = torch.stack([samples[i].viewports for i in idxs]).to(dtype)
    mos = torch.tensor([samples[i].mos for i in idxs], dtype=dtype)
    labels = {
        t: torch.tensor([samples[i].labels[t] for i in idxs], dtype=torch.long)
        for t in ("range", "type", "degree")
    }
    return views, mos, labels


def calibrate_feature_stats(
    model: QualityModel, samples, batch_size: int, dtype, mode: str = "soft"
) -> None:
    """Re-estimate the pooled feature statistics the heads standardize with.

    The pooled vectors share a sample-independent component orders of
    magnitude larger than the per-sample part that carries the labels;
    refreshing mean and spread each epoch keeps the final FC stages working
    on an O(1) residual instead of chasing a tiny signal under a large bias.
    """
    # soft and hard selections both feed the heads during training, so the
    # statistics pool over whichever modes the loop will run
    modes = ("soft", "hard") if mode == "soft" else (mode,)
    sums = sq_sums = None
    count = 0
    for start in range(0, len(samples), batch_size):
        idxs = range(start, min(start + batch_size, len(samples)))
        views, _, _ = _stack_batch(samples, idxs, dtype)
        for m in modes:
            vecs = {k: v.double() for k, v in model.pooled_features(views, mode=m).items()}
            if sums is None:
                sums = {k: v.sum(dim=0) for k, v in vecs.items()}
                sq_sums = {k: (v * v).sum(dim=0) for k, v in vecs.items()}
            else:
                for k, v in vecs.items():
                    sums[k] += v.sum(dim=0)
                    sq_sums[k] += (v * v).sum(dim=0)
            count += views.shape[0]
    stats = {}
    for k, total in sums.items():
        mean = total / count
        var = (sq_sums[k] / count - mean * mean).clamp_min_(0.0)
        std = var.sqrt()
        # floor relative to the typical spread: near-constant dimensions carry
        # no label information, amplifying them would only inject noise
        floor = max(float(std.mean()) * 0.1, 1e-8)
        stats[k] = (mean.to(dtype), std.clamp_min(floor).to(dtype))
    model.set_feature_stats(stats)


def predict_samples(model: QualityModel, samples, batch_size: int, dtype) -> list:
    """Hard-selection predictions for a list of rendered samples."""
    was_training = model.training
    model.eval()
    preds = []
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            idxs = range(start, min(start + batch_size, len(samples)))
            views, _, _ = _stack_batch(samples, idxs, dtype)
            out = model(views, mode="hard")
            for j in range(views.shape[0]):
                labels = {
                    t: int(torch.argmax(out.aux_probs[t][j]))
                    for t in model.cfg.tasks
                }
                preds.append(metrics.Prediction(score=float(out.score[j]), labels=labels))
    if was_training:
        model.train()
    return preds


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: QualityModel, uncertainty, train_cfg: TrainConfig, extra: dict | None = None):
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "model_config": model.cfg.to_dict(),
        "state_dict": model.state_dict(),
        "uncertainty": uncertainty.state_dict() if uncertainty is not None else None,
        "train_config": asdict(train_cfg),
    }
    payload.update(extra or {})
    torch.save(payload, path)


def load_checkpoint(path):
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a recognized checkpoint")
    model = QualityModel(ModelConfig.from_dict(payload["model_config"]))
    model.load_state_dict(payload["state_dict"])
    train_cfg = TrainConfig(**payload["train_config"])
    if train_cfg.precision == "float64":
        model.double()
    model.eval()
    return model, train_cfg, payload


# ---------------------------------------------------------------------------
# the loop


@dataclass
class EpochStats:
    epoch: int
    loss_main: float
    loss_aux: dict
    sigmas: dict
    val_plcc: float | None
    val_srcc: float | None


@dataclass
class TrainResult:
    history: list
    best_epoch: int
    best_val_srcc: float | None
    clamp_count: int
    log_path: str | None
    checkpoint_path: str | None


LOG_COLUMNS = [
    "epoch",
    "loss_main",
    "loss_r",
    "loss_t",
    "loss_d",
    "sigma_main",
    "sigma_r",
    "sigma_t",
    "sigma_d",
    "val_plcc",
    "val_srcc",
]


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, float) and math.isnan(x):
        return ""
    return f"{x:.8f}" if isinstance(x, float) else str(x)


def train(
    model: QualityModel,
    manifest: Manifest,
    root,
    cfg: TrainConfig,
    out_dir=None,
) -> TrainResult:
    """Optimize model on the manifest's train split.

    Splits off whole source panoramas for validation, logs one CSV row per
    epoch, keeps the checkpoint with the best validation SRCC, and aborts on
    any non-finite loss. Fully deterministic for a fixed config and seed.
    """
    tasks = model.cfg.tasks
    dtype = cfg.dtype()
    if cfg.precision == "float64":
        model.double()
    model.train()

    train_recs, val_recs = split_train_val(
        manifest.split_records("train"), cfg.val_fraction, cfg.seed
    )
    if not train_recs:
        raise ValueError("manifest has no training records")
    train_samples = render_records(train_recs, root, cfg)
    val_samples = render_records(val_recs, root, cfg)

    # regress a standardized target; the model's score buffers map the raw
    # head output back to MOS units everywhere outside this loop
    target = torch.tensor([s.mos for s in train_samples], dtype=dtype)
    loc = float(target.mean())
    scale = float(target.std()) if len(target) > 1 else 1.0
    model.set_score_stats(loc, scale if scale > 0 else 1.0)

    loss_names = ("main",) + tuple(tasks)
    uncertainty = UncertaintyWeighting(loss_names).to(dtype)
    trunk, rest = [], list(uncertainty.parameters())
    for name, p in model.named_parameters():
        # the slow group is everything upstream of the pooled standardization
        # point: backbone, selection convolutions, and the gated block stacks
        # inside the heads; the FC stages that read standardized residuals and
        # the softmax-bounded selection scorers move at the full rate
        slow = name.startswith(("backbone.", "selection.")) or ".blocks." in name
        if name.startswith(("selection.trunk_fc", "selection.weight_head", "selection.score_heads")):
            slow = False
        (trunk if slow else rest).append(p)
    optimizer = torch.optim.Adam(
        [
            {"params": trunk, "lr": cfg.lr * cfg.trunk_lr_scale},
            {"params": rest, "lr": cfg.lr},
        ]
    )
    shuffler = torch.Generator().manual_seed(cfg.seed)
    counter = ClampCounter()

    out_dir = Path(out_dir) if out_dir is not None else None
    log_path = ckpt_path = None
    writer = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "log.csv"
        ckpt_path = out_dir / "checkpoint.pt"
        log_file = open(log_path, "w", newline="")
        writer = csv.writer(log_file)
        writer.writerow(LOG_COLUMNS)

    history = []
    best_srcc = None
    best_val = None
    best_epoch = -1
    mode = "soft" if cfg.soft_selection else "hard"

    try:
        for epoch in range(cfg.epochs):
            calibrate_feature_stats(
                model, train_samples, cfg.batch_size, dtype, mode=mode
            )
            order = torch.randperm(len(train_samples), generator=shuffler).tolist()
            sums = {"main": 0.0}
            aux_sums = {t: [0.0, 0] for t in tasks}
            n_batches = 0
            for start in range(0, len(order), cfg.batch_size):
                idxs = order[start : start + cfg.batch_size]
                views, mos, labels = _stack_batch(train_samples, idxs, dtype)
                # every loss term is averaged over the training-mode and the
                # evaluation-mode forward, so the heads fit features they will
                # actually see when the hard selection runs at test time
                outs = [model(views, mode=mode)]
                if mode == "soft":
                    outs.append(model(views, mode="hard"))
                target = (mos - model.score_loc) / model.score_scale
                losses = {
                    "main": sum(
                        mse_loss((o.score - model.score_loc) / model.score_scale, target)
                        for o in outs
                    )
                    / len(outs)
                }
                for t in tasks:
                    per_mode = [ce_loss(o.aux_probs[t], labels[t], counter) for o in outs]
                    valid = [v for v in per_mode if v is not None]
                    losses[t] = sum(valid) / len(valid) if valid else None
                total = uncertainty(losses)
                if not torch.isfinite(total):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch}: "
                        + ", ".join(f"{k}={v}" for k, v in losses.items() if v is not None)
                    )
                optimizer.zero_grad()
                total.backward()
                optimizer.step()

                sums["main"] += float(losses["main"].detach())
                for t in tasks:
                    if losses[t] is not None:
                        aux_sums[t][0] += float(losses[t].detach())
                        aux_sums[t][1] += 1
                n_batches += 1

            loss_main = sums["main"] / n_batches
            loss_aux = {
                t: (aux_sums[t][0] / aux_sums[t][1]) if aux_sums[t][1] else None
                for t in tasks
            }
            val_plcc = val_srcc = None
            if len(val_samples) >= metrics.MIN_STRATUM:
                preds = predict_samples(model, val_samples, cfg.batch_size, dtype)
                scores = [p.score for p in preds]
                target = [s.mos for s in val_samples]
                if np.std(scores) > 0 and np.std(target) > 0:
                    val_plcc = metrics.plcc(scores, target)
                    val_srcc = metrics.srcc(scores, target)

            stats = EpochStats(
                epoch=epoch,
                loss_main=loss_main,
                loss_aux=loss_aux,
                sigmas=uncertainty.sigmas(),
                val_plcc=val_plcc,
                val_srcc=val_srcc,
            )
            history.append(stats)
            if writer is not None:
                row = [epoch, _fmt(loss_main)]
                row += [_fmt(loss_aux.get(t)) for t in ("range", "type", "degree")]
                sig = stats.sigmas
                row += [_fmt(sig.get("main"))]
                row += [_fmt(sig.get(t)) for t in ("range", "type", "degree")]
                row += [_fmt(val_plcc), _fmt(val_srcc)]
                writer.writerow(row)

            # model selection keys on validation SRCC, falling back to the
            # training loss when no validation set exists
            select_metric = val_srcc if val_srcc is not None else -loss_main
            if best_epoch < 0 or select_metric > best_srcc:
                best_srcc = select_metric
                best_val = val_srcc
                best_epoch = epoch
                if ckpt_path is not None:
                    save_checkpoint(
                        ckpt_path,
                        model,
                        uncertainty,
                        cfg,
                        extra={
                            "taxonomy": manifest.taxonomy,
                            "score_range": list(manifest.score_range),
                            "best_epoch": epoch,
                            "best_val_srcc": val_srcc,
                        },
                    )
    finally:
        if writer is not None:
            log_file.close()

    return TrainResult(
        history=history,
        best_epoch=best_epoch,
        best_val_srcc=best_val,
        clamp_count=counter.count,
        log_path=str(log_path) if log_path else None,
        checkpoint_path=str(ckpt_path) if ckpt_path else None,
    )
