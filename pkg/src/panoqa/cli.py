"""Command-line pipeline: dataset generation, training, evaluation, ablation.

Subcommands
    gen-data   synthesize (or ingest) panoramas, distort them, write a dataset
    train      optimize a model on a dataset's train split
    eval       score a checkpoint on a dataset's test split, write a report
    ablate     sweep auxiliary-task subsets (and optionally module toggles)

Every run resolves its settings in three layers: built-in defaults, then an
optional JSON config file (`--config`, unknown keys rejected), then explicit
command-line flags. The resolved config is written next to the run's outputs,
which live in a fresh per-run directory under --out. The environment variable
MTA_DATA_DIR supplies the default dataset root. Reports come with their
figures rendered next to the delimited output.
"""

import argparse
import json
import logging
import os
import statistics
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import figures, metrics
from .distortion import (
    Manifest,
    generate_dataset,
    load_png,
    procedural_panorama,
    range_class_count,
)
from .model import AUX_TASKS, ModelConfig, QualityModel
from .selection import COMBINATIONS
from .training import (
    TrainConfig,
    TrainingDiverged,
    load_checkpoint,
    render_records,
    train,
)

log = logging.getLogger("panoqa")

TASK_LETTERS = {"r": "range", "t": "type", "d": "degree"}


def data_root() -> str:
    return os.environ.get("MTA_DATA_DIR", "data")


def parse_tasks(text: str) -> tuple:
    """Parse a task list like 'r,t,d' (letters or full names); 'none' is empty."""
    text = text.strip().lower()
    if text in ("none", ""):
        return ()
    tasks = []
    for part in text.split(","):
        part = part.strip()
        name = TASK_LETTERS.get(part, part)
        if name not in AUX_TASKS:
            raise ValueError(f"unknown task {part!r}; use r, t, d or none")
        if name not in tasks:
            tasks.append(name)
    return tuple(tasks)


def resolve_config(defaults: dict, config_path, cli_values: dict) -> dict:
    """defaults < config file < explicit flags; unknown file keys rejected."""
    cfg = dict(defaults)
    if config_path:
        loaded = json.loads(Path(config_path).read_text())
        if not isinstance(loaded, dict):
            raise ValueError(f"{config_path} must hold a JSON object")
        unknown = sorted(set(loaded) - set(defaults))
        if unknown:
            raise ValueError(f"unknown config keys in {config_path}: {unknown}")
        cfg.update(loaded)
    for key, value in cli_values.items():
        if value is not None:
            cfg[key] = value
    return cfg


def make_run_dir(out_root, command: str, run_name) -> Path:
    root = Path(out_root)
    root.mkdir(parents=True, exist_ok=True)
    name = run_name or time.strftime("%Y%m%d-%H%M%S")
    path = root / f"{command}-{name}"
    suffix = 1
    while path.exists():
        path = root / f"{command}-{name}-{suffix}"
        suffix += 1
    path.mkdir(parents=True)
    return path


def write_config(run_dir: Path, cfg: dict) -> None:
    (run_dir / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


def locate_manifest(data_path) -> tuple:
    """Accept either a dataset directory or a manifest path; return (manifest, root)."""
    p = Path(data_path)
    if p.is_dir():
        p = p / "manifest.json"
    if not p.exists():
        raise FileNotFoundError(f"no manifest at {p}")
    return Manifest.load(p), p.parent


# ---------------------------------------------------------------------------
# gen-data


GEN_DEFAULTS = {
    "taxonomy": "jufe",
    "procedural": None,
    "images": None,
    "per_image": 24,
    "seed": 0,
    "height": 256,
    "width": 512,
    "out": None,
}


def cmd_gen_data(args) -> int:
    cfg = resolve_config(
        GEN_DEFAULTS,
        args.config,
        {
            "taxonomy": args.taxonomy,
            "procedural": args.procedural,
            "images": args.images,
            "per_image": args.per_image,
            "seed": args.seed,
            "height": args.height,
            "width": args.width,
            "out": args.out,
        },
    )
    if cfg["out"] is None:
        cfg["out"] = data_root()
    if (cfg["procedural"] is None) == (cfg["images"] is None):
        raise ValueError("supply exactly one of --procedural N or --images DIR")

    if cfg["procedural"] is not None:
        base = [
            (f"pano{i}", procedural_panorama(cfg["seed"] + i, cfg["height"], cfg["width"]))
            for i in range(cfg["procedural"])
        ]
    else:
        paths = sorted(Path(cfg["images"]).glob("*.png"))
        if not paths:
            raise FileNotFoundError(f"no PNG panoramas under {cfg['images']}")
        base = [(p.stem, load_png(p)) for p in paths]

    out = Path(cfg["out"])
    manifest = generate_dataset(
        base, cfg["taxonomy"], out, n_per_image=cfg["per_image"], seed=cfg["seed"]
    )
    write_config(out, cfg)

    cells = {}
    for rec in manifest.records:
        key = (rec.range_label, rec.spec.dist_type or "pristine", rec.spec.level)
        cells[key] = cells.get(key, 0) + 1
    print(f"wrote {len(manifest.records)} records to {out}")
    print("cell coverage (range, type, level): count")
    for key in sorted(cells, key=str):
        print(f"  {key}: {cells[key]}")
    n_train = sum(1 for r in manifest.records if r.split == "train")
    print(f"split: {n_train} train / {len(manifest.records) - n_train} test")
    return 0


# ---------------------------------------------------------------------------
# train


TRAIN_DEFAULTS = {
    "data": None,
    "tasks": "r,t,d",
    "profile": "paper",
    "channels": 128,
    "views": 8,
    "viewport_size": 224,
    "fov": float(np.pi / 2.0),
    "epochs": 50,
    "lr": 1e-5,
    "batch_size": 8,
    "seed": 0,
    "val_fraction": 0.1,
    "precision": "float32",
    "out": "runs",
    "run_name": None,
}


def build_model(cfg: dict, taxonomy: str) -> QualityModel:
    model_cfg = ModelConfig(
        profile=cfg["profile"],
        num_views=cfg["views"],
        channels=cfg["channels"],
        tasks=parse_tasks(cfg["tasks"]) if isinstance(cfg["tasks"], str) else tuple(cfg["tasks"]),
        range_classes=range_class_count(taxonomy),
        use_selection=cfg.get("use_selection", True),
        use_integration=cfg.get("use_integration", True),
        use_fusion=cfg.get("use_fusion", True),
        init_seed=cfg["seed"],
    )
    return QualityModel(model_cfg)


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(
        lr=cfg["lr"],
        batch_size=cfg["batch_size"],
        epochs=cfg["epochs"],
        seed=cfg["seed"],
        val_fraction=cfg["val_fraction"],
        precision=cfg["precision"],
        viewport_size=cfg["viewport_size"],
        num_views=cfg["views"],
        fov=cfg["fov"],
    )


def cmd_train(args) -> int:
    cfg = resolve_config(
        TRAIN_DEFAULTS,
        args.config,
        {
            "data": args.data,
            "tasks": args.tasks,
            "profile": args.profile,
            "channels": args.channels,
            "views": args.views,
            "viewport_size": args.viewport_size,
            "epochs": args.epochs,
            "lr": args.lr,
            "batch_size": args.batch_size,
            "seed": args.seed,
            "val_fraction": args.val_fraction,
            "out": args.out,
            "run_name": args.run_name,
        },
    )
    if cfg["data"] is None:
        cfg["data"] = data_root()
    manifest, root = locate_manifest(cfg["data"])
    model = build_model(cfg, manifest.taxonomy)
    run_dir = make_run_dir(cfg["out"], "train", cfg["run_name"])
    write_config(run_dir, cfg)
    log.info("training in %s (%d params)", run_dir, sum(p.numel() for p in model.parameters()))

    try:
        result = train(model, manifest, root, train_config(cfg), out_dir=run_dir)
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 3

    figures.training_curves(result.log_path, run_dir / "curves.png")
    if result.clamp_count:
        log.warning("cross entropy clamped %d probabilities", result.clamp_count)
    print(f"run dir: {run_dir}")
    print(f"best epoch: {result.best_epoch}")
    if result.best_val_srcc is not None:
        print(f"best val SRCC: {result.best_val_srcc}")
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


# ---------------------------------------------------------------------------
# eval


EVAL_DEFAULTS = {
    "checkpoint": None,
    "data": None,
    "cross": None,
    "split": "test",
    "batch_size": 8,
    "out": "runs",
    "run_name": None,
}


def predict_with_selection(model: QualityModel, samples, batch_size: int, dtype):
    """Hard-selection predictions plus a per-task histogram of chosen combos."""
    from .training import _stack_batch

    model.eval()
    hist = None
    preds = []
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            idxs = range(start, min(start + batch_size, len(samples)))
            views, _, _ = _stack_batch(samples, idxs, dtype)
            out = model(views, mode="hard")
            for j in range(views.shape[0]):
                labels = {
                    t: int(torch.argmax(out.aux_probs[t][j])) for t in model.cfg.tasks
                }
                preds.append(metrics.Prediction(score=float(out.score[j]), labels=labels))
            if out.selection is not None:
                if hist is None:
                    hist = {t: [0] * len(COMBINATIONS) for t in out.selection.chosen}
                for task, chosen in out.selection.chosen.items():
                    for idx in chosen.tolist():
                        hist[task][int(idx)] += 1
    return preds, hist


def evaluate_checkpoint(checkpoint_path, manifest, root, split: str, batch_size: int):
    model, train_cfg, _ = load_checkpoint(checkpoint_path)
    records = manifest.split_records(split) if split else list(manifest.records)
    if not records:
        raise ValueError(f"no records in split {split!r}")
    sub = Manifest(
        taxonomy=manifest.taxonomy, score_range=manifest.score_range, records=records
    )
    samples = render_records(records, root, train_cfg)
    preds, hist = predict_with_selection(model, samples, batch_size, train_cfg.dtype())
    # a checkpoint trained on another taxonomy counts ranges differently; its
    # range predictions are meaningless against these labels, so drop them
    if "range" in model.cfg.tasks and model.cfg.range_classes != range_class_count(
        manifest.taxonomy
    ):
        log.warning(
            "range head has %d classes but dataset uses %d; skipping range accuracy",
            model.cfg.range_classes,
            range_class_count(manifest.taxonomy),
        )
        for p in preds:
            p.labels.pop("range", None)
    report = metrics.evaluate_predictions(preds, sub, split=split, selection_histogram=hist)
    metrics.validate_report(report)
    return report, preds, sub


STRATA_COLUMNS = ["stratum", "n", "computable", "plcc", "srcc", "rmse"]


def write_report_files(run_dir: Path, report: dict, preds, manifest) -> None:
    import csv as _csv

    (run_dir / "report.json").write_text(json.dumps(report, indent=2) + "\n")

    with open(run_dir / "strata.csv", "w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(STRATA_COLUMNS)
        for name, s in report["strata"].items():
            row = [name, s["n"], s["computable"]]
            row += [s.get(k, "") for k in ("plcc", "srcc", "rmse")]
            writer.writerow(row)

    scores = [p.score for p in preds]
    mos = [r.pseudo_mos for r in manifest.records]
    overall = report["strata"]["Overall"]
    fit_params = overall.get("logistic", {}).get("params") if overall["computable"] else None
    figures.prediction_scatter(
        scores, mos, fit_params, run_dir / "scatter.png", score_range=report["score_range"]
    )
    if report.get("selection_histogram"):
        figures.selection_histogram(report["selection_histogram"], run_dir / "selection.png")


def print_report(report: dict) -> None:
    print(f"{'stratum':<10} {'n':>4} {'plcc':>20} {'srcc':>20} {'rmse':>20}")
    for name, s in report["strata"].items():
        if s["computable"]:
            print(f"{name:<10} {s['n']:>4} {s['plcc']!s:>20} {s['srcc']!s:>20} {s['rmse']!s:>20}")
        else:
            print(f"{name:<10} {s['n']:>4} {'not computable':>20}")
    for task, acc in report["accuracy"].items():
        print(f"acc_{task}: {acc if acc is not None else 'n/a'}")


def cmd_eval(args) -> int:
    cfg = resolve_config(
        EVAL_DEFAULTS,
        args.config,
        {
            "checkpoint": args.checkpoint,
            "data": args.data,
            "cross": args.cross,
            "split": args.split,
            "batch_size": args.batch_size,
            "out": args.out,
            "run_name": args.run_name,
        },
    )
    if cfg["checkpoint"] is None:
        raise ValueError("--checkpoint is required")
    source = cfg["cross"] if cfg["cross"] is not None else cfg["data"]
    if source is None:
        source = data_root()
    manifest, root = locate_manifest(source)

    run_dir = make_run_dir(cfg["out"], "eval", cfg["run_name"])
    write_config(run_dir, cfg)
    report, preds, sub = evaluate_checkpoint(
        cfg["checkpoint"], manifest, root, cfg["split"], cfg["batch_size"]
    )
    write_report_files(run_dir, report, preds, sub)
    print(f"run dir: {run_dir}")
    print_report(report)
    return 0


# ---------------------------------------------------------------------------
# ablate


ABLATE_DEFAULTS = {
    "data": None,
    "profile": "tiny",
    "channels": 32,
    "views": 8,
    "viewport_size": 64,
    "fov": float(np.pi / 2.0),
    "epochs": 5,
    "lr": 1e-3,
    "batch_size": 8,
    "seed": 0,
    "val_fraction": 0.1,
    "precision": "float32",
    "modules": None,
    "out": "runs",
    "run_name": None,
}

TASK_SUBSETS = [
    ("none", ()),
    ("R", ("range",)),
    ("T", ("type",)),
    ("D", ("degree",)),
    ("RT", ("range", "type")),
    ("RD", ("range", "degree")),
    ("TD", ("type", "degree")),
    ("RTD", ("range", "type", "degree")),
]

# module toggles: feature selection, integration stack, semantic fusion
MODULE_ROWS = [
    ("plain", (False, False, False)),
    ("sel", (True, False, False)),
    ("int", (False, True, False)),
    ("fus", (False, False, True)),
    ("sel+int", (True, True, False)),
    ("sel+fus", (True, False, True)),
    ("int+fus", (False, True, True)),
    ("sel+int+fus", (True, True, True)),
]

ABLATION_COLUMNS = [
    "label",
    "tasks",
    "modules",
    "plcc",
    "srcc",
    "rmse",
    "acc_range",
    "acc_type",
    "acc_degree",
    "aux_params",
]


def run_ablation_row(label: str, row_cfg: dict, manifest, root, row_dir: Path) -> dict:
    row_dir.mkdir(parents=True, exist_ok=True)
    write_config(row_dir, row_cfg)
    model = build_model(row_cfg, manifest.taxonomy)
    aux_params = model.aux_parameter_count()
    result = train(model, manifest, root, train_config(row_cfg), out_dir=row_dir)
    report, preds, sub = evaluate_checkpoint(
        row_dir / "checkpoint.pt", manifest, root, "test", row_cfg["batch_size"]
    )
    (row_dir / "report.json").write_text(json.dumps(report, indent=2) + "\n")
    overall = report["strata"]["Overall"]
    acc = report["accuracy"]
    return {
        "label": label,
        "tasks": row_cfg["tasks"],
        "modules": row_cfg.get("modules_label", "sel+int+fus"),
        "plcc": overall.get("plcc"),
        "srcc": overall.get("srcc"),
        "rmse": overall.get("rmse"),
        "acc_range": acc.get("range"),
        "acc_type": acc.get("type"),
        "acc_degree": acc.get("degree"),
        "aux_params": aux_params,
        "best_epoch": result.best_epoch,
    }


def check_ablation_direction(rows: list) -> None:
    """Non-blocking sanity check: auxiliary tasks should not hurt much."""
    base = next((r for r in rows if r["label"] == "none"), None)
    aux = [r["srcc"] for r in rows if r["label"] in dict(TASK_SUBSETS) and r["label"] != "none"]
    aux = [v for v in aux if v is not None]
    if base is None or base["srcc"] is None or not aux:
        return
    med = statistics.median(aux)
    if med < base["srcc"] - 0.02:
        log.warning(
            "median SRCC over task-enabled rows (%.4f) trails the no-task row (%.4f) "
            "by more than 0.02; desk-scale noise or a regression",
            med,
            base["srcc"],
        )


def cmd_ablate(args) -> int:
    cfg = resolve_config(
        ABLATE_DEFAULTS,
        args.config,
        {
            "data": args.data,
            "profile": args.profile,
            "channels": args.channels,
            "views": args.views,
            "viewport_size": args.viewport_size,
            "epochs": args.epochs,
            "lr": args.lr,
            "batch_size": args.batch_size,
            "seed": args.seed,
            "val_fraction": args.val_fraction,
            "modules": args.modules,
            "out": args.out,
            "run_name": args.run_name,
        },
    )
    if cfg["data"] is None:
        cfg["data"] = data_root()
    manifest, root = locate_manifest(cfg["data"])
    run_dir = make_run_dir(cfg["out"], "ablate", cfg["run_name"])
    write_config(run_dir, cfg)

    rows = []
    for label, tasks in TASK_SUBSETS:
        row_cfg = dict(cfg)
        row_cfg["tasks"] = ",".join(t[0] for t in tasks) or "none"
        log.info("ablation row %s", label)
        rows.append(run_ablation_row(label, row_cfg, manifest, root, run_dir / "rows" / label))

    if cfg["modules"]:
        for label, (sel, integ, fus) in MODULE_ROWS:
            row_cfg = dict(cfg)
            row_cfg["tasks"] = "r,t,d"
            row_cfg["use_selection"] = sel
            row_cfg["use_integration"] = integ
            row_cfg["use_fusion"] = fus
            row_cfg["modules_label"] = label
            log.info("module row %s", label)
            rows.append(
                run_ablation_row(f"mod:{label}", row_cfg, manifest, root, run_dir / "rows" / f"mod_{label}")
            )

    import csv as _csv

    with open(run_dir / "rows.csv", "w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(ABLATION_COLUMNS)
        for r in rows:
            writer.writerow([r[k] if r[k] is not None else "" for k in ABLATION_COLUMNS])

    figures.ablation_bars(
        [r for r in rows if r["srcc"] is not None], run_dir / "ablation.png"
    )
    check_ablation_direction(rows)

    print(f"run dir: {run_dir}")
    print(" ".join(ABLATION_COLUMNS))
    for r in rows:
        print(" ".join(str(r[k]) if r[k] is not None else "-" for k in ABLATION_COLUMNS))
    return 0


# ---------------------------------------------------------------------------
# argument wiring


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="panoqa",
        description="panoramic image quality pipeline: data, training, evaluation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a distorted panorama dataset")
    g.add_argument("--config", help="JSON config file (flags override it)")
    g.add_argument("--taxonomy", choices=["jufe", "oiq"])
    g.add_argument("--procedural", type=int, metavar="N", help="synthesize N base panoramas")
    g.add_argument("--images", metavar="DIR", help="directory of base panorama PNGs")
    g.add_argument("--per-image", dest="per_image", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--height", type=int)
    g.add_argument("--width", type=int)
    g.add_argument("--out", help="dataset directory (default: MTA_DATA_DIR or ./data)")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model on a dataset")
    t.add_argument("--config")
    t.add_argument("--data", help="dataset dir or manifest (default: MTA_DATA_DIR)")
    t.add_argument("--tasks", help="auxiliary tasks, e.g. r,t,d or none")
    t.add_argument("--profile", choices=["paper", "tiny"])
    t.add_argument("--channels", type=int)
    t.add_argument("--views", type=int)
    t.add_argument("--viewport-size", dest="viewport_size", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--val-fraction", dest="val_fraction", type=float)
    t.add_argument("--out", help="runs root (a fresh run dir is created inside)")
    t.add_argument("--run-name", dest="run_name", help="run dir suffix instead of a timestamp")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint, write report and figures")
    e.add_argument("--config")
    e.add_argument("--checkpoint")
    e.add_argument("--data", help="dataset dir or manifest (default: MTA_DATA_DIR)")
    e.add_argument("--cross", help="evaluate on this other dataset instead")
    e.add_argument("--split", choices=["train", "test"])
    e.add_argument("--batch-size", dest="batch_size", type=int)
    e.add_argument("--out")
    e.add_argument("--run-name", dest="run_name")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="sweep auxiliary-task subsets")
    a.add_argument("--config")
    a.add_argument("--data")
    a.add_argument("--profile", choices=["paper", "tiny"])
    a.add_argument("--channels", type=int)
    a.add_argument("--views", type=int)
    a.add_argument("--viewport-size", dest="viewport_size", type=int)
    a.add_argument("--epochs", type=int)
    a.add_argument("--lr", type=float)
    a.add_argument("--batch-size", dest="batch_size", type=int)
    a.add_argument("--seed", type=int)
    a.add_argument("--val-fraction", dest="val_fraction", type=float)
    a.add_argument(
        "--modules",
        action=argparse.BooleanOptionalAction,
        help="also sweep the module on/off rows",
    )
    a.add_argument("--out")
    a.add_argument("--run-name", dest="run_name")
    a.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
