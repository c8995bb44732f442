"""Evaluation reports: metrics tables, training curves, figures, ablations."""

from __future__ import annotations

import csv
import dataclasses
import json
from pathlib import Path

import numpy as np
import torch

from .config import ABLATION_VARIANTS, RunConfig, apply_variant
from .dataset import DatasetSplit
from .errors import ValidationError
from .inference import predict_batch
from .metrics import clinical_metrics, confusion_metrics
from .model import CascadeModel
from .synth import SampleRecord
from .training import RunRecord, batch_tensors, train_model

EVAL_COLUMNS = ("id", "task", "dice", "iou", "precision", "recall",
                "lesion_area", "vessel_density", "avascular_area")
CSV_FOOTER = (
    "# conventions: a pair of empty masks scores 1.0 on dice/iou/precision/"
    "recall; precision is 1.0 when nothing was predicted, recall is 1.0 when "
    "there was nothing to find; vessel_density is 0.0 for an empty lesion.")


def _use_agg():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def evaluate_samples(model: CascadeModel, samples: list[SampleRecord],
                     batch_size: int = 4) -> list[dict]:
    """Per-sample metric rows for the region and vessel tasks.

    The clinical quantities are derived from the predicted region and vessel
    masks of the same sample and repeated on both task rows.
    """
    rows = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        image, _ = batch_tensors(chunk, ["region"])
        preds = predict_batch(model, image)
        for j, s in enumerate(chunk):
            pred_r = preds["region"]["mask"][j, 0].numpy()
            pred_v = preds["vessel"]["mask"][j, 0].numpy()
            area, density, avascular = clinical_metrics(pred_r, pred_v)
            for task, pred, gt in (("region", pred_r, s.region_mask),
                                   ("vessel", pred_v, s.vessel_mask)):
                m = confusion_metrics(pred, gt)
                rows.append({"id": s.id, "task": task, "dice": m.dice,
                             "iou": m.iou, "precision": m.precision,
                             "recall": m.recall, "lesion_area": area,
                             "vessel_density": density,
                             "avascular_area": avascular})
    return rows


def write_metrics_csv(rows: list[dict], path: str | Path) -> None:
    """Per-sample rows, then one mean(std) summary row per task, then a
    footer line documenting the empty-mask conventions."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    numeric = EVAL_COLUMNS[2:]
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=EVAL_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in EVAL_COLUMNS})
        for task in dict.fromkeys(r["task"] for r in rows):
            group = [r for r in rows if r["task"] == task]
            summary = {"id": "summary", "task": task}
            for col in numeric:
                vals = np.array([r[col] for r in group], dtype=np.float64)
                summary[col] = f"{vals.mean():.4f}({vals.std():.4f})"
            writer.writerow(summary)
        fh.write(CSV_FOOTER + "\n")


def loss_curve(record: RunRecord, path: str | Path) -> None:
    plt = _use_agg()
    epochs = [e["epoch"] for e in record.epoch_losses]
    fig, ax = plt.subplots(figsize=(6, 4))
    for key in ("total", "region", "boundary", "shape", "vessel"):
        if any(key in e for e in record.epoch_losses):
            ax.plot(epochs, [e.get(key, 0.0) for e in record.epoch_losses],
                    label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    if ax.get_legend_handles_labels()[0]:
        ax.legend(fontsize=8)
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)


def weight_curve(record: RunRecord, path: str | Path) -> None:
    """Step plot of the adaptive task weights; one step per update."""
    plt = _use_agg()
    fig, ax = plt.subplots(figsize=(6, 4))
    if record.weight_history:
        toggles = ABLATION_VARIANTS.get(record.variant, {})
        active = ["region"]
        if toggles.get("use_boundary_task", True):
            active.append("boundary")
        if toggles.get("use_shape_task", True):
            active.append("shape")
        epochs = [0] + [w["epoch"] for w in record.weight_history]
        for key in ("region", "boundary", "shape"):
            start = 1.0 / len(active) if key in active else 0.0
            vals = [start] + [w[key] for w in record.weight_history]
            ax.step(epochs, vals, where="post", label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("task weight")
    ax.set_ylim(-0.05, 1.05)
    if ax.get_legend_handles_labels()[0]:
        ax.legend(fontsize=8)
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)


def prediction_panels(model: CascadeModel, samples: list[SampleRecord],
                      path: str | Path, mc_samples: int = 0,
                      seed: int = 0, max_rows: int = 4) -> None:
    """Side-by-side figure: input, truth, prediction and, when sampling is
    on, the pixel variance map per sample."""
    plt = _use_agg()
    shown = samples[:max_rows]
    image, _ = batch_tensors(shown, ["region"])
    preds = predict_batch(model, image, mc_samples, seed)
    cols = 5 if mc_samples > 0 else 4
    fig, axes = plt.subplots(len(shown), cols,
                             figsize=(2.2 * cols, 2.2 * len(shown)),
                             squeeze=False)
    for i, s in enumerate(shown):
        panels = [("input", s.image, "gray"),
                  ("truth region", s.region_mask, "gray"),
                  ("pred region", preds["region"]["prob"][i, 0].numpy(), "gray"),
                  ("pred vessel", preds["vessel"]["prob"][i, 0].numpy(), "gray")]
        if mc_samples > 0:
            panels.append(
                ("variance", preds["region"]["variance"][i, 0].numpy(), "magma"))
        for j, (title, arr, cmap) in enumerate(panels):
            axes[i][j].imshow(arr, cmap=cmap)
            axes[i][j].set_title(title, fontsize=7)
            axes[i][j].axis("off")
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)


def run_evaluation(model: CascadeModel, samples: list[SampleRecord],
                   out_dir: str | Path, record: RunRecord | None = None,
                   mc_samples: int = 0, seed: int = 0) -> dict:
    """Full evaluation bundle: CSV, summary JSON and figures."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = evaluate_samples(model, samples)
    write_metrics_csv(rows, out_dir / "metrics.csv")
    summary = {}
    for task in ("region", "vessel"):
        vals = [r["dice"] for r in rows if r["task"] == task]
        summary[f"{task}_dice"] = float(np.mean(vals))
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=1))
    prediction_panels(model, samples, out_dir / "panels.png", mc_samples, seed)
    if record is not None:
        loss_curve(record, out_dir / "loss_curve.png")
        weight_curve(record, out_dir / "weight_curve.png")
    return summary


ABLATION_COLUMNS = ("variant", "boundary", "shape", "uncertainty",
                    "interaction", "reinforcement", "region_dice",
                    "vessel_dice")


def ablation_grid(results: dict[str, dict], path: str | Path) -> None:
    """Variant-by-component grid with the held-out overlap scores."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS)
        writer.writeheader()
        for name in ABLATION_VARIANTS:
            if name not in results:
                continue
            toggles = ABLATION_VARIANTS[name]
            writer.writerow({
                "variant": name,
                "boundary": "yes" if toggles["use_boundary_task"] else "no",
                "shape": "yes" if toggles["use_shape_task"] else "no",
                "uncertainty": "yes" if toggles["use_uncertainty_loss"] else "no",
                "interaction": "yes" if toggles["use_migr"] else "no",
                "reinforcement": "yes" if toggles["use_mrgr"] else "no",
                "region_dice": f"{results[name]['region_dice']:.4f}",
                "vessel_dice": f"{results[name]['vessel_dice']:.4f}",
            })


def run_ablation(cfg: RunConfig, dataset: DatasetSplit, out_root: str | Path,
                 variants: list[str] | None = None) -> dict[str, dict]:
    """Train and score each architecture variant on the same split."""
    names = list(ABLATION_VARIANTS) if variants is None else variants
    for name in names:
        if name not in ABLATION_VARIANTS:
            raise ValidationError(f"unknown ablation variant {name!r}")
    out_root = Path(out_root)
    results: dict[str, dict] = {}
    for name in names:
        run_cfg = dataclasses.replace(cfg, train=apply_variant(cfg.train, name))
        run_dir = out_root / name.replace("*", "s")
        model, record = train_model(run_cfg, dataset, run_dir, variant=name)
        rows = evaluate_samples(model, dataset.test)
        results[name] = {
            "region_dice": float(np.mean(
                [r["dice"] for r in rows if r["task"] == "region"])),
            "vessel_dice": float(np.mean(
                [r["dice"] for r in rows if r["task"] == "vessel"])),
            "run_dir": str(run_dir),
        }
    ablation_grid(results, out_root / "ablation.csv")
    (out_root / "ablation.json").write_text(json.dumps(results, indent=1))
    return results
