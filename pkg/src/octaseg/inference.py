"""Batch inference: probability maps, hard masks, stochastic uncertainty."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .dataset import write_float_map
from .errors import DataLoadError, ValidationError
from .model import CascadeModel, load_checkpoint
from .training import derive_seed
from .uncertainty import mc_statistics

MASK_TASKS = ("region", "boundary", "vessel")


def load_input_images(path: str | Path) -> list[tuple[str, np.ndarray]]:
    """A single grayscale PNG, or every PNG in a directory, as float [0, 1]."""
    path = Path(path)
    if path.is_dir():
        files = sorted(path.glob("*.png"))
        if not files:
            raise DataLoadError(f"no .png images found under {path}")
    elif path.is_file():
        files = [path]
    else:
        raise DataLoadError(f"input path {path} does not exist")
    out = []
    for f in files:
        arr = np.asarray(Image.open(f).convert("L"), dtype=np.float32) / 255.0
        out.append((f.stem, arr))
    return out


def predict_batch(model: CascadeModel, images: torch.Tensor,
                  mc_samples: int = 0, seed: int = 0) -> dict:
    """Forward one batch. With ``mc_samples`` > 0 the probabilities are the
    stochastic mean and per-task variance maps are included; otherwise a
    single deterministic pass runs with dropout off."""
    model.eval()
    result: dict[str, dict[str, torch.Tensor]] = {}
    if mc_samples > 0:
        was_active = model.dropout_state.active
        model.set_mc_dropout(True)
        stats = mc_statistics(model, images, mc_samples, seed)
        model.set_mc_dropout(was_active)
        for task, s in stats.items():
            result[task] = {"prob": s.mean, "variance": s.variance}
    else:
        was_active = model.dropout_state.active
        model.set_mc_dropout(False)
        with torch.no_grad():
            out = model(images, mode="infer")
        model.set_mc_dropout(was_active)
        for task in ("region", "boundary", "shape", "vessel"):
            if out.get(task) is not None:
                result[task] = {"prob": out[task]}
    for task in MASK_TASKS:
        if task in result:
            result[task]["mask"] = result[task]["prob"] > 0.5
    return result


def _heatmap_png(path: Path, arr: np.ndarray) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path.parent.mkdir(parents=True, exist_ok=True)
    lo, hi = float(arr.min()), float(arr.max())
    scaled = (arr - lo) / (hi - lo) if hi > lo else np.zeros_like(arr)
    plt.imsave(path, scaled, cmap="magma", vmin=0.0, vmax=1.0)


def run_inference(checkpoint: str | Path, input_path: str | Path,
                  out_dir: str | Path, mc_samples: int = 0, seed: int = 0,
                  batch_size: int = 4) -> dict:
    """Predict every input image and write masks, probability maps and,
    when sampling is on, variance maps with heatmaps. Returns the manifest."""
    if mc_samples < 0:
        raise ValidationError(f"mc_samples must be >= 0, got {mc_samples}")
    model, payload = load_checkpoint(checkpoint)
    size = int(payload["config"]["train"]["input_size"])
    images = load_input_images(input_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    manifest: dict = {"checkpoint": str(checkpoint), "mc_samples": mc_samples,
                      "seed": seed, "images": {}}
    for start in range(0, len(images), batch_size):
        chunk = images[start:start + batch_size]
        for name, arr in chunk:
            if arr.shape != (size, size):
                raise ValidationError(
                    f"image {name!r} has shape {arr.shape}, model expects "
                    f"({size}, {size})")
        batch = torch.from_numpy(np.stack([a for _, a in chunk])[:, None])
        preds = predict_batch(model, batch, mc_samples,
                              derive_seed(seed, "infer", start))
        for j, (name, _) in enumerate(chunk):
            entry: dict[str, str] = {}
            for task, maps in preds.items():
                prob = maps["prob"][j, 0].numpy()
                write_float_map(out_dir / "prob" / f"{name}_{task}.f32", prob)
                entry[f"{task}_prob"] = f"prob/{name}_{task}.f32"
                if "mask" in maps:
                    mask = maps["mask"][j, 0].numpy().astype(np.uint8) * 255
                    p = out_dir / "masks" / f"{name}_{task}.png"
                    p.parent.mkdir(parents=True, exist_ok=True)
                    Image.fromarray(mask, mode="L").save(p)
                    entry[f"{task}_mask"] = f"masks/{name}_{task}.png"
                if "variance" in maps:
                    var = maps["variance"][j, 0].numpy()
                    write_float_map(
                        out_dir / "uncertainty" / f"{name}_{task}.f32", var)
                    _heatmap_png(
                        out_dir / "uncertainty" / f"{name}_{task}.png", var)
                    entry[f"{task}_variance"] = f"uncertainty/{name}_{task}.f32"
            manifest["images"][name] = entry
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return manifest
