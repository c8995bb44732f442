"""Deterministic training loop for the cascade.

All randomness (batch order, augmentation, dropout masks, stochastic
sampling) derives from the run seed plus a purpose tag and loop indices, so
a resumed run regenerates exactly the streams an uninterrupted one would
see. Task mixing weights update on a fixed period from variance estimates
taken on a pinned validation mini-batch, and a per-sample pixel-variance
cache refreshed at those same epochs drives the weighted cross-entropy.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .config import RunConfig, save_config
from .dataset import DatasetSplit
from .errors import DivergenceError, ValidationError
from .metrics import confusion_metrics
from .model import CascadeModel, save_checkpoint
from .synth import SampleRecord, augment
from .uncertainty import (LossWeights, mc_statistics, task_losses, total_loss,
                          weights_for_active)


def derive_seed(*parts) -> int:
    """Stable child seed from the run seed plus arbitrary tags."""
    ints = []
    for p in parts:
        if isinstance(p, (int, np.integer)):
            ints.append(int(p) & 0xFFFFFFFF)
        else:
            digest = hashlib.sha256(str(p).encode()).digest()
            ints.append(int.from_bytes(digest[:4], "little"))
    return int(np.random.SeedSequence(ints).generate_state(1)[0])


@dataclass
class RunRecord:
    """Everything a finished run leaves behind besides the checkpoint."""

    config_hash: str = ""
    seed: int = 0
    epochs: int = 0
    variant: str = "M*3"
    epoch_losses: list[dict] = field(default_factory=list)
    weight_history: list[dict] = field(default_factory=list)
    val_history: list[dict] = field(default_factory=list)
    step_log: list[dict] = field(default_factory=list)
    wall_clock_sec: float = 0.0

    def validate(self) -> "RunRecord":
        if len(self.epoch_losses) != self.epochs:
            raise ValidationError(
                f"recorded {len(self.epoch_losses)} epochs, configured {self.epochs}")
        for entry in self.weight_history:
            total = entry["region"] + entry["boundary"] + entry["shape"]
            if abs(total - 1.0) > 1e-9:
                raise ValidationError(
                    f"weight entry at epoch {entry['epoch']} sums to {total}")
        return self

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(dataclasses.asdict(self), indent=1))

    @staticmethod
    def from_json(path: str | Path) -> "RunRecord":
        return RunRecord(**json.loads(Path(path).read_text()))


def batch_tensors(samples: list[SampleRecord],
                  tasks: list[str]) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    image = torch.from_numpy(
        np.stack([s.image for s in samples])[:, None]).float()
    targets = {}
    if "region" in tasks:
        targets["region"] = torch.from_numpy(
            np.stack([s.region_mask for s in samples])[:, None]).float()
    if "boundary" in tasks:
        targets["boundary"] = torch.from_numpy(
            np.stack([s.boundary_map for s in samples])[:, None]).float()
    if "shape" in tasks:
        targets["shape"] = torch.from_numpy(
            np.stack([s.shape_map for s in samples])[:, None]).float()
    if "vessel" in tasks:
        targets["vessel"] = torch.from_numpy(
            np.stack([s.vessel_mask for s in samples])[:, None]).float()
    return image, targets


def _check_finite(named: list[tuple[str, torch.Tensor | None]],
                  epoch: int, step: int) -> None:
    for name, tensor in named:
        if tensor is not None and not torch.isfinite(tensor).all():
            raise DivergenceError(
                f"non-finite values in tensor {name!r} at epoch {epoch} "
                f"step {step}")


def _head_aux_loss(outputs: dict, targets: dict) -> torch.Tensor | None:
    """Direct supervision of the low-resolution boundary/shape head maps.

    The boundary head learns the pooled contour band; the shape head learns
    the pooled distance map rescaled to [0, 1]. This anchors the gating maps
    to their intended meaning even though the decoders carry the main task
    signal.
    """
    head_b, head_s = outputs.get("head_boundary"), outputs.get("head_shape")
    if head_b is None or head_s is None:
        return None
    size = head_b.shape[2:]
    band = F.max_pool2d(targets["boundary"], 3, stride=1, padding=1)
    band = F.adaptive_avg_pool2d(band, size).clamp(0.0, 1.0)
    bce = F.binary_cross_entropy(head_b.clamp(1e-7, 1 - 1e-7), band)
    shp = (F.adaptive_avg_pool2d(targets["shape"], size) + 1.0) / 2.0
    mse = (head_s - shp).square().mean()
    return bce + mse


def evaluate_dice(model: CascadeModel, samples: list[SampleRecord],
                  batch_size: int = 4) -> dict[str, float]:
    """Mean hard-mask overlap of region and vessel predictions."""
    was_active = model.dropout_state.active
    model.set_mc_dropout(False)
    model.eval()
    dice = {"region": [], "vessel": []}
    with torch.no_grad():
        for i in range(0, len(samples), batch_size):
            chunk = samples[i:i + batch_size]
            image, _ = batch_tensors(chunk, ["region"])
            out = model(image, mode="infer")
            for j, s in enumerate(chunk):
                pred_r = out["region"][j, 0].numpy() > 0.5
                pred_v = out["vessel"][j, 0].numpy() > 0.5
                dice["region"].append(confusion_metrics(pred_r, s.region_mask).dice)
                dice["vessel"].append(confusion_metrics(pred_v, s.vessel_mask).dice)
    model.train()
    model.set_mc_dropout(was_active)
    return {k: float(np.mean(v)) for k, v in dice.items()}


class Trainer:
    def __init__(self, cfg: RunConfig, dataset: DatasetSplit,
                 out_dir: str | Path, variant: str = "M*3"):
        cfg.validate()
        if not dataset.train:
            raise ValidationError("training split is empty")
        self.cfg = cfg
        self.dataset = dataset
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.variant = variant

        torch.manual_seed(derive_seed(cfg.train.seed, "init"))
        self.model = CascadeModel(cfg)
        self.model.train()
        self.model.set_mc_dropout(True)
        self.optimizer = torch.optim.Adam(
            self.model.parameters(), lr=cfg.train.lr,
            weight_decay=cfg.train.weight_decay)
        self.tasks = self.model.active_tasks()
        self.weights = weights_for_active(
            {}, [t for t in self.tasks if t != "vessel"])
        self.record = RunRecord(config_hash=cfg.config_hash(),
                                seed=cfg.train.seed,
                                epochs=cfg.train.epochs,
                                variant=variant)
        self.start_epoch = 1
        # per-sample, per-task pixel variance maps, refreshed on the weight
        # update schedule; empty until the first refresh
        self.variance_cache: dict[str, dict[str, torch.Tensor]] = {}

    def _mc_batch(self) -> list[SampleRecord]:
        pool = self.dataset.val if self.dataset.val else self.dataset.train
        return pool[:self.cfg.train.val_batch_size]

    def _epoch_samples(self, epoch: int) -> list[SampleRecord]:
        order = np.random.default_rng(
            derive_seed(self.cfg.train.seed, "order", epoch)
        ).permutation(len(self.dataset.train))
        out = []
        for idx in order:
            s = self.dataset.train[idx]
            if self.cfg.train.augment:
                s = augment(s, derive_seed(self.cfg.train.seed, "aug", epoch, s.id),
                            self.cfg.boundary_method)
            out.append(s)
        return out

    def _variances_for(self, chunk: list[SampleRecord],
                       targets: dict) -> dict[str, torch.Tensor] | None:
        if not (self.cfg.train.use_uncertainty_loss
                and self.cfg.train.pixel_variance_cache and self.variance_cache):
            return None
        maps = {}
        for task in targets:
            rows = []
            for s in chunk:
                cached = self.variance_cache.get(s.id, {}).get(task)
                rows.append(cached if cached is not None
                            else torch.zeros_like(targets[task][0]))
            maps[task] = torch.stack(rows)
        return maps

    def _refresh_uncertainty(self, epoch: int) -> None:
        """Update mixing weights from the pinned mini-batch and rebuild the
        per-sample variance cache."""
        t = self.cfg.train
        image, _ = batch_tensors(self._mc_batch(), ["region"])
        stats = mc_statistics(self.model, image, t.mc_samples,
                              derive_seed(t.seed, "mc-weights", epoch))
        task_var = {task: float(stats[task].variance.mean())
                    for task in stats}
        self.weights = weights_for_active(
            task_var, [x for x in self.tasks if x != "vessel"])
        self.record.weight_history.append({
            "epoch": epoch, "region": self.weights.region,
            "boundary": self.weights.boundary, "shape": self.weights.shape})

        if not t.pixel_variance_cache:
            return
        self.variance_cache = {}
        for i in range(0, len(self.dataset.train), t.batch_size):
            chunk = self.dataset.train[i:i + t.batch_size]
            image, _ = batch_tensors(chunk, ["region"])
            stats = mc_statistics(self.model, image, t.mc_samples,
                                  derive_seed(t.seed, "mc-cache", epoch, i))
            for j, s in enumerate(chunk):
                self.variance_cache[s.id] = {
                    task: stats[task].variance[j].clone() for task in stats}

    def _stage_for(self, epoch: int) -> str:
        if not self.cfg.train.two_stage:
            return "joint"
        half = (self.cfg.train.epochs + 1) // 2
        return "region" if epoch <= half else "vessel"

    def _train_step(self, epoch: int, step: int, chunk: list[SampleRecord],
                    stage: str) -> dict[str, float]:
        t = self.cfg.train
        image, targets = batch_tensors(chunk, self.tasks)
        self.model.dropout_state.seed(derive_seed(t.seed, "dropout", epoch, step))
        outputs = self.model(image, mode="train")
        _check_finite(
            [(k, outputs[k]) for k in ("region", "boundary", "shape", "vessel",
                                       "head_boundary", "head_shape")],
            epoch, step)

        preds = {k: outputs[k] for k in self.tasks}
        if stage == "region":
            preds.pop("vessel", None)
        elif stage == "vessel":
            preds = {"vessel": preds["vessel"]}
        use_targets = {k: targets[k] for k in preds}
        variances = self._variances_for(chunk, use_targets)
        if stage == "joint":
            losses = task_losses(preds, use_targets, variances)
        else:
            losses = _partial_losses(preds, use_targets, variances)
        _check_finite([(f"loss/{k}", v) for k, v in losses.items()], epoch, step)

        zero = torch.zeros(())
        eq_losses = {k: losses.get(k, zero) for k in
                     ("region", "boundary", "shape", "vessel")}
        combined = total_loss(eq_losses, self.weights)
        objective = combined
        aux = _head_aux_loss(outputs, targets) if (
            "boundary" in targets and "shape" in targets) else None
        if aux is not None:
            _check_finite([("loss/head_aux", aux)], epoch, step)
            objective = combined + t.head_aux_weight * aux

        self.optimizer.zero_grad()
        objective.backward()
        self.optimizer.step()

        entry = {"epoch": epoch, "step": step,
                 "region": float(eq_losses["region"].detach()),
                 "boundary": float(eq_losses["boundary"].detach()),
                 "shape": float(eq_losses["shape"].detach()),
                 "vessel": float(eq_losses["vessel"].detach()),
                 "weight_region": self.weights.region,
                 "weight_boundary": self.weights.boundary,
                 "weight_shape": self.weights.shape,
                 "total": float(combined.detach()),
                 "head_aux": float(aux.detach()) if aux is not None else 0.0,
                 "objective": float(objective.detach())}
        if t.log_steps:
            self.record.step_log.append(entry)
        return entry

    def run(self) -> tuple[CascadeModel, RunRecord]:
        t = self.cfg.train
        started = time.perf_counter()
        if self.start_epoch == 1 and (self.model.migr is not None
                                      or self.model.mrgr is not None):
            gen = torch.Generator()
            gen.manual_seed(derive_seed(t.seed, "centers"))
            image, _ = batch_tensors(
                self.dataset.train[:t.batch_size], ["region"])
            self.model.init_graph_centers(image, gen)

        for epoch in range(self.start_epoch, t.epochs + 1):
            stage = self._stage_for(epoch)
            samples = self._epoch_samples(epoch)
            sums: dict[str, float] = {}
            steps = 0
            for step, i in enumerate(range(0, len(samples), t.batch_size)):
                entry = self._train_step(
                    epoch, step, samples[i:i + t.batch_size], stage)
                steps += 1
                for key in ("region", "boundary", "shape", "vessel",
                            "total", "objective"):
                    sums[key] = sums.get(key, 0.0) + entry[key]
            self.record.epoch_losses.append(
                {"epoch": epoch,
                 **{k: v / max(1, steps) for k, v in sums.items()}})

            if t.use_uncertainty_loss and epoch % t.weight_update_period == 0:
                self._refresh_uncertainty(epoch)
            if (epoch % t.val_period == 0 or epoch == t.epochs) and self.dataset.val:
                val = evaluate_dice(self.model, self.dataset.val, t.val_batch_size)
                self.record.val_history.append({"epoch": epoch, **val})
            self._save(epoch)

        self.record.wall_clock_sec = time.perf_counter() - started
        self.record.validate()
        self._save(t.epochs)
        return self.model, self.record

    def _save(self, epoch: int) -> None:
        extra = {
            "epoch": epoch,
            "variant": self.variant,
            "weights": dataclasses.asdict(self.weights),
            "record": dataclasses.asdict(self.record),
            "variance_cache": self.variance_cache,
        }
        save_checkpoint(self.out_dir / "checkpoint.pt", self.model,
                        self.optimizer, extra)
        self.record.to_json(self.out_dir / "record.json")
        save_config(self.cfg, self.out_dir / "config.yaml")


def _partial_losses(preds, targets, variances):
    """Task losses for a stage that trains only part of the cascade."""
    from .uncertainty import soft_dice_loss, uce_loss, shape_confidence
    out = {}
    for task in ("region", "boundary", "vessel"):
        if task in preds:
            v = (variances or {}).get(task)
            out[task] = (soft_dice_loss(preds[task], targets[task])
                         + uce_loss(preds[task], targets[task], v))
    if "shape" in preds:
        err = preds["shape"] - targets["shape"]
        conf = shape_confidence(err)
        out["shape"] = (err.square().mean()
                        + uce_loss(conf, torch.zeros_like(conf),
                                   (variances or {}).get("shape")))
    return out


def train_model(cfg: RunConfig, dataset: DatasetSplit, out_dir: str | Path,
                variant: str = "M*3",
                resume: str | Path | None = None) -> tuple[CascadeModel, RunRecord]:
    """Train a cascade, optionally continuing from a saved checkpoint."""
    trainer = Trainer(cfg, dataset, out_dir, variant)
    if resume is not None:
        from .model import load_checkpoint
        model, payload = load_checkpoint(resume)
        trainer.model = model
        trainer.model.train()
        trainer.model.set_mc_dropout(True)
        trainer.optimizer = torch.optim.Adam(
            trainer.model.parameters(), lr=cfg.train.lr,
            weight_decay=cfg.train.weight_decay)
        if "optimizer" in payload:
            trainer.optimizer.load_state_dict(payload["optimizer"])
        extra = payload.get("extra", {})
        if extra:
            trainer.start_epoch = int(extra["epoch"]) + 1
            w = extra["weights"]
            trainer.weights = LossWeights(**w).validate()
            trainer.record = RunRecord(**extra["record"])
            trainer.record.epochs = cfg.train.epochs
            trainer.variance_cache = extra.get("variance_cache", {})
    return trainer.run()
