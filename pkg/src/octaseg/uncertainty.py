"""Stochastic-forward uncertainty estimates and the losses built on them.

Repeated dropout-perturbed forward passes give a per-pixel mean prediction
and a population variance. The variance, min-max normalized per image and
treated as data, inflates the cross-entropy of unreliable pixels; task
variances averaged over a validation batch become the adaptive mixing
weights of the multi-task objective.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ValidationError

PROB_EPS = 1e-7


@dataclass
class UncertaintyMap:
    """Mean prediction and per-pixel population variance over ``count`` draws."""

    mean: torch.Tensor
    variance: torch.Tensor
    count: int

    def validate(self) -> "UncertaintyMap":
        if self.count < 1:
            raise ValidationError(f"sample count must be >= 1, got {self.count}")
        if float(self.variance.min()) < 0:
            raise ValidationError("variance must be non-negative")
        return self


@dataclass
class LossWeights:
    """Mixing weights for the region-branch tasks; the vessel loss always
    enters the total with weight 1."""

    region: float
    boundary: float
    shape: float

    def validate(self) -> "LossWeights":
        for name in ("region", "boundary", "shape"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"weight {name}={v} outside [0, 1]")
        total = self.region + self.boundary + self.shape
        if abs(total - 1.0) > 1e-9:
            raise ValidationError(f"weights must sum to 1, got {total}")
        return self


def per_sample_seeds(seed: int, count: int) -> list[int]:
    """Independent derived seeds, one per stochastic pass, stable in value
    regardless of evaluation order."""
    return [int(np.random.SeedSequence([seed, z]).generate_state(1)[0])
            for z in range(count)]


def mc_sample(model, image: torch.Tensor, count: int,
              seed: int) -> list[dict[str, torch.Tensor]]:
    """Run ``count`` stochastic forward passes with independent dropout
    streams. Deterministic given (seed, count); with dropout disabled all
    passes are identical."""
    if count < 1:
        raise ValidationError(f"sample count must be >= 1, got {count}")
    outs = []
    with torch.no_grad():
        for z_seed in per_sample_seeds(seed, count):
            model.dropout_state.seed(z_seed)
            outs.append(model(image, mode="train"))
    return outs


def mean_variance(samples: list[torch.Tensor]) -> UncertaintyMap:
    """Pixel-wise mean and population variance (divides by the count)."""
    if not samples:
        raise ValidationError("mean_variance needs at least one sample")
    shapes = {tuple(s.shape) for s in samples}
    if len(shapes) != 1:
        raise ValidationError(f"samples disagree on shape: {sorted(shapes)}")
    stack = torch.stack(samples)
    mean = stack.mean(dim=0)
    if bool((stack == stack[0]).all()):
        # identical draws have exactly zero spread; skip the subtraction so
        # rounding in the mean cannot manufacture a phantom variance
        var = torch.zeros_like(mean)
    else:
        var = (stack - mean).square().mean(dim=0)
    return UncertaintyMap(mean=mean, variance=var, count=len(samples)).validate()


def mc_statistics(model, image: torch.Tensor, count: int,
                  seed: int) -> dict[str, UncertaintyMap]:
    """Uncertainty summary per task output."""
    samples = mc_sample(model, image, count, seed)
    keys = [k for k in ("region", "boundary", "shape", "vessel")
            if samples[0].get(k) is not None]
    return {k: mean_variance([s[k] for s in samples]) for k in keys}


def normalize_variance(variance: torch.Tensor) -> torch.Tensor:
    """Per-image min-max of a variance map to [0, 1]; constant maps give 0."""
    flat = variance.reshape(variance.shape[0], -1)
    lo = flat.min(dim=1).values.reshape(-1, *([1] * (variance.ndim - 1)))
    hi = flat.max(dim=1).values.reshape(-1, *([1] * (variance.ndim - 1)))
    span = hi - lo
    safe = torch.where(span > 0, span, torch.ones_like(span))
    return torch.where(span > 0, (variance - lo) / safe,
                       torch.zeros_like(variance))


def uce_loss(pred: torch.Tensor, target: torch.Tensor,
             variance: torch.Tensor | None = None) -> torch.Tensor:
    """Cross-entropy with per-pixel weights 1 + normalized variance.

    The variance is detached: it reweights pixels but receives no gradient.
    With zero (or absent) variance this is exactly the mean BCE.
    """
    for name, t in (("pred", pred), ("target", target)):
        if not torch.isfinite(t).all():
            raise ValidationError(f"{name} contains non-finite values")
    p = pred.clamp(PROB_EPS, 1.0 - PROB_EPS)
    bce = -(target * p.log() + (1.0 - target) * (1.0 - p).log())
    if variance is None:
        return bce.mean()
    if not torch.isfinite(variance).all():
        raise ValidationError("variance contains non-finite values")
    if bool((variance < 0).any()):
        raise ValidationError("variance contains negative values")
    weight = 1.0 + normalize_variance(variance.detach())
    return (weight * bce).mean()


def soft_dice_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """1 - soft Dice overlap, averaged over the batch; an empty pair
    (no prediction mass and no target) contributes zero loss."""
    if pred.shape != target.shape:
        raise ValidationError(
            f"pred shape {tuple(pred.shape)} != target shape {tuple(target.shape)}")
    p = pred.reshape(pred.shape[0], -1)
    t = target.reshape(target.shape[0], -1)
    inter = (p * t).sum(dim=1)
    denom = p.sum(dim=1) + t.sum(dim=1)
    loss = torch.where(denom > 0, 1.0 - 2.0 * inter / denom.clamp_min(1e-30),
                       torch.zeros_like(denom))
    return loss.mean()


def shape_confidence(error: torch.Tensor) -> torch.Tensor:
    """Squash an absolute regression error into [0, 1) with zero mapping to
    zero, so a perfect prediction carries no cross-entropy."""
    return torch.tanh(error.abs() / 2.0)


def task_losses(preds: dict[str, torch.Tensor],
                targets: dict[str, torch.Tensor],
                variances: dict[str, torch.Tensor] | None = None
                ) -> dict[str, torch.Tensor]:
    """Per-task objectives: overlap + weighted BCE for the mask tasks,
    squared error + weighted BCE of the error confidence for shape."""
    variances = variances or {}
    out = {}
    for task in ("region", "boundary", "vessel"):
        if task in preds:
            if task not in targets:
                raise ValidationError(f"missing target for task {task!r}")
            v = variances.get(task)
            out[task] = (soft_dice_loss(preds[task], targets[task])
                         + uce_loss(preds[task], targets[task], v))
    if "shape" in preds:
        if "shape" not in targets:
            raise ValidationError("missing target for task 'shape'")
        err = preds["shape"] - targets["shape"]
        conf = shape_confidence(err)
        out["shape"] = (err.square().mean()
                        + uce_loss(conf, torch.zeros_like(conf),
                                   variances.get("shape")))
    if "region" not in out or "vessel" not in out:
        raise ValidationError("region and vessel tasks are required")
    return out


def adaptive_weights(v_region: float, v_boundary: float,
                     v_shape: float) -> LossWeights:
    """Normalize the three task variances into mixing weights; all-zero
    variances fall back to the uniform split."""
    vals = (float(v_region), float(v_boundary), float(v_shape))
    if any(v < 0 for v in vals):
        raise ValidationError(f"variances must be non-negative, got {vals}")
    total = sum(vals)
    if total <= 0:
        return LossWeights(1 / 3, 1 / 3, 1 / 3).validate()
    return LossWeights(*(v / total for v in vals)).validate()


def weights_for_active(variances: dict[str, float],
                       active: list[str]) -> LossWeights:
    """Weights restricted to the active region-branch tasks.

    With variance data the active weights follow the normalized-variance
    rule; without (or all-zero) they are uniform over the active tasks.
    Inactive tasks get weight 0 and the triple still sums to 1.
    """
    if "region" not in active:
        raise ValidationError("the region task can not be disabled")
    vals = {t: max(0.0, float(variances.get(t, 0.0))) for t in active}
    total = sum(vals.values())
    if total <= 0:
        vals = {t: 1.0 / len(active) for t in active}
        total = 1.0
    out = {t: vals.get(t, 0.0) / total for t in ("region", "boundary", "shape")}
    return LossWeights(out["region"], out["boundary"], out["shape"]).validate()


def total_loss(losses: dict[str, torch.Tensor],
               weights: LossWeights) -> torch.Tensor:
    """Weighted region-branch sum plus the vessel loss at weight 1."""
    weights.validate()
    zero = losses["region"].new_zeros(())
    return (weights.region * losses["region"]
            + weights.boundary * losses.get("boundary", zero)
            + weights.shape * losses.get("shape", zero)
            + losses["vessel"])
