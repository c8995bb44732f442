"""The two-stage cascade: region branch with graph reasoning, then a vessel
branch running on the region-masked image."""

from __future__ import annotations

from pathlib import Path

import torch
from torch import nn

from . import __version__
from .backbone import (Decoder, DropoutState, Encoder, FeatureRouter,
                       SingleRouter, mask_image)
from .config import RunConfig, config_from_dict
from .errors import CheckpointError, ValidationError
from .graphs import GraphInteractionBlock
from .refine import RefinementBlock

TASK_KEYS = ("region", "boundary", "shape", "vessel")


class CascadeModel(nn.Module):
    """Region segmentation with auxiliary boundary/shape tasks feeding graph
    blocks, cascaded into an independent vessel segmentation network.

    The forward pass returns probability maps for every active task plus the
    low-resolution head maps and the masked image handed to the vessel
    branch. ``mode`` selects the soft (training) or hard 0.5-thresholded
    (inference) region mask for the cascade.
    """

    def __init__(self, cfg: RunConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        t = cfg.train
        c = cfg.backbone.routed_channels
        self.dropout_state = DropoutState(cfg.backbone.dropout_rate)
        self.dropout_state.active = cfg.backbone.mc_dropout_active

        self.region_encoder = Encoder(cfg.backbone, state=self.dropout_state)
        self.router = FeatureRouter(cfg.backbone)
        self.migr = GraphInteractionBlock(cfg.graph, c) if t.use_migr else None
        self.mrgr = RefinementBlock(cfg.graph, c) if t.use_mrgr else None

        self.region_decoder = Decoder(cfg.backbone)
        self.region_decoder.attach_dropout(self.dropout_state)
        self.boundary_decoder = None
        self.shape_decoder = None
        if t.use_boundary_task:
            self.boundary_decoder = Decoder(cfg.backbone)
            self.boundary_decoder.attach_dropout(self.dropout_state)
        if t.use_shape_task:
            self.shape_decoder = Decoder(cfg.backbone)
            self.shape_decoder.attach_dropout(self.dropout_state)

        self.vessel_encoder = Encoder(cfg.backbone, state=self.dropout_state)
        self.vessel_router = SingleRouter(cfg.backbone)
        self.vessel_decoder = Decoder(cfg.backbone)
        self.vessel_decoder.attach_dropout(self.dropout_state)

    def set_mc_dropout(self, active: bool) -> None:
        self.dropout_state.active = bool(active)

    def active_tasks(self) -> list[str]:
        t = self.cfg.train
        tasks = ["region"]
        if t.use_boundary_task:
            tasks.append("boundary")
        if t.use_shape_task:
            tasks.append("shape")
        tasks.append("vessel")
        return tasks

    @torch.no_grad()
    def init_graph_centers(self, image: torch.Tensor,
                           generator: torch.Generator | None = None) -> None:
        """Seed every projection's cluster centers from real pixel features
        of one batch, so the soft assignment starts inside the feature
        distribution."""
        if self.migr is None and self.mrgr is None:
            return
        routed = self.router(self.region_encoder(image))
        if self.migr is not None:
            self.migr.init_centers(routed, generator)
            feats = self.migr(routed)
        else:
            feats = routed
        if self.mrgr is not None:
            self.mrgr.support_proj.init_from_features(
                (feats["region"] + feats["boundary"]).flatten(2).transpose(1, 2),
                generator)

    def forward(self, image: torch.Tensor, mode: str = "train"
                ) -> dict[str, torch.Tensor | None]:
        if mode not in ("train", "infer"):
            raise ValidationError(f"mode must be 'train' or 'infer', got {mode!r}")
        taps = self.region_encoder(image)
        routed = self.router(taps)
        feats = self.migr(routed) if self.migr is not None else dict(routed)

        head_bou = head_shp = None
        if self.mrgr is not None:
            refined = self.mrgr(feats)
            region_feat = refined["region"]
            head_bou = refined["head_boundary"]
            head_shp = refined["head_shape"]
        else:
            region_feat = feats["region"]

        region_prob = torch.sigmoid(self.region_decoder(region_feat, taps))
        boundary_prob = None
        if self.boundary_decoder is not None:
            boundary_prob = torch.sigmoid(
                self.boundary_decoder(feats["boundary"], taps))
        shape_map = None
        if self.shape_decoder is not None:
            shape_map = torch.tanh(self.shape_decoder(feats["shape"], taps))

        mask = region_prob if mode == "train" else (region_prob > 0.5).to(image.dtype)
        masked = mask_image(image, mask)
        vtaps = self.vessel_encoder(masked)
        vessel_prob = torch.sigmoid(
            self.vessel_decoder(self.vessel_router(vtaps), vtaps))

        return {"region": region_prob, "boundary": boundary_prob,
                "shape": shape_map, "vessel": vessel_prob,
                "head_boundary": head_bou, "head_shape": head_shp,
                "masked_input": masked}


def save_checkpoint(path: str | Path, model: CascadeModel,
                    optimizer: torch.optim.Optimizer | None = None,
                    extra: dict | None = None) -> None:
    """Single-archive checkpoint: parameters under hierarchical names plus a
    JSON-friendly header with the resolved config and code version."""
    payload = {
        "state_dict": model.state_dict(),
        "config": model.cfg.to_dict(),
        "version": __version__,
    }
    if optimizer is not None:
        payload["optimizer"] = optimizer.state_dict()
    if extra:
        payload["extra"] = extra
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> tuple[CascadeModel, dict]:
    """Rebuild the model recorded in a checkpoint; returns it with the raw
    payload so callers can reach the optimizer state and extras."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint file {path} does not exist")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}")
    for key in ("state_dict", "config", "version"):
        if key not in payload:
            raise CheckpointError(f"checkpoint {path} is missing entry {key!r}")
    if payload["version"] != __version__:
        raise CheckpointError(
            f"checkpoint version {payload['version']} does not match "
            f"installed version {__version__}")
    cfg = config_from_dict(payload["config"])
    model = CascadeModel(cfg)
    try:
        model.load_state_dict(payload["state_dict"])
    except RuntimeError as exc:
        raise CheckpointError(f"checkpoint parameters incompatible: {exc}")
    return model, payload
