"""Boundary- and shape-guided reinforcement of region features.

Low-resolution boundary and shape maps are predicted from their task
features, used to gate fused region+task maps, and the gated maps are
projected to support nodes. Every pixel of the fused map is then compared
against all support nodes; per-node embeddings pass through a learned pair
function and an elementwise max across nodes keeps the strongest response.
The two reinforced maps are folded back into the region features that feed
the region decoder.
"""

from __future__ import annotations

import torch
from torch import nn

from .config import GraphConfig
from .errors import ShapeError, ValidationError
from .graphs import GraphProjection


def gate_features(gate_map: torch.Tensor, fused: torch.Tensor) -> torch.Tensor:
    """Scale every channel of ``fused`` by a single-channel [0, 1] map."""
    if gate_map.ndim != fused.ndim or gate_map.shape[1] != 1:
        raise ShapeError(
            f"gate map must be B x 1 x H x W, got {tuple(gate_map.shape)}")
    if gate_map.shape[0] != fused.shape[0] or gate_map.shape[2:] != fused.shape[2:]:
        raise ShapeError(
            f"gate map {tuple(gate_map.shape)} does not broadcast over "
            f"features {tuple(fused.shape)}")
    return gate_map * fused


def enhance(fused: torch.Tensor, nodes: torch.Tensor, f_w: nn.Module,
            f_eta: nn.Module, topk: int = 0) -> torch.Tensor:
    """Reinforce pixel vectors with their strongest support-node response.

    fused: B x N x C pixel features; nodes: B x C x K support nodes.
    Per pixel i and node m the embedding is f_w(f_i - node_m); the pair
    function f_eta sees [f_i, embedding] and the elementwise max over m
    (first index wins ties) is returned. ``topk`` > 0 restricts the max to
    the k nearest support nodes per pixel.
    """
    if nodes.shape[2] < 1:
        raise ValidationError("need at least one support node")
    if nodes.shape[1] != fused.shape[2]:
        raise ShapeError(
            f"channel mismatch: features C={fused.shape[2]}, "
            f"nodes C={nodes.shape[1]}")
    support = nodes.transpose(1, 2)                        # B x K x C
    diff = fused.unsqueeze(2) - support.unsqueeze(1)       # B x N x K x C
    embed = f_w(diff)
    pixels = fused.unsqueeze(2).expand_as(embed)
    paired = f_eta(torch.cat((pixels, embed), dim=3))      # B x N x K x C
    k = support.shape[1]
    if 0 < topk < k:
        dist = diff.square().sum(dim=3)                    # B x N x K
        sel = dist.topk(topk, dim=2, largest=False).indices
        sel = sel.unsqueeze(3).expand(-1, -1, -1, paired.shape[3])
        paired = paired.gather(2, sel)
    return paired.max(dim=2).values


class PointwiseMap(nn.Module):
    """Linear map over the channel axis with a smooth nonlinearity, applied
    independently at every (pixel, node) position."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.linear = nn.Linear(in_dim, out_dim)
        self.act = nn.ELU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.act(self.linear(x))


class RefinementBlock(nn.Module):
    """Full reinforcement pass over the three task feature maps."""

    def __init__(self, graph_cfg: GraphConfig, channels: int):
        super().__init__()
        graph_cfg.validate()
        self.cfg = graph_cfg
        self.boundary_head = nn.Conv2d(channels, 1, 1)
        self.shape_head = nn.Conv2d(channels, 1, 1)
        self.support_proj = GraphProjection(graph_cfg.num_nodes, channels)
        self.f_w = PointwiseMap(channels, channels)
        self.f_eta = PointwiseMap(2 * channels, channels)
        if graph_cfg.fusion == "concat":
            self.fuse_bou = nn.Conv2d(2 * channels, channels, 1)
            self.fuse_shp = nn.Conv2d(2 * channels, channels, 1)

    def task_heads(self, feat_bou: torch.Tensor,
                   feat_shp: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return (torch.sigmoid(self.boundary_head(feat_bou)),
                torch.sigmoid(self.shape_head(feat_shp)))

    def _fuse(self, region: torch.Tensor, task: torch.Tensor,
              which: str) -> torch.Tensor:
        if self.cfg.fusion == "add":
            return region + task
        conv = self.fuse_bou if which == "boundary" else self.fuse_shp
        return conv(torch.cat((region, task), dim=1))

    def forward(self, feats: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
        """feats: role -> B x C x H x W maps from the interaction stage.

        Returns the reinforced region feature plus the low-resolution head
        maps so the training loop can supervise them directly.
        """
        region, bou, shp = feats["region"], feats["boundary"], feats["shape"]
        head_bou, head_shp = self.task_heads(bou, shp)
        fused_b = self._fuse(region, bou, "boundary")
        fused_s = self._fuse(region, shp, "shape")

        out_maps = []
        for fused, head in ((fused_b, head_bou), (fused_s, head_shp)):
            gated = gate_features(head, fused)
            flat_gated = gated.flatten(2).transpose(1, 2)
            nodes, _ = self.support_proj(flat_gated)
            flat_fused = fused.flatten(2).transpose(1, 2)
            hat = enhance(flat_fused, nodes, self.f_w, self.f_eta,
                          self.cfg.support_topk)
            out_maps.append(hat.transpose(1, 2).reshape(fused.shape))

        # reinforced maps fold back into the region stream
        region_out = region + out_maps[0] + out_maps[1]
        return {"region": region_out, "head_boundary": head_bou,
                "head_shape": head_shp}
