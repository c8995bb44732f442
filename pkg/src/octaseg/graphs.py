"""Feature-space graph projection, cross-task interaction, and reasoning.

Pixels of a task feature map are softly assigned to K learnable cluster
centers; the scaled, assignment-averaged residuals become unit-norm node
vectors. Region nodes then feed boundary and shape nodes through a gated
attention exchange, each task graph runs one graph-convolution step over its
own Gram adjacency, and node content is scattered back onto pixels through
the same soft assignment, residually added to the input features.

Tensor layout: features travel as B x N x C (N pixels), graphs as B x C x K
so that a graph column is one node vector.
"""

from __future__ import annotations

import torch
from torch import nn

from .config import GraphConfig
from .errors import ShapeError, ValidationError

NODE_NORM_EPS = 1e-8


def _activation(name: str):
    if name == "relu":
        return torch.relu
    if name == "leaky_relu":
        return lambda x: torch.nn.functional.leaky_relu(x, 0.1)
    if name == "identity":
        return lambda x: x
    raise ValidationError(f"unknown activation {name!r}")


def graph_project(feats: torch.Tensor, centers: torch.Tensor,
                  scales: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Soft-assign pixels to cluster centers and build unit-norm nodes.

    feats: B x N x C; centers, scales: K x C with scales > 0.
    Returns (graph B x C x K, assignment B x N x K). Assignment rows are a
    softmax over the scaled squared distances; each node is the assignment-
    weighted mean of scaled residuals, normalized to unit length. Nodes
    whose residual mean falls under the norm guard are zeroed exactly.
    """
    if feats.ndim != 3:
        raise ShapeError(f"feats must be B x N x C, got shape {tuple(feats.shape)}")
    if centers.shape != scales.shape or centers.ndim != 2:
        raise ShapeError("centers and scales must both be K x C")
    if centers.shape[1] != feats.shape[2]:
        raise ShapeError(
            f"channel mismatch: feats C={feats.shape[2]}, centers C={centers.shape[1]}")
    if not torch.all(scales > 0):
        raise ValidationError("scales must be strictly positive")
    resid = (feats.unsqueeze(2) - centers) / scales        # B x N x K x C
    sqdist = resid.square().sum(dim=3)                     # B x N x K
    assign = torch.softmax(-0.5 * sqdist, dim=2)           # rows sum to 1
    mass = assign.sum(dim=1).clamp_min(1e-30)              # B x K
    gstar = torch.einsum("bnk,bnkc->bkc", assign, resid) / mass.unsqueeze(2)
    norm = gstar.norm(dim=2, keepdim=True)
    unit = gstar / norm.clamp_min(NODE_NORM_EPS)
    # a cluster whose assignment column underflowed has a meaningless
    # residual mean; its node is nulled exactly instead of guard-scaled
    nodes = torch.where(norm >= NODE_NORM_EPS, unit, torch.zeros_like(unit))
    return nodes.transpose(1, 2), assign


def adjacency(graph: torch.Tensor) -> torch.Tensor:
    """Gram matrix of node columns: A = G^T G, shape B x K x K."""
    return torch.bmm(graph.transpose(1, 2), graph)


def graph_interact(graph_reg: torch.Tensor, graph_task: torch.Tensor,
                   key_mlp: nn.Module, value_mlp: nn.Module,
                   query_mlp: nn.Module, transfer_weight: torch.Tensor
                   ) -> torch.Tensor:
    """Move region-node content into a task graph through scaled attention.

    Keys and values come from region nodes, queries from task nodes; the
    K x K cross-affinity routes value vectors onto task nodes, and a learnable
    scalar (zero-initialized) gates the transferred signal before the
    residual add.
    """
    if graph_reg.shape[2] != graph_task.shape[2]:
        raise ShapeError(
            f"node count mismatch: region K={graph_reg.shape[2]}, "
            f"task K={graph_task.shape[2]}")
    reg_nodes = graph_reg.transpose(1, 2)                  # B x K x C
    task_nodes = graph_task.transpose(1, 2)
    keys = key_mlp(reg_nodes)                              # B x K x d
    values = value_mlp(reg_nodes)                          # B x K x C
    queries = query_mlp(task_nodes)                        # B x K x d
    affinity = torch.bmm(queries, keys.transpose(1, 2))    # B x K x K
    moved = torch.bmm(affinity, values)                    # B x K x C
    return transfer_weight * moved.transpose(1, 2) + graph_task


def graph_reason(graph: torch.Tensor, adj: torch.Tensor,
                 weight: torch.Tensor, activation) -> torch.Tensor:
    """One graph-convolution step in node-major layout: Phi(A N M)."""
    if adj.shape[1] != adj.shape[2] or adj.shape[1] != graph.shape[2]:
        raise ShapeError(
            f"adjacency {tuple(adj.shape)} incompatible with graph "
            f"{tuple(graph.shape)}")
    nodes = graph.transpose(1, 2)                          # B x K x C
    out = activation(torch.bmm(adj, nodes) @ weight)       # B x K x C
    return out.transpose(1, 2)


def graph_reproject(assign: torch.Tensor, graph: torch.Tensor,
                    feats: torch.Tensor) -> torch.Tensor:
    """Scatter node vectors back to pixels and add the original features."""
    if assign.shape[2] != graph.shape[2] or assign.shape[1] != feats.shape[1]:
        raise ShapeError(
            f"assignment {tuple(assign.shape)} incompatible with graph "
            f"{tuple(graph.shape)} / feats {tuple(feats.shape)}")
    return torch.bmm(assign, graph.transpose(1, 2)) + feats


class GraphProjection(nn.Module):
    """Owns the cluster centers and (log-parameterized) scales for one task."""

    def __init__(self, num_nodes: int, channels: int):
        super().__init__()
        self.centers = nn.Parameter(torch.randn(num_nodes, channels) * 0.1)
        self.log_scales = nn.Parameter(torch.zeros(num_nodes, channels))

    @property
    def scales(self) -> torch.Tensor:
        return self.log_scales.exp()

    @torch.no_grad()
    def init_from_features(self, feats: torch.Tensor,
                           generator: torch.Generator | None = None) -> None:
        """Seed centers with K random pixel vectors from a feature batch."""
        flat = feats.reshape(-1, feats.shape[-1])
        k = self.centers.shape[0]
        idx = torch.randint(flat.shape[0], (k,), generator=generator)
        self.centers.copy_(flat[idx].to(self.centers.dtype))

    def forward(self, feats: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return graph_project(feats, self.centers, self.scales)


class NodeMLP(nn.Module):
    """Two-layer perceptron applied to each node vector independently."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_dim, out_dim), nn.ReLU(), nn.Linear(out_dim, out_dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class InteractionPair(nn.Module):
    """Key/value/query maps plus the zero-initialized transfer gate for one
    region-to-task exchange."""

    def __init__(self, channels: int, attn_dim: int):
        super().__init__()
        self.key_mlp = NodeMLP(channels, attn_dim)
        self.value_mlp = NodeMLP(channels, channels)
        self.query_mlp = NodeMLP(channels, attn_dim)
        self.transfer_weight = nn.Parameter(torch.zeros(()))

    def forward(self, graph_reg: torch.Tensor,
                graph_task: torch.Tensor) -> torch.Tensor:
        return graph_interact(graph_reg, graph_task, self.key_mlp,
                              self.value_mlp, self.query_mlp,
                              self.transfer_weight)


class GraphInteractionBlock(nn.Module):
    """Full projection / interaction / reasoning / reprojection round trip.

    Boundary and shape features receive reasoned, region-informed node
    content; the region branch re-adds only its own unreasoned nodes so its
    pixel features stay anchored to the original projection.
    """

    def __init__(self, graph_cfg: GraphConfig, channels: int):
        super().__init__()
        graph_cfg.validate()
        self.cfg = graph_cfg
        attn = graph_cfg.attention_dim or channels
        k = graph_cfg.num_nodes
        self.project = nn.ModuleDict({
            role: GraphProjection(k, channels)
            for role in ("boundary", "shape", "region")})
        self.interact = nn.ModuleDict({
            role: InteractionPair(channels, attn)
            for role in ("boundary", "shape")})
        self.reason_weight = nn.ParameterDict({
            role: nn.Parameter(torch.eye(channels))
            for role in ("boundary", "shape")})
        self.activation = _activation(graph_cfg.activation)

    def forward(self, routed: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
        """routed: role -> B x C x H x W feature map at the common grid."""
        shapes = {role: t.shape for role, t in routed.items()}
        flats = {role: t.flatten(2).transpose(1, 2) for role, t in routed.items()}
        graphs, assigns = {}, {}
        for role, flat in flats.items():
            graphs[role], assigns[role] = self.project[role](flat)
        out = {}
        for role in ("boundary", "shape"):
            mixed = self.interact[role](graphs["region"], graphs[role])
            reasoned = graph_reason(mixed, adjacency(mixed),
                                    self.reason_weight[role], self.activation)
            out[role] = graph_reproject(assigns[role], reasoned, flats[role])
        out["region"] = graph_reproject(assigns["region"], graphs["region"],
                                        flats["region"])
        return {role: out[role].transpose(1, 2).reshape(shapes[role])
                for role in out}

    @torch.no_grad()
    def init_centers(self, routed: dict[str, torch.Tensor],
                     generator: torch.Generator | None = None) -> None:
        for role, proj in self.project.items():
            proj.init_from_features(
                routed[role].flatten(2).transpose(1, 2), generator)
