"""Independent brute-force twins of every vectorized numeric kernel.

Each oracle evaluates its target quantity with plain Python loops over
float64 numpy scalars, no vectorized shortcuts, so agreement with the torch
implementations is evidence of correctness rather than shared code. A
central-difference gradient checker covers the differentiable pieces.
"""

from __future__ import annotations

import math

import numpy as np
import torch

from .errors import ValidationError


def projection_oracle(feats: np.ndarray, centers: np.ndarray,
                      scales: np.ndarray,
                      norm_eps: float = 1e-8) -> tuple[np.ndarray, np.ndarray]:
    """Loop evaluation of soft assignment and unit-norm weighted residuals.

    feats: N x C; centers/scales: K x C. Returns (nodes C x K, assign N x K).
    """
    n, c = feats.shape
    k = centers.shape[0]
    assign = np.zeros((n, k))
    for i in range(n):
        logits = np.zeros(k)
        for kk in range(k):
            acc = 0.0
            for cc in range(c):
                r = (feats[i, cc] - centers[kk, cc]) / scales[kk, cc]
                acc += r * r
            logits[kk] = -0.5 * acc
        m = max(logits)
        exps = [math.exp(v - m) for v in logits]
        s = sum(exps)
        for kk in range(k):
            assign[i, kk] = exps[kk] / s
    nodes = np.zeros((c, k))
    for kk in range(k):
        mass = 0.0
        for i in range(n):
            mass += assign[i, kk]
        gstar = np.zeros(c)
        for cc in range(c):
            acc = 0.0
            for i in range(n):
                acc += assign[i, kk] * (feats[i, cc] - centers[kk, cc]) / scales[kk, cc]
            gstar[cc] = acc / mass
        norm = math.sqrt(sum(v * v for v in gstar))
        if norm < norm_eps:
            for cc in range(c):
                nodes[cc, kk] = 0.0
        else:
            for cc in range(c):
                nodes[cc, kk] = gstar[cc] / norm
    return nodes, assign


def adjacency_oracle(nodes: np.ndarray) -> np.ndarray:
    c, k = nodes.shape
    adj = np.zeros((k, k))
    for a in range(k):
        for b in range(k):
            acc = 0.0
            for cc in range(c):
                acc += nodes[cc, a] * nodes[cc, b]
            adj[a, b] = acc
    return adj


def _matmul_loops(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            acc = 0.0
            for t in range(a.shape[1]):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def mlp_oracle(vec: np.ndarray, weights: list[tuple[np.ndarray, np.ndarray]],
               hidden_relu: bool = True) -> np.ndarray:
    """Apply a stack of (weight, bias) layers to one vector with loops."""
    x = vec
    for li, (w, b) in enumerate(weights):
        out = np.zeros(w.shape[0])
        for o in range(w.shape[0]):
            acc = b[o]
            for ii in range(w.shape[1]):
                acc += w[o, ii] * x[ii]
            out[o] = acc
        if hidden_relu and li < len(weights) - 1:
            out = np.array([v if v > 0 else 0.0 for v in out])
        x = out
    return x


def interact_oracle(graph_reg: np.ndarray, graph_task: np.ndarray,
                    key_weights, value_weights, query_weights,
                    transfer_weight: float) -> np.ndarray:
    """Loop evaluation of the cross-graph attention exchange.

    graph_reg/graph_task: C x K; *_weights: [(W, b), ...] per-node MLP stacks.
    """
    c, k = graph_reg.shape
    keys = np.stack([mlp_oracle(graph_reg[:, i], key_weights) for i in range(k)])
    values = np.stack([mlp_oracle(graph_reg[:, i], value_weights) for i in range(k)])
    queries = np.stack([mlp_oracle(graph_task[:, i], query_weights) for i in range(k)])
    affinity = _matmul_loops(queries, keys.T)              # K x K
    moved = _matmul_loops(affinity, values)                # K x C
    out = np.zeros_like(graph_task)
    for cc in range(c):
        for kk in range(k):
            out[cc, kk] = transfer_weight * moved[kk, cc] + graph_task[cc, kk]
    return out


def reason_oracle(graph: np.ndarray, adj: np.ndarray, weight: np.ndarray,
                  activation: str = "relu") -> np.ndarray:
    """Loop evaluation of the node-major graph convolution."""
    nodes = graph.T                                        # K x C
    mixed = _matmul_loops(_matmul_loops(adj, nodes), weight)
    out = np.zeros_like(mixed)
    for i in range(mixed.shape[0]):
        for j in range(mixed.shape[1]):
            v = mixed[i, j]
            if activation == "relu":
                out[i, j] = v if v > 0 else 0.0
            elif activation == "leaky_relu":
                out[i, j] = v if v > 0 else 0.1 * v
            elif activation == "identity":
                out[i, j] = v
            else:
                raise ValidationError(f"unknown activation {activation!r}")
    return out.T


def reproject_oracle(assign: np.ndarray, graph: np.ndarray,
                     feats: np.ndarray) -> np.ndarray:
    """Loop evaluation of assignment-weighted node scatter plus residual."""
    n, k = assign.shape
    c = graph.shape[0]
    out = np.zeros_like(feats)
    for i in range(n):
        for cc in range(c):
            acc = feats[i, cc]
            for kk in range(k):
                acc += assign[i, kk] * graph[cc, kk]
            out[i, cc] = acc
    return out


def _elu(v: float) -> float:
    return v if v > 0 else math.exp(v) - 1.0


def enhance_oracle(fused: np.ndarray, nodes: np.ndarray,
                   w_weights: tuple[np.ndarray, np.ndarray],
                   eta_weights: tuple[np.ndarray, np.ndarray]) -> np.ndarray:
    """Loop evaluation of support-node enhancement with elementwise max.

    fused: N x C; nodes: C x K; w/eta weights: single (W, b) layers followed
    by the exponential-linear nonlinearity.
    """
    n, c = fused.shape
    k = nodes.shape[1]
    w_w, w_b = w_weights
    e_w, e_b = eta_weights
    out = np.full((n, c), -np.inf)
    for i in range(n):
        for m in range(k):
            diff = np.array([fused[i, cc] - nodes[cc, m] for cc in range(c)])
            embed = np.zeros(w_w.shape[0])
            for o in range(w_w.shape[0]):
                acc = w_b[o]
                for ii in range(c):
                    acc += w_w[o, ii] * diff[ii]
                embed[o] = _elu(acc)
            pair_in = np.concatenate([fused[i], embed])
            for o in range(e_w.shape[0]):
                acc = e_b[o]
                for ii in range(pair_in.shape[0]):
                    acc += e_w[o, ii] * pair_in[ii]
                val = _elu(acc)
                if val > out[i, o]:
                    out[i, o] = val
    return out


def mean_variance_oracle(samples: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Two-pass loop computation of mean and population variance."""
    count = len(samples)
    flats = [s.reshape(-1) for s in samples]
    size = flats[0].shape[0]
    mean = np.zeros(size)
    for i in range(size):
        acc = 0.0
        for f in flats:
            acc += f[i]
        mean[i] = acc / count
    var = np.zeros(size)
    for i in range(size):
        acc = 0.0
        for f in flats:
            acc += (f[i] - mean[i]) ** 2
        var[i] = acc / count
    return mean.reshape(samples[0].shape), var.reshape(samples[0].shape)


def uce_oracle(pred: np.ndarray, target: np.ndarray, variance: np.ndarray,
               eps: float = 1e-7) -> float:
    """Loop evaluation of variance-weighted cross entropy on one image."""
    flat_p = pred.reshape(-1)
    flat_t = target.reshape(-1)
    flat_v = variance.reshape(-1)
    lo = min(flat_v)
    hi = max(flat_v)
    span = hi - lo
    total = 0.0
    for i in range(flat_p.shape[0]):
        p = min(max(flat_p[i], eps), 1.0 - eps)
        bce = -(flat_t[i] * math.log(p) + (1.0 - flat_t[i]) * math.log(1.0 - p))
        w = 1.0 + ((flat_v[i] - lo) / span if span > 0 else 0.0)
        total += w * bce
    return total / flat_p.shape[0]


def signed_distance_oracle(mask: np.ndarray) -> np.ndarray:
    """Loop evaluation of the signed pixel-center distance (negative inside)."""
    h, w = mask.shape
    inside = [(y, x) for y in range(h) for x in range(w) if mask[y, x]]
    outside = [(y, x) for y in range(h) for x in range(w) if not mask[y, x]]
    out = np.zeros((h, w))
    far = math.hypot(h, w)
    for y in range(h):
        for x in range(w):
            if mask[y, x]:
                best = far
                for oy, ox in outside:
                    d = math.hypot(y - oy, x - ox)
                    if d < best:
                        best = d
                out[y, x] = -best
            else:
                best = far
                for iy, ix in inside:
                    d = math.hypot(y - iy, x - ix)
                    if d < best:
                        best = d
                out[y, x] = best
    return out


def fd_gradient_check(fn, inputs: list[torch.Tensor],
                      eps: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` maps the float64 input tensors to a scalar tensor. The error for
    each coordinate is |analytic - fd| / max(|analytic|, |fd|, 1) and the
    worst coordinate over all inputs is returned.
    """
    leaves = [t.detach().double().clone().requires_grad_(True) for t in inputs]
    value = fn(*leaves)
    if not torch.isfinite(value):
        raise ValidationError("function value is not finite")
    grads = torch.autograd.grad(value, leaves)
    worst = 0.0
    for leaf, grad in zip(leaves, grads):
        flat = leaf.detach().reshape(-1)
        gflat = grad.reshape(-1)
        for idx in range(flat.shape[0]):
            orig = flat[idx].item()
            flat[idx] = orig + eps
            hi = fn(*leaves).item()
            flat[idx] = orig - eps
            lo = fn(*leaves).item()
            flat[idx] = orig
            fd = (hi - lo) / (2 * eps)
            an = gflat[idx].item()
            rel = abs(an - fd) / max(abs(an), abs(fd), 1.0)
            worst = max(worst, rel)
    return worst
