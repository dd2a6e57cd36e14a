"""Feature-graph operations: node pooling, pairwise similarity, alignment distance,
graph-convolution aggregation, soft clustering, and the correlation clustering loss.

All operations are pure torch functions, differentiable, and accept either a
single sample or a leading batch axis (data-parallel across the batch).
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import Tensor

from .datamodel import ValidationError


def pool_to_grid(feature_map: Tensor, grid_size: int, spatial_rank: int = 2) -> Tensor:
    """Adaptive-average-pool a feature map to a grid and list the cells as graph nodes.

    ``feature_map`` is (C, *spatial) or (B, C, *spatial) with ``spatial_rank``
    spatial axes. Returns node features of shape (N, C) or (B, N, C) with
    N = grid_size ** spatial_rank, row-major over grid cells.
    """
    if spatial_rank not in (2, 3):
        raise ValidationError(f"spatial_rank must be 2 or 3, got {spatial_rank}")
    if feature_map.dim() == spatial_rank + 1:
        return pool_to_grid(feature_map.unsqueeze(0), grid_size, spatial_rank).squeeze(0)
    if feature_map.dim() != spatial_rank + 2:
        raise ValidationError(
            f"feature map must have {spatial_rank + 1} or {spatial_rank + 2} axes, "
            f"got {feature_map.dim()}"
        )
    spatial = feature_map.shape[2:]
    if any(s < grid_size for s in spatial):
        raise ValidationError(
            f"grid_size {grid_size} exceeds feature spatial extent {tuple(spatial)}"
        )
    pool = F.adaptive_avg_pool2d if spatial_rank == 2 else F.adaptive_avg_pool3d
    pooled = pool(feature_map, (grid_size,) * spatial_rank)
    # (B, C, g, g[, g]) -> (B, N, C)
    return pooled.flatten(2).transpose(1, 2)


def pairwise_similarity(nodes: Tensor, mu: float) -> Tensor:
    """Gram matrix of node features, shifted down by its own maximum over mu.

    The maximum is taken per sample over all N*N Gram entries; its subgradient
    is routed to the first argmax element.
    """
    if mu <= 0:
        raise ValidationError(f"mu must be positive, got {mu}")
    if nodes.dim() not in (2, 3):
        raise ValidationError(f"nodes must be (N, d) or (B, N, d), got shape {tuple(nodes.shape)}")
    if not torch.isfinite(nodes).all():
        raise ValidationError("node features must be finite")
    gram = nodes @ nodes.transpose(-1, -2)
    # max over the full per-sample matrix; .max routes the gradient to one element
    shift = gram.flatten(-2).max(dim=-1).values / mu
    if nodes.dim() == 3:
        shift = shift.view(-1, 1, 1)
    return gram - shift


def alignment_distance(sim_a: Tensor, sim_b: Tensor) -> Tensor:
    """Mean absolute elementwise difference between two similarity matrices.

    Returns a scalar for (N, N) inputs or a (B,) tensor for batched inputs.
    """
    if sim_a.shape != sim_b.shape:
        raise ValidationError(
            f"similarity shapes differ: {tuple(sim_a.shape)} vs {tuple(sim_b.shape)}"
        )
    if sim_a.dim() == 2:
        return (sim_a - sim_b).abs().mean()
    if sim_a.dim() == 3:
        return (sim_a - sim_b).abs().mean(dim=(-2, -1))
    raise ValidationError(f"similarity must be (N, N) or (B, N, N), got {tuple(sim_a.shape)}")


def gcn_forward(adjacency: Tensor, nodes: Tensor, weight: Tensor, row_norm: bool = False) -> Tensor:
    """Single graph-convolution layer: relu(A @ G @ W).

    The raw (shifted, possibly negative) similarity matrix is used as the
    adjacency; ``row_norm`` optionally replaces it with its row-softmax.
    """
    if adjacency.shape[-1] != adjacency.shape[-2]:
        raise ValidationError(f"adjacency must be square, got {tuple(adjacency.shape)}")
    if adjacency.shape[-1] != nodes.shape[-2]:
        raise ValidationError(
            f"adjacency {tuple(adjacency.shape)} does not match nodes {tuple(nodes.shape)}"
        )
    if nodes.shape[-1] != weight.shape[0]:
        raise ValidationError(
            f"weight {tuple(weight.shape)} does not match node feature dim {nodes.shape[-1]}"
        )
    if row_norm:
        adjacency = torch.softmax(adjacency, dim=-1)
    return torch.relu(adjacency @ nodes @ weight)


def cluster_assign(nodes: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """Row-stochastic soft cluster assignments from a two-layer perceptron.

    ``w1`` is (d, hidden), ``w2`` is (hidden, K); rows of the result sum to 1.
    """
    if nodes.shape[-1] != w1.shape[0]:
        raise ValidationError(f"w1 {tuple(w1.shape)} does not match node dim {nodes.shape[-1]}")
    if w1.shape[1] != w2.shape[0]:
        raise ValidationError(f"w1 {tuple(w1.shape)} does not chain into w2 {tuple(w2.shape)}")
    hidden = torch.relu(nodes @ w1 + b1)
    return torch.softmax(hidden @ w2 + b2, dim=-1)


def clustering_loss(adjacency: Tensor, assignments: Tensor) -> Tensor:
    """Correlation clustering objective: -trace(A @ C @ C^T).

    Returns a scalar for single samples or a (B,) tensor for batched inputs;
    minimizing it raises within-cluster similarity mass.
    """
    if adjacency.shape[-1] != adjacency.shape[-2]:
        raise ValidationError(f"adjacency must be square, got {tuple(adjacency.shape)}")
    if adjacency.shape[-1] != assignments.shape[-2]:
        raise ValidationError(
            f"adjacency {tuple(adjacency.shape)} does not match "
            f"assignments {tuple(assignments.shape)}"
        )
    # Tr(A C C^T) = sum_ij A_ij (C C^T)_ij since C C^T is symmetric.
    co_assign = assignments @ assignments.transpose(-1, -2)
    if adjacency.dim() == 2:
        return -(adjacency * co_assign).sum()
    return -(adjacency * co_assign).sum(dim=(-2, -1))
