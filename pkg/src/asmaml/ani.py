"""Average Node Information (ANI).

For a graph with adjacency ``A`` (no self-loops), degrees ``D`` and node
representations ``H``, the per-node residual is the row of ``(I - D^-1 A) H``,
i.e. each node's representation minus the mean of its neighbours'. ANI is
the mean L1 norm of those residuals. A node with no neighbours keeps its own
row as residual.
"""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np
import torch

from .autodiff import DTYPE
from .errors import ShapeError


def ani_per_graph(adj: torch.Tensor, mask: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
    """Batched ANI of padded graphs; returns ``(B,)``."""
    if adj.shape[-1] != h.shape[-2]:
        raise ShapeError(f"adjacency {tuple(adj.shape)} does not match hidden {tuple(h.shape)}")
    deg = adj.sum(dim=-1, keepdim=True)
    neigh_mean = torch.where(deg > 0, (adj @ h) / deg.clamp(min=1.0), torch.zeros_like(h))
    maskf = mask.to(h.dtype)
    resid = (h - neigh_mean).abs().sum(dim=-1) * maskf
    return resid.sum(dim=-1) / maskf.sum(dim=-1).clamp(min=1.0)


def ani_graph(adjacency, hidden) -> float:
    """ANI of one graph from a dense ``n x n`` adjacency and ``n x d`` hidden matrix."""
    a = torch.as_tensor(np.asarray(adjacency, dtype=np.float64), dtype=DTYPE)
    h = torch.as_tensor(np.asarray(hidden, dtype=np.float64), dtype=DTYPE)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or h.ndim != 2 or h.shape[0] != a.shape[0]:
        raise ShapeError(f"ani_graph: adjacency {tuple(a.shape)} vs hidden {tuple(h.shape)}")
    if h.shape[0] < 1:
        raise ShapeError("ani_graph needs at least one node")
    a = a * (1.0 - torch.eye(a.shape[0], dtype=DTYPE))
    mask = torch.ones(1, a.shape[0], dtype=torch.bool)
    return float(ani_per_graph(a.unsqueeze(0), mask, h.unsqueeze(0))[0])


def ani_batch(graphs: Sequence[tuple[object, object]]) -> float:
    """Mean ANI over ``(adjacency, hidden)`` pairs."""
    if not graphs:
        raise ValueError("ani_batch needs at least one graph")
    return float(np.mean([ani_graph(a, h) for a, h in graphs]))
