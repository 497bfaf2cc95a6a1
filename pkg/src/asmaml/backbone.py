"""GraphSAGE + self-attention pooling backbone and MLP classifier.

Everything operates on a padded dense batch: ``adj`` is ``(B, n, n)``,
``mask`` is ``(B, n)`` and hidden states are ``(B, n, d)`` with padded rows
held at zero. Single graphs are batches of one. Parameters are plain
``ParamSet`` dicts so the meta-learner can run the forward pass on adapted
copies.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .ani import ani_per_graph
from .autodiff import DTYPE, ParamSet
from .errors import ShapeError
from .graphs import GraphData

ACTIVATIONS = {
    "sigmoid": torch.sigmoid,
    "tanh": torch.tanh,
    "relu": torch.relu,
}


@dataclass
class BackboneConfig:
    layer_count: int = 3
    hidden_dim: int = 128
    pool_ratio: float = 0.5
    conv_activation: str = "sigmoid"
    score_activation: str = "tanh"
    readout_activation: str = "relu"
    # None means one hidden layer of width 2 * hidden_dim
    classifier_hidden: list[int] | None = None

    def __post_init__(self):
        if self.layer_count < 1:
            raise ValueError("layer_count must be >= 1")
        if self.hidden_dim < 1:
            raise ValueError("hidden_dim must be >= 1")
        if not 0.0 < self.pool_ratio <= 1.0:
            raise ValueError("pool_ratio must be in (0, 1]")
        for name in ("conv_activation", "score_activation", "readout_activation"):
            if getattr(self, name) not in ACTIVATIONS:
                raise ValueError(f"{name} must be one of {sorted(ACTIVATIONS)}")

    @property
    def embed_dim(self) -> int:
        return 2 * self.hidden_dim

    @property
    def hidden_widths(self) -> list[int]:
        return [self.embed_dim] if self.classifier_hidden is None else list(self.classifier_hidden)


def keep_count(ratio: float, n: int) -> int:
    """Nodes kept by top-c pooling: ``max(1, ceil(ratio * n))``."""
    # round() guards against 0.3 * 10 == 3.0000000000000004
    return max(1, math.ceil(round(ratio * n, 9)))


@dataclass
class GraphBatch:
    adj: torch.Tensor
    mask: torch.Tensor
    x: torch.Tensor

    @classmethod
    def from_graphs(cls, graphs: Sequence[GraphData]) -> GraphBatch:
        if not graphs:
            raise ShapeError("cannot batch an empty graph list")
        d = graphs[0].feature_dim
        n = max(g.node_count for g in graphs)
        adj = np.zeros((len(graphs), n, n))
        mask = np.zeros((len(graphs), n), dtype=bool)
        x = np.zeros((len(graphs), n, d))
        for b, g in enumerate(graphs):
            if g.feature_dim != d:
                raise ShapeError(f"graph {g.graph_id} has feature dim {g.feature_dim}, expected {d}")
            k = g.node_count
            if g.edge_count:
                adj[b, g.edges[:, 0], g.edges[:, 1]] = 1.0
                adj[b, g.edges[:, 1], g.edges[:, 0]] = 1.0
            mask[b, :k] = True
            x[b, :k] = g.features
        return cls(torch.from_numpy(adj), torch.from_numpy(mask), torch.from_numpy(x))

    @property
    def size(self) -> int:
        return self.adj.shape[0]

    @property
    def counts(self) -> torch.Tensor:
        return self.mask.sum(dim=1)


@dataclass
class PoolResult:
    adj: torch.Tensor
    mask: torch.Tensor
    h: torch.Tensor
    scores: torch.Tensor
    # indices into the input node axis, ascending, padded with 0
    kept: torch.Tensor


@dataclass
class LayerActivations:
    """Per-layer state of one forward pass (batched)."""

    hidden: list[torch.Tensor] = field(default_factory=list)
    adj: list[torch.Tensor] = field(default_factory=list)
    mask: list[torch.Tensor] = field(default_factory=list)
    node_ids: list[torch.Tensor] = field(default_factory=list)
    readouts: list[torch.Tensor] = field(default_factory=list)

    @property
    def final(self) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """(adjacency, mask, hidden) of the last pooled layer."""
        return self.adj[-1], self.mask[-1], self.hidden[-1]


# ---------------------------------------------------------------------------
# parameters


def _glorot(gen: torch.Generator, fan_in: int, fan_out: int) -> torch.Tensor:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return (torch.rand(fan_in, fan_out, generator=gen, dtype=DTYPE) * 2 - 1) * bound


def init_backbone_params(in_dim: int, way: int, cfg: BackboneConfig, seed: int) -> ParamSet:
    """Glorot-uniform weights and zero biases for embedding and classifier."""
    gen = torch.Generator().manual_seed(seed)
    p: ParamSet = {}
    d = cfg.hidden_dim
    prev = in_dim
    for l in range(cfg.layer_count):
        p[f"conv{l}.weight"] = _glorot(gen, prev, d)
        p[f"conv{l}.bias"] = torch.zeros(d, dtype=DTYPE)
        p[f"pool{l}.att"] = _glorot(gen, d, 1)
        prev = d
    p.update(init_classifier_params(cfg, way, gen))
    return {k: p[k] for k in sorted(p)}


def init_classifier_params(cfg: BackboneConfig, way: int, gen: torch.Generator) -> ParamSet:
    p: ParamSet = {}
    prev = cfg.embed_dim
    for i, w in enumerate(cfg.hidden_widths):
        p[f"cls.hidden{i}.weight"] = _glorot(gen, prev, w)
        p[f"cls.hidden{i}.bias"] = torch.zeros(w, dtype=DTYPE)
        prev = w
    p.update(init_output_layer(prev, way, gen))
    return p


def init_output_layer(in_dim: int, way: int, gen: torch.Generator) -> ParamSet:
    return {
        "cls.out.weight": _glorot(gen, in_dim, way),
        "cls.out.bias": torch.zeros(way, dtype=DTYPE),
    }


def embedding_names(params: ParamSet) -> list[str]:
    return [k for k in params if not k.startswith("cls.")]


def classifier_names(params: ParamSet) -> list[str]:
    return [k for k in params if k.startswith("cls.")]


# ---------------------------------------------------------------------------
# layers


def sage_layer(
    adj: torch.Tensor,
    mask: torch.Tensor,
    h: torch.Tensor,
    weight: torch.Tensor,
    bias: torch.Tensor | None = None,
    activation: str = "sigmoid",
) -> torch.Tensor:
    """Mean aggregation over each node and its neighbours, then affine map and activation."""
    if h.shape[-2] != adj.shape[-1] or h.shape[-1] != weight.shape[0]:
        raise ShapeError(
            f"sage_layer: hidden {tuple(h.shape)} incompatible with adjacency {tuple(adj.shape)} "
            f"and weight {tuple(weight.shape)}"
        )
    deg = adj.sum(dim=-1, keepdim=True) + 1.0
    agg = (adj @ h + h) / deg
    out = agg @ weight
    if bias is not None:
        out = out + bias
    return ACTIVATIONS[activation](out) * mask.unsqueeze(-1)


def attention_scores(
    adj: torch.Tensor, mask: torch.Tensor, h: torch.Tensor, att: torch.Tensor, activation: str = "tanh"
) -> torch.Tensor:
    """Symmetric-normalised graph convolution to one channel; ``(B, n)``."""
    maskf = mask.to(h.dtype)
    a_tilde = adj + torch.diag_embed(maskf)
    deg = a_tilde.sum(dim=-1)
    dinv = torch.where(mask, deg.clamp(min=1.0).rsqrt(), torch.zeros_like(deg))
    proj = (h @ att).squeeze(-1)
    conv = dinv * (a_tilde @ (dinv * proj).unsqueeze(-1)).squeeze(-1)
    return ACTIVATIONS[activation](conv) * maskf


def sag_pool(
    adj: torch.Tensor,
    mask: torch.Tensor,
    h: torch.Tensor,
    att: torch.Tensor,
    ratio: float,
    activation: str = "tanh",
) -> PoolResult:
    """Keep the top ``max(1, ceil(ratio * n))`` nodes of each graph by attention score.

    Ties go to the lower node index. Kept rows are gated by their scores and
    keep their original relative order; edges among kept nodes are preserved.
    """
    scores = attention_scores(adj, mask, h, att, activation)
    counts = mask.sum(dim=1).tolist()
    keep = torch.tensor([keep_count(ratio, int(c)) for c in counts])
    new_n = int(keep.max())
    with torch.no_grad():
        key = scores.detach().masked_fill(~mask, -math.inf)
        order = torch.sort(key, dim=1, descending=True, stable=True).indices[:, :new_n]
        new_mask = torch.arange(new_n).unsqueeze(0) < keep.unsqueeze(1)
        n = mask.shape[1]
        kept = torch.sort(order.masked_fill(~new_mask, n), dim=1).values
        kept = kept.masked_fill(~new_mask, 0)
    d = h.shape[-1]
    h_kept = torch.gather(h, 1, kept.unsqueeze(-1).expand(-1, -1, d))
    s_kept = torch.gather(scores, 1, kept)
    h_new = h_kept * s_kept.unsqueeze(-1) * new_mask.unsqueeze(-1)
    rows = torch.gather(adj, 1, kept.unsqueeze(-1).expand(-1, -1, adj.shape[-1]))
    adj_new = torch.gather(rows, 2, kept.unsqueeze(1).expand(-1, new_n, -1))
    pair = new_mask.unsqueeze(-1) & new_mask.unsqueeze(-2)
    adj_new = adj_new * pair.to(adj.dtype)
    return PoolResult(adj_new, new_mask, h_new, scores, kept)


def readout(h: torch.Tensor, mask: torch.Tensor, activation: str = "relu") -> torch.Tensor:
    """``activation(row-mean || column-max)`` over valid rows; ``(B, 2d)``.

    The max routes its gradient to the first maximising row.
    """
    maskf = mask.to(h.dtype).unsqueeze(-1)
    counts = maskf.sum(dim=1).clamp(min=1.0)
    mean = (h * maskf).sum(dim=1) / counts
    with torch.no_grad():
        arg = h.detach().masked_fill(~mask.unsqueeze(-1), -math.inf).argmax(dim=1)
    mx = torch.gather(h, 1, arg.unsqueeze(1)).squeeze(1)
    return ACTIVATIONS[activation](torch.cat([mean, mx], dim=-1))


def embed(batch: GraphBatch, params: ParamSet, cfg: BackboneConfig) -> tuple[torch.Tensor, LayerActivations]:
    """Graph embeddings ``z`` (sum of per-layer readouts), shape ``(B, 2d)``."""
    adj, mask, h = batch.adj, batch.mask, batch.x
    ids = torch.arange(mask.shape[1]).unsqueeze(0).expand(mask.shape[0], -1)
    acts = LayerActivations()
    z = None
    for l in range(cfg.layer_count):
        h = sage_layer(adj, mask, h, params[f"conv{l}.weight"], params[f"conv{l}.bias"], cfg.conv_activation)
        pooled = sag_pool(adj, mask, h, params[f"pool{l}.att"], cfg.pool_ratio, cfg.score_activation)
        adj, mask, h = pooled.adj, pooled.mask, pooled.h
        ids = torch.gather(ids, 1, pooled.kept)
        r = readout(h, mask, cfg.readout_activation)
        z = r if z is None else z + r
        acts.hidden.append(h)
        acts.adj.append(adj)
        acts.mask.append(mask)
        acts.node_ids.append(ids)
        acts.readouts.append(r)
    return z, acts


@dataclass
class GraphActivations:
    """Unbatched per-layer state of a single graph."""

    hidden: list[np.ndarray]
    node_ids: list[np.ndarray]
    edges: list[np.ndarray]
    readouts: list[np.ndarray]


def embed_graph(graph: GraphData, params: ParamSet, cfg: BackboneConfig) -> tuple[torch.Tensor, GraphActivations]:
    z, acts = embed(GraphBatch.from_graphs([graph]), params, cfg)
    hidden, ids, edges = [], [], []
    for h, a, m, nid in zip(acts.hidden, acts.adj, acts.mask, acts.node_ids):
        k = int(m[0].sum())
        hidden.append(h[0, :k].detach().numpy())
        local = nid[0, :k].numpy()
        ids.append(local)
        iu, iv = np.nonzero(np.triu(a[0, :k, :k].numpy()))
        edges.append(np.stack([local[iu], local[iv]], axis=1) if iu.size else np.zeros((0, 2), dtype=np.int64))
    readouts = [r[0].detach().numpy() for r in acts.readouts]
    return z[0], GraphActivations(hidden, ids, edges, readouts)


def classify(z: torch.Tensor, params: ParamSet) -> torch.Tensor:
    """MLP logits; relu hidden layers then a linear output layer."""
    h = z
    i = 0
    while f"cls.hidden{i}.weight" in params:
        w = params[f"cls.hidden{i}.weight"]
        if h.shape[-1] != w.shape[0]:
            raise ShapeError(f"classifier layer {i} expects width {w.shape[0]}, got {h.shape[-1]}")
        h = torch.relu(h @ w + params[f"cls.hidden{i}.bias"])
        i += 1
    w = params["cls.out.weight"]
    if h.shape[-1] != w.shape[0]:
        raise ShapeError(f"classifier output layer expects width {w.shape[0]}, got {h.shape[-1]}")
    return h @ w + params["cls.out.bias"]


def accuracy(logits: torch.Tensor, labels: torch.Tensor) -> float:
    # argmax returns the first maximal index, i.e. ties go to the lowest class
    return float((logits.detach().argmax(dim=-1) == labels).to(DTYPE).mean())


@dataclass
class ForwardResult:
    loss: torch.Tensor
    accuracy: float
    ani: float
    logits: torch.Tensor
    activations: LayerActivations


def episode_forward(
    batch: GraphBatch,
    labels: torch.Tensor,
    params: ParamSet,
    cfg: BackboneConfig,
    *,
    with_ani: bool = True,
) -> ForwardResult:
    """Mean cross-entropy, accuracy and batch ANI of ``params`` on a labelled batch."""
    z, acts = embed(batch, params, cfg)
    logits = classify(z, params)
    if logits.shape[-1] <= int(labels.max()):
        raise ShapeError(f"classifier has {logits.shape[-1]} outputs but labels reach {int(labels.max())}")
    loss = F.cross_entropy(logits, labels)
    ani = float("nan")
    if with_ani:
        adj, mask, h = acts.final
        ani = float(ani_per_graph(adj, mask, h.detach()).mean())
    return ForwardResult(loss, accuracy(logits, labels), ani, logits, acts)


def as_labels(labels: Sequence[int]) -> torch.Tensor:
    return torch.as_tensor(list(labels), dtype=torch.long)
