"""Comparison methods: graph kernels with a prototypical classifier, a
finetuned supervised backbone, and prototypical evaluation of that backbone."""

from __future__ import annotations

import itertools
import math
from collections import Counter
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import shortest_path

from .autodiff import DTYPE, ParamSet, leaf_copy
from .backbone import (
    BackboneConfig,
    GraphBatch,
    as_labels,
    classify,
    embed,
    init_backbone_params,
    init_output_layer,
)
from .graphs import Dataset, Episode, GraphData


# ---------------------------------------------------------------------------
# discrete node labels


def discrete_labels(graphs: Sequence[GraphData]) -> list[np.ndarray]:
    """Integer node labels for the WL kernel.

    Uses TU node labels when every graph has them and node degrees otherwise;
    binning noisy continuous attributes makes almost every node unique, which
    leaves WL with nothing to match.
    """
    if all(g.node_labels is not None for g in graphs):
        return [np.asarray(g.node_labels) for g in graphs]
    out = []
    for g in graphs:
        deg = np.zeros(g.node_count, dtype=np.int64)
        np.add.at(deg, g.edges.reshape(-1), 1)
        out.append(deg)
    return out


# ---------------------------------------------------------------------------
# feature maps


def wl_features(graphs: Sequence[GraphData], labels: Sequence[np.ndarray], iterations: int = 3) -> list[Counter]:
    """Weisfeiler-Lehman subtree feature counts, keyed by (iteration, label)."""
    nbrs = [g.neighbors() for g in graphs]
    current = [[("init", int(x)) for x in lab] for lab in labels]
    feats = [Counter((0, lab) for lab in cur) for cur in current]
    for it in range(1, iterations + 1):
        nxt = []
        for cur, nb in zip(current, nbrs):
            nxt.append([(cur[v], tuple(sorted(cur[u] for u in nb[v]))) for v in range(len(cur))])
        # compress signatures to integers; the code book is shared across graphs
        book = {sig: i for i, sig in enumerate(sorted({s for sigs in nxt for s in sigs}, key=repr))}
        current = [[("it", it, book[s]) for s in sigs] for sigs in nxt]
        for f, cur in zip(feats, current):
            f.update((it, lab) for lab in cur)
    return feats


def sp_features(graph: GraphData, max_length: int = 10) -> Counter:
    """Histogram of shortest-path lengths over connected unordered node pairs."""
    n = graph.node_count
    if n < 2 or graph.edge_count == 0:
        return Counter()
    a = csr_matrix((np.ones(graph.edge_count), (graph.edges[:, 0], graph.edges[:, 1])), shape=(n, n))
    dist = shortest_path(a, directed=False, unweighted=True)
    iu = np.triu_indices(n, k=1)
    d = dist[iu]
    d = d[np.isfinite(d)].astype(np.int64)
    return Counter(np.minimum(d, max_length).tolist())


def graphlet_distribution(graph: GraphData, sample_count: int, rng: np.random.Generator,
                          exact_limit: int = 20_000) -> np.ndarray:
    """Frequencies of 3-node induced subgraphs by edge count (0, 1, 2, 3)."""
    n = graph.node_count
    hist = np.zeros(4)
    if n < 3:
        return hist
    adj = graph.adjacency()
    if math.comb(n, 3) <= exact_limit:
        triples = np.array(list(itertools.combinations(range(n), 3)))
    else:
        triples = np.array([rng.choice(n, size=3, replace=False) for _ in range(sample_count)])
    ecount = adj[triples[:, 0], triples[:, 1]] + adj[triples[:, 0], triples[:, 2]] + adj[triples[:, 1], triples[:, 2]]
    hist += np.bincount(ecount.astype(np.int64), minlength=4)
    return hist / hist.sum()


def _counter_dot(a: Counter, b: Counter) -> int:
    if len(a) > len(b):
        a, b = b, a
    return sum(v * b[k] for k, v in a.items() if k in b)


def normalized_gram(dots: np.ndarray) -> np.ndarray:
    """``k(a,b) / sqrt(k(a,a) k(b,b))`` with 1 for two empty maps and 0 for one."""
    diag = np.diag(dots).astype(np.float64)
    out = np.zeros_like(dots, dtype=np.float64)
    for i in range(dots.shape[0]):
        for j in range(dots.shape[1]):
            if diag[i] == 0 and diag[j] == 0:
                out[i, j] = 1.0
            elif diag[i] == 0 or diag[j] == 0:
                out[i, j] = 0.0
            else:
                out[i, j] = dots[i, j] / math.sqrt(diag[i] * diag[j])
    return out


def _counter_gram(feats: Sequence[Counter]) -> np.ndarray:
    n = len(feats)
    dots = np.zeros((n, n), dtype=object)
    for i in range(n):
        for j in range(i, n):
            dots[i, j] = dots[j, i] = _counter_dot(feats[i], feats[j])
    return normalized_gram(dots)


def wl_kernel_matrix(graphs: Sequence[GraphData], iterations: int = 3, labels=None) -> np.ndarray:
    labels = discrete_labels(graphs) if labels is None else labels
    return _counter_gram(wl_features(graphs, labels, iterations))


def sp_kernel_matrix(graphs: Sequence[GraphData], max_length: int = 10) -> np.ndarray:
    return _counter_gram([sp_features(g, max_length) for g in graphs])


def graphlet_kernel_matrix(graphs: Sequence[GraphData], sample_count: int = 1000,
                           rng: np.random.Generator | None = None) -> np.ndarray:
    rng = rng or np.random.default_rng(0)
    dists = np.stack([graphlet_distribution(g, sample_count, rng) for g in graphs])
    norms = np.linalg.norm(dists, axis=1)
    out = np.zeros((len(graphs), len(graphs)))
    for i in range(len(graphs)):
        for j in range(len(graphs)):
            if norms[i] == 0 and norms[j] == 0:
                out[i, j] = 1.0
            elif norms[i] > 0 and norms[j] > 0:
                out[i, j] = float(dists[i] @ dists[j]) / (norms[i] * norms[j])
    return out


def wl_kernel(g1: GraphData, g2: GraphData, iterations: int = 3) -> float:
    return float(wl_kernel_matrix([g1, g2], iterations)[0, 1])


def sp_kernel(g1: GraphData, g2: GraphData, max_length: int = 10) -> float:
    return float(sp_kernel_matrix([g1, g2], max_length)[0, 1])


def graphlet_kernel(g1: GraphData, g2: GraphData, sample_count: int = 1000,
                    rng: np.random.Generator | None = None) -> float:
    return float(graphlet_kernel_matrix([g1, g2], sample_count, rng)[0, 1])


KERNELS = {
    "wl": wl_kernel_matrix,
    "sp": sp_kernel_matrix,
    "graphlet": graphlet_kernel_matrix,
}


# ---------------------------------------------------------------------------
# prototypical classifier


@dataclass
class Prediction:
    labels: np.ndarray
    accuracy: float | None


def _argmin_lowest(dist: np.ndarray) -> np.ndarray:
    # np.argmin returns the first minimum, i.e. the lowest episode label
    return np.argmin(dist, axis=1)


def _accuracy(pred: np.ndarray, truth) -> float | None:
    return None if truth is None else float(np.mean(pred == np.asarray(truth)))


def kernel_prototype_distances(k_qq: np.ndarray, k_qs: np.ndarray, k_ss: np.ndarray,
                               support_labels: Sequence[int], way: int) -> np.ndarray:
    """Squared RKHS distance from each query to each class mean embedding."""
    y = np.asarray(support_labels)
    dist = np.zeros((k_qs.shape[0], way))
    for c in range(way):
        idx = np.flatnonzero(y == c)
        m = len(idx)
        cross = k_qs[:, idx].sum(axis=1) * (2.0 / m)
        within = k_ss[np.ix_(idx, idx)].sum() / (m * m)
        dist[:, c] = k_qq - cross + within
    return dist


def prototypical_predict_kernel(k_qq, k_qs, k_ss, support_labels, way, query_labels=None) -> Prediction:
    dist = kernel_prototype_distances(np.asarray(k_qq), np.asarray(k_qs), np.asarray(k_ss), support_labels, way)
    pred = _argmin_lowest(dist)
    return Prediction(pred, _accuracy(pred, query_labels))


def prototypical_predict_embedding(support_emb, support_labels, query_emb, way, query_labels=None) -> Prediction:
    s = np.asarray(support_emb, dtype=np.float64)
    q = np.asarray(query_emb, dtype=np.float64)
    y = np.asarray(support_labels)
    protos = np.stack([s[y == c].mean(axis=0) for c in range(way)])
    dist = ((q[:, None, :] - protos[None, :, :]) ** 2).sum(axis=-1)
    pred = _argmin_lowest(dist)
    return Prediction(pred, _accuracy(pred, query_labels))


def kernel_episode_accuracy(kernel: str, episode: Episode, rng: np.random.Generator | None = None, **kwargs) -> float:
    """Accuracy of ``kernel`` + prototypical classifier on one episode."""
    graphs = episode.support_graphs + episode.query_graphs
    if kernel == "graphlet":
        gram = graphlet_kernel_matrix(graphs, rng=rng, **kwargs)
    else:
        gram = KERNELS[kernel](graphs, **kwargs)
    s = len(episode.support)
    pred = prototypical_predict_kernel(
        np.diag(gram)[s:], gram[s:, :s], gram[:s, :s], episode.support_labels, episode.way, episode.query_labels
    )
    return pred.accuracy


# ---------------------------------------------------------------------------
# supervised backbone: finetuning and prototypical (GNNs-Pro) evaluation


def pretrain_backbone(train: Dataset, cfg: BackboneConfig, steps: int, lr: float, batch_size: int,
                      seed: int, weight_decay: float = 1e-5) -> ParamSet:
    """Standard supervised classification over all training classes with SGD."""
    classes = train.classes
    remap = {c: i for i, c in enumerate(classes)}
    params = init_backbone_params(train.feature_dim, len(classes), cfg, seed)
    rng = np.random.default_rng(seed)
    for _ in range(steps):
        picks = rng.choice(len(train), size=min(batch_size, len(train)), replace=False)
        graphs = [train.graphs[i] for i in picks]
        batch = GraphBatch.from_graphs(graphs)
        labels = as_labels([remap[g.class_id] for g in graphs])
        leaves = leaf_copy(params)
        z, _ = embed(batch, leaves, cfg)
        loss = F.cross_entropy(classify(z, leaves), labels)
        grads = torch.autograd.grad(loss, list(leaves.values()))
        params = {k: (params[k] - lr * (g + weight_decay * params[k])).detach() for k, g in zip(leaves, grads)}
    return params


def _penultimate(params: ParamSet, graphs: Sequence[GraphData], cfg: BackboneConfig) -> torch.Tensor:
    with torch.no_grad():
        h, _ = embed(GraphBatch.from_graphs(graphs), params, cfg)
        i = 0
        while f"cls.hidden{i}.weight" in params:
            h = torch.relu(h @ params[f"cls.hidden{i}.weight"] + params[f"cls.hidden{i}.bias"])
            i += 1
    return h


def finetune_accuracy(params: ParamSet, episode: Episode, cfg: BackboneConfig, steps: int = 100,
                      lr: float = 1e-3, seed: int = 0) -> float:
    """Replace the output layer with a fresh N-way layer, train only it on the support set."""
    hs = _penultimate(params, episode.support_graphs, cfg)
    hq = _penultimate(params, episode.query_graphs, cfg)
    ys = as_labels(episode.support_labels)
    yq = as_labels(episode.query_labels)
    head = init_output_layer(hs.shape[1], episode.way, torch.Generator().manual_seed(seed))
    for _ in range(steps):
        leaves = leaf_copy(head)
        loss = F.cross_entropy(hs @ leaves["cls.out.weight"] + leaves["cls.out.bias"], ys)
        grads = torch.autograd.grad(loss, list(leaves.values()))
        head = {k: (head[k] - lr * g).detach() for k, g in zip(leaves, grads)}
    logits = hq @ head["cls.out.weight"] + head["cls.out.bias"]
    return float((logits.argmax(dim=1) == yq).to(DTYPE).mean())


def proto_accuracy(params: ParamSet, episode: Episode, cfg: BackboneConfig) -> float:
    """Prototypical classifier on backbone embeddings (the classifier head is dropped)."""
    with torch.no_grad():
        zs, _ = embed(GraphBatch.from_graphs(episode.support_graphs), params, cfg)
        zq, _ = embed(GraphBatch.from_graphs(episode.query_graphs), params, cfg)
    pred = prototypical_predict_embedding(zs.numpy(), episode.support_labels, zq.numpy(), episode.way,
                                          episode.query_labels)
    return pred.accuracy
